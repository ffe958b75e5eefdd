"""Kernel-point convolution, the encode/decode cascade, autoencoder
training mechanics, and the weight/submap file formats."""

import numpy as np
import pytest

from cloudloc.compressor import (
    AutoencoderTrainConfig,
    CompressedSubmap,
    CompressorConfig,
    CompressorModel,
    KpconvParams,
    chamfer_distance,
    compression_ratio,
    decode,
    encode,
    kernel_point_pattern,
    kpconv_forward,
    load_compressed_submap,
    load_compressor_weights,
    save_compressed_submap,
    train_autoencoder,
)
from cloudloc.core import PointCloud, voxel_downsample, voxel_occupancy_count
from cloudloc.errors import EmptyInput


def make_params(rng, kernel_count=7, sigma=0.5, cin=2, cout=3):
    return KpconvParams(
        kernel_point_pattern(kernel_count, sigma),
        sigma,
        [rng.normal(size=(cin, cout)) for _ in range(kernel_count)],
    )


def oracle_kpconv(points, feats, params, radius):
    """Direct triple loop over points, neighbors, and kernel points."""
    n = len(points)
    out = np.zeros((n, params.weights[0].shape[1]))
    for i in range(n):
        for j in range(n):
            y = points[j] - points[i]
            if np.linalg.norm(y) > radius:
                continue
            for xk, w in zip(params.kernel_points, params.weights):
                h = max(0.0, 1.0 - np.linalg.norm(y - xk) / params.sigma)
                out[i] += h * (feats[j] @ w)
    return out


class TestKernelPattern:
    def test_offsets_within_radius(self):
        kp = kernel_point_pattern(15, 0.5)
        assert kp.shape == (15, 3)
        assert np.linalg.norm(kp, axis=1).max() <= 0.5 + 1e-12
        np.testing.assert_allclose(kp[0], 0.0)

    def test_offsets_beyond_sigma_rejected(self):
        with pytest.raises(ValueError):
            KpconvParams(np.array([[2.0, 0, 0]]), 1.0, [np.zeros((1, 1))])


class TestKpconvForward:
    def test_single_point_self_term_only(self):
        rng = np.random.default_rng(0)
        params = make_params(rng)
        feats = rng.normal(size=(1, 2))
        cloud = PointCloud([[3.0, 4.0, 5.0]], features=feats)
        out = kpconv_forward(cloud, params, 1.0)
        want = np.zeros((1, 3))
        for xk, w in zip(params.kernel_points, params.weights):
            h = max(0.0, 1.0 - np.linalg.norm(xk) / params.sigma)
            want += h * (feats @ w)
        np.testing.assert_allclose(out, want, atol=1e-9)

    def test_zero_weights_zero_output(self):
        rng = np.random.default_rng(1)
        params = KpconvParams(
            kernel_point_pattern(5, 0.5), 0.5, [np.zeros((2, 3))] * 5
        )
        cloud = PointCloud(rng.normal(size=(10, 3)), features=rng.normal(size=(10, 2)))
        np.testing.assert_array_equal(kpconv_forward(cloud, params, 1.0), 0.0)

    def test_matches_triple_loop_oracle(self):
        rng = np.random.default_rng(2)
        pts = rng.uniform(0, 2, size=(50, 3))
        feats = rng.normal(size=(50, 2))
        params = make_params(rng)
        got = kpconv_forward(PointCloud(pts, features=feats), params, 1.0)
        want = oracle_kpconv(pts, feats, params, 1.0)
        rel = np.abs(got - want) / np.maximum(np.abs(want), 1e-6)
        assert rel.max() < 1e-6

    def test_permutation_equivariant(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(0, 2, size=(30, 3))
        feats = rng.normal(size=(30, 2))
        params = make_params(rng)
        perm = rng.permutation(30)
        a = kpconv_forward(PointCloud(pts, features=feats), params, 1.0)
        b = kpconv_forward(PointCloud(pts[perm], features=feats[perm]), params, 1.0)
        np.testing.assert_allclose(b, a[perm], atol=1e-9)

    def test_linear_in_features(self):
        rng = np.random.default_rng(4)
        pts = rng.uniform(0, 2, size=(20, 3))
        fx = rng.normal(size=(20, 2))
        fy = rng.normal(size=(20, 2))
        params = make_params(rng)

        def run(f):
            return kpconv_forward(PointCloud(pts, features=f), params, 1.0)

        combined = run(2.0 * fx + 3.0 * fy)
        np.testing.assert_allclose(combined, 2.0 * run(fx) + 3.0 * run(fy),
                                   atol=1e-6)


class TestEncode:
    def test_single_point_gives_nc_1(self):
        model = CompressorModel()
        sub = encode(model, PointCloud([[0.2, 0.3, 0.4]], frame="local"))
        assert sub.point_count == 1
        assert sub.features.shape == (1, 3)

    def test_dense_two_meter_cube_gives_27_cells(self):
        g = np.arange(0.0, 2.0001, 0.05)
        pts = np.stack(np.meshgrid(g, g, g), axis=-1).reshape(-1, 3)
        model = CompressorModel()
        sub = encode(model, PointCloud(pts, frame="local"))
        assert sub.point_count == 27  # 3x3x3 one-meter cells past two pools

    def test_nc_matches_oracle_voxel_cascade(self):
        rng = np.random.default_rng(5)
        pts = rng.uniform(0, 12, size=(20_000, 3)) * [1, 1, 0.4]
        model = CompressorModel()
        sub = encode(model, PointCloud(pts, frame="local"))
        cloud = PointCloud(pts)
        origin = pts.min(axis=0)
        for cell in model.config.grid_sizes:
            cloud = voxel_downsample(cloud, cell, origin=origin)
        assert sub.point_count == len(cloud)
        np.testing.assert_allclose(
            np.sort(sub.points, axis=0), np.sort(cloud.points, axis=0), atol=1e-9
        )

    def test_deterministic_bit_identical(self):
        rng = np.random.default_rng(6)
        pts = rng.uniform(0, 5, size=(2000, 3))
        model = CompressorModel()
        a = encode(model, PointCloud(pts, frame="local"))
        b = encode(model, PointCloud(pts, frame="local"))
        assert a.points.tobytes() == b.points.tobytes()
        assert a.features.tobytes() == b.features.tobytes()

    def test_superset_has_at_least_as_many_cells(self):
        rng = np.random.default_rng(7)
        pts = rng.uniform(0, 10, size=(3000, 3))
        model = CompressorModel()
        small = encode(model, PointCloud(pts[:1500], frame="local"))
        big = encode(model, PointCloud(pts, frame="local"))
        assert big.point_count >= small.point_count

    def test_empty_cloud_rejected(self):
        with pytest.raises(EmptyInput):
            encode(CompressorModel(), PointCloud(np.empty((0, 3))))


class TestDecode:
    def test_unit_factors_zero_offsets_reproduce_positions(self):
        config = CompressorConfig(decoder_factors=(1, 1, 1, 1))
        model = CompressorModel(config)
        for j in range(4):
            model.store[f"dec{j}.w_off"].data[...] = 0.0
            model.store[f"dec{j}.b_off"].data[...] = 0.0
        rng = np.random.default_rng(8)
        sub = CompressedSubmap(rng.normal(size=(9, 3)), rng.normal(size=(9, 3)))
        out = decode(model, sub)
        np.testing.assert_allclose(out.points, sub.points, atol=1e-12)

    def test_output_count_is_product_of_factors(self):
        model = CompressorModel()
        rng = np.random.default_rng(9)
        sub = CompressedSubmap(rng.normal(size=(8, 3)), rng.normal(size=(8, 3)))
        assert len(decode(model, sub)) == 8 * 16

    def test_offsets_bounded_by_clamp(self):
        model = CompressorModel()
        rng = np.random.default_rng(10)
        # huge features would produce huge raw offsets without the clamp
        sub = CompressedSubmap(np.zeros((4, 3)), rng.normal(size=(4, 3)) * 1e4)
        out = decode(model, sub)
        bound = 4 * model.config.offset_clamp  # one clamped hop per block
        assert np.linalg.norm(out.points, axis=1).max() <= bound + 1e-9


class TestTraining:
    def make_scenes(self, count=3, seed=11):
        rng = np.random.default_rng(seed)
        scenes = []
        for _ in range(count):
            base = rng.uniform(0, 8, size=(rng.integers(2, 5), 3)) * [1, 1, 0.3]
            pts = np.concatenate(
                [b + rng.normal(scale=0.8, size=(300, 3)) for b in base]
            )
            scenes.append(PointCloud(pts, frame="local"))
        return scenes

    def test_zero_epochs_leave_weights_unchanged(self):
        model = CompressorModel()
        before = model.store.snapshot()
        train_autoencoder(model, self.make_scenes(2),
                          AutoencoderTrainConfig(epochs=0))
        for name, arr in before.items():
            np.testing.assert_array_equal(model.store[name].data, arr)
        assert model.frozen

    def test_loss_decreases_on_training_set(self):
        model = CompressorModel()
        _, history = train_autoencoder(model, self.make_scenes(3),
                                       AutoencoderTrainConfig(epochs=6))
        assert history[-1] <= history[0]

    def test_single_cloud_rejected(self):
        with pytest.raises(ValueError):
            train_autoencoder(CompressorModel(), self.make_scenes(1))


class TestCompressionRatio:
    def test_examples(self):
        rng = np.random.default_rng(12)
        sub10 = CompressedSubmap(rng.normal(size=(10, 3)), rng.normal(size=(10, 3)))
        assert compression_ratio(PointCloud(rng.normal(size=(100, 3))), sub10) == 5.0
        sub1 = CompressedSubmap(np.zeros((1, 3)), np.zeros((1, 3)))
        assert compression_ratio(PointCloud([[0.0, 0, 0]]), sub1) == 0.5

    def test_matches_hand_computation_on_encode_output(self):
        rng = np.random.default_rng(13)
        cloud = PointCloud(rng.uniform(0, 6, size=(5000, 3)), frame="local")
        sub = encode(CompressorModel(), cloud)
        assert compression_ratio(cloud, sub) == pytest.approx(
            5000 * 3 / (sub.point_count * 6)
        )


class TestChamfer:
    def test_identical_sets_zero(self):
        rng = np.random.default_rng(14)
        pts = rng.normal(size=(40, 3))
        assert chamfer_distance(pts, pts) == 0.0

    def test_matches_exhaustive_scan(self):
        rng = np.random.default_rng(15)
        a, b = rng.normal(size=(30, 3)), rng.normal(size=(25, 3))
        d = np.linalg.norm(a[:, None] - b[None, :], axis=2)
        want = d.min(axis=1).mean() + d.min(axis=0).mean()
        assert chamfer_distance(a, b) == pytest.approx(want, abs=1e-12)


class TestFiles:
    def test_weights_round_trip(self, tmp_path):
        model = CompressorModel()
        path = tmp_path / "model.gpcw"
        model.save(path)
        loaded = CompressorModel.load(path)
        for name in model.store.names():
            np.testing.assert_array_equal(
                loaded.store[name].data.astype("<f4"),
                model.store[name].data.astype("<f4"),
            )
        raw = load_compressor_weights(path)
        assert set(raw) == set(model.store.names())

    def test_submap_round_trip(self, tmp_path):
        rng = np.random.default_rng(16)
        sub = CompressedSubmap(rng.normal(size=(12, 3)), rng.normal(size=(12, 3)),
                               source_id="route3_a004", centroid_world=[1, 2, 3])
        path = tmp_path / "sub.gpcc"
        save_compressed_submap(sub, path)
        out = load_compressed_submap(path)
        assert out.source_id == sub.source_id
        np.testing.assert_array_equal(out.centroid_world, sub.centroid_world)
        np.testing.assert_array_equal(
            out.as_input(), sub.as_input().astype("<f4").astype(np.float64)
        )
        assert path.read_bytes()[:4] == b"GPCC"
