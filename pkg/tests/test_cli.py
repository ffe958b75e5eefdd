"""Command-line interface: config loading, overrides, exit codes, and a
small end-to-end pipeline run."""

import numpy as np
import pytest

from cloudloc.cli import load_config, main
from cloudloc.errors import ConfigError
from cloudloc.retrieval import load_database

SMOKE_TOML = """\
seed = 7

[synth]
world_extent = [160.0, 80.0]
route_count = 1
building_density = 0.003
pole_density = 0.001
surface_density = 1.0

[compressor]
epochs = 1
max_clouds = 2
max_target_points = 400

[aggregator]
feature_dim = 16
latent_count = 4
descriptor_dim = 8
heads = 4
lift_hidden = 8
transform_hidden = 8
head_hidden = 8

[train]
mode = "pretrain"
epochs = 1
negatives_per_anchor = 2
val_fraction = 0.0
"""


class TestConfig:
    def test_defaults_without_file(self):
        config = load_config()
        assert config["seed"] == 0
        assert config["refine"]["filter_k"] == 20

    def test_unknown_key_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[refine]\nfilterk = 3\n")
        with pytest.raises(ConfigError, match="refine.filterk"):
            load_config(p)

    def test_wrong_type_rejected(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text('[refine]\nfilter_k = "many"\n')
        with pytest.raises(ConfigError, match="int"):
            load_config(p)

    def test_int_promoted_to_float(self, tmp_path):
        p = tmp_path / "c.toml"
        p.write_text("[refine]\nstride = 10\n")
        config = load_config(p)
        assert config["refine"]["stride"] == 10.0
        assert isinstance(config["refine"]["stride"], float)

    def test_set_overrides(self):
        config = load_config(None, ["refine.filter_k=9", "train.base_lr=0.5",
                                    "refine.extent=10,10,5"])
        assert config["refine"]["filter_k"] == 9
        assert config["train"]["base_lr"] == 0.5
        assert config["refine"]["extent"] == [10.0, 10.0, 5.0]

    def test_bad_overrides_rejected(self):
        for item in ["refine.filter_k", "nosuch.key=1", "refine.nope=1",
                     "refine.filter_k=many"]:
            with pytest.raises(ConfigError):
                load_config(None, [item])


class TestExitCodes:
    def test_unknown_config_key_exits_2(self, tmp_path, capsys):
        p = tmp_path / "c.toml"
        p.write_text("shenanigans = 1\n")
        assert main(["--config", str(p), "synth"]) == 2
        assert "config error" in capsys.readouterr().err

    def test_missing_config_file_exits_2(self, capsys):
        assert main(["--config", "/nonexistent.toml", "synth"]) == 2

    def test_missing_input_exits_3(self, tmp_path, monkeypatch, capsys):
        monkeypatch.chdir(tmp_path)
        assert main(["train-gpc"]) == 3
        assert "input error" in capsys.readouterr().err

    def test_gradcheck_exits_0(self, capsys):
        assert main(["gradcheck"]) == 0
        out = capsys.readouterr().out
        assert out.strip().splitlines()[-1].startswith("max\t")


class TestHelp:
    def test_commands_listed(self, capsys):
        with pytest.raises(SystemExit):
            main(["--help"])
        out = capsys.readouterr().out
        for cmd in ("synth", "train-gpc", "compress", "refine", "train-agg",
                    "build-db", "query", "eval", "gradcheck"):
            assert cmd in out


@pytest.fixture(scope="module")
def smoke_dir(tmp_path_factory):
    """One tiny benchmark taken through the full pipeline."""
    root = tmp_path_factory.mktemp("smoke")
    (root / "config.toml").write_text(SMOKE_TOML)
    return root


def run(smoke_dir, monkeypatch, argv):
    monkeypatch.chdir(smoke_dir)
    return main(["--config", "config.toml"] + argv)


class TestPipeline:
    def test_a_synth(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["synth"]) == 0
        assert (smoke_dir / "bench" / "manifest.txt").exists()
        assert (smoke_dir / "bench" / "resolved_config.txt").exists()
        text = (smoke_dir / "bench" / "resolved_config.txt").read_text()
        assert "seed = 7" in text and "refine.filter_k = 20" in text

    def test_b_train_gpc(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["train-gpc"]) == 0
        assert (smoke_dir / "compressor.gpcw").exists()

    def test_c_compress(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["compress"]) == 0
        index = (smoke_dir / "compressed" / "index.txt").read_text()
        assert len(index.splitlines()) == 6  # 100 m route, 20 m stride

    def test_d_refine(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["refine"]) == 0
        index = (smoke_dir / "qpcs" / "index.txt").read_text().splitlines()
        assert len(index) >= 1
        first = index[0].split("\t")
        rows = np.load(smoke_dir / "qpcs" / first[1])
        assert rows.ndim == 2 and rows.shape[1] == 6
        np.testing.assert_array_equal(rows[:, 3:], 0.0)

    def test_e_train_agg(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["train-agg"]) == 0
        assert (smoke_dir / "aggregator.aggw").exists()
        log = smoke_dir / "aggregator.aggw.pretrain.log"
        assert log.read_text().startswith("epoch\tmode\tmean_loss")

    def test_f_build_db(self, smoke_dir, monkeypatch):
        assert run(smoke_dir, monkeypatch, ["build-db"]) == 0
        db = load_database(smoke_dir / "descriptors.vdb")
        assert len(db) == 6 and db.dim == 8

    def test_g_query_stored_descriptor_ranks_first(self, smoke_dir,
                                                   monkeypatch, capsys):
        db = load_database(smoke_dir / "descriptors.vdb")
        desc_file = smoke_dir / "probe.txt"
        desc_file.write_text(" ".join(f"{x:.17g}" for x in db.descriptors[2]))
        assert run(smoke_dir, monkeypatch, ["query", "-k", "3",
                                            str(desc_file)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        rank, entry_id, dist = lines[0].split("\t")
        assert (rank, entry_id) == ("1", db.ids[2])
        assert float(dist) == 0.0

    def test_h_query_compressed_submap(self, smoke_dir, monkeypatch, capsys):
        sub = sorted((smoke_dir / "compressed").glob("*.gpcc"))[0]
        assert run(smoke_dir, monkeypatch, ["query", str(sub)]) == 0
        lines = capsys.readouterr().out.strip().splitlines()
        assert len(lines) == 5
        assert lines[0].split("\t")[1] == sub.stem

    def test_i_eval(self, smoke_dir, monkeypatch, capsys):
        assert run(smoke_dir, monkeypatch, ["eval"]) == 0
        out = capsys.readouterr().out
        assert "recall@1" in out
        assert (smoke_dir / "report.txt").exists()

    def test_j_refine_flag_overrides_config(self, smoke_dir, monkeypatch):
        monkeypatch.chdir(smoke_dir)
        config = load_config("config.toml", ["refine.filter_k=11"])
        assert config["refine"]["filter_k"] == 11
        # the CLI routes --filter-k through the same override path
        assert run(smoke_dir, monkeypatch,
                   ["--set", "paths.qpcs=qpcs_alt", "refine",
                    "--filter-k", "11"]) == 0
        assert (smoke_dir / "qpcs_alt" / "index.txt").exists()
