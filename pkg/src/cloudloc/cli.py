"""Command-line front end. Every command is a pure function of
(config, input files) to output files; all randomness flows from the
single `seed` key."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

from . import pipeline
from .aggregator import AggregatorConfig, AggregatorModel, aggregate
from .autodiff import finite_difference_check
from .compressor import (
    AutoencoderTrainConfig,
    CompressorModel,
    load_compressed_submap,
    save_compressed_submap,
)
from .errors import (
    BadK,
    CloudlocError,
    ConfigError,
    ContractViolation,
    DuplicateId,
    EmptyInput,
    EmptySubmap,
    InsufficientNegatives,
    InsufficientPoints,
    NoValidSegments,
    ParseError,
    ShapeError,
    TrainingDiverged,
)
from .io import load_cloud, save_cloud
from .refine import DensifyParams, FilterParams, SubmapSpec
from .retrieval import load_database, query_topk, save_database
from .synth import BenchmarkConfig, BenchmarkManifest, DegradeParams, WorldParams, make_benchmark
from .training import LossParams, TrainConfig, run_training, split_places

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_INPUT = 3
EXIT_NUMERICAL = 4
EXIT_INTERNAL = 5

_SCHEMA = {
    "seed": int,
    "paths": {
        "benchmark": str,
        "compressor_weights": str,
        "aggregator_weights": str,
        "compressed": str,
        "qpcs": str,
        "database": str,
        "report": str,
    },
    "synth": {
        "route_count": int,
        "route_margin": float,
        "route_spacing": float,
        "lateral_offset": float,
        "world_extent": list,
        "building_density": float,
        "pole_density": float,
        "surface_density": float,
        "keep_fraction": float,
        "noise_sigma": float,
        "outlier_fraction": float,
        "outlier_radius": float,
        "density_bias": float,
    },
    "refine": {
        "filter_k": int,
        "filter_mu": float,
        "densify_k": int,
        "stride": float,
        "extent": list,
        "thin_cell": float,
    },
    "compressor": {
        "epochs": int,
        "lr": float,
        "max_clouds": int,
        "max_target_points": int,
    },
    "aggregator": {
        "feature_dim": int,
        "latent_count": int,
        "descriptor_dim": int,
        "heads": int,
        "lift_hidden": int,
        "transform_hidden": int,
        "head_hidden": int,
    },
    "train": {
        "mode": str,
        "base_lr": float,
        "epochs": int,
        "positives_per_anchor": int,
        "negatives_per_anchor": int,
        "alpha": float,
        "beta": float,
        "val_fraction": float,
        "head_lr_multiplier": float,
    },
    "eval": {"ks": list, "success_radius": float},
}

_DEFAULTS = {
    "seed": 0,
    "paths": {
        "benchmark": "bench",
        "compressor_weights": "compressor.gpcw",
        "aggregator_weights": "aggregator.aggw",
        "compressed": "compressed",
        "qpcs": "qpcs",
        "database": "descriptors.vdb",
        "report": "report.txt",
    },
    "synth": {
        "route_count": 4,
        "route_margin": 30.0,
        "route_spacing": 60.0,
        "lateral_offset": 2.0,
        "world_extent": [260.0, 260.0],
        "building_density": 0.004,
        "pole_density": 0.002,
        "surface_density": 2.0,
        "keep_fraction": 0.35,
        "noise_sigma": 0.05,
        "outlier_fraction": 0.03,
        "outlier_radius": 60.0,
        "density_bias": 1.0,
    },
    "refine": {
        "filter_k": 20,
        "filter_mu": 2.0,
        "densify_k": 10,
        "stride": 20.0,
        "extent": [40.0, 40.0, 15.0],
        "thin_cell": 0.025,
    },
    "compressor": {"epochs": 8, "lr": 5e-3, "max_clouds": 12, "max_target_points": 3000},
    "aggregator": {
        "feature_dim": 64,
        "latent_count": 8,
        "descriptor_dim": 64,
        "heads": 4,
        "lift_hidden": 32,
        "transform_hidden": 32,
        "head_hidden": 64,
    },
    "train": {
        "mode": "finetune",
        "base_lr": 1e-3,
        "epochs": 10,
        "positives_per_anchor": 2,
        "negatives_per_anchor": 6,
        "alpha": 0.5,
        "beta": 0.2,
        "val_fraction": 0.1,
        "head_lr_multiplier": 10.0,
    },
    "eval": {"ks": [1, 5], "success_radius": 25.0},
}


def _merge_validate(base, incoming, schema, prefix=""):
    for key, value in incoming.items():
        here = f"{prefix}{key}"
        if key not in schema:
            raise ConfigError(f"unknown config key {here!r}")
        spec = schema[key]
        if isinstance(spec, dict):
            if not isinstance(value, dict):
                raise ConfigError(f"config key {here!r} must be a table")
            _merge_validate(base[key], value, spec, prefix=here + ".")
        else:
            if spec is float and isinstance(value, int):
                value = float(value)
            if not isinstance(value, spec):
                raise ConfigError(
                    f"config key {here!r} must be {spec.__name__}, got {type(value).__name__}"
                )
            base[key] = value


def load_config(path=None, overrides=()):
    import copy

    config = copy.deepcopy(_DEFAULTS)
    if path is not None:
        try:
            with open(path, "rb") as f:
                data = tomllib.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"config parse error: {exc}")
        _merge_validate(config, data, _SCHEMA)
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"override must look like section.key=value, got {item!r}")
        dotted, _, raw = item.partition("=")
        keys = dotted.strip().split(".")
        node, schema = config, _SCHEMA
        for k in keys[:-1]:
            if k not in schema or not isinstance(schema[k], dict):
                raise ConfigError(f"unknown config table {k!r} in {dotted!r}")
            node, schema = node[k], schema[k]
        leaf = keys[-1]
        if leaf not in schema or isinstance(schema[leaf], dict):
            raise ConfigError(f"unknown config key {dotted!r}")
        target = schema[leaf]
        try:
            if target is list:
                value = [float(x) for x in raw.split(",")]
            elif target is float:
                value = float(raw)
            elif target is int:
                value = int(raw)
            else:
                value = raw
        except ValueError:
            raise ConfigError(f"cannot parse override {item!r}")
        node[leaf] = value
    return config


def _resolved_config_text(config) -> str:
    lines = []

    def walk(node, prefix=""):
        for k in sorted(node):
            v = node[k]
            if isinstance(v, dict):
                walk(v, prefix + k + ".")
            else:
                lines.append(f"{prefix}{k} = {v}")

    walk(config)
    return "\n".join(lines) + "\n"


def _benchmark_config(config) -> BenchmarkConfig:
    s = config["synth"]
    r = config["refine"]
    return BenchmarkConfig(
        world=WorldParams(
            seed=config["seed"],
            extent=tuple(s["world_extent"]),
            building_density=s["building_density"],
            pole_density=s["pole_density"],
            surface_density=s["surface_density"],
        ),
        route_count=s["route_count"],
        route_margin=s["route_margin"],
        route_spacing=s["route_spacing"],
        lateral_offset=s["lateral_offset"],
        submap=SubmapSpec(tuple(r["extent"]), r["stride"]),
        degrade=DegradeParams(
            keep_fraction=s["keep_fraction"],
            gaussian_noise_sigma=s["noise_sigma"],
            outlier_fraction=s["outlier_fraction"],
            outlier_radius=s["outlier_radius"],
            density_bias=s["density_bias"],
        ),
        seed=config["seed"],
    )


def _aggregator_config(config) -> AggregatorConfig:
    a = config["aggregator"]
    return AggregatorConfig(seed=config["seed"], **a)


def _refine_args(config):
    r = config["refine"]
    return (
        SubmapSpec(tuple(r["extent"]), r["stride"]),
        FilterParams(r["filter_k"], r["filter_mu"]),
        DensifyParams(r["densify_k"]),
        r["thin_cell"],
    )


def _log_config(config, out_dir):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "resolved_config.txt").write_text(_resolved_config_text(config))


def cmd_synth(config, args):
    out = Path(config["paths"]["benchmark"])
    _log_config(config, out)
    manifest = make_benchmark(_benchmark_config(config), out)
    print(f"wrote {len(manifest.records)} artifacts under {out}")
    return EXIT_OK


def cmd_train_gpc(config, args):
    bench = Path(config["paths"]["benchmark"])
    manifest = BenchmarkManifest.load(bench / "manifest.txt")
    c = config["compressor"]
    model, history = pipeline.train_compressor_on_benchmark(
        bench, manifest,
        AutoencoderTrainConfig(epochs=c["epochs"], lr=c["lr"],
                               seed=config["seed"],
                               max_target_points=c["max_target_points"]),
        max_clouds=c["max_clouds"],
    )
    model.save(config["paths"]["compressor_weights"])
    if history:
        print(f"chamfer loss {history[0]:.4f} -> {history[-1]:.4f} "
              f"over {len(history)} epochs")
    print(f"wrote {config['paths']['compressor_weights']}")
    return EXIT_OK


def _load_compressor(config) -> CompressorModel:
    path = Path(config["paths"]["compressor_weights"])
    if path.exists():
        return CompressorModel.load(path)
    return CompressorModel()


def cmd_compress(config, args):
    bench = Path(config["paths"]["benchmark"])
    manifest = BenchmarkManifest.load(bench / "manifest.txt")
    model = _load_compressor(config)
    out = Path(config["paths"]["compressed"])
    out.mkdir(parents=True, exist_ok=True)
    items = pipeline.encode_db(bench, manifest, model)
    index = []
    for item in items:
        path = out / f"{item.id}.gpcc"
        save_compressed_submap(item.compressed, path)
        index.append(
            f"{item.id}\t{path.name}\t{item.route}\t"
            f"{item.anchor[0]:.9g}\t{item.anchor[1]:.9g}\t{item.anchor[2]:.9g}"
        )
    (out / "index.txt").write_text("\n".join(index) + "\n")
    print(f"compressed {len(items)} submaps into {out}")
    return EXIT_OK


def _load_compressed_items(config):
    out = Path(config["paths"]["compressed"])
    items = []
    for line in (out / "index.txt").read_text().splitlines():
        sid, name, route, ax, ay, az = line.split("\t")
        sub = load_compressed_submap(out / name)
        items.append(pipeline.DbItem(
            sid, route, np.array([float(ax), float(ay), float(az)]), sub
        ))
    return items


def cmd_refine(config, args):
    bench = Path(config["paths"]["benchmark"])
    manifest = BenchmarkManifest.load(bench / "manifest.txt")
    spec, fparams, dparams, thin = _refine_args(config)
    items = pipeline.refine_queries(bench, manifest, spec, fparams, dparams, thin)
    out = Path(config["paths"]["qpcs"])
    out.mkdir(parents=True, exist_ok=True)
    index = []
    for item in items:
        path = out / f"{item.id}.npy"
        np.save(path, item.rows.astype(np.float32))
        index.append(
            f"{item.id}\t{path.name}\t{item.route}\t"
            f"{item.anchor[0]:.9g}\t{item.anchor[1]:.9g}\t{item.anchor[2]:.9g}"
        )
    (out / "index.txt").write_text("\n".join(index) + "\n")
    print(f"refined {len(items)} query point clouds into {out}")
    return EXIT_OK


def _load_qpc_items(config):
    out = Path(config["paths"]["qpcs"])
    items = []
    for line in (out / "index.txt").read_text().splitlines():
        qid, name, route, ax, ay, az = line.split("\t")
        rows = np.load(out / name).astype(np.float64)
        items.append(pipeline.QueryItem(
            qid, route, np.array([float(ax), float(ay), float(az)]), rows
        ))
    return items


def cmd_train_agg(config, args):
    db_items = _load_compressed_items(config)
    q_items = _load_qpc_items(config)
    dataset = pipeline.build_place_dataset(db_items, q_items)
    t = config["train"]
    mode = args.mode or t["mode"]
    tc = TrainConfig(
        mode=mode, base_lr=t["base_lr"], epochs=t["epochs"],
        positives_per_anchor=t["positives_per_anchor"],
        negatives_per_anchor=t["negatives_per_anchor"],
        seed=config["seed"], loss=LossParams(t["alpha"], t["beta"]),
        val_fraction=t["val_fraction"],
        head_lr_multiplier=t["head_lr_multiplier"],
    )
    weights = Path(config["paths"]["aggregator_weights"])
    if args.resume and weights.exists():
        model = AggregatorModel.load(weights)
    else:
        model = AggregatorModel(_aggregator_config(config))
    result = run_training(model, dataset, tc,
                          log_path=str(weights) + f".{mode}.log")
    model.save(weights)
    if result.epoch_losses:
        print(f"{mode}: loss {result.epoch_losses[0]:.4f} -> "
              f"{result.epoch_losses[-1]:.4f}, "
              f"val recall@1 {result.val_recall[-1]:.3f}")
    print(f"wrote {weights}")
    return EXIT_OK


def cmd_build_db(config, args):
    db_items = _load_compressed_items(config)
    model = AggregatorModel.load(config["paths"]["aggregator_weights"])
    db = pipeline.build_descriptor_database(model, db_items)
    save_database(db, config["paths"]["database"])
    print(f"wrote {config['paths']['database']} ({len(db)} entries, dim {db.dim})")
    return EXIT_OK


def cmd_query(config, args):
    db = load_database(config["paths"]["database"])
    path = Path(args.input)
    if path.suffix == ".gpcc":
        model = AggregatorModel.load(config["paths"]["aggregator_weights"])
        descriptor = aggregate(model, load_compressed_submap(path))
    elif path.suffix == ".npy":
        model = AggregatorModel.load(config["paths"]["aggregator_weights"])
        descriptor = aggregate(model, np.load(path).astype(np.float64))
    else:
        descriptor = np.array(
            [float(x) for x in path.read_text().split()], dtype=np.float64
        )
    for rank, (entry_id, dist) in enumerate(query_topk(db, descriptor, args.k), 1):
        print(f"{rank}\t{entry_id}\t{dist:.6f}")
    return EXIT_OK


def cmd_eval(config, args):
    db = load_database(config["paths"]["database"])
    model = AggregatorModel.load(config["paths"]["aggregator_weights"])
    q_items = _load_qpc_items(config)
    e = config["eval"]
    report = pipeline.evaluate_queries(
        model, db, q_items, ks=tuple(int(k) for k in e["ks"]),
        success_radius=e["success_radius"],
    )
    Path(config["paths"]["report"]).write_text(report.to_text())
    for k in sorted(report.recall_at):
        print(f"recall@{k}\t{report.recall_at[k]:.4f}")
    print(f"wrote {config['paths']['report']}")
    return EXIT_OK


def cmd_gradcheck(config, args):
    rng = np.random.default_rng(config["seed"])
    cfg = AggregatorConfig(
        feature_dim=16, latent_count=4, descriptor_dim=8, heads=4,
        lift_hidden=8, transform_hidden=8, head_hidden=8, seed=config["seed"],
    )
    model = AggregatorModel(cfg)
    rows = rng.normal(size=(12, 6))
    target = rng.normal(size=8)
    target /= np.linalg.norm(target)

    from . import autodiff as ad
    from .aggregator import aggregate_graph

    def loss_fn():
        d = aggregate_graph(model, rows)
        diff = ad.sub(d, ad.Tensor(target))
        return ad.sum_all(ad.mul(diff, diff))

    errors = finite_difference_check(loss_fn, model.store, eps=1e-4)
    worst = 0.0
    for name in sorted(errors):
        print(f"{name}\t{errors[name]:.3e}")
        worst = max(worst, errors[name])
    print(f"max\t{worst:.3e}")
    return EXIT_OK if worst < 1e-4 else EXIT_NUMERICAL


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cloudloc",
        description="Point-cloud place recognition toolkit: synthetic "
        "benchmarks, geometric compression, descriptor training, retrieval.",
    )
    parser.add_argument("--config", help="TOML config file; flags override file values")
    parser.add_argument(
        "--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
        help="override any config key, e.g. --set refine.filter_k=10",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("synth", help="generate the synthetic benchmark "
                   "(reads seed, [synth], [refine] stride/extent)")
    sub.add_parser("train-gpc", help="train the map compressor "
                   "(reads seed, [compressor], paths.benchmark/compressor_weights)")
    sub.add_parser("compress", help="encode all database submaps "
                   "(reads paths.benchmark/compressor_weights/compressed)")
    p = sub.add_parser("refine", help="build query point clouds "
                       "(reads [refine]: --filter-k/--filter-mu/--densify-k/--stride/--extent)")
    p.add_argument("--filter-k", type=int)
    p.add_argument("--filter-mu", type=float)
    p.add_argument("--densify-k", type=int)
    p.add_argument("--stride", type=float)
    p.add_argument("--extent", type=str, help="ex,ey,ez in meters")
    p = sub.add_parser("train-agg", help="train the descriptor network "
                       "(reads seed, [train], [aggregator])")
    p.add_argument("--mode", choices=["pretrain", "finetune"])
    p.add_argument("--resume", action="store_true",
                   help="continue from existing aggregator weights")
    sub.add_parser("build-db", help="aggregate compressed submaps into a "
                   "descriptor database (reads paths.*)")
    p = sub.add_parser("query", help="top-K lookup for one input "
                       "(reads paths.database/aggregator_weights)")
    p.add_argument("input", help=".gpcc submap, .npy query rows, or text descriptor")
    p.add_argument("-k", type=int, default=5)
    sub.add_parser("eval", help="recall@K evaluation (reads [eval], paths.*)")
    sub.add_parser("gradcheck", help="finite-difference check of every "
                   "network layer (reads seed)")
    return parser


_COMMANDS = {
    "synth": cmd_synth,
    "train-gpc": cmd_train_gpc,
    "compress": cmd_compress,
    "refine": cmd_refine,
    "train-agg": cmd_train_agg,
    "build-db": cmd_build_db,
    "query": cmd_query,
    "eval": cmd_eval,
    "gradcheck": cmd_gradcheck,
}

_INPUT_ERRORS = (
    ParseError, EmptyInput, InsufficientPoints, EmptySubmap,
    NoValidSegments, DuplicateId, BadK, InsufficientNegatives,
    FileNotFoundError,
)


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        overrides = list(args.set)
        if args.command == "refine":
            flag_map = {
                "filter_k": "refine.filter_k", "filter_mu": "refine.filter_mu",
                "densify_k": "refine.densify_k", "stride": "refine.stride",
                "extent": "refine.extent",
            }
            for attr, key in flag_map.items():
                value = getattr(args, attr)
                if value is not None:
                    overrides.append(f"{key}={value}")
        config = load_config(args.config, overrides)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return _COMMANDS[args.command](config, args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except _INPUT_ERRORS as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except (TrainingDiverged,) as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ShapeError, ContractViolation, CloudlocError) as exc:
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
