"""Command-line front end: ``beamscene <subcommand>``.

Exit codes: 0 success, 2 configuration error, 3 scene generation failure,
4 numeric failure during training.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import harness as hs
from . import neuralnet as nn
from .features import FeatureError
from .raytrace import TraceError, trace_many
from .scene import GenerationError, default_layout, generate_environment, make_building_catalog, ms_positions, synthesize_point_cloud

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_GENERATION = 3
EXIT_NUMERIC = 4

# per-path record written by ``trace``; all fields little-endian float64
PATH_RECORD = np.dtype(
    [
        (name, "<f8")
        for name in (
            "env_id",
            "ms_index",
            "rank",
            "gain_re",
            "gain_im",
            "aod_el",
            "aod_az",
            "aoa_el",
            "aoa_az",
            "length_m",
            "bounces",
        )
    ]
)

log = logging.getLogger("beamscene")


def _global_flags(parser: argparse.ArgumentParser, suppress: bool) -> None:
    d = argparse.SUPPRESS if suppress else None
    parser.add_argument("--config", type=Path, default=d, help="JSON run configuration")
    parser.add_argument("--seed", type=int, default=d, help="override the base seed")
    parser.add_argument("--out", type=Path, default=d if suppress else Path("out"), help="output directory")
    parser.add_argument("--threads", type=int, default=d, help="worker processes for dataset building")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="beamscene", description="Point-cloud beam selection experiments.")
    _global_flags(p, suppress=False)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    common = argparse.ArgumentParser(add_help=False)
    _global_flags(common, suppress=True)

    sub.add_parser("gen", parents=[common], help="generate environments and point clouds")
    sub.add_parser("trace", parents=[common], help="trace channels and label optimal beam pairs")

    f = sub.add_parser("features", parents=[common], help="build a feature dataset")
    f.add_argument("kind", choices=("panoramic", "lidar"))
    f.add_argument("--range", dest="lidar_range", type=float, help="LIDAR observational distance in metres")

    t = sub.add_parser("train", parents=[common], help="train on the training environments of a dataset")
    t.add_argument("--dataset", type=Path, required=True)
    t.add_argument("--fraction", type=float, default=1.0)

    e = sub.add_parser("eval", parents=[common], help="top-M accuracy on the test environments")
    e.add_argument("--dataset", type=Path, required=True)
    e.add_argument("--model", type=Path, required=True)

    x = sub.add_parser("experiment", parents=[common], help="run the training-size or feature comparison sweep")
    x.add_argument("--mode", choices=("fig5", "fig6", "all"), default="all")

    i = sub.add_parser("inspect", parents=[common], help="print one dataset record")
    i.add_argument("--dataset", type=Path, required=True)
    i.add_argument("--index", type=int, default=0)
    return p


def _load(args) -> hs.RunConfig:
    cfg = hs.load_config(args.config) if args.config else hs.RunConfig()
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.threads is not None:
        changes["threads"] = args.threads
    try:
        return dataclasses.replace(cfg, **changes)
    except ValueError as exc:
        raise hs.ConfigError(str(exc)) from exc


def cmd_gen(cfg: hs.RunConfig, out: Path) -> None:
    layout = default_layout(cfg.layout)
    catalog = make_building_catalog()
    envs = []
    for env_id in range(cfg.n_envs):
        env = generate_environment(layout, catalog, hs.env_seed(cfg.seed, env_id))
        cloud = synthesize_point_cloud(env, cfg.cloud.density, cfg.cloud.noise_sigma, hs.env_seed(cfg.seed, env_id, 1))
        np.save(out / f"cloud_{env_id:04d}.npy", cloud.points.astype("<f8"))
        envs.append({"env_id": env_id, **env.to_dict()})
    (out / "environments.json").write_text(json.dumps(envs, indent=2, sort_keys=True) + "\n")
    print(f"wrote {len(envs)} environments to {out}")


def cmd_trace(cfg: hs.RunConfig, out: Path) -> None:
    layout = default_layout(cfg.layout)
    catalog = make_building_catalog()
    positions = ms_positions(layout)
    records, label_rows = [], []
    for env_id in range(cfg.n_envs):
        env = generate_environment(layout, catalog, hs.env_seed(cfg.seed, env_id))
        per_ms = trace_many(env, layout.bs_position, positions, cfg.trace)
        labels = hs.label_paths(per_ms, cfg)
        for ms, (paths, lab) in enumerate(zip(per_ms, labels)):
            for rank, p in enumerate(paths):
                records.append((env_id, ms, rank, p.gain.real, p.gain.imag, *p.aod, *p.aoa, p.length_m, p.bounces))
            if lab is None:
                label_rows.append((env_id, ms, len(paths), -1, -1, 0.0))
            else:
                label_rows.append((env_id, ms, len(paths), lab.t_opt, lab.r_opt, lab.gain))
    np.array(records, dtype=PATH_RECORD).tofile(out / "paths.bin")
    hs.write_csv(out / "labels.csv", ("env_id", "ms_index", "path_count", "t_opt", "r_opt", "gain"), label_rows)
    no_link = sum(r[3] < 0 for r in label_rows)
    print(f"traced {len(label_rows)} MS positions, {len(records)} paths, {no_link} without a link")


def cmd_features(cfg: hs.RunConfig, out: Path, kind: str, lidar_range: float | None) -> None:
    changes = {"feature_kind": kind}
    if lidar_range is not None:
        changes["lidar_range"] = lidar_range
    cfg = dataclasses.replace(cfg, **changes)
    d = hs.build_dataset(cfg, out)
    m = hs.read_manifest(d / "manifest.json")
    print(f"{m['record_count']} records in {d} ({m['dropped_count']} MS positions without a link)")


def cmd_train(cfg: hs.RunConfig, out: Path, dataset: Path, fraction: float) -> None:
    if not 0 < fraction <= 1:
        raise hs.ConfigError("--fraction must lie in (0, 1]")
    ds = hs.open_dataset(dataset)
    train_idx, _ = hs.split_by_environment(ds.env_id, cfg)
    if fraction < 1:
        train_idx = hs.fraction_subset(train_idx, fraction, cfg.seed)
    res = hs.train_model(cfg, ds, train_idx)
    nn.save_checkpoint(out / "model.ckpt", res.params)
    nn.write_loss_csv(out / "loss.csv", res.epoch_loss)
    print(f"trained on {len(train_idx)} samples, final loss {res.epoch_loss[-1]:.4f}")


def cmd_eval(cfg: hs.RunConfig, out: Path, dataset: Path, model: Path) -> None:
    ds = hs.open_dataset(dataset)
    params = nn.load_checkpoint(model)
    if params.arch.n_beams != ds.manifest["n_beams"]:
        raise hs.ConfigError(f"model has {params.arch.n_beams} beams, dataset {ds.manifest['n_beams']}")
    _, test_idx = hs.split_by_environment(ds.env_id, cfg)
    met = hs.evaluate_top_m(params, ds.features, ds.t_opt, ds.r_opt, cfg.experiment.m_values, ds.env_id, test_idx)
    rows = [(m, met.top_m_accuracy[m]) for m in sorted(met.top_m_accuracy)]
    hs.write_csv(out / "eval.csv", ("M", "accuracy"), rows)
    for m, acc in rows:
        print(f"top-{m}: {acc:.4f}")


def cmd_experiment(cfg: hs.RunConfig, out: Path, mode: str) -> None:
    summary = hs.run_experiment(cfg, out, mode)
    for tag, run in summary["runs"].items():
        print(f"{tag}: n_train={run['n_train']} top5={run['top_m'][5]:.4f}")


def cmd_inspect(dataset: Path, index: int) -> None:
    ds = hs.open_dataset(dataset)
    if not 0 <= index < len(ds):
        raise hs.ConfigError(f"index {index} outside [0, {len(ds)})")
    rec = ds.records[index]
    g = np.asarray(rec["feature"], dtype=float)
    rows = np.any(g != 0, axis=-1)
    marker = np.argwhere(np.all(g < 0, axis=-1))
    print(f"record {index} of {len(ds)} ({ds.manifest['feature_kind']})")
    print(f"  env_id      {int(rec['env_id'])}")
    print(f"  ms_index    {int(rec['ms_index'])}")
    print(f"  path_count  {int(rec['path_count'])}")
    print(f"  t_opt       {int(rec['t_opt'])}")
    print(f"  r_opt       {int(rec['r_opt'])}")
    print(f"  gain        {float(rec['gain']):.6e}")
    print(f"  feature     shape {g.shape}, {int(rows.sum())} occupied voxels")
    for v in marker:
        print(f"  marker      voxel {tuple(int(k) for k in v)} = {np.round(g[tuple(v)], 4).tolist()}")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = _load(args)
        if args.command == "inspect":
            cmd_inspect(args.dataset, args.index)
            return EXIT_OK
        out = args.out
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "gen":
            cmd_gen(cfg, out)
        elif args.command == "trace":
            cmd_trace(cfg, out)
        elif args.command == "features":
            cmd_features(cfg, out, args.kind, args.lidar_range)
        elif args.command == "train":
            cmd_train(cfg, out, args.dataset, args.fraction)
        elif args.command == "eval":
            cmd_eval(cfg, out, args.dataset, args.model)
        elif args.command == "experiment":
            cmd_experiment(cfg, out, args.mode)
    except hs.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (GenerationError, TraceError, FeatureError) as exc:
        print(f"generation failed: {exc}", file=sys.stderr)
        return EXIT_GENERATION
    except (nn.NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
