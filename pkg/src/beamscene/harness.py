"""Dataset construction, environment-level split, top-M evaluation and experiments.

A dataset lives in one directory holding ``manifest.json`` and ``records.bin``.
Records have a fixed little-endian layout (see :func:`record_dtype`) so the
file can be memory-mapped and indexed directly during training.
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path as FsPath

import numpy as np

from . import features as ft
from . import neuralnet as nn
from . import phy
from .raytrace import Path, TraceConfig, trace_many
from .scene import (
    Environment,
    LayoutParams,
    default_layout,
    generate_environment,
    make_building_catalog,
    ms_positions,
    synthesize_point_cloud,
)

__all__ = [
    "ConfigError",
    "LeakageError",
    "ArrayConfig",
    "CloudConfig",
    "TrainConfig",
    "ExperimentConfig",
    "RunConfig",
    "load_config",
    "save_config",
    "env_seed",
    "EnvSamples",
    "process_environment",
    "record_dtype",
    "Dataset",
    "build_dataset",
    "build_datasets",
    "open_dataset",
    "write_manifest",
    "read_manifest",
    "split_by_environment",
    "Metrics",
    "evaluate_top_m",
    "train_model",
    "run_experiment",
    "write_csv",
    "fraction_subset",
    "label_paths",
]

log = logging.getLogger(__name__)

FORMAT_VERSION = 1


class ConfigError(ValueError):
    pass


class LeakageError(RuntimeError):
    """A test environment also contributes training samples."""


# --- configuration -----------------------------------------------------------


@dataclass(frozen=True)
class ArrayConfig:
    bs: tuple[int, int] = (8, 72)
    ms: tuple[int, int] = (8, 72)
    n_beams: int = 30
    alpha_hat_deg: float = 95.0


@dataclass(frozen=True)
class CloudConfig:
    density: float = 1.0
    noise_sigma: float = 0.05


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    decay: float = 0.9
    epsilon: float = 1e-8
    batch_size: int = 32
    epochs: int = 50


@dataclass(frozen=True)
class ExperimentConfig:
    m_values: tuple[int, ...] = (1, 2, 3, 5, 10)
    fig5_fractions: tuple[float, ...] = (0.25, 0.5, 1.0)
    fig6_ranges: tuple[float, ...] = (60.0, 120.0, 200.0)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    train_envs: int = 40
    test_envs: int = 10
    feature_kind: str = "panoramic"
    lidar_range: float = 200.0
    threads: int = 1
    layout: LayoutParams = field(default_factory=LayoutParams)
    trace: TraceConfig = field(default_factory=TraceConfig)
    arrays: ArrayConfig = field(default_factory=ArrayConfig)
    cloud: CloudConfig = field(default_factory=CloudConfig)
    grid: ft.VoxelGridSpec = field(default_factory=ft.default_grid_spec)
    lidar: ft.LidarScanConfig = field(default_factory=ft.LidarScanConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    experiment: ExperimentConfig = field(default_factory=ExperimentConfig)

    def __post_init__(self):
        if self.feature_kind not in ("panoramic", "lidar"):
            raise ConfigError(f"feature_kind must be 'panoramic' or 'lidar', got {self.feature_kind!r}")
        if self.train_envs < 1 or self.test_envs < 0:
            raise ConfigError("need at least one training environment")
        if self.lidar_range <= 0:
            raise ConfigError("lidar_range must be positive")

    @property
    def n_envs(self) -> int:
        return self.train_envs + self.test_envs

    def to_dict(self) -> dict:
        return _jsonable(dataclasses.asdict(self))

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        return _from_dict(cls, data, "config")


_SECTIONS = {
    "layout": LayoutParams,
    "trace": TraceConfig,
    "arrays": ArrayConfig,
    "cloud": CloudConfig,
    "grid": ft.VoxelGridSpec,
    "lidar": ft.LidarScanConfig,
    "train": TrainConfig,
    "experiment": ExperimentConfig,
}


def _jsonable(obj):
    if isinstance(obj, dict):
        return {k: _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.generic):
        return obj.item()
    return obj


def _from_dict(cls, data: dict, where: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected a mapping")
    known = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(known)
    if unknown:
        raise ConfigError(f"{where}: unknown keys {sorted(unknown)}")
    kwargs = {}
    for name, value in data.items():
        if cls is RunConfig and name in _SECTIONS:
            kwargs[name] = _from_dict(_SECTIONS[name], value, f"{where}.{name}")
        elif isinstance(value, list):
            kwargs[name] = tuple(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def load_config(path) -> RunConfig:
    try:
        data = json.loads(FsPath(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    return RunConfig.from_dict(data)


def save_config(cfg: RunConfig, path) -> None:
    FsPath(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n")


def env_seed(base_seed: int, env_id: int, stream: int = 0) -> int:
    """64-bit seed for one environment (stream 0) or its point cloud (stream 1)."""
    ss = np.random.SeedSequence([int(base_seed), int(env_id), int(stream)])
    return int(ss.generate_state(1, np.uint64)[0])


# --- per-environment pipeline ------------------------------------------------


def feature_key(kind: str, lidar_range: float | None = None) -> str:
    return "panoramic" if kind == "panoramic" else f"lidar_S{lidar_range:g}"


@dataclass
class EnvSamples:
    env_id: int
    env: Environment
    ms_index: np.ndarray  # kept MS positions
    labels: list[phy.BeamPairLabel]
    path_counts: np.ndarray
    dropped: int
    features: dict[str, np.ndarray] = field(default_factory=dict)
    paths: list[list[Path]] | None = None


def label_paths(paths_per_ms, cfg: RunConfig):
    """Optimal beam pair for each MS position; ``None`` where there is no link."""
    a = cfg.arrays
    bs_cfg, ms_cfg = phy.UpaConfig(*a.bs), phy.UpaConfig(*a.ms)
    alpha = np.deg2rad(a.alpha_hat_deg)
    cb_tx = phy.build_codebook(bs_cfg, a.n_beams, alpha)
    cb_rx = phy.build_codebook(ms_cfg, a.n_beams, alpha)
    out = []
    for paths in paths_per_ms:
        if not paths:
            out.append(None)
            continue
        obj = phy.beam_pair_objective(paths, cb_tx, cb_rx, bs_cfg, ms_cfg)
        try:
            out.append(phy.optimal_pair(obj))
        except phy.NoLinkError:
            out.append(None)
    return out


def process_environment(cfg: RunConfig, env_id: int, kinds=(("panoramic", None),), keep_paths=False) -> EnvSamples:
    """Generate, trace, label and featurize every MS position of one environment.

    ``kinds`` lists ``(feature_kind, lidar_range)`` pairs; LIDAR kinds share
    one scan per MS position, cut at each range.
    """
    layout = default_layout(cfg.layout)
    env = generate_environment(layout, make_building_catalog(), env_seed(cfg.seed, env_id))
    positions = ms_positions(layout)
    bs = layout.bs_position
    paths_per_ms = trace_many(env, bs, positions, cfg.trace)
    labels = label_paths(paths_per_ms, cfg)
    keep = np.array([lab is not None for lab in labels], dtype=bool)
    kept_idx = np.flatnonzero(keep)

    feats = {}
    shape = cfg.grid.shape
    if any(k == "panoramic" for k, _ in kinds):
        cloud = synthesize_point_cloud(env, cfg.cloud.density, cfg.cloud.noise_sigma, env_seed(cfg.seed, env_id, 1))
        # the cloud is static per environment: voxelize once, then stamp each MS marker
        base, _ = ft.voxel_means(cloud.points, cfg.grid)
        arr = np.zeros((len(kept_idx), *shape), dtype=np.float32)
        for n, i in enumerate(kept_idx):
            g = base.copy()
            ft.mark_voxel(g, positions[i] - bs, cfg.grid)
            arr[n] = g
        feats["panoramic"] = arr
    ranges = sorted({float(r) for k, r in kinds if k == "lidar"})
    if ranges:
        lidar_spec = ft.lidar_grid_spec(cfg.layout.h_ms, cfg.grid)
        scan_cfg = dataclasses.replace(cfg.lidar, range_m=max(ranges))
        arrs = {S: np.zeros((len(kept_idx), *shape), dtype=np.float32) for S in ranges}
        for n, i in enumerate(kept_idx):
            scan = ft.simulate_lidar_scan(env, positions[i], scan_cfg)
            dist = np.linalg.norm(scan.points, axis=1)
            for S in ranges:
                sub = ft.PointCloud(scan.points[dist <= S], scan.origin)
                arrs[S][n] = ft.extract_lidar_feature(sub, bs - positions[i], lidar_spec).g
        for S in ranges:
            feats[feature_key("lidar", S)] = arrs[S]

    return EnvSamples(
        env_id=env_id,
        env=env,
        ms_index=kept_idx,
        labels=[labels[i] for i in kept_idx],
        path_counts=np.array([len(paths_per_ms[i]) for i in kept_idx], dtype=np.int64),
        dropped=int((~keep).sum()),
        features=feats,
        paths=paths_per_ms if keep_paths else None,
    )


# --- dataset files -----------------------------------------------------------


def record_dtype(feature_shape) -> np.dtype:
    """Packed little-endian record: ids (u4), float32 feature, label (2 x u2), gain (f8)."""
    return np.dtype(
        [
            ("env_id", "<u4"),
            ("ms_index", "<u4"),
            ("path_count", "<u4"),
            ("feature", "<f4", tuple(feature_shape)),
            ("t_opt", "<u2"),
            ("r_opt", "<u2"),
            ("gain", "<f8"),
        ]
    )


def samples_to_records(s: EnvSamples, key: str, shape) -> np.ndarray:
    rec = np.zeros(len(s.ms_index), dtype=record_dtype(shape))
    rec["env_id"] = s.env_id
    rec["ms_index"] = s.ms_index
    rec["path_count"] = s.path_counts
    rec["feature"] = s.features[key]
    rec["t_opt"] = [lab.t_opt for lab in s.labels]
    rec["r_opt"] = [lab.r_opt for lab in s.labels]
    rec["gain"] = [lab.gain for lab in s.labels]
    return rec


def write_manifest(path, manifest: dict) -> None:
    FsPath(path).write_text(json.dumps(_jsonable(manifest), indent=2, sort_keys=True) + "\n")


def read_manifest(path) -> dict:
    return json.loads(FsPath(path).read_text())


@dataclass
class Dataset:
    root: FsPath
    manifest: dict
    records: np.ndarray  # memory-mapped structured array

    def __len__(self) -> int:
        return len(self.records)

    @property
    def features(self):
        return self.records["feature"]

    @property
    def t_opt(self) -> np.ndarray:
        return np.asarray(self.records["t_opt"], dtype=np.int64)

    @property
    def r_opt(self) -> np.ndarray:
        return np.asarray(self.records["r_opt"], dtype=np.int64)

    @property
    def env_id(self) -> np.ndarray:
        return np.asarray(self.records["env_id"], dtype=np.int64)


def open_dataset(root) -> Dataset:
    root = FsPath(root)
    manifest = read_manifest(root / "manifest.json")
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError(f"unsupported dataset format {manifest.get('format_version')}")
    dt = record_dtype(manifest["feature_shape"])
    n = manifest["record_count"]
    if n == 0:
        records = np.zeros(0, dtype=dt)
    else:
        records = np.memmap(root / "records.bin", dtype=dt, mode="r", shape=(n,))
    return Dataset(root, manifest, records)


def _worker(args):
    cfg, env_id, kinds = args
    return process_environment(cfg, env_id, kinds)


def _iter_envs(cfg: RunConfig, kinds):
    jobs = [(cfg, i, kinds) for i in range(cfg.n_envs)]
    if cfg.threads > 1:
        with ProcessPoolExecutor(cfg.threads) as pool:
            yield from pool.map(_worker, jobs)
    else:
        yield from map(_worker, jobs)


def build_datasets(cfg: RunConfig, out_root, kinds) -> dict[str, FsPath]:
    """One dataset directory per feature kind, sharing environments and labels.

    Records are written in ``(env_id, ms_index)`` order by a single writer.
    """
    out_root = FsPath(out_root)
    kinds = tuple((k, None if k == "panoramic" else float(r)) for k, r in kinds)
    keys = [feature_key(k, r) for k, r in kinds]
    dirs = {key: out_root / key for key in keys}
    handles = {}
    counts = dict.fromkeys(keys, 0)
    dropped = 0
    no_link = []
    shape = cfg.grid.shape
    for d in dirs.values():
        d.mkdir(parents=True, exist_ok=True)
    try:
        for key in keys:
            handles[key] = open(dirs[key] / "records.bin", "wb")
        for s in _iter_envs(cfg, kinds):
            dropped += s.dropped
            n_ms = s.dropped + len(s.ms_index)
            no_link += [[s.env_id, int(i)] for i in np.setdiff1d(np.arange(n_ms), s.ms_index)]
            for key in keys:
                rec = samples_to_records(s, key, shape)
                handles[key].write(rec.tobytes())
                counts[key] += len(rec)
            log.info("env %d: %d samples, %d dropped", s.env_id, len(s.ms_index), s.dropped)
    finally:
        for h in handles.values():
            h.close()
    for (kind, S), key in zip(kinds, keys):
        grid = ft.lidar_grid_spec(cfg.layout.h_ms, cfg.grid) if kind == "lidar" else cfg.grid
        write_manifest(
            dirs[key] / "manifest.json",
            {
                "format_version": FORMAT_VERSION,
                "feature_kind": kind,
                "lidar_range": S,
                "feature_shape": list(shape),
                "grid": dataclasses.asdict(grid),
                "n_beams": cfg.arrays.n_beams,
                "record_count": counts[key],
                "dropped_count": dropped,
                "no_link": no_link,
                "env_ids": list(range(cfg.n_envs)),
                "seed": cfg.seed,
                "config": cfg.to_dict(),
                "record_layout": [[name, str(record_dtype(shape)[name])] for name in record_dtype(shape).names],
            },
        )
    return dirs


def build_dataset(cfg: RunConfig, out_dir) -> FsPath:
    """Dataset of ``cfg.feature_kind`` features written directly into ``out_dir``."""
    kind = (cfg.feature_kind, cfg.lidar_range if cfg.feature_kind == "lidar" else None)
    out_dir = FsPath(out_dir)
    tmp = build_datasets(cfg, out_dir.parent / (out_dir.name + ".build"), [kind])
    built = next(iter(tmp.values()))
    out_dir.mkdir(parents=True, exist_ok=True)
    for name in ("records.bin", "manifest.json"):
        (built / name).replace(out_dir / name)
    built.rmdir()
    built.parent.rmdir()
    return out_dir


def split_by_environment(env_ids, cfg: RunConfig) -> tuple[np.ndarray, np.ndarray]:
    """Row indices of training and test records, split strictly by environment id."""
    env_ids = np.asarray(env_ids)
    train_ids = np.arange(cfg.train_envs)
    test_ids = np.arange(cfg.train_envs, cfg.n_envs)
    if np.intersect1d(train_ids, test_ids).size:
        raise LeakageError("train and test environment ids overlap")
    train = np.flatnonzero(np.isin(env_ids, train_ids))
    test = np.flatnonzero(np.isin(env_ids, test_ids))
    if np.intersect1d(env_ids[train], env_ids[test]).size:
        raise LeakageError("an environment contributes to both train and test sets")
    return train, test


# --- evaluation --------------------------------------------------------------


@dataclass
class Metrics:
    top_m_accuracy: dict[int, float]
    per_env: dict[int, dict[int, float]]
    n_samples: int


def evaluate_top_m(params: nn.ModelParams, features, t_opt, r_opt, m_values, env_ids=None, indices=None, chunk=256) -> Metrics:
    """Fraction of samples whose true ``(t, r)`` pair is among the top-M predicted pairs."""
    t_opt = np.asarray(t_opt)
    r_opt = np.asarray(r_opt)
    idx = np.arange(len(t_opt)) if indices is None else np.asarray(indices)
    n = params.arch.n_beams
    if len(idx) and (t_opt[idx].max() >= n or r_opt[idx].max() >= n):
        raise ValueError(f"labels exceed the model head width {n}")
    ranks = np.empty(len(idx), dtype=np.int64)
    for start in range(0, len(idx), chunk):
        sel = idx[start : start + chunk]
        lt, lr = nn.model_forward(np.asarray(features[sel], dtype=float), params)
        ranks[start : start + len(sel)] = nn.pair_ranks(lt, lr, t_opt[sel], r_opt[sel])
    return metrics_from_ranks(ranks, m_values, None if env_ids is None else np.asarray(env_ids)[idx])


def metrics_from_ranks(ranks: np.ndarray, m_values, env_ids=None) -> Metrics:
    m_values = sorted(int(m) for m in m_values)
    top = {m: float(np.mean(ranks < m)) if len(ranks) else 0.0 for m in m_values}
    per_env = {}
    if env_ids is not None:
        for e in np.unique(env_ids):
            sel = env_ids == e
            per_env[int(e)] = {m: float(np.mean(ranks[sel] < m)) for m in m_values}
    return Metrics(top, per_env, len(ranks))


# --- training and experiments ------------------------------------------------


def train_model(cfg: RunConfig, ds: Dataset, indices: np.ndarray, seed: int | None = None) -> nn.TrainResult:
    seed = cfg.seed if seed is None else seed
    arch = nn.Architecture(input_shape=tuple(ds.manifest["feature_shape"]), n_beams=ds.manifest["n_beams"])
    params = nn.init_params(arch, seed)
    tc = cfg.train
    state = nn.RmspropState(tc.learning_rate, tc.decay, tc.epsilon)
    schedule = nn.Schedule(tc.batch_size, tc.epochs, seed)
    return nn.train(
        (ds.features, ds.t_opt, ds.r_opt),
        params,
        state,
        schedule,
        indices=indices,
        on_epoch=lambda e, v: log.info("epoch %d: loss %.4f", e, v),
    )


def write_csv(path, header, rows) -> None:
    def fmt(v):
        if isinstance(v, (float, np.floating)):
            return f"{float(v):.17g}"
        return str(v)

    lines = [",".join(header)] + [",".join(fmt(v) for v in row) for row in rows]
    FsPath(path).write_text("\n".join(lines) + "\n")


def fraction_subset(train_idx: np.ndarray, fraction: float, seed: int) -> np.ndarray:
    n = max(1, math.ceil(fraction * len(train_idx)))
    perm = np.random.default_rng([seed, 5]).permutation(len(train_idx))
    return np.sort(train_idx[perm[:n]])


def run_experiment(cfg: RunConfig, out_dir, mode: str = "all") -> dict:
    """Build, split, train and evaluate.

    ``mode`` is ``fig5`` (top-5 accuracy vs training fraction), ``fig6``
    (panoramic vs LIDAR-local features at each scan range) or ``all``
    (both, sharing the full-data panoramic model). Writes CSV reports to
    ``out_dir`` and returns a summary dictionary.
    """
    if mode not in ("fig5", "fig6", "all"):
        raise ConfigError(f"unknown experiment mode {mode!r}")
    out = FsPath(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_config(cfg, out / "config.json")
    ex = cfg.experiment
    m_values = sorted(set(ex.m_values) | {5})

    kinds = [("panoramic", None)]
    if mode in ("fig6", "all"):
        kinds += [("lidar", S) for S in ex.fig6_ranges]
    dirs = build_datasets(cfg, out / "datasets", kinds)
    summary: dict = {"mode": mode}
    metrics_rows = []
    models = out / "models"
    models.mkdir(exist_ok=True)

    def fit_eval(key: str, fraction: float) -> Metrics:
        ds = open_dataset(dirs[key])
        train_idx, test_idx = split_by_environment(ds.env_id, cfg)
        sub = fraction_subset(train_idx, fraction, cfg.seed) if fraction < 1 else train_idx
        res = train_model(cfg, ds, sub)
        tag = f"{key}_f{fraction:g}"
        nn.save_checkpoint(models / f"{tag}.ckpt", res.params)
        nn.write_loss_csv(models / f"{tag}_loss.csv", res.epoch_loss)
        met = evaluate_top_m(res.params, ds.features, ds.t_opt, ds.r_opt, m_values, ds.env_id, test_idx)
        for m in m_values:
            metrics_rows.append((key, fraction, len(sub), met.n_samples, m, met.top_m_accuracy[m]))
        summary.setdefault("runs", {})[tag] = {
            "n_train": int(len(sub)),
            "n_test": met.n_samples,
            "top_m": met.top_m_accuracy,
            "final_loss": res.epoch_loss[-1] if res.epoch_loss else None,
        }
        return met

    full = fit_eval("panoramic", 1.0)
    if mode in ("fig5", "all"):
        rows = []
        for frac in sorted(ex.fig5_fractions):
            met = full if frac >= 1 else fit_eval("panoramic", frac)
            n_train = summary["runs"][f"panoramic_f{frac:g}"]["n_train"] if frac < 1 else summary["runs"]["panoramic_f1"]["n_train"]
            rows.append((frac, n_train, met.top_m_accuracy[5]))
        write_csv(out / "fig5.csv", ("fraction", "n_samples", "top5_acc"), rows)
        summary["fig5"] = rows
    if mode in ("fig6", "all"):
        rows = []
        for S in ex.fig6_ranges:
            met = fit_eval(feature_key("lidar", S), 1.0)
            for m in sorted(ex.m_values):
                rows.append((m, S, full.top_m_accuracy[m], met.top_m_accuracy[m]))
        write_csv(out / "fig6.csv", ("M", "S", "panoramic_acc", "lidar_acc"), rows)
        summary["fig6"] = rows
    write_csv(out / "metrics.csv", ("features", "fraction", "n_train", "n_test", "M", "accuracy"), metrics_rows)
    return summary
