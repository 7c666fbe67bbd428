"""Acceptance criteria 1 to 10.

Each test records a one-line verdict that the terminal summary echoes. Criteria
7 to 9 share one desk-scale experiment (40 training and 10 test environments,
N = 30) run once per session; it takes roughly half an hour on one core.
"""
import importlib.util
import inspect
import json
import sys
from pathlib import Path

import numpy as np
import pytest

from beamscene import harness as hs
from beamscene import neuralnet as nn
from beamscene.cli import main as cli_main
from beamscene.features import LidarScanConfig, VoxelGridSpec, default_grid_spec, extract_panoramic
from beamscene.phy import UpaConfig, beam_pair_objective, build_codebook, channel_matrix, codebook_azimuths, dense_objective, optimal_pair
from beamscene.raytrace import Path as RayPath
from beamscene.raytrace import TraceConfig, trace_many, trace_paths
from beamscene.scene import PointCloud, default_layout, generate_environment, make_building_catalog, ms_positions
from conftest import ACCEPTANCE_LINES, boxes_env
from test_neuralnet import MINI, central_diff, rel_err
from test_raytrace import WALL_ONLY_1ST, _wall, grid_search_reflection_length

# training budget of the desk run; see the README for why it is below the default
DESK_EPOCHS = 10


def report(k: int, ok: bool, detail: str) -> None:
    line = f"criterion {k:2d}: {'PASS' if ok else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[k] = line
    print(line)


# --- 1 ------------------------------------------------------------------------


def _exec_neuralnet(source: str):
    name = "_beamscene_nn_variant"
    spec = importlib.util.spec_from_loader(name, loader=None)
    mod = importlib.util.module_from_spec(spec)
    sys.modules[name] = mod
    try:
        exec(compile(source, name, "exec"), mod.__dict__)
    finally:
        del sys.modules[name]
    return mod


def test_criterion_01_shape_pin():
    arch = nn.Architecture()
    shapes = arch.conv_shapes()
    source = inspect.getsource(nn).replace("cache=True", "cache=False")
    _exec_neuralnet(source)  # the untouched trunk builds
    strides_off = source.replace("ConvSpec((5, 5, 2), 6, (2, 2, 1))", "ConvSpec((5, 5, 2), 6, (1, 1, 1))", 1)
    assert strides_off != source
    try:
        _exec_neuralnet(strides_off)
        guarded = False
    except ImportError:
        guarded = True
    ok = shapes == [(40, 32, 6, 3), (18, 14, 5, 6), (8, 6, 4, 12)] and arch.flatten_width == 2304 and guarded
    report(1, ok, f"flatten width {arch.flatten_width}, altered trunk rejected at import: {guarded}")
    assert ok


# --- 2 ------------------------------------------------------------------------


def test_criterion_02_gradient_check():
    rng = np.random.default_rng(11)
    params = nn.init_params(MINI, 3)
    for name, t in params.tensors.items():
        if name.endswith(".b"):
            t[:] = rng.normal(scale=0.1, size=t.shape)
    x = rng.normal(size=(4, *MINI.input_shape))
    t, r = np.array([0, 3, 2, 1]), np.array([1, 1, 3, 0])
    _, grads = nn.forward_backward(x, t, r, params)
    worst = 0.0
    for name, tensor in params.tensors.items():
        num = central_diff(lambda: nn.forward_backward(x, t, r, params)[0], tensor)
        worst = max(worst, rel_err(grads[name], num))
    ok = worst < 1e-4
    report(2, ok, f"max relative gradient error {worst:.2e} over {len(params.tensors)} tensors (< 1e-4)")
    assert ok


# --- 3 ------------------------------------------------------------------------


def test_criterion_03_steering_and_codebook():
    cfg = UpaConfig()
    norm_err = 0.0
    az_exact = True
    for n in (30, 50, 7):
        cb = build_codebook(cfg, n)
        norm_err = max(norm_err, np.max(np.abs(np.linalg.norm(cb.beams, axis=1) - 1)))
        want = np.array([(2 * i - 2 - n) / (2 * n) * np.pi for i in range(1, n + 1)])
        az_exact &= bool(np.array_equal(codebook_azimuths(n), want)) and bool(np.array_equal(cb.azimuths, want))

    small = UpaConfig(8, 8)
    cb = build_codebook(small, 30)
    rng = np.random.default_rng(5)
    worst = 0.0
    for _ in range(10):
        paths = [
            RayPath(
                complex(rng.normal(), rng.normal()),
                (rng.uniform(0, np.pi), rng.uniform(-np.pi, np.pi)),
                (rng.uniform(0, np.pi), rng.uniform(-np.pi, np.pi)),
                1.0,
                0,
                np.zeros((2, 3)),
            )
            for _ in range(5)
        ]
        fact = beam_pair_objective(paths, cb, cb, small, small)
        dense = dense_objective(channel_matrix(paths, small, small), cb, cb)
        worst = max(worst, np.max(np.abs(fact - dense)) / np.max(np.abs(dense)))
    ok = norm_err < 1e-12 and az_exact and worst < 1e-9
    report(3, ok, f"unit-norm error {norm_err:.1e}, azimuths exact: {az_exact}, factored vs dense {worst:.1e}")
    assert ok


# --- 4 ------------------------------------------------------------------------


def _empty_scene_sweep(n_positions=50, seed=4):
    env = boxes_env([])
    bs = default_layout().bs_position
    cfg = TraceConfig(include_ground=False)
    cb = build_codebook(UpaConfig(), 30)
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n_positions):
        ms = np.array([rng.uniform(-60, 60), rng.uniform(20, 120), 2.0])
        paths = trace_paths(env, bs, ms, cfg)
        assert len(paths) == 1 and paths[0].bounces == 0
        d = ms - bs
        true_az = np.arctan2(d[0], d[1])
        nearest = int(np.argmin(np.abs(cb.azimuths - true_az)))
        obj = beam_pair_objective(paths, cb, cb)
        chosen = optimal_pair(obj).t_opt
        # brute force over every pair, independent of the arg max helper
        brute = max(((obj[r, t], -t, -r) for t in range(30) for r in range(30)))
        assert -brute[1] == chosen
        out.append((paths[0], true_az, nearest, chosen))
    return cb, out


def test_criterion_04_los_beam_is_nearest_azimuth():
    _, rows = _empty_scene_sweep()
    misses = [(np.rad2deg(az), n, c) for _, az, n, c in rows if n != c]
    ok = not misses
    report(4, ok, f"{50 - len(misses)}/50 LOS positions select the nearest-azimuth tx beam")
    assert ok, f"beam off the nearest azimuth at (deg, nearest, chosen): {misses[:5]}"


def test_los_beam_matches_array_factor_closed_form():
    # the selected beam maximises the Dirichlet-kernel gain, which is not always the nearest azimuth
    cb, rows = _empty_scene_sweep()
    cfg = UpaConfig()

    def dirichlet(x, n):
        d = n * np.sin(np.pi * x / 2)
        safe = np.where(np.abs(d) < 1e-15, 1.0, d)
        return np.where(np.abs(d) < 1e-15, 1.0, np.abs(np.sin(np.pi * n * x / 2) / safe))

    for p, az, _, chosen in rows:
        du = np.sin(p.aod[0]) * np.sin(az) - np.sin(cb.alpha_hat) * np.sin(cb.azimuths)
        assert chosen == int(np.argmax(dirichlet(du, cfg.n_b)))


# --- 5 ------------------------------------------------------------------------


def test_criterion_05_ray_tracer_geometry():
    rng = np.random.default_rng(2025)
    worst_len = 0.0
    for _ in range(20):
        y0 = rng.uniform(5, 30)
        tx = np.array([rng.uniform(-50, 50), rng.uniform(-20, y0 - 1), rng.uniform(1, 20)])
        rx = np.array([rng.uniform(-50, 50), rng.uniform(-20, y0 - 1), rng.uniform(1, 20)])
        refl = [p for p in trace_paths(_wall(y0), tx, rx, WALL_ONLY_1ST) if p.bounces == 1]
        assert len(refl) == 1
        worst_len = max(worst_len, abs(refl[0].length_m - grid_search_reflection_length(tx, rx, y0)))

    layout = default_layout()
    catalog = make_building_catalog()
    ms = ms_positions(layout)
    worst_recip = 0.0
    most = 0
    for seed in range(6):
        env = generate_environment(layout, catalog, hs.env_seed(0, seed))
        for paths in trace_many(env, layout.bs_position, ms):
            most = max(most, len(paths))
        for rx in ms[::20]:
            fwd = sorted(trace_paths(env, layout.bs_position, rx), key=lambda p: (p.length_m, p.bounces))
            rev = sorted(trace_paths(env, rx, layout.bs_position), key=lambda p: (p.length_m, p.bounces))
            assert len(fwd) == len(rev)
            for a, b in zip(fwd, rev):
                assert a.bounces == b.bounces
                worst_recip = max(worst_recip, abs(a.length_m - b.length_m), *np.abs(np.subtract(a.aod, b.aoa)), *np.abs(np.subtract(a.aoa, b.aod)))
    ok = worst_len < 1e-6 and worst_recip < 1e-9 and most <= 25
    report(5, ok, f"grid-search length error {worst_len:.1e} m, reciprocity {worst_recip:.1e}, max paths {most}")
    assert ok


# --- 6 ------------------------------------------------------------------------


def _cloud(points):
    return PointCloud(np.asarray(points, dtype=float).reshape(-1, 3))


def test_criterion_06_feature_contract():
    unit = VoxelGridSpec((0.0, 0.0, 0.0), (20.0, 20.0, 10.0), (4, 4, 2))
    f = extract_panoramic(_cloud([[6, 7, 1], [11.5, 17.5, 5.5]]), (11.5, 17.5, 5.5), unit)
    marker_ok = f.marker_voxel == (2, 3, 1) and np.allclose(f.g[2, 3, 1], [-1.5, -2.5, -0.5])
    mean_ok = np.allclose(f.g[1, 1, 0], [1, 2, 1])
    coarse = VoxelGridSpec((0.0, 0.0, 0.0), (20.0, 20.0, 20.0), (2, 2, 2))
    mean_ok &= np.allclose(extract_panoramic(_cloud([[1, 2, 3], [3, 4, 5]]), (12, 12, 17), coarse).g[0, 0, 0], [2, 3, 4])
    e = extract_panoramic(_cloud([[1, 1, 1], [-3, 0, 0], [25, 1, 1]]), (19, 19, 9), unit)
    occupied = np.any(e.g != 0, axis=-1)
    empty_ok = e.n_dropped == 2 and occupied.sum() == 2 and not e.g[~occupied].any()

    rng = np.random.default_rng(6)
    spec = default_grid_spec()
    invariant = 0
    for _ in range(100):
        q = lambda shape, lo, hi: np.round(rng.uniform(lo, hi, shape) * 2**16) / 2**16  # noqa: E731
        bs = q(3, -50, 50)
        world = bs + q((int(rng.integers(1, 2000)), 3), -110, 190)
        ms = bs + np.array([q((), -90, 90), q((), 0, 130), -8.0])
        base = extract_panoramic(_cloud(world - bs), ms - bs, spec).g.tobytes()
        perm = extract_panoramic(_cloud((world - bs)[rng.permutation(len(world))]), ms - bs, spec).g.tobytes()
        shift = rng.integers(-1000, 1000, 3).astype(float)
        moved = extract_panoramic(_cloud((world + shift) - (bs + shift)), (ms + shift) - (bs + shift), spec).g.tobytes()
        invariant += base == perm == moved
    ok = marker_ok and mean_ok and empty_ok and invariant == 100
    report(6, ok, f"marker {marker_ok}, mean {mean_ok}, empty {empty_ok}, invariant clouds {invariant}/100")
    assert ok


# --- 7, 8, 9: desk-scale experiment ------------------------------------------------


@pytest.fixture(scope="module")
def desk(tmp_path_factory):
    cfg = hs.RunConfig(seed=0, train_envs=40, test_envs=10, train=hs.TrainConfig(epochs=DESK_EPOCHS))
    out = tmp_path_factory.mktemp("desk")
    summary = hs.run_experiment(cfg, out, "all")
    return cfg, out, summary


@pytest.mark.slow
def test_criterion_07_learning_signal(desk):
    _, _, summary = desk
    run = summary["runs"]["panoramic_f1"]
    acc = run["top_m"][5]
    ok = acc >= 10 * 5 / 900
    report(7, ok, f"held-out top-5 {acc:.2%} on {run['n_test']} samples (>= 5.56%), {DESK_EPOCHS} epochs")
    assert ok


@pytest.mark.slow
def test_criterion_08_accuracy_grows_with_training_size(desk):
    _, _, summary = desk
    rows = summary["fig5"]
    accs = [a for _, _, a in rows]
    steps = np.diff(accs)
    ok = [f for f, _, _ in rows] == [0.25, 0.5, 1.0] and bool(np.all(steps >= -0.02))
    curve = ", ".join(f"{f:g}: {a:.2%}" for f, _, a in rows)
    report(8, ok, f"top-5 by training fraction {curve}")
    assert ok


@pytest.mark.slow
def test_criterion_09_panoramic_beats_lidar(desk):
    _, _, summary = desk
    rows = summary["fig6"]
    by = {(m, s): (p, l) for m, s, p, l in rows}
    gaps = {(m, s): p - l for (m, s), (p, l) in by.items() if m in (1, 5, 10)}
    sign_ok = all(g >= 0 for g in gaps.values())
    near = max(abs(by[(m, 120.0)][1] - by[(m, 200.0)][1]) for m in (1, 5, 10))
    ok = sign_ok and near < 0.03
    worst = min(gaps.values())
    report(9, ok, f"smallest panoramic-minus-LIDAR gap {worst:+.2%} over M in (1,5,10); |S120 - S200| <= {near:.2%}")
    assert ok


# --- 10 -----------------------------------------------------------------------


def test_criterion_10_determinism(tmp_path):
    cfg = hs.RunConfig(
        seed=13,
        train_envs=2,
        test_envs=1,
        lidar=LidarScanConfig(azimuth_step=np.deg2rad(2.0)),
        train=hs.TrainConfig(epochs=1),
        experiment=hs.ExperimentConfig(m_values=(1, 5, 10), fig6_ranges=(60.0, 200.0)),
    )
    hs.save_config(cfg, tmp_path / "cfg.json")
    for run in ("a", "b"):
        assert cli_main(["--config", str(tmp_path / "cfg.json"), "--out", str(tmp_path / run), "experiment", "--mode", "all"]) == 0

    def files(root: Path):
        return sorted(p.relative_to(root) for p in root.rglob("*") if p.is_file() and (p.suffix in (".csv", ".bin", ".json")))

    a, b = files(tmp_path / "a"), files(tmp_path / "b")
    checked = [rel for rel in a if (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()]
    datasets = [rel for rel in a if rel.parts[0] == "datasets"]
    ok = a == b and len(checked) == len(a) and len(datasets) >= 3 and json.loads((tmp_path / "a/config.json").read_text())["seed"] == 13
    report(10, ok, f"{len(checked)}/{len(a)} dataset and report files byte-identical across two runs")
    assert ok
