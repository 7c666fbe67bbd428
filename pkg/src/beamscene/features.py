"""Voxel-grid scene features.

The panoramic feature lives in a cube fixed to the BS: every voxel stores the
mean local coordinates (relative to the voxel's min corner) of the points it
contains, and the MS voxel is overwritten with the negated MS local
coordinates. The LIDAR baseline uses the same encoding on a cube that follows
the MS, filled from a simulated scan, with the BS marked instead.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .scene import Environment, PointCloud

__all__ = [
    "VoxelGridSpec",
    "PanoramicFeature",
    "LidarScanConfig",
    "FeatureError",
    "default_grid_spec",
    "lidar_grid_spec",
    "voxel_index",
    "voxel_means",
    "mark_voxel",
    "voxelize",
    "extract_panoramic",
    "extract_lidar_feature",
    "scan_directions",
    "simulate_lidar_scan",
]

MARKER_FLOOR = 1e-6


class FeatureError(ValueError):
    pass


@dataclass(frozen=True)
class VoxelGridSpec:
    cube_min: tuple[float, float, float] = (-100.0, -20.0, -10.0)
    dims: tuple[float, float, float] = (200.0, 160.0, 30.0)
    divisions: tuple[int, int, int] = (40, 32, 6)

    def __post_init__(self):
        if min(self.dims) <= 0 or min(self.divisions) <= 0:
            raise ValueError("grid dims and divisions must be positive")

    @property
    def edge(self) -> np.ndarray:
        return np.asarray(self.dims, dtype=float) / np.asarray(self.divisions)

    @property
    def shape(self) -> tuple[int, int, int, int]:
        return (*self.divisions, 3)


def default_grid_spec() -> VoxelGridSpec:
    """BS-local cube C: 200 x 160 x 30 m split 40 x 32 x 6 (5 m voxels).

    With the BS at height 10 the cube spans world z in [0, 30] and covers
    both SA rows of the default layout.
    """
    return VoxelGridSpec()


def lidar_grid_spec(ms_height: float = 2.0, like: VoxelGridSpec | None = None) -> VoxelGridSpec:
    """MS-local cube of the same size, centred on the MS horizontally, floor at ground level."""
    like = like or default_grid_spec()
    lx, ly, _ = like.dims
    return VoxelGridSpec((-lx / 2, -ly / 2, -ms_height), like.dims, like.divisions)


@dataclass
class PanoramicFeature:
    g: np.ndarray  # (a, b, c, 3)
    marker_voxel: tuple[int, int, int]  # MS voxel (panoramic) or BS voxel (LIDAR)
    n_dropped: int = 0


@dataclass(frozen=True)
class LidarScanConfig:
    range_m: float = 200.0
    azimuth_step: float = np.deg2rad(0.2)
    elevation_min: float = np.deg2rad(-15.0)
    elevation_max: float = np.deg2rad(15.0)
    elevation_step: float = np.deg2rad(2.0)

    def __post_init__(self):
        if self.range_m <= 0 or self.azimuth_step <= 0 or self.elevation_step <= 0:
            raise ValueError("range and angular steps must be positive")


def _locate(points: np.ndarray, spec: VoxelGridSpec):
    """Voxel indices (K, 3), local coordinates (K, 3) and inside mask (K,)."""
    edge = spec.edge
    div = np.asarray(spec.divisions)
    rel = points - np.asarray(spec.cube_min, dtype=float)
    idx = np.floor(rel / edge).astype(np.int64)
    local = rel - idx * edge
    # division rounding can land a point one voxel off; restore the half-open rule
    low = local < 0
    idx[low] -= 1
    high = local >= edge
    idx[high] += 1
    local = rel - idx * edge
    local = np.clip(local, 0.0, np.nextafter(edge, 0))
    inside = np.all((idx >= 0) & (idx < div) & (rel >= 0) & (rel < np.asarray(spec.dims)), axis=1)
    return idx, local, inside


def voxel_index(point, spec: VoxelGridSpec):
    """``(i, j, k)`` of the voxel holding ``point`` (cube-local frame), or ``None`` outside."""
    idx, _, inside = _locate(np.asarray(point, dtype=float).reshape(1, 3), spec)
    if not inside[0]:
        return None
    return tuple(int(v) for v in idx[0])


def voxel_means(points: np.ndarray, spec: VoxelGridSpec) -> tuple[np.ndarray, int]:
    """Mean local coordinates per voxel, shape (a, b, c, 3), and the count of points outside the cube."""
    points = np.asarray(points, dtype=float).reshape(-1, 3)
    a, b, c = spec.divisions
    n_vox = a * b * c
    idx, local, inside = _locate(points, spec)
    flat = np.ravel_multi_index(idx[inside].T, (a, b, c)) if inside.any() else np.zeros(0, np.int64)
    local = local[inside]
    # fixed summation order, independent of the caller's point order
    order = np.lexsort((local[:, 2], local[:, 1], local[:, 0], flat))
    flat = flat[order]
    local = local[order]

    counts = np.bincount(flat, minlength=n_vox)
    g = np.zeros((n_vox, 3))
    for ch in range(3):
        g[:, ch] = np.bincount(flat, weights=local[:, ch], minlength=n_vox)
    filled = counts > 0
    g[filled] /= counts[filled, None]
    return g.reshape(a, b, c, 3), int((~inside).sum())


def mark_voxel(g: np.ndarray, marker, spec: VoxelGridSpec) -> tuple[int, int, int]:
    """Overwrite the voxel holding ``marker`` with its negated local coordinates (in place)."""
    m_idx, m_local, m_inside = _locate(np.asarray(marker, dtype=float).reshape(1, 3), spec)
    if not m_inside[0]:
        raise FeatureError(f"marker position {tuple(np.ravel(marker))} lies outside the grid cube")
    mv = tuple(int(v) for v in m_idx[0])
    # a marker exactly on a voxel corner would otherwise read as an empty voxel
    g[mv] = -np.maximum(m_local[0], MARKER_FLOOR)
    return mv


def voxelize(points: np.ndarray, marker, spec: VoxelGridSpec) -> PanoramicFeature:
    """Mean-local-coordinate grid with the ``marker`` voxel set to its negated local coordinates."""
    g, dropped = voxel_means(points, spec)
    mv = mark_voxel(g, marker, spec)
    return PanoramicFeature(g=g, marker_voxel=mv, n_dropped=dropped)


def extract_panoramic(cloud: PointCloud, ms_minus_bs, spec: VoxelGridSpec | None = None) -> PanoramicFeature:
    """Panoramic feature from a BS-relative cloud and the BS-relative MS position."""
    return voxelize(cloud.points, ms_minus_bs, spec or default_grid_spec())


def extract_lidar_feature(scan: PointCloud, bs_minus_ms, spec: VoxelGridSpec | None = None) -> PanoramicFeature:
    """Local feature from an MS-relative scan, with the BS voxel negatively marked."""
    return voxelize(scan.points, bs_minus_ms, spec or lidar_grid_spec())


def scan_directions(cfg: LidarScanConfig) -> np.ndarray:
    """Unit ray directions (n, 3) over the azimuth x elevation grid (elevation above horizon)."""
    az = np.arange(0.0, 2 * np.pi - 1e-12, cfg.azimuth_step)
    n_el = int(np.floor((cfg.elevation_max - cfg.elevation_min) / cfg.elevation_step + 1e-9)) + 1
    el = cfg.elevation_min + np.arange(n_el) * cfg.elevation_step
    A, E = np.meshgrid(az, el, indexing="ij")
    A, E = A.ravel(), E.ravel()
    return np.column_stack([np.cos(E) * np.sin(A), np.cos(E) * np.cos(A), np.sin(E)])


def ray_hits(origin: np.ndarray, dirs: np.ndarray, lo: np.ndarray, hi: np.ndarray, ground: bool = True):
    """Distance to the first building or ground hit along each ray (inf if none) and a ground-hit mask."""
    t_best = np.full(len(dirs), np.inf)
    if len(lo):
        o = origin[None, None, :]
        d = dirs[:, None, :]
        with np.errstate(divide="ignore", invalid="ignore"):
            t1 = (lo[None] - o) / d
            t2 = (hi[None] - o) / d
        tmin = np.minimum(t1, t2)
        tmax = np.maximum(t1, t2)
        par = d == 0
        if par.any():
            within = (o >= lo[None]) & (o <= hi[None])
            tmin = np.where(par, np.where(within, -np.inf, np.inf), tmin)
            tmax = np.where(par, np.where(within, np.inf, -np.inf), tmax)
        t_in = tmin.max(axis=2)
        t_out = tmax.min(axis=2)
        hit = (t_in <= t_out) & (t_in > 0)
        t_best = np.where(hit, t_in, np.inf).min(axis=1)
    if ground:
        down = dirs[:, 2] < 0
        with np.errstate(divide="ignore"):
            t_g = np.where(down, -origin[2] / np.where(down, dirs[:, 2], 1.0), np.inf)
        on_ground = t_g < t_best
        return np.minimum(t_best, t_g), on_ground
    return t_best, np.zeros(len(dirs), dtype=bool)


def simulate_lidar_scan(env: Environment, ms_pos, cfg: LidarScanConfig | None = None) -> PointCloud:
    """First-return scan from ``ms_pos``; returns points relative to the MS."""
    cfg = cfg or LidarScanConfig()
    ms_pos = np.asarray(ms_pos, dtype=float)
    if env.inside_building(ms_pos):
        raise FeatureError("scanner position lies inside a building")
    dirs = scan_directions(cfg)
    lo, hi = env.boxes()
    t, on_ground = ray_hits(ms_pos, dirs, lo, hi)
    keep = t <= cfg.range_m
    pts = dirs[keep] * t[keep, None]
    # ground returns sit exactly on z = 0 so they never round out of a cube floored there
    pts[on_ground[keep], 2] = -ms_pos[2]
    return PointCloud(pts, ms_pos.copy())
