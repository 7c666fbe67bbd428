"""Randomized cell environments and synthetic panoramic point clouds.

World frame: x east, y north, z up, ground at z = 0. The BS sits at the
origin of the ground plane (raised to its mast height) and looks north
toward the MS track, which runs east-west between two rows of four
square areas (SAs) where buildings may be dropped.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

__all__ = [
    "BuildingSpec",
    "Building",
    "LayoutParams",
    "SceneLayout",
    "Environment",
    "PointCloud",
    "GenerationError",
    "make_building_catalog",
    "default_layout",
    "generate_environment",
    "ms_positions",
    "synthesize_point_cloud",
]

MAX_REDRAWS = 10_000
# 0-based indices of SA2 and SA3, the mid-row areas on the BS-MS sightline
BLOCKING_SAS = (1, 2)


class GenerationError(RuntimeError):
    """Raised when an environment cannot be drawn under the layout constraints."""


@dataclass(frozen=True)
class BuildingSpec:
    type_id: str
    length_m: float  # extent along x
    width_m: float  # extent along y
    height_m: float

    def __post_init__(self):
        if min(self.length_m, self.width_m, self.height_m) <= 0:
            raise ValueError(f"building dimensions must be positive: {self}")

    @property
    def size(self) -> np.ndarray:
        return np.array([self.length_m, self.width_m, self.height_m])


@dataclass(frozen=True)
class Building:
    spec: BuildingSpec
    min_corner: tuple[float, float, float]
    sa_index: int  # 1-based

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.min_corner, dtype=float)

    @property
    def hi(self) -> np.ndarray:
        return self.lo + self.spec.size

    def contains(self, p, strict: bool = True) -> bool:
        p = np.asarray(p, dtype=float)
        if strict:
            return bool(np.all(p > self.lo) and np.all(p < self.hi))
        return bool(np.all(p >= self.lo) and np.all(p <= self.hi))


@dataclass(frozen=True)
class LayoutParams:
    W: float = 36.5  # SA extent along x
    L: float = 35.6  # SA extent along y
    L_g: float = 5.0  # gap between SA columns
    rr_len: float = 80.0
    d: float = 0.5
    p: float = 60.0  # track offset from the BS
    q: float = 45.0  # far edge of the near row
    h_bs: float = 10.0
    h_ms: float = 2.0


@dataclass(frozen=True)
class SceneLayout:
    """Fixed geometry shared by every environment of a run.

    ``sa_rects`` holds one ``(xmin, ymin, xmax, ymax)`` row per SA, SA1 first.
    """

    sa_rects: np.ndarray
    bs_position: np.ndarray
    track_start: np.ndarray
    track_end: np.ndarray
    spacing: float
    params: LayoutParams = field(default_factory=LayoutParams)

    def __post_init__(self):
        rects = np.asarray(self.sa_rects, dtype=float)
        if rects.shape != (8, 4) or np.any(rects[:, 2:] <= rects[:, :2]):
            raise ValueError("sa_rects must be 8 non-degenerate (xmin, ymin, xmax, ymax) rows")
        for i in range(8):
            for j in range(i + 1, 8):
                if _rects_overlap(rects[i], rects[j]):
                    raise ValueError(f"SA{i + 1} and SA{j + 1} overlap")
        object.__setattr__(self, "sa_rects", rects)
        for name in ("bs_position", "track_start", "track_end"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))

    @property
    def track_length(self) -> float:
        return float(np.linalg.norm(self.track_end - self.track_start))


@dataclass(frozen=True)
class Environment:
    layout: SceneLayout
    buildings: tuple[Building, ...]
    seed: int

    @property
    def occupied(self) -> list[int]:
        return [b.sa_index for b in self.buildings]

    def boxes(self) -> tuple[np.ndarray, np.ndarray]:
        """Stacked ``(lo, hi)`` corner arrays of shape (n_buildings, 3)."""
        if not self.buildings:
            return np.zeros((0, 3)), np.zeros((0, 3))
        lo = np.array([b.lo for b in self.buildings])
        hi = np.array([b.hi for b in self.buildings])
        return lo, hi

    def inside_building(self, p) -> bool:
        return any(b.contains(p) for b in self.buildings)

    def to_dict(self) -> dict:
        return {
            "seed": int(self.seed),
            "buildings": [
                {
                    "type": b.spec.type_id,
                    "size": [b.spec.length_m, b.spec.width_m, b.spec.height_m],
                    "min_corner": [float(v) for v in b.min_corner],
                    "sa_index": b.sa_index,
                }
                for b in self.buildings
            ],
        }

    @classmethod
    def from_dict(cls, data: dict, layout: SceneLayout) -> "Environment":
        buildings = tuple(
            Building(
                BuildingSpec(b["type"], *b["size"]),
                tuple(float(v) for v in b["min_corner"]),
                int(b["sa_index"]),
            )
            for b in data["buildings"]
        )
        return cls(layout, buildings, int(data["seed"]))


@dataclass
class PointCloud:
    """Points of shape (K, 3), expressed relative to ``origin`` (world frame)."""

    points: np.ndarray
    origin: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=float).reshape(-1, 3)
        self.origin = np.asarray(self.origin, dtype=float)
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self) -> int:
        return len(self.points)


def _rects_overlap(a, b) -> bool:
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def make_building_catalog() -> list[BuildingSpec]:
    return [
        BuildingSpec("A", 25.6, 18.5, 25.0),
        BuildingSpec("B", 20.0, 14.0, 25.0),
        BuildingSpec("C", 12.0, 9.0, 15.0),
    ]


def default_layout(params: LayoutParams | None = None) -> SceneLayout:
    """Street-canyon layout: near row SA1..SA4 and far row SA5..SA8, west to east.

    Columns are ``W`` wide with ``L_g`` gaps, centred on x = 0. The near row
    ends at y = q, the track runs at y = p, and the far row mirrors the near
    row's clearance on the other side of the track.
    """
    lp = params or LayoutParams()
    total = 4 * lp.W + 3 * lp.L_g
    x0 = -total / 2
    near = (lp.q - lp.L, lp.q)
    far_lo = lp.p + (lp.p - lp.q)
    far = (far_lo, far_lo + lp.L)
    rects = []
    for ylo, yhi in (near, far):
        for c in range(4):
            xlo = x0 + c * (lp.W + lp.L_g)
            rects.append((xlo, ylo, xlo + lp.W, yhi))
    half = lp.rr_len / 2
    return SceneLayout(
        sa_rects=np.array(rects),
        bs_position=np.array([0.0, 0.0, lp.h_bs]),
        track_start=np.array([-half, lp.p, lp.h_ms]),
        track_end=np.array([half, lp.p, lp.h_ms]),
        spacing=lp.d,
        params=lp,
    )


def generate_environment(layout: SceneLayout, catalog: list[BuildingSpec], seed: int) -> Environment:
    """Draw 5 distinct SAs (at least one of SA2/SA3) and one random building in each."""
    rng = np.random.default_rng(seed)
    for _ in range(MAX_REDRAWS):
        chosen = rng.choice(8, size=5, replace=False)
        if any(s in chosen for s in BLOCKING_SAS):
            break
    else:
        raise GenerationError(f"no admissible SA draw after {MAX_REDRAWS} attempts (seed={seed})")

    buildings = []
    for sa in sorted(int(s) for s in chosen):
        spec = catalog[int(rng.integers(len(catalog)))]
        xlo, ylo, xhi, yhi = layout.sa_rects[sa]
        room_x = (xhi - xlo) - spec.length_m
        room_y = (yhi - ylo) - spec.width_m
        if room_x < 0 or room_y < 0:
            raise GenerationError(f"building type {spec.type_id} does not fit SA{sa + 1}")
        x = xlo + rng.uniform(0.0, room_x)
        y = ylo + rng.uniform(0.0, room_y)
        buildings.append(Building(spec, (float(x), float(y), 0.0), sa + 1))
    return Environment(layout, tuple(buildings), int(seed))


def ms_positions(layout: SceneLayout) -> np.ndarray:
    """Evenly spaced MS positions on the track, endpoints inclusive. Shape (n, 3)."""
    d = layout.spacing
    if d <= 0:
        raise ValueError("track spacing must be positive")
    length = layout.track_length
    steps = length / d
    n = int(round(steps))
    if abs(steps - n) > 1e-9 * max(1.0, steps):
        raise ValueError(f"spacing {d} does not divide track length {length}")
    direction = (layout.track_end - layout.track_start) / length
    return layout.track_start + np.outer(np.arange(n + 1) * d, direction)


def _face_grid(extent_u: float, extent_v: float, density: float):
    per_m = np.sqrt(density)
    nu = max(1, int(round(extent_u * per_m)))
    nv = max(1, int(round(extent_v * per_m)))
    u = (np.arange(nu) + 0.5) * (extent_u / nu)
    v = (np.arange(nv) + 0.5) * (extent_v / nv)
    uu, vv = np.meshgrid(u, v, indexing="ij")
    return uu.ravel(), vv.ravel()


def building_surface_points(building: Building, density: float) -> np.ndarray:
    """Cell-centred grid samples on the 4 walls and the roof (no ground face)."""
    lo, hi = building.lo, building.hi
    lx, ly, lz = hi - lo
    out = []
    # walls normal to x
    u, v = _face_grid(ly, lz, density)
    for x in (lo[0], hi[0]):
        out.append(np.column_stack([np.full_like(u, x), lo[1] + u, lo[2] + v]))
    # walls normal to y
    u, v = _face_grid(lx, lz, density)
    for y in (lo[1], hi[1]):
        out.append(np.column_stack([lo[0] + u, np.full_like(u, y), lo[2] + v]))
    u, v = _face_grid(lx, ly, density)
    out.append(np.column_stack([lo[0] + u, lo[1] + v, np.full_like(u, hi[2])]))
    return np.concatenate(out)


def synthesize_point_cloud(
    env: Environment, density: float = 1.0, noise_sigma: float = 0.05, seed: int = 0
) -> PointCloud:
    """Stand-in for per-building photogrammetric reconstruction.

    Every exposed face is sampled on a uniform grid of ``density`` points per
    square metre, then jittered with isotropic Gaussian noise. Points are
    returned relative to the BS position.
    """
    if density <= 0:
        raise ValueError("density must be positive")
    if noise_sigma < 0:
        raise ValueError("noise_sigma must be non-negative")
    rng = np.random.default_rng(seed)
    parts = [building_surface_points(b, density) for b in env.buildings]
    pts = np.concatenate(parts) if parts else np.zeros((0, 3))
    if noise_sigma > 0:
        pts = pts + rng.normal(0.0, noise_sigma, size=pts.shape)
    origin = env.layout.bs_position
    return PointCloud(pts - origin, origin.copy())
