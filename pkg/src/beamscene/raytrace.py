"""Specular image-method ray tracer over axis-aligned cuboid buildings.

Reflectors are the four walls and the roof of every building plus, optionally,
the ground plane z = 0. Paths up to second order are constructed by mirroring
the transmitter across the reflector planes and back-tracing from the
receiver; every leg is then checked for occlusion against all buildings.

Angles follow one global convention: elevation is measured from +z, azimuth
from +y toward +x, range (-pi, pi]. The AoD points from the transmitter along
the first leg; the AoA points from the receiver back along the last leg.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .scene import Environment

__all__ = [
    "SPEED_OF_LIGHT",
    "TraceConfig",
    "Path",
    "Plane",
    "TraceError",
    "los_blocked",
    "segments_blocked",
    "mirror_point",
    "reflectors",
    "path_gain",
    "direction_angles",
    "trace_paths",
    "trace_many",
]

SPEED_OF_LIGHT = 299_792_458.0
EDGE_MARGIN = 1e-9  # metres; reflection points closer than this to a face edge are dropped
ENDPOINT_MARGIN = 1e-9  # metres trimmed off each end of a leg before the occlusion test


class TraceError(ValueError):
    pass


@dataclass(frozen=True)
class TraceConfig:
    carrier_hz: float = 60e9
    max_reflection_order: int = 2
    max_paths: int = 25
    reflection_coeff_mag: float = 0.3
    include_ground: bool = True

    def __post_init__(self):
        if self.max_paths < 1:
            raise ValueError("max_paths must be >= 1")
        if not 0 < self.reflection_coeff_mag < 1:
            raise ValueError("reflection_coeff_mag must lie in (0, 1)")
        if self.max_reflection_order not in (0, 1, 2):
            raise ValueError("max_reflection_order must be 0, 1 or 2")

    @property
    def wavelength(self) -> float:
        return SPEED_OF_LIGHT / self.carrier_hz


@dataclass
class Path:
    gain: complex
    aod: tuple[float, float]  # (elevation, azimuth)
    aoa: tuple[float, float]
    length_m: float
    bounces: int
    vertices: np.ndarray = field(repr=False)


@dataclass(frozen=True)
class Plane:
    """Axis-aligned reflector: ``x[axis] == coord`` with outward ``normal`` (+1/-1).

    ``lo``/``hi`` bound the face along the two remaining axes (in increasing
    axis order); use infinities for an unbounded plane.
    """

    axis: int
    coord: float
    normal: int = 1
    lo: tuple[float, float] = (-np.inf, -np.inf)
    hi: tuple[float, float] = (np.inf, np.inf)

    @property
    def other_axes(self) -> tuple[int, int]:
        return tuple(a for a in range(3) if a != self.axis)

    def outward(self, pts: np.ndarray) -> np.ndarray:
        """Signed distance along the outward normal."""
        return self.normal * (pts[..., self.axis] - self.coord)

    def inside_face(self, pts: np.ndarray) -> np.ndarray:
        ok = np.ones(pts.shape[:-1], dtype=bool)
        for k, a in enumerate(self.other_axes):
            ok &= (pts[..., a] > self.lo[k] + EDGE_MARGIN) & (pts[..., a] < self.hi[k] - EDGE_MARGIN)
        return ok


def mirror_point(p, plane) -> np.ndarray:
    """Reflect ``p`` across an axis-aligned plane (a :class:`Plane` or ``(axis, coord)``)."""
    axis, coord = (plane.axis, plane.coord) if isinstance(plane, Plane) else plane
    out = np.array(p, dtype=float, copy=True)
    out[..., axis] = 2.0 * coord - out[..., axis]
    return out


def reflectors(env: Environment, include_ground: bool = True) -> list[Plane]:
    planes = []
    for b in env.buildings:
        lo, hi = b.lo, b.hi
        for axis in (0, 1):
            o = [a for a in range(3) if a != axis]
            bounds = dict(lo=(lo[o[0]], lo[o[1]]), hi=(hi[o[0]], hi[o[1]]))
            planes.append(Plane(axis, float(lo[axis]), -1, **bounds))
            planes.append(Plane(axis, float(hi[axis]), +1, **bounds))
        planes.append(Plane(2, float(hi[2]), +1, (lo[0], lo[1]), (hi[0], hi[1])))
    if include_ground:
        planes.append(Plane(2, 0.0, +1))
    return planes


def segments_blocked(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    """Slab test of open segments ``(a_r, b_r)`` against closed boxes.

    ``a``, ``b`` have shape (R, 3); ``lo``, ``hi`` shape (B, 3). Returns (R,) bool.
    Touching a box surface counts as a hit, except within ``ENDPOINT_MARGIN``
    of either endpoint so legs that start on a reflecting face are not blocked
    by that face.
    """
    a = np.atleast_2d(a)
    b = np.atleast_2d(b)
    if len(lo) == 0:
        return np.zeros(len(a), dtype=bool)
    d = (b - a)[:, None, :]
    a3 = a[:, None, :]
    with np.errstate(divide="ignore", invalid="ignore"):
        t1 = (lo[None] - a3) / d
        t2 = (hi[None] - a3) / d
    tmin = np.minimum(t1, t2)
    tmax = np.maximum(t1, t2)
    parallel = d == 0
    if parallel.any():
        within = (a3 >= lo[None]) & (a3 <= hi[None])
        tmin = np.where(parallel, np.where(within, -np.inf, np.inf), tmin)
        tmax = np.where(parallel, np.where(within, np.inf, -np.inf), tmax)
    t_enter = tmin.max(axis=2)
    t_exit = tmax.min(axis=2)
    seg_len = np.linalg.norm(d[:, 0, :], axis=1)[:, None]
    eps = ENDPOINT_MARGIN / np.maximum(seg_len, 1e-300)
    hit = (t_enter <= t_exit) & (t_exit > eps) & (t_enter < 1.0 - eps)
    return hit.any(axis=1)


def los_blocked(env: Environment, a, b) -> bool:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if np.array_equal(a, b):
        raise ValueError("segment endpoints coincide")
    lo, hi = env.boxes()
    return bool(segments_blocked(a[None], b[None], lo, hi)[0])


def path_gain(length_m: float, bounces: int, cfg: TraceConfig) -> complex:
    if np.any(np.asarray(length_m) <= 0):
        raise ValueError("path length must be positive")
    lam = cfg.wavelength
    amp = lam / (4 * np.pi * length_m) * cfg.reflection_coeff_mag**bounces
    return amp * np.exp(-2j * np.pi * length_m / lam)


def direction_angles(v: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """(elevation from +z, azimuth from +y toward +x) of direction vectors (..., 3)."""
    r = np.linalg.norm(v, axis=-1)
    el = np.arccos(np.clip(v[..., 2] / r, -1.0, 1.0))
    az = np.arctan2(v[..., 0], v[..., 1])
    az = np.where(az == -np.pi, np.pi, az)
    return el, az


def _candidates(seq, tx, rxs, lo, hi):
    """Vertices (R, k+2, 3) and validity mask (R,) for one reflector sequence."""
    images = [tx]
    for plane in seq:
        images.append(mirror_point(images[-1], plane))

    R = len(rxs)
    valid = np.ones(R, dtype=bool)
    verts = [rxs]
    cur = rxs
    for i in range(len(seq), 0, -1):
        plane = seq[i - 1]
        src = images[i]
        ax = plane.axis
        denom = src[ax] - cur[:, ax]
        with np.errstate(divide="ignore", invalid="ignore"):
            t = (plane.coord - cur[:, ax]) / denom
            q = cur + t[:, None] * (src - cur)
        valid &= (denom != 0) & (t > 0) & (t < 1)
        q[:, ax] = plane.coord
        valid &= plane.inside_face(q)
        verts.append(q)
        cur = q
    verts.append(np.broadcast_to(tx, rxs.shape))
    v = np.stack(verts[::-1], axis=1)  # tx, q1..qk, rx

    for i, plane in enumerate(seq, start=1):
        valid &= plane.outward(v[:, i - 1]) > 0
        valid &= plane.outward(v[:, i + 1]) > 0
    # a NaN vertex from a rejected row must not poison the occlusion test
    v = np.where(valid[:, None, None], v, 0.0)
    for i in range(v.shape[1] - 1):
        if not valid.any():
            break
        idx = np.flatnonzero(valid)
        blocked = segments_blocked(v[idx, i], v[idx, i + 1], lo, hi)
        valid[idx[blocked]] = False
    return v, valid


def _sequences(planes: list[Plane], tx: np.ndarray, order: int):
    if order == 0:
        yield ()
        return
    for p in planes:
        if p.outward(tx) > 0:
            if order == 1:
                yield (p,)
            else:
                for p2 in planes:
                    if p2 is not p and _face_reaches_front(p, p2):
                        yield (p, p2)


def _face_reaches_front(face: Plane, other: Plane) -> bool:
    """Whether some point of ``face`` lies strictly on the outward side of ``other``."""
    if face.axis == other.axis:
        return other.normal * (face.coord - other.coord) > 0
    k = face.other_axes.index(other.axis)
    extreme = face.hi[k] if other.normal > 0 else face.lo[k]
    return other.normal * (extreme - other.coord) > 0


def trace_many(env: Environment, tx, rxs, cfg: TraceConfig | None = None, truncate: bool = True) -> list[list[Path]]:
    """Trace from one transmitter to many receivers; one sorted path list per receiver."""
    cfg = cfg or TraceConfig()
    tx = np.asarray(tx, dtype=float)
    rxs = np.atleast_2d(np.asarray(rxs, dtype=float))
    if env.inside_building(tx):
        raise TraceError("transmitter lies inside a building")
    for r in rxs:
        if env.inside_building(r):
            raise TraceError(f"receiver {r} lies inside a building")
        if np.array_equal(r, tx):
            raise TraceError("transmitter and receiver coincide")

    lo, hi = env.boxes()
    planes = reflectors(env, cfg.include_ground)
    R = len(rxs)
    found: list[list[tuple]] = [[] for _ in range(R)]
    order_key = 0
    for order in range(cfg.max_reflection_order + 1):
        for seq in _sequences(planes, tx, order):
            v, valid = _candidates(seq, tx, rxs, lo, hi)
            for r in np.flatnonzero(valid):
                found[r].append((order_key, len(seq), v[r]))
            order_key += 1

    out = []
    for r in range(R):
        paths = [_make_path(verts, bounces, cfg) for _, bounces, verts in found[r]]
        if paths:
            mags = np.array([abs(p.gain) for p in paths])
            lengths = np.array([p.length_m for p in paths])
            keys = np.arange(len(paths))
            order = np.lexsort((keys, lengths, -mags))
            paths = [paths[i] for i in order]
        if truncate:
            paths = paths[: cfg.max_paths]
        out.append(paths)
    return out


def _make_path(verts: np.ndarray, bounces: int, cfg: TraceConfig) -> Path:
    verts = np.array(verts)
    length = float(np.linalg.norm(np.diff(verts, axis=0), axis=1).sum())
    el_d, az_d = direction_angles(verts[1] - verts[0])
    el_a, az_a = direction_angles(verts[-2] - verts[-1])
    return Path(
        gain=complex(path_gain(length, bounces, cfg)),
        aod=(float(el_d), float(az_d)),
        aoa=(float(el_a), float(az_a)),
        length_m=length,
        bounces=bounces,
        vertices=verts,
    )


def trace_paths(env: Environment, tx, rx, cfg: TraceConfig | None = None, truncate: bool = True) -> list[Path]:
    """LOS plus specular reflections up to ``cfg.max_reflection_order``, strongest first."""
    return trace_many(env, tx, np.asarray(rx, dtype=float)[None], cfg, truncate)[0]
