"""Array processing: UPA steering vectors, geometric channels, codebooks, beam-pair labels.

Element ``(w, h)`` of an ``n_a x n_b`` UPA sits at flat index ``w * n_b + h``;
``w`` runs along the vertical (z) axis and ``h`` along x, both at half-wavelength
spacing. Codebook and label indices are 0-based.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .raytrace import Path

__all__ = [
    "UpaConfig",
    "Codebook",
    "BeamPairLabel",
    "LinkResult",
    "NoLinkError",
    "steering_vector",
    "steering_matrix",
    "channel_matrix",
    "build_codebook",
    "codebook_azimuths",
    "beam_pair_objective",
    "dense_objective",
    "optimal_pair",
    "receive_snr",
    "THERMAL_NOISE_W",
]

BOLTZMANN = 1.380649e-23
# kTB at 290 K over a nominal 100 MHz; only used for decorative SNR values
THERMAL_NOISE_W = BOLTZMANN * 290.0 * 100e6


class NoLinkError(ValueError):
    """The channel carries no energy (no paths, or all beam pairs give zero gain)."""


@dataclass(frozen=True)
class UpaConfig:
    n_a: int = 8
    n_b: int = 72

    def __post_init__(self):
        if self.n_a < 1 or self.n_b < 1:
            raise ValueError("array dimensions must be >= 1")

    @property
    def size(self) -> int:
        return self.n_a * self.n_b


@dataclass(frozen=True)
class Codebook:
    beams: np.ndarray  # (N, n_antennas)
    azimuths: np.ndarray  # (N,)
    alpha_hat: float

    def __len__(self) -> int:
        return len(self.beams)


@dataclass(frozen=True)
class BeamPairLabel:
    t_opt: int
    r_opt: int
    gain: float


@dataclass(frozen=True)
class LinkResult:
    rx_power: float
    noise_power: float
    snr: float


def steering_matrix(cfg: UpaConfig, theta, phi) -> np.ndarray:
    """Steering vectors for arrays of angles; shape ``theta.shape + (n_a * n_b,)``."""
    theta = np.asarray(theta, dtype=float)
    phi = np.asarray(phi, dtype=float)
    w = np.arange(cfg.n_a)
    h = np.arange(cfg.n_b)
    vert = np.cos(theta)[..., None] * w
    horiz = (np.sin(theta) * np.sin(phi))[..., None] * h
    phase = vert[..., :, None] + horiz[..., None, :]
    a = np.exp(1j * np.pi * phase) / np.sqrt(cfg.size)
    return a.reshape(theta.shape + (cfg.size,))


def steering_vector(cfg: UpaConfig, theta: float, phi: float) -> np.ndarray:
    return steering_matrix(cfg, theta, phi)


def _path_arrays(paths: Sequence[Path]):
    gains = np.array([p.gain for p in paths], dtype=complex)
    aod = np.array([p.aod for p in paths], dtype=float).reshape(-1, 2)
    aoa = np.array([p.aoa for p in paths], dtype=float).reshape(-1, 2)
    return gains, aod, aoa


def channel_matrix(paths: Sequence[Path], tx_cfg: UpaConfig, rx_cfg: UpaConfig) -> np.ndarray:
    """Dense ``H`` of shape (N_M, N_B): sum of ``gain * a_r a_t^H`` over paths."""
    if len(paths) == 0:
        raise NoLinkError("empty path list")
    gains, aod, aoa = _path_arrays(paths)
    a_t = steering_matrix(tx_cfg, aod[:, 0], aod[:, 1])
    a_r = steering_matrix(rx_cfg, aoa[:, 0], aoa[:, 1])
    return np.einsum("l,lm,ln->mn", gains, a_r, a_t.conj())


def codebook_azimuths(n_beams: int) -> np.ndarray:
    i = np.arange(1, n_beams + 1)
    return (2 * i - 2 - n_beams) / (2 * n_beams) * np.pi


def build_codebook(cfg: UpaConfig, n_beams: int, alpha_hat: float = np.deg2rad(95.0)) -> Codebook:
    """Equal-azimuth-interval codebook at a fixed elevation ``alpha_hat``."""
    if n_beams < 1:
        raise ValueError("n_beams must be >= 1")
    az = codebook_azimuths(n_beams)
    beams = steering_matrix(cfg, np.full(n_beams, alpha_hat), az)
    return Codebook(beams, az, float(alpha_hat))


def beam_pair_objective(
    paths: Sequence[Path],
    cb_tx: Codebook,
    cb_rx: Codebook,
    tx_cfg: UpaConfig | None = None,
    rx_cfg: UpaConfig | None = None,
) -> np.ndarray:
    """``|f_M,j^H H f_B,i|^2 / ||f_M,j||^2`` for every pair, shape (m, n) = (rx, tx).

    Evaluated in path-factored form so the dense channel is never built.
    """
    tx_cfg = tx_cfg or UpaConfig()
    rx_cfg = rx_cfg or UpaConfig()
    m, n = len(cb_rx), len(cb_tx)
    if len(paths) == 0:
        return np.zeros((m, n))
    gains, aod, aoa = _path_arrays(paths)
    a_t = steering_matrix(tx_cfg, aod[:, 0], aod[:, 1])
    a_r = steering_matrix(rx_cfg, aoa[:, 0], aoa[:, 1])
    u = cb_rx.beams.conj() @ a_r.T  # (m, L)
    v = a_t.conj() @ cb_tx.beams.T  # (L, n)
    amp = (u * gains) @ v
    norms = np.sum(np.abs(cb_rx.beams) ** 2, axis=1)
    return np.abs(amp) ** 2 / norms[:, None]


def dense_objective(H: np.ndarray, cb_tx: Codebook, cb_rx: Codebook) -> np.ndarray:
    """Reference evaluation of the same objective through the dense channel."""
    out = np.empty((len(cb_rx), len(cb_tx)))
    for j, f_m in enumerate(cb_rx.beams):
        for i, f_b in enumerate(cb_tx.beams):
            out[j, i] = abs(f_m.conj() @ H @ f_b) ** 2 / np.vdot(f_m, f_m).real
    return out


def optimal_pair(objective: np.ndarray) -> BeamPairLabel:
    """Exhaustive arg max; exact ties go to the smallest tx index, then rx index."""
    obj = np.asarray(objective, dtype=float)
    if obj.size == 0 or not np.all(np.isfinite(obj)):
        raise ValueError("objective must be non-empty and finite")
    if not np.any(obj > 0):
        raise NoLinkError("every beam pair has zero gain")
    flat = obj.T.ravel()  # tx-major
    k = int(np.argmax(flat))
    t, r = divmod(k, obj.shape[0])
    label = BeamPairLabel(t_opt=t, r_opt=r, gain=float(obj[r, t]))
    assert label.gain >= obj.max()
    return label


def receive_snr(
    paths: Sequence[Path],
    f_tx: np.ndarray,
    f_rx: np.ndarray,
    tx_power: float = 1.0,
    sigma2: float = THERMAL_NOISE_W,
    tx_cfg: UpaConfig | None = None,
    rx_cfg: UpaConfig | None = None,
) -> LinkResult:
    if sigma2 <= 0:
        raise ValueError("sigma2 must be positive")
    H = channel_matrix(paths, tx_cfg or UpaConfig(), rx_cfg or UpaConfig())
    p = tx_power * abs(np.conj(f_rx) @ H @ f_tx) ** 2
    return LinkResult(rx_power=float(p), noise_power=float(sigma2), snr=float(p / sigma2))
