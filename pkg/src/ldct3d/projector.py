"""Parallel-beam forward projector (ray marching with bilinear gathering), its
exact adjoint, and sinogram-domain AWGN.

The discretized operator is assembled once per (geometry, image size) as a
sparse matrix, so the backprojector is its transpose by construction.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
import scipy.sparse as sp

from .volume import ProjectionGeometry, SinogramStack, Volume3, derive_seed, make_rng

STEP = 1.0
_ANGLE_CHUNK = 16


@dataclass(frozen=True)
class NoiseSpec:
    snr_db: float = 35.0
    seed: int = 0
    reference: str = "stack"  # signal power over the whole stack, or "slice"

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError(f"snr_db must be finite or +inf, got {self.snr_db}")
        if self.reference not in ("stack", "slice"):
            raise ValueError(f"unknown noise reference {self.reference!r}")


def num_ray_samples(n: int) -> int:
    return int(math.ceil(n * math.sqrt(2.0))) + 2


def _angle_block(g: ProjectionGeometry, n: int, angles: np.ndarray) -> sp.csr_matrix:
    c = (n - 1) / 2.0
    k = num_ray_samples(n)
    tau = (np.arange(k, dtype=np.float64) - (k - 1) / 2.0) * STEP
    s = g.detector_offsets()
    cos, sin = np.cos(angles), np.sin(angles)
    # (angle, detector, sample) grid of ray points in pixel coordinates
    col = c + s[None, :, None] * cos[:, None, None] - tau[None, None, :] * sin[:, None, None]
    row = c + s[None, :, None] * sin[:, None, None] + tau[None, None, :] * cos[:, None, None]
    ray = (np.arange(len(angles))[:, None, None] * g.num_detectors + np.arange(g.num_detectors)[None, :, None])
    ray = np.broadcast_to(ray, col.shape)
    x0 = np.floor(col)
    y0 = np.floor(row)
    fx = col - x0
    fy = row - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    rows, cols, vals = [], [], []
    for dy, dx, w in (
        (0, 0, (1 - fy) * (1 - fx)),
        (0, 1, (1 - fy) * fx),
        (1, 0, fy * (1 - fx)),
        (1, 1, fy * fx),
    ):
        yi, xi = y0 + dy, x0 + dx
        keep = (yi >= 0) & (yi < n) & (xi >= 0) & (xi < n) & (w > 0)
        rows.append(ray[keep])
        cols.append(yi[keep] * n + xi[keep])
        vals.append(w[keep] * STEP)
    m = sp.coo_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=(len(angles) * g.num_detectors, n * n),
    )
    return m.tocsr()


@lru_cache(maxsize=3)
def system_matrix(g: ProjectionGeometry, n: int) -> sp.csr_matrix:
    """Sparse A with rows ordered (angle, detector) and columns (row, col) of an n x n slice."""
    angles = g.angles
    blocks = [
        _angle_block(g, n, angles[i : i + _ANGLE_CHUNK]) for i in range(0, len(angles), _ANGLE_CHUNK)
    ]
    return sp.vstack(blocks, format="csr")


def _check_square(shape) -> int:
    if shape[-1] != shape[-2]:
        raise ValueError(f"slices must be square, got {shape[-2]}x{shape[-1]}")
    return shape[-1]


def radon_stack(images: np.ndarray, g: ProjectionGeometry) -> np.ndarray:
    """(S, n, n) -> (S, angles, detectors)."""
    images = np.asarray(images, dtype=np.float64)
    n = _check_square(images.shape)
    a = system_matrix(g, n)
    flat = images.reshape(images.shape[0], n * n).T
    out = a @ flat
    return np.ascontiguousarray(out.T.reshape(images.shape[0], g.num_angles, g.num_detectors))


def backproject_stack(sinos: np.ndarray, g: ProjectionGeometry, out_size: int) -> np.ndarray:
    """Adjoint of radon_stack: (S, angles, detectors) -> (S, n, n)."""
    sinos = np.asarray(sinos, dtype=np.float64)
    if sinos.shape[1:] != (g.num_angles, g.num_detectors):
        raise ValueError(f"sinogram shape {sinos.shape[1:]} does not match geometry")
    a = system_matrix(g, out_size)
    flat = sinos.reshape(sinos.shape[0], -1).T
    out = a.T @ flat
    return np.ascontiguousarray(out.T.reshape(sinos.shape[0], out_size, out_size))


def radon_slice(img: np.ndarray, g: ProjectionGeometry) -> np.ndarray:
    img = np.asarray(img)
    if img.ndim != 2:
        raise ValueError("radon_slice expects a 2D image")
    return radon_stack(img[None], g)[0]


def backproject_slice(sino: np.ndarray, g: ProjectionGeometry, out_size: int) -> np.ndarray:
    sino = np.asarray(sino)
    if sino.shape != (g.num_angles, g.num_detectors):
        raise ValueError(f"sinogram shape {sino.shape} does not match geometry")
    return backproject_stack(sino[None], g, out_size)[0]


def radon_volume(v: Volume3, g: ProjectionGeometry) -> SinogramStack:
    """Independent 2D projection of every slice."""
    return SinogramStack(radon_stack(v.data, g), g)


def add_awgn(s: SinogramStack, n: NoiseSpec) -> SinogramStack:
    """s + N(0, sigma^2) with sigma^2 = mean(s^2) / 10^(snr_db / 10).

    Each slice draws from its own derived seed so the result does not depend on
    how slices are scheduled.
    """
    if n.snr_db == math.inf:
        return SinogramStack(s.data.copy(), s.geometry)
    data = np.asarray(s.data, dtype=np.float64)
    if n.reference == "stack":
        power = float(np.mean(data * data))
        if power == 0.0:
            raise ValueError("signal power is zero; SNR is undefined")
        sigmas = np.full(data.shape[0], math.sqrt(power / 10 ** (n.snr_db / 10)))
    else:
        powers = np.mean(data * data, axis=(1, 2))
        if np.any(powers == 0.0):
            raise ValueError("a slice has zero signal power; per-slice SNR is undefined")
        sigmas = np.sqrt(powers / 10 ** (n.snr_db / 10))
    out = np.empty_like(data)
    for z in range(data.shape[0]):
        rng = make_rng(derive_seed(n.seed, z))
        out[z] = data[z] + rng.normal(0.0, sigmas[z], size=data.shape[1:])
    return SinogramStack(out, s.geometry)
