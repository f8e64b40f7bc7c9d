"""Filtered back projection, slice by slice."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .projector import NoiseSpec, add_awgn, backproject_stack, radon_volume
from .volume import ProjectionGeometry, SinogramStack, Volume3

FILTERS = ("ramp", "hann", "hamming")


@dataclass(frozen=True)
class FilterSpec:
    kind: str = "hann"
    frequency_scaling: float = 0.8

    def __post_init__(self):
        kind = self.kind.lower()
        if kind not in FILTERS:
            raise ValueError(f"unknown filter {self.kind!r}; expected one of {FILTERS}")
        object.__setattr__(self, "kind", kind)
        if not 0 < self.frequency_scaling <= 1:
            raise ValueError("frequency_scaling must be in (0, 1]")


def padded_size(n_detectors: int) -> int:
    return 1 << max(1, int(math.ceil(math.log2(2 * n_detectors))))


def normalized_frequencies(size: int) -> np.ndarray:
    """|nu| per FFT bin, 1.0 at Nyquist."""
    return np.abs(np.fft.fftfreq(size)) * 2.0


def build_filter(n_detectors: int, f: FilterSpec) -> np.ndarray:
    """Frequency response over the padded FFT bins.

    The window argument is stretched to the passband (nu / d) and the response
    is cut to zero above d.
    """
    nu = normalized_frequencies(padded_size(n_detectors))
    d = f.frequency_scaling
    if f.kind == "ramp":
        window = np.ones_like(nu)
    elif f.kind == "hann":
        window = 0.5 * (1.0 + np.cos(np.pi * nu / d))
    else:
        window = 0.54 + 0.46 * np.cos(np.pi * nu / d)
    response = nu * window
    response[nu > d] = 0.0
    response[0] = 0.0
    return response


def filter_rows(rows: np.ndarray, f: FilterSpec) -> np.ndarray:
    """Zero-pad each row (last axis), multiply in the frequency domain, truncate."""
    rows = np.asarray(rows, dtype=np.float64)
    n = rows.shape[-1]
    h = build_filter(n, f)
    spec = np.fft.fft(rows, n=h.size, axis=-1)
    return np.real(np.fft.ifft(spec * h, axis=-1))[..., :n]


def fbp_stack(sinos: np.ndarray, g: ProjectionGeometry, f: FilterSpec, out_size: int) -> np.ndarray:
    sinos = np.asarray(sinos, dtype=np.float64)
    if sinos.shape[1:] != (g.num_angles, g.num_detectors):
        raise ValueError(f"sinogram shape {sinos.shape[1:]} does not match geometry")
    filtered = filter_rows(sinos, f)
    # Riemann weight over [0, pi). No detector-spacing factor: the ramp's 1/spacing
    # (physical frequency) cancels the transpose backprojector's ray density,
    # which also scales as 1/spacing.
    scale = math.pi / (2.0 * g.num_angles)
    return backproject_stack(filtered, g, out_size) * scale


def fbp_slice(sino: np.ndarray, g: ProjectionGeometry, f: FilterSpec, out_size: int) -> np.ndarray:
    sino = np.asarray(sino)
    if sino.ndim != 2:
        raise ValueError("fbp_slice expects a 2D sinogram")
    return fbp_stack(sino[None], g, f, out_size)[0]


def fbp_volume(s: SinogramStack, f: FilterSpec, out_size: int, spacing=None) -> Volume3:
    out = fbp_stack(s.data, s.geometry, f, out_size).astype(np.float32)
    return Volume3(out) if spacing is None else Volume3(out, spacing)


def simulate_fbp_input(gt: Volume3, g: ProjectionGeometry, noise: NoiseSpec, f: FilterSpec) -> Volume3:
    """Low-dose network input for a ground-truth volume: project, add noise, FBP."""
    if gt.shape[1] != gt.shape[2]:
        raise ValueError(f"slices must be square, got {gt.shape[1:]}")
    sino = add_awgn(radon_volume(gt, g), noise)
    return fbp_volume(sino, f, gt.shape[1], spacing=gt.spacing)
