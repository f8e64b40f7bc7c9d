"""Volume and sinogram containers, seeding helpers and the raw+json file format.

Axis order is (slice z, row y, col x) for volumes and (slice, angle, detector)
for sinogram stacks, everywhere in the package.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

DEFAULT_SPACING = (1.5, 0.731, 0.731)
FORMAT_DTYPE = "f32le"


class VolumeFormatError(ValueError):
    """Malformed sidecar or payload."""


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator; streams are platform independent for a given numpy release."""
    return np.random.Generator(np.random.PCG64(int(seed)))


def derive_seed(seed: int, *keys: int) -> int:
    """Deterministic 64-bit child seed for (seed, keys...)."""
    ss = np.random.SeedSequence([int(seed) & (2**64 - 1), *(int(k) for k in keys)])
    return int(ss.generate_state(1, np.uint64)[0])


@dataclass(frozen=True)
class ProjectionGeometry:
    """Parallel-beam geometry: angles evenly spaced over [0, pi), endpoint excluded."""

    num_angles: int
    num_detectors: int
    detector_spacing: float = 1.0

    def __post_init__(self):
        if self.num_angles < 1 or self.num_detectors < 1:
            raise ValueError("num_angles and num_detectors must be >= 1")
        if not self.detector_spacing > 0:
            raise ValueError("detector_spacing must be positive")

    @property
    def angles(self) -> np.ndarray:
        return np.arange(self.num_angles, dtype=np.float64) * (math.pi / self.num_angles)

    def detector_offsets(self) -> np.ndarray:
        """Signed detector positions relative to the rotation center."""
        t = np.arange(self.num_detectors, dtype=np.float64)
        return (t - (self.num_detectors - 1) / 2.0) * self.detector_spacing

    def to_dict(self) -> dict:
        return {
            "num_angles": self.num_angles,
            "num_detectors": self.num_detectors,
            "detector_spacing": self.detector_spacing,
        }


@dataclass(frozen=True, eq=False)
class Volume3:
    data: np.ndarray
    spacing: tuple[float, float, float] = DEFAULT_SPACING

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3:
            raise ValueError(f"Volume3 needs a 3D array, got shape {data.shape}")
        if min(data.shape) < 1:
            raise ValueError(f"empty volume shape {data.shape}")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite values")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", tuple(float(s) for s in self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


@dataclass(frozen=True, eq=False)
class SinogramStack:
    data: np.ndarray
    geometry: ProjectionGeometry

    def __post_init__(self):
        data = np.asarray(self.data)
        g = self.geometry
        if data.ndim != 3 or data.shape[1] != g.num_angles or data.shape[2] != g.num_detectors:
            raise ValueError(
                f"sinogram shape {data.shape} does not match geometry "
                f"({g.num_angles} angles, {g.num_detectors} detectors)"
            )
        if not np.all(np.isfinite(data)):
            raise ValueError("sinogram contains non-finite values")
        object.__setattr__(self, "data", data)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


# ---------------------------------------------------------------- file format


def _paths(path) -> tuple[Path, Path]:
    p = Path(path)
    if p.suffix in (".json", ".raw"):
        p = p.with_suffix("")
    return p.with_name(p.name + ".json"), p.with_name(p.name + ".raw")


def _write(path, data: np.ndarray, header: dict) -> None:
    jpath, rpath = _paths(path)
    jpath.parent.mkdir(parents=True, exist_ok=True)
    payload = np.ascontiguousarray(data, dtype="<f4")
    rpath.write_bytes(payload.tobytes())
    jpath.write_text(json.dumps(header, indent=2) + "\n")


def _read(path, expected_order: str) -> tuple[np.ndarray, dict]:
    jpath, rpath = _paths(path)
    try:
        header = json.loads(jpath.read_text())
    except FileNotFoundError:
        raise
    except (json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise VolumeFormatError(f"{jpath}: malformed header ({exc})") from exc
    if not isinstance(header, dict):
        raise VolumeFormatError(f"{jpath}: header is not an object")
    shape = header.get("shape")
    if (
        not isinstance(shape, list)
        or len(shape) != 3
        or not all(isinstance(s, int) and s >= 1 for s in shape)
    ):
        raise VolumeFormatError(f"{jpath}: bad shape {shape!r}")
    if header.get("dtype") != FORMAT_DTYPE:
        raise VolumeFormatError(f"{jpath}: unsupported dtype {header.get('dtype')!r}")
    if header.get("order") != expected_order:
        raise VolumeFormatError(f"{jpath}: expected order {expected_order!r}, got {header.get('order')!r}")
    raw = rpath.read_bytes()
    n = shape[0] * shape[1] * shape[2]
    if len(raw) != 4 * n:
        raise VolumeFormatError(
            f"{rpath}: payload has {len(raw)} bytes, header declares {n} f32 elements ({4 * n} bytes)"
        )
    data = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
    return data, header


def save_volume(v: Volume3, path) -> None:
    """Write ``<path>.json`` + ``<path>.raw`` (little-endian float32, z-y-x)."""
    header = {
        "shape": [int(s) for s in v.shape],
        "dtype": FORMAT_DTYPE,
        "order": "zyx",
        "spacing_mm": [float(s) for s in v.spacing],
    }
    _write(path, v.data, header)


def load_volume(path) -> Volume3:
    data, header = _read(path, "zyx")
    spacing = header.get("spacing_mm", list(DEFAULT_SPACING))
    if not (isinstance(spacing, list) and len(spacing) == 3):
        raise VolumeFormatError(f"bad spacing_mm {spacing!r}")
    return Volume3(data, tuple(spacing))


def save_sinogram(s: SinogramStack, path) -> None:
    header = {
        "shape": [int(x) for x in s.shape],
        "dtype": FORMAT_DTYPE,
        "order": "z-angle-detector",
        "geometry": s.geometry.to_dict(),
    }
    _write(path, s.data, header)


def load_sinogram(path) -> SinogramStack:
    data, header = _read(path, "z-angle-detector")
    try:
        geom = ProjectionGeometry(**header["geometry"])
    except (KeyError, TypeError) as exc:
        raise VolumeFormatError(f"bad geometry block in sinogram header ({exc})") from exc
    return SinogramStack(data, geom)


# ----------------------------------------------------------- crop and patches


def crop_center(v: Volume3, target: Sequence[int]) -> Volume3:
    """Centered sub-volume; an odd remainder leaves the extra voxel on the high side."""
    target = tuple(int(t) for t in target)
    if len(target) != 3 or any(t < 1 or t > s for t, s in zip(target, v.shape)):
        raise ValueError(f"crop target {target} does not fit in shape {v.shape}")
    starts = [(s - t) // 2 for s, t in zip(v.shape, target)]
    sl = tuple(slice(a, a + t) for a, t in zip(starts, target))
    return Volume3(v.data[sl].copy(), v.spacing)


def iter_patch_offsets(shape: Sequence[int], patch: Sequence[int]) -> Iterator[tuple[int, int, int]]:
    for s, p in zip(shape, patch):
        if p < 1 or s % p:
            raise ValueError(f"shape {tuple(shape)} is not divisible by patch {tuple(patch)}")
    for z in range(0, shape[0], patch[0]):
        for y in range(0, shape[1], patch[1]):
            for x in range(0, shape[2], patch[2]):
                yield (z, y, x)


def patch_volume(v: Volume3, patch: Sequence[int]) -> list[tuple[tuple[int, int, int], Volume3]]:
    """Non-overlapping tiling, z-major then y then x."""
    patch = tuple(int(p) for p in patch)
    out = []
    for off in iter_patch_offsets(v.shape, patch):
        sl = tuple(slice(o, o + p) for o, p in zip(off, patch))
        out.append((off, Volume3(v.data[sl].copy(), v.spacing)))
    return out


def assemble_patches(patches, shape: Sequence[int], spacing=DEFAULT_SPACING) -> Volume3:
    """Paste patches back at their offsets."""
    first = patches[0][1].data
    out = np.zeros(tuple(shape), dtype=first.dtype)
    for off, p in patches:
        sl = tuple(slice(o, o + s) for o, s in zip(off, p.shape))
        out[sl] = p.data
    return Volume3(out, spacing)
