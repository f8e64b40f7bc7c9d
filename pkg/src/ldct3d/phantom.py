"""Random 3D ellipsoid phantoms (3D analogue of the 2D random-ellipses dataset)."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .volume import Volume3, derive_seed, make_rng, save_volume


@dataclass(frozen=True)
class Ellipsoid:
    center: tuple[float, float, float]  # (cz, cy, cx) in [-1, 1]
    axes: tuple[float, float, float]  # (az, ay, ax), normalized semi-axes
    rotation: tuple[float, float, float]  # Euler angles (alpha, beta, gamma)
    intensity: float

    def __post_init__(self):
        if any(not a > 0 for a in self.axes):
            raise ValueError(f"semi-axes must be positive, got {self.axes}")


@dataclass(frozen=True)
class PhantomConfig:
    shape: tuple[int, int, int] = (128, 128, 128)
    count_mean: float = 114.0
    count_cap: int = 200
    intensity_range: tuple[float, float] = (-0.4, 1.0)
    axis_range: tuple[float, float] = (0.03, 0.35)
    # "uniform" draws semi-axes from axis_range; "exponential" draws
    # axis_scale * Exp(1) clipped to axis_range
    axis_distribution: str = "uniform"
    axis_scale: float = 0.2
    center_range: float = 0.8
    seed: int = 0

    def __post_init__(self):
        if self.count_cap < 1:
            raise ValueError("count_cap must be >= 1")
        if self.count_mean < 0:
            raise ValueError("count_mean must be >= 0")
        lo, hi = self.axis_range
        if not 0 < lo <= hi:
            raise ValueError(f"axis_range must satisfy 0 < lo <= hi, got {self.axis_range}")
        if self.axis_distribution not in ("uniform", "exponential"):
            raise ValueError(f"unknown axis_distribution {self.axis_distribution!r}")
        if len(self.shape) != 3 or min(self.shape) < 1:
            raise ValueError(f"bad phantom shape {self.shape}")


def rotation_matrix(angles) -> np.ndarray:
    """R = Rz(a) @ Ry(b) @ Rx(c), acting on (x, y, z) column vectors."""
    a, b, c = angles
    ca, sa = math.cos(a), math.sin(a)
    cb, sb = math.cos(b), math.sin(b)
    cc, sc = math.cos(c), math.sin(c)
    rz = np.array([[ca, -sa, 0.0], [sa, ca, 0.0], [0.0, 0.0, 1.0]])
    ry = np.array([[cb, 0.0, sb], [0.0, 1.0, 0.0], [-sb, 0.0, cb]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cc, -sc], [0.0, sc, cc]])
    return rz @ ry @ rx


def voxel_centers(n: int) -> np.ndarray:
    """Normalized voxel-center coordinates (i + 0.5) / n mapped to [-1, 1]."""
    return 2.0 * (np.arange(n, dtype=np.float64) + 0.5) / n - 1.0


def sample_count(cfg: PhantomConfig, rng: np.random.Generator) -> int:
    return int(min(rng.poisson(cfg.count_mean), cfg.count_cap))


def random_ellipsoid(cfg: PhantomConfig, rng: np.random.Generator) -> Ellipsoid:
    c = cfg.center_range
    center = tuple(rng.uniform(-c, c, 3))
    if cfg.axis_distribution == "uniform":
        axes = tuple(rng.uniform(cfg.axis_range[0], cfg.axis_range[1], 3))
    else:
        axes = tuple(np.clip(cfg.axis_scale * rng.exponential(1.0, 3), *cfg.axis_range))
    rotation = tuple(rng.uniform(0.0, 2 * math.pi, 3))
    intensity = float(rng.uniform(*cfg.intensity_range))
    return Ellipsoid(center, axes, rotation, intensity)


def _inside(e: Ellipsoid, z: np.ndarray, y: np.ndarray, x: np.ndarray) -> np.ndarray:
    # rows of r are the ellipsoid's body axes expressed in (x, y, z)
    r = rotation_matrix(e.rotation).T
    cz, cy, cx = e.center
    az, ay, ax = e.axes
    dx, dy, dz = x - cx, y - cy, z - cz
    q = 0.0
    for row, a in zip(r, (ax, ay, az)):
        u = row[0] * dx + row[1] * dy + row[2] * dz
        q = q + (u / a) ** 2
    return q <= 1.0


def _accumulate(out: np.ndarray, e: Ellipsoid) -> None:
    """Add e into out (float64), touching only the ellipsoid's bounding box."""
    r = rotation_matrix(e.rotation)
    half = np.sqrt((r**2) @ np.array(e.axes[::-1]) ** 2)  # extents along (x, y, z)
    extent = (half[2], half[1], half[0])
    sl, coords = [], []
    for n, c, h in zip(out.shape, e.center, extent):
        # one voxel of slack so the box never clips a boundary voxel
        lo = max(int(math.floor(((c - h) + 1.0) * n / 2.0 - 0.5)) - 1, 0)
        hi = min(int(math.ceil(((c + h) + 1.0) * n / 2.0 - 0.5)) + 2, n)
        if hi <= lo:
            return
        sl.append(slice(lo, hi))
        coords.append(voxel_centers(n)[lo:hi])
    z, y, x = np.meshgrid(*coords, indexing="ij")
    out[tuple(sl)] += np.where(_inside(e, z, y, x), e.intensity, 0.0)


def rasterize(e: Ellipsoid, shape) -> Volume3:
    out = np.zeros(tuple(shape), dtype=np.float64)
    _accumulate(out, e)
    return Volume3(out)


def cylinder_mask(shape) -> np.ndarray:
    """Boolean (H, W) disk of radius min(H, W)/2 around ((H-1)/2, (W-1)/2)."""
    _, h, w = shape
    yy = np.arange(h) - (h - 1) / 2.0
    xx = np.arange(w) - (w - 1) / 2.0
    r = min(h, w) / 2.0
    return (yy[:, None] ** 2 + xx[None, :] ** 2) <= r * r


def generate_phantom(cfg: PhantomConfig, rng: np.random.Generator) -> Volume3:
    """Sum of random ellipsoids, negatives clamped, max-normalized, cylinder-masked."""
    k = sample_count(cfg, rng)
    acc = np.zeros(cfg.shape, dtype=np.float64)
    for _ in range(k):
        _accumulate(acc, random_ellipsoid(cfg, rng))
    np.maximum(acc, 0.0, out=acc)
    peak = acc.max()
    if peak > 0:
        acc /= peak
    acc *= cylinder_mask(cfg.shape)[None]
    return Volume3(acc.astype(np.float32))


def phantom_from_seed(cfg: PhantomConfig, seed: int) -> tuple[Volume3, int]:
    """Regenerate a phantom from its per-volume seed; also returns the ellipsoid count."""
    count = sample_count(cfg, make_rng(seed))
    return generate_phantom(cfg, make_rng(seed)), count


def generate_dataset(
    cfg: PhantomConfig,
    out_dir,
    n_train: int = 192,
    n_val: int = 8,
    n_test: int = 20,
    seed: int | None = None,
) -> dict:
    """Write train/val/test phantoms plus ``manifest.json`` into out_dir.

    Volume i (numbered across all splits) uses seed derive_seed(seed, i).
    """
    seed = cfg.seed if seed is None else seed
    out = Path(out_dir)
    manifest = {"phantom": _cfg_dict(cfg), "seed": int(seed), "volumes": {}}
    idx = 0
    for split, n in (("train", n_train), ("val", n_val), ("test", n_test)):
        for _ in range(n):
            name = f"phantom_{idx:04d}"
            s = derive_seed(seed, idx)
            vol, count = phantom_from_seed(cfg, s)
            save_volume(vol, out / split / name)
            manifest["volumes"][name] = {"split": split, "seed": s, "ellipsoid_count": count}
            idx += 1
    out.mkdir(parents=True, exist_ok=True)
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def _cfg_dict(cfg: PhantomConfig) -> dict:
    d = asdict(cfg)
    return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}
