"""RMSE, PSNR and SSIM, per slice and aggregated per volume."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

PSNR_CAP = 100.0  # display value for identical images


def _pair(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch {a.shape} vs {b.shape}")
    return a, b


def rmse(a, b) -> float:
    """Root of the *mean* squared difference."""
    a, b = _pair(a, b)
    return float(np.sqrt(np.mean((a - b) ** 2)))


def psnr(a, b, data_range: float) -> float:
    """20 log10(data_range / rmse); +inf when a == b."""
    if not data_range > 0:
        raise ValueError("data_range must be positive")
    e = rmse(a, b)
    if e == 0.0:
        return math.inf
    return 20.0 * math.log10(data_range / e)


def ssim_constants(data_range: float, convention: str = "standard") -> tuple[float, float]:
    if convention == "standard":
        return (0.01 * data_range) ** 2, (0.03 * data_range) ** 2
    if convention == "paper":
        # the unsquared values printed for 8-bit images (2.55, 7.65)
        return 0.01 * data_range, 0.03 * data_range
    raise ValueError(f"unknown SSIM constant convention {convention!r}")


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size, dtype=np.float64) - (size - 1) / 2.0
    g = np.exp(-(r**2) / (2 * sigma**2))
    w = np.outer(g, g)
    return w / w.sum()


def ssim_map(a, b, data_range: float, window: int = 11, sigma: float = 1.5, constants: str = "standard"):
    """Local SSIM over every fully-contained window position of a 2D pair."""
    a, b = _pair(a, b)
    if a.ndim != 2:
        raise ValueError("ssim works on 2D slices")
    if min(a.shape) < window:
        raise ValueError(f"image {a.shape} is smaller than the {window}x{window} window")
    c1, c2 = ssim_constants(data_range, constants)
    w = gaussian_window(window, sigma)
    h = window // 2
    crop = (slice(h, a.shape[0] - (window - 1 - h)), slice(h, a.shape[1] - (window - 1 - h)))

    def filt(img):
        return ndimage.correlate(img, w, mode="constant")[crop]

    # moments of the mean-shifted images: same values, without the
    # cancellation of E[a^2] - E[a]^2 at large intensities
    ca, cb = a.mean(), b.mean()
    da, db = a - ca, b - cb
    dmu_a, dmu_b = filt(da), filt(db)
    var_a = filt(da * da) - dmu_a**2
    var_b = filt(db * db) - dmu_b**2
    cov = filt(da * db) - dmu_a * dmu_b
    mu_a, mu_b = dmu_a + ca, dmu_b + cb
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2)
    return num / den


def ssim(a, b, data_range: float, window: int = 11, sigma: float = 1.5, constants: str = "standard") -> float:
    return float(np.mean(ssim_map(a, b, data_range, window, sigma, constants)))


def ssim_global(a, b, data_range: float, constants: str = "standard") -> float:
    """SSIM from whole-image statistics (population moments)."""
    a, b = _pair(a, b)
    c1, c2 = ssim_constants(data_range, constants)
    mu_a, mu_b = a.mean(), b.mean()
    var_a = np.mean((a - mu_a) ** 2)
    var_b = np.mean((b - mu_b) ** 2)
    cov = np.mean((a - mu_a) * (b - mu_b))
    return float(
        (2 * mu_a * mu_b + c1) * (2 * cov + c2) / ((mu_a**2 + mu_b**2 + c1) * (var_a + var_b + c2))
    )


@dataclass
class MetricReport:
    name: str
    data_range: float | str  # a number, or "slice" for per-slice ground-truth range
    per_slice: list[dict] = field(default_factory=list)  # index, psnr, ssim (x100), rmse

    def _col(self, key: str) -> np.ndarray:
        return np.array([row[key] for row in self.per_slice], dtype=np.float64)

    def mean(self, key: str) -> float:
        return float(self._col(key).mean())

    def std(self, key: str) -> float:
        """Population standard deviation."""
        return float(self._col(key).std())

    def summary(self) -> dict:
        return {k: {"mean": self.mean(k), "std": self.std(k)} for k in ("psnr", "ssim", "rmse")}

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "data_range": self.data_range,
            "summary": self.summary(),
            "per_slice": self.per_slice,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetricReport":
        return cls(d["name"], d["data_range"], list(d["per_slice"]))

    def to_tsv(self) -> str:
        lines = ["slice\tpsnr\tssim\trmse"]
        for r in self.per_slice:
            lines.append(f"{r['index']}\t{r['psnr']:.6f}\t{r['ssim']:.6f}\t{r['rmse']:.8f}")
        return "\n".join(lines) + "\n"


def resolve_data_range(gt_slice: np.ndarray, data_range) -> float:
    """Peak value for one ground-truth slice.

    ``data_range`` is a positive number (used as is), ``None``/``"volume"``
    (handled by the caller: ground-truth volume maximum) or ``"slice"``: the
    slice's own max - min, falling back to 1.0 for constant slices.
    """
    if data_range == "slice":
        span = float(gt_slice.max() - gt_slice.min())
        return span if span > 0 else 1.0
    value = float(data_range)
    if not value > 0:
        raise ValueError(f"data_range must be positive, got {data_range!r}")
    return value


def report_volume(recon, gt, data_range=None, name: str = "", constants: str = "standard") -> MetricReport:
    """Per-slice PSNR/SSIM/RMSE.

    data_range: number, ``None``/``"volume"`` (ground-truth maximum, 1.0 if the
    volume is non-positive) or ``"slice"`` (per-slice ground-truth max - min).
    """
    r = np.asarray(getattr(recon, "data", recon), dtype=np.float64)
    g = np.asarray(getattr(gt, "data", gt), dtype=np.float64)
    if r.shape != g.shape:
        raise ValueError(f"shape mismatch {r.shape} vs {g.shape}")
    if data_range is None or data_range == "volume":
        data_range = float(g.max()) if g.max() > 0 else 1.0
    rows = []
    for z in range(g.shape[0]):
        L = resolve_data_range(g[z], data_range)
        p = psnr(r[z], g[z], L)
        rows.append(
            {
                "index": z,
                "psnr": min(p, PSNR_CAP),
                "ssim": 100.0 * ssim(r[z], g[z], L, constants=constants),
                "rmse": rmse(r[z], g[z]),
            }
        )
    recorded = data_range if data_range == "slice" else float(data_range)
    return MetricReport(name, recorded, rows)


def save_reports(reports: list[MetricReport], path, method: str, provenance: dict | None = None) -> None:
    doc = {
        "method": method,
        "volumes": [r.to_dict() for r in reports],
        "average": split_average(reports),
    }
    if provenance is not None:
        doc["provenance"] = provenance
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2)
        fh.write("\n")


def load_reports(path) -> tuple[str, list[MetricReport]]:
    with open(path) as fh:
        doc = json.load(fh)
    return doc["method"], [MetricReport.from_dict(v) for v in doc["volumes"]]


def split_average(reports: list[MetricReport]) -> dict:
    """Average row: mean of per-volume means and mean of per-volume stds."""
    out = {}
    for k in ("psnr", "ssim", "rmse"):
        out[k] = {
            "mean": float(np.mean([r.mean(k) for r in reports])),
            "std": float(np.mean([r.std(k) for r in reports])),
        }
    return out


def format_table(methods: dict[str, list[MetricReport]], metric: str, label: str = "Phantom") -> str:
    """Per-volume ``mean±std`` rows plus an Average row, one column per method."""
    names = list(methods)
    header = f"{label} No | " + " | ".join(f"{metric.upper()} of {m}" for m in names)
    lines = [header, "-" * len(header)]
    n = max(len(v) for v in methods.values())
    for i in range(n):
        cells = []
        for m in names:
            reps = methods[m]
            cells.append(f"{reps[i].mean(metric):.2f}±{reps[i].std(metric):.2f}" if i < len(reps) else "-")
        lines.append(f"{label} {i + 1} | " + " | ".join(cells))
    lines.append("-" * len(header))
    avg = []
    for m in names:
        a = split_average(methods[m])[metric]
        avg.append(f"{a['mean']:.2f}±{a['std']:.2f}")
    lines.append("Average | " + " | ".join(avg))
    return "\n".join(lines) + "\n"
