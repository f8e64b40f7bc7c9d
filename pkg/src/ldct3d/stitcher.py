"""Blockwise inference with context margins.

Each block is forwarded with ``margin`` voxels of context on every side that
is not a volume boundary; only the interior paste window is written back.
When the margin covers the network's reach the result is identical to running
the whole volume at once.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import autodiff as ad
from .model import ModelSpec, predict
from .volume import Volume3


# context kept around each block when none is given: the reach the original
# slice-axis scheme budgeted for (a little under the default network's need)
DEFAULT_MARGIN = 70


@dataclass(frozen=True)
class StitchPlan:
    shape: tuple[int, ...]
    block: tuple[int, ...]
    margin: tuple[int, ...]
    # ((input start, stop) per axis, (paste start, stop) per axis)
    windows: tuple

    def write_counts(self) -> np.ndarray:
        counts = np.zeros(self.shape, dtype=np.int32)
        for _, paste in self.windows:
            counts[tuple(slice(a, b) for a, b in paste)] += 1
        return counts


def plan_axis(length: int, block: int, margin: int, align: int = 1) -> list[tuple[tuple[int, int], tuple[int, int]]]:
    """1D cover of [0, length) by input windows of size ``block``.

    Input windows start at multiples of ``align``; the last one is clamped to
    the end of the axis. Paste windows are disjoint and cover the axis.
    """
    if block >= length:
        return [((0, length), (0, length))]
    if margin < 0 or 2 * margin >= block:
        raise ValueError(f"margin {margin} must satisfy 0 <= 2 * margin < block {block}")
    if block % align or length % align:
        raise ValueError(f"block {block} and length {length} must be multiples of {align}")
    if block - 2 * margin < align:
        raise ValueError(f"block {block} leaves no room to advance with margin {margin} and alignment {align}")
    out = []
    start, paste = 0, 0
    while True:
        stop = start + block
        if stop >= length:
            out.append(((length - block, length), (paste, length)))
            return out
        paste_end = stop - margin
        out.append(((start, stop), (paste, paste_end)))
        paste = paste_end
        start = min(paste - margin, length - block)
        start -= start % align


def resolve_block(shape: Sequence[int], block: Sequence[int], margin: Sequence[int] | None = None, align: int = 1):
    """Expand 0 entries of ``block`` to the full axis and fill in a missing margin.

    The default margin is DEFAULT_MARGIN on blocked axes, reduced where the
    block is too small to advance, and 0 on axes processed whole.
    """
    shape, block = tuple(shape), tuple(block)
    if len(block) != len(shape):
        raise ValueError(f"block {block} does not match volume shape {shape}")
    block = tuple(s if b == 0 else b for b, s in zip(block, shape))
    if margin is None or len(margin) == 0:
        margin = tuple(0 if b >= s else max(0, min(DEFAULT_MARGIN, (b - align) // 2)) for b, s in zip(block, shape))
    return block, tuple(margin)


def plan_stitch(shape: Sequence[int], block: Sequence[int], margin: Sequence[int], align: int = 1) -> StitchPlan:
    shape, block, margin = tuple(shape), tuple(block), tuple(margin)
    if not len(shape) == len(block) == len(margin):
        raise ValueError("shape, block and margin need the same number of axes")
    per_axis = [plan_axis(s, b, m, align) for s, b, m in zip(shape, block, margin)]
    windows = []
    for combo in itertools.product(*per_axis):
        windows.append((tuple(c[0] for c in combo), tuple(c[1] for c in combo)))
    return StitchPlan(shape, tuple(min(b, s) for b, s in zip(block, shape)), margin, tuple(windows))


def stitched_forward(params, spec: ModelSpec, v: Volume3, plan: StitchPlan, exact: bool = True) -> Volume3:
    """Eval-mode forward of every input window, pasting back the interior."""
    if tuple(v.shape) != plan.shape:
        raise ValueError(f"plan is for shape {plan.shape}, volume has {v.shape}")
    dtype = params["head.weight"].dtype
    data = np.asarray(v.data, dtype=dtype)
    out = np.empty_like(data)
    with ad.exact_mode(exact):
        for inp, paste in plan.windows:
            y = predict(params, spec, data[tuple(slice(a, b) for a, b in inp)])
            local = tuple(slice(p0 - i0, p1 - i0) for (i0, _), (p0, p1) in zip(inp, paste))
            out[tuple(slice(a, b) for a, b in paste)] = y[local]
    return Volume3(out, v.spacing)


def whole_forward(params, spec: ModelSpec, v: Volume3, exact: bool = True) -> Volume3:
    dtype = params["head.weight"].dtype
    with ad.exact_mode(exact):
        y = predict(params, spec, np.asarray(v.data, dtype=dtype))
    return Volume3(y, v.spacing)
