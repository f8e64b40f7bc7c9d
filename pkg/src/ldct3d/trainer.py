"""L1 training with Adam, validation-based checkpoint selection, evaluation."""

from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .metrics import MetricReport, report_volume
from .model import ModelSpec, build, forward, load_checkpoint, predict, predict_slices, save_checkpoint
from .stitcher import plan_stitch, resolve_block, stitched_forward
from .volume import Volume3, derive_seed, load_volume, make_rng

log = logging.getLogger(__name__)

# epochs reported for the full-scale runs; informational presets only
PAPER_EPOCHS = {"3d-ellipses": 745, "3d-chest": 850, "2d-ellipses": 763, "2d-chest": 1500}
PAPER_BATCH = {"3d-ellipses": 4, "3d-chest": 3, "2d-ellipses": 3, "2d-chest": 2}


class NonFiniteLoss(RuntimeError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    batch_size: int = 4
    max_epochs: int = 745
    seed: int = 0
    checkpoint_every: int = 0
    early_stop_patience: int | None = None
    dtype: str = "float32"
    log_wall_time: bool = False  # wall-clock column breaks byte-identical logs

    def __post_init__(self):
        if not self.lr > 0:
            raise ValueError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("beta1 and beta2 must lie in [0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.dtype not in ("float32", "float64"):
            raise ValueError(f"unsupported dtype {self.dtype!r}")


@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0


def adam_step(params, grads: dict, st: AdamState, cfg: TrainConfig) -> None:
    """One bias-corrected Adam update, in place."""
    st.t += 1
    bc1 = 1.0 - cfg.beta1**st.t
    bc2 = 1.0 - cfg.beta2**st.t
    for name, p in params.items():
        if not p.requires_grad:
            continue
        g = grads.get(name)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape:
            raise ValueError(f"gradient for {name} has shape {g.shape}, parameter {p.data.shape}")
        if name not in st.m:
            st.m[name] = np.zeros_like(p.data)
            st.v[name] = np.zeros_like(p.data)
        m, v = st.m[name], st.v[name]
        m *= cfg.beta1
        m += (1 - cfg.beta1) * g
        v *= cfg.beta2
        v += (1 - cfg.beta2) * (g * g)
        p.data -= (cfg.lr * (m / bc1) / (np.sqrt(v / bc2) + cfg.adam_eps)).astype(p.data.dtype)


def collect_grads(params) -> dict:
    return {n: p.grad for n, p in params.items() if p.requires_grad and p.grad is not None}


def zero_grads(params) -> None:
    for p in params.values():
        p.grad = None


# --------------------------------------------------------------------- data


@dataclass
class PairedSplit:
    names: list
    inputs: list  # (D, H, W) arrays
    targets: list

    def __len__(self):
        return len(self.names)


def load_split(split_dir) -> PairedSplit:
    """Pairs ``<name>.input`` / ``<name>.target`` written by the simulate step."""
    d = Path(split_dir)
    names = sorted(p.name[: -len(".input.json")] for p in d.glob("*.input.json"))
    if not names:
        raise FileNotFoundError(f"no input/target pairs in {d}")
    inputs, targets = [], []
    for n in names:
        x = load_volume(d / f"{n}.input").data
        y = load_volume(d / f"{n}.target").data
        if x.shape != y.shape:
            raise ValueError(f"{n}: input {x.shape} and target {y.shape} differ")
        inputs.append(x)
        targets.append(y)
    return PairedSplit(names, inputs, targets)


def sample_index(split: PairedSplit, dims: int) -> list[tuple[int, int]]:
    """(volume, slice) pairs; slice is -1 for whole-volume 3D samples."""
    if dims == 3:
        return [(i, -1) for i in range(len(split))]
    return [(i, z) for i in range(len(split)) for z in range(split.inputs[i].shape[0])]


def _batch(split: PairedSplit, items, dtype):
    xs, ys = [], []
    for i, z in items:
        if z < 0:
            xs.append(split.inputs[i])
            ys.append(split.targets[i])
        else:
            xs.append(split.inputs[i][z])
            ys.append(split.targets[i][z])
    x = np.stack(xs)[:, None].astype(dtype)
    y = np.stack(ys)[:, None].astype(dtype)
    return x, y


def epoch_batches(n: int, batch_size: int, seed: int, epoch: int) -> list[np.ndarray]:
    """Seeded permutation of range(n) cut into batches (last one may be short)."""
    perm = make_rng(derive_seed(seed, epoch)).permutation(n)
    return [perm[i : i + batch_size] for i in range(0, n, batch_size)]


def validation_l1(params, spec: ModelSpec, split: PairedSplit, dtype, chunk: int = 8) -> float:
    """Mean L1 over every validation sample (eval-mode batch norm)."""
    index = sample_index(split, spec.dims)
    total = 0.0
    for i in range(0, len(index), chunk):
        items = index[i : i + chunk]
        x, y = _batch(split, items, dtype)
        out = forward(params, spec, Tensor(x), training=False)
        total += float(np.abs(out.data.astype(np.float64) - y).mean()) * len(items)
    return total / len(index)


@dataclass
class TrainResult:
    history: list  # (epoch, train_l1, val_l1, wall_seconds)
    best_epoch: int
    best_val: float
    params: object


def train(
    spec: ModelSpec,
    train_split: PairedSplit,
    val_split: PairedSplit | None,
    cfg: TrainConfig,
    out_dir=None,
    params=None,
) -> TrainResult:
    """Minimize mean L1 between network output and ground truth.

    Writes ``train.log`` and ``best``/``last`` checkpoints into out_dir when
    given. Raises NonFiniteLoss on a NaN/inf loss (last good checkpoint kept).
    """
    if len(train_split) == 0:
        raise ValueError("empty training set")
    dtype = np.dtype(cfg.dtype)
    if params is None:
        params = build(spec, make_rng(derive_seed(cfg.seed, 0xB11D)), dtype=dtype)
    out = Path(out_dir) if out_dir is not None else None
    logf = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        logf = open(out / "train.log", "w")
        logf.write("epoch,train_l1,val_l1,wall_seconds\n")
    index = sample_index(train_split, spec.dims)
    state = AdamState()
    history = []
    best_val, best_epoch, stale = math.inf, -1, 0
    t0 = time.perf_counter()
    try:
        for epoch in range(1, cfg.max_epochs + 1):
            total = 0.0
            for batch in epoch_batches(len(index), cfg.batch_size, cfg.seed, epoch):
                x, y = _batch(train_split, [index[i] for i in batch], dtype)
                loss = ad.l1_loss(forward(params, spec, Tensor(x), training=True), Tensor(y))
                value = float(loss.data)
                if not math.isfinite(value):
                    raise NonFiniteLoss(f"non-finite loss at epoch {epoch}")
                ad.backward(loss)
                adam_step(params, collect_grads(params), state, cfg)
                zero_grads(params)
                total += value * len(batch)
            train_l1 = total / len(index)
            val_l1 = validation_l1(params, spec, val_split, dtype) if val_split else train_l1
            wall = time.perf_counter() - t0 if cfg.log_wall_time else 0.0
            history.append((epoch, train_l1, val_l1, wall))
            if logf:
                logf.write(f"{epoch},{train_l1:.8e},{val_l1:.8e},{wall:.3f}\n")
                logf.flush()
            log.info("epoch %d train_l1 %.6f val_l1 %.6f", epoch, train_l1, val_l1)
            if val_l1 < best_val:
                best_val, best_epoch, stale = val_l1, epoch, 0
                if out is not None:
                    save_checkpoint(params, spec, out / "best", {"epoch": epoch, "val_l1": val_l1})
            else:
                stale += 1
            if out is not None and cfg.checkpoint_every and epoch % cfg.checkpoint_every == 0:
                save_checkpoint(params, spec, out / "last", {"epoch": epoch})
            if cfg.early_stop_patience is not None and stale >= cfg.early_stop_patience:
                log.info("early stop at epoch %d (best %d)", epoch, best_epoch)
                break
        if out is not None:
            save_checkpoint(params, spec, out / "last", {"epoch": history[-1][0]})
    finally:
        if logf:
            logf.close()
    return TrainResult(history, best_epoch, best_val, params)


# --------------------------------------------------------------- evaluation


def reconstruct(params, spec: ModelSpec | None, volume: np.ndarray, block=None, margin=None) -> np.ndarray:
    """Apply the network to one volume; ``spec=None`` is the FBP passthrough."""
    if spec is None:
        return np.asarray(volume)
    if spec.dims == 2:
        return predict_slices(params, spec, volume)
    if block is None:
        return predict(params, spec, volume)
    v = Volume3(volume)
    block, margin = resolve_block(v.shape, block, margin, align=spec.multiple)
    plan = plan_stitch(v.shape, block, margin, align=spec.multiple)
    return stitched_forward(params, spec, v, plan, exact=False).data


def evaluate(
    checkpoint, test_split: PairedSplit, data_range=1.0, block=None, margin=None, constants: str = "standard"
) -> list[MetricReport]:
    """Per-volume metric reports; ``checkpoint=None`` scores the FBP inputs."""
    if checkpoint is None:
        spec, params = None, None
    else:
        spec, params = load_checkpoint(checkpoint)
    reports = []
    for name, x, y in zip(test_split.names, test_split.inputs, test_split.targets):
        rec = reconstruct(params, spec, x, block, margin)
        reports.append(report_volume(rec, y, data_range, name=name, constants=constants))
    return reports
