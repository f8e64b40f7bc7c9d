"""3D U-NetR and its 2D U-Net counterpart.

Layout for depth L and base width f (widths f * 2**l, bottleneck f * 2**L):

    enc{l}:   [conv3 -> BN -> lrelu] x 2          then 2x max pool
    bottleneck: [conv3 -> BN -> lrelu] x 2
    skip{l}:  conv1 -> BN -> lrelu                 (width preserving)
    dec{l}:   upsample x2, concat with skip{l}, [conv3 -> BN -> lrelu] x 2
    head:     conv1 (f -> 1) -> BN, plus the network input (global shortcut)
"""

from __future__ import annotations

import json
import math
from collections import OrderedDict
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor

CHECKPOINT_VERSION = 1
PAPER_RECEPTIVE_FIELD = 140


@dataclass(frozen=True)
class ModelSpec:
    dims: int = 3
    depth: int = 4
    base_filters: int = 16
    leaky_slope: float = 0.01
    global_residual: bool = True
    head_bn: bool = True
    bn_momentum: float = 0.1
    bn_eps: float = 1e-5

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ValueError(f"dims must be 2 or 3, got {self.dims}")
        if self.depth < 1 or self.base_filters < 1:
            raise ValueError("depth and base_filters must be >= 1")

    def width(self, level: int) -> int:
        return self.base_filters * 2**level

    @property
    def multiple(self) -> int:
        """Spatial dims must be divisible by this."""
        return 2**self.depth


ModelParams = "OrderedDict[str, Tensor]"


def _layer_plan(spec: ModelSpec):
    """(name, kind, in_ch, out_ch, kernel) for every conv, in parameter order."""
    plan = []
    prev = 1
    for lvl in range(spec.depth):
        w = spec.width(lvl)
        plan.append((f"enc{lvl}.0", prev, w, 3))
        plan.append((f"enc{lvl}.1", w, w, 3))
        prev = w
    wb = spec.width(spec.depth)
    plan.append(("bottleneck.0", prev, wb, 3))
    plan.append(("bottleneck.1", wb, wb, 3))
    for lvl in range(spec.depth):
        w = spec.width(lvl)
        plan.append((f"skip{lvl}", w, w, 1))
    below = wb
    for lvl in reversed(range(spec.depth)):
        w = spec.width(lvl)
        plan.append((f"dec{lvl}.0", below + w, w, 3))
        plan.append((f"dec{lvl}.1", w, w, 3))
        below = w
    plan.append(("head", spec.base_filters, 1, 1))
    return plan


def build(spec: ModelSpec, rng: np.random.Generator, dtype=np.float32) -> "OrderedDict[str, Tensor]":
    """Parameters with fan-in scaled normal conv weights, zero biases, unit BN."""
    params: OrderedDict[str, Tensor] = OrderedDict()
    for name, cin, cout, k in _layer_plan(spec):
        shape = (cout, cin) + (k,) * spec.dims
        fan_in = cin * k**spec.dims
        w = rng.normal(0.0, math.sqrt(2.0 / fan_in), size=shape).astype(dtype)
        params[f"{name}.weight"] = Tensor(w, requires_grad=True)
        params[f"{name}.bias"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
        if name != "head" or spec.head_bn:
            params[f"{name}.bn.gamma"] = Tensor(np.ones(cout, dtype), requires_grad=True)
            params[f"{name}.bn.beta"] = Tensor(np.zeros(cout, dtype), requires_grad=True)
            params[f"{name}.bn.running_mean"] = Tensor(np.zeros(cout, dtype))
            params[f"{name}.bn.running_var"] = Tensor(np.ones(cout, dtype))
    return params


def count_params(params) -> int:
    """Learnable elements only (running statistics excluded)."""
    return int(sum(t.data.size for t in params.values() if t.requires_grad))


def _block(params, name, x, spec: ModelSpec, training: bool, act: bool = True) -> Tensor:
    y = ad.conv(x, params[f"{name}.weight"], params[f"{name}.bias"])
    if f"{name}.bn.gamma" in params:
        y = ad.batchnorm(
            y,
            params[f"{name}.bn.gamma"],
            params[f"{name}.bn.beta"],
            params[f"{name}.bn.running_mean"].data,
            params[f"{name}.bn.running_var"].data,
            training,
            spec.bn_momentum,
            spec.bn_eps,
        )
    return ad.leaky_relu(y, spec.leaky_slope) if act else y


def forward(params, spec: ModelSpec, x, training: bool = False) -> Tensor:
    """Map x of shape (N, 1, *S) to a same-shaped output."""
    x = x if isinstance(x, Tensor) else Tensor(x)
    if x.ndim != spec.dims + 2 or x.shape[1] != 1:
        raise ValueError(f"expected input (N, 1, {'D, ' if spec.dims == 3 else ''}H, W), got {x.shape}")
    if any(s % spec.multiple for s in x.shape[2:]):
        raise ValueError(f"spatial dims {x.shape[2:]} must be divisible by {spec.multiple}")
    skips = []
    h = x
    for lvl in range(spec.depth):
        h = _block(params, f"enc{lvl}.0", h, spec, training)
        h = _block(params, f"enc{lvl}.1", h, spec, training)
        skips.append(_block(params, f"skip{lvl}", h, spec, training))
        h = ad.maxpool(h)
    h = _block(params, "bottleneck.0", h, spec, training)
    h = _block(params, "bottleneck.1", h, spec, training)
    for lvl in reversed(range(spec.depth)):
        h = ad.concat_channels(ad.upsample(h), skips[lvl])
        h = _block(params, f"dec{lvl}.0", h, spec, training)
        h = _block(params, f"dec{lvl}.1", h, spec, training)
    out = _block(params, "head", h, spec, training, act=False)
    return ad.add(out, x) if spec.global_residual else out


def predict(params, spec: ModelSpec, volume: np.ndarray) -> np.ndarray:
    """Eval-mode forward of a single (D, H, W) or (H, W) array."""
    x = np.asarray(volume, dtype=params["head.weight"].dtype)[None, None]
    return forward(params, spec, Tensor(x), training=False).data[0, 0]


def predict_slices(params, spec: ModelSpec, volume: np.ndarray, batch: int = 8) -> np.ndarray:
    """2D model applied slice by slice to a (D, H, W) volume."""
    vol = np.asarray(volume, dtype=params["head.weight"].dtype)
    out = np.empty_like(vol)
    for z in range(0, vol.shape[0], batch):
        x = Tensor(vol[z : z + batch, None])
        out[z : z + batch] = forward(params, spec, x, training=False).data[:, 0]
    return out


def zero_head(params) -> None:
    """Zero the output conv so the network reduces to its global shortcut (eval mode)."""
    params["head.weight"].data[...] = 0
    params["head.bias"].data[...] = 0


# ---------------------------------------------------------- receptive field


@dataclass(frozen=True)
class ReceptiveField:
    rf: int  # full input window that can influence one output voxel
    reach: int  # one-sided extent: output x depends on inputs within x +/- reach
    encoder_rf: int  # classic (kernel, stride) composition through the bottleneck
    paper_value: int
    history: tuple  # (layer, scale, reach) along the longest path

    @property
    def matches_paper(self) -> bool:
        return self.rf == self.paper_value

    @property
    def safe_margin(self) -> int:
        return int(math.ceil(self.rf / 2))


def layers_reach(layers, scale: int = 1, reach: int = 0):
    """Propagate the one-sided dependency reach through a layer sequence.

    Layers are ("conv", k), ("pool", 2) or ("up", 2). ``scale`` is the size of
    one current-grid cell in input voxels. A conv adds scale * (k - 1) / 2 on
    each side; pooling only changes the scale; x2 linear upsampling adds one
    coarse cell (2 * new scale) on each side, the worst case over output phases.
    """
    history = []
    for kind, k in layers:
        if kind == "conv":
            reach += scale * (k - 1) // 2
        elif kind == "pool":
            scale *= k
        elif kind == "up":
            scale //= k
            reach += k * scale
        else:
            raise ValueError(f"unknown layer {kind!r}")
        history.append((kind, k, scale, reach))
    return scale, reach, history


def layers_rf(layers) -> int:
    """Classic receptive field r = 1 + sum (k - 1) * jump for conv/pool stacks."""
    r, jump = 1, 1
    for kind, k in layers:
        if kind == "conv":
            r += (k - 1) * jump
        elif kind == "pool":
            r += (k - 1) * jump
            jump *= k
        else:
            raise ValueError("layers_rf handles conv and pool layers only")
    return r


def _longest_path(spec: ModelSpec):
    enc = []
    for _ in range(spec.depth):
        enc += [("conv", 3), ("conv", 3), ("pool", 2)]
    enc += [("conv", 3), ("conv", 3)]
    dec = []
    for _ in range(spec.depth):
        dec += [("up", 2), ("conv", 3), ("conv", 3)]
    dec += [("conv", 1)]
    return enc, dec


def receptive_field(spec: ModelSpec) -> ReceptiveField:
    enc, dec = _longest_path(spec)
    _, reach, history = layers_reach(enc + dec)
    # the encoder-only classic value; a pool at the end of the encoder path
    # is counted in the classic formula, so drop nothing
    return ReceptiveField(
        rf=2 * reach + 1,
        reach=reach,
        encoder_rf=layers_rf(enc),
        paper_value=PAPER_RECEPTIVE_FIELD,
        history=tuple(history),
    )


# --------------------------------------------------------------- checkpoints


class CheckpointError(ValueError):
    pass


def save_checkpoint(params, spec: ModelSpec, path, extra: dict | None = None) -> None:
    """``<path>.json`` manifest + ``<path>.bin`` little-endian payload."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tensors, chunks, offset = [], [], 0
    for name, t in params.items():
        arr = np.ascontiguousarray(t.data)
        code = {np.dtype(np.float32): "f32le", np.dtype(np.float64): "f64le"}[arr.dtype]
        raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
        tensors.append(
            {
                "name": name,
                "shape": list(arr.shape),
                "dtype": code,
                "offset": offset,
                "nbytes": len(raw),
                "learnable": bool(t.requires_grad),
            }
        )
        chunks.append(raw)
        offset += len(raw)
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "spec": asdict(spec),
        "tensors": tensors,
        "extra": extra or {},
    }
    path.with_suffix(".bin").write_bytes(b"".join(chunks))
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=2) + "\n")


def load_checkpoint(path):
    path = Path(path)
    try:
        manifest = json.loads(path.with_suffix(".json").read_text())
    except json.JSONDecodeError as exc:
        raise CheckpointError(f"malformed checkpoint manifest: {exc}") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {manifest.get('format_version')!r}")
    spec = ModelSpec(**manifest["spec"])
    payload = path.with_suffix(".bin").read_bytes()
    dtypes = {"f32le": np.dtype("<f4"), "f64le": np.dtype("<f8")}
    params: OrderedDict[str, Tensor] = OrderedDict()
    for t in manifest["tensors"]:
        dt = dtypes[t["dtype"]]
        n = int(np.prod(t["shape"], dtype=np.int64))
        if n * dt.itemsize != t["nbytes"]:
            raise CheckpointError(f"{t['name']}: shape {t['shape']} does not match {t['nbytes']} bytes")
        end = t["offset"] + t["nbytes"]
        if end > len(payload):
            raise CheckpointError(f"{t['name']}: payload truncated")
        arr = np.frombuffer(payload, dtype=dt, count=n, offset=t["offset"]).reshape(t["shape"])
        params[t["name"]] = Tensor(arr.astype(dt.newbyteorder("=")), requires_grad=t["learnable"])
    expected = build(spec, np.random.default_rng(0), dtype=np.float32)
    for name, ref in expected.items():
        if name not in params or params[name].shape != ref.shape:
            raise CheckpointError(f"checkpoint tensor {name!r} missing or misshapen for {spec}")
    return spec, params
