"""A small reverse-mode autodiff engine over numpy arrays.

Only what the U-Nets need: n-d convolution (stride 1), batch norm, leaky ReLU,
2x max pooling, 2x linear upsampling, channel concat, add, and L1 loss.
Tensors are NCDHW (3D) or NCHW (2D).

Gradients are stored on leaf tensors only; intermediate gradients live in the
backward pass and are discarded.
"""

from __future__ import annotations

import contextlib
import itertools
from typing import Callable, Sequence

import numpy as np

_EXACT = False


@contextlib.contextmanager
def exact_mode(enabled: bool = True):
    """Fix the reduction order of convolutions independent of array extent.

    BLAS matmul may round differently depending on where an element sits in
    the operand, so the same voxel computed inside two differently-sized
    blocks can differ in the last bit. In exact mode the channel contraction
    is an explicit ordered sum, which makes blockwise and whole-volume
    inference bit-identical. Slower; meant for verification and stitching.
    """
    global _EXACT
    prev = _EXACT
    _EXACT = enabled
    try:
        yield
    finally:
        _EXACT = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "parents", "backward_fn", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad
        self.parents: tuple[Tensor, ...] = ()
        self.backward_fn: Callable | None = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def backward(self):
        backward(self)

    def __add__(self, other):
        return add(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.parents = tuple(parents)
        out.backward_fn = backward_fn
    return out


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.backward_fn is None:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node.parents, node.backward_fn(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ------------------------------------------------------------------ basic ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ValueError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    return _result(a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))


def sum_all(x) -> Tensor:
    x = _as_tensor(x)
    return _result(np.asarray(x.data.sum()), (x,), lambda g: (np.full_like(x.data, g),))


def concat_channels(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise ValueError(f"concat: incompatible shapes {a.shape} and {b.shape}")
    ca = a.shape[1]
    return _result(
        np.concatenate([a.data, b.data], axis=1),
        (a, b),
        lambda g: (g[:, :ca], g[:, ca:]),
    )


def l1_loss(pred, target) -> Tensor:
    """Mean absolute error; subgradient 0 where pred == target."""
    pred, target = _as_tensor(pred), _as_tensor(target)
    if pred.shape != target.shape:
        raise ValueError(f"l1_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    n = diff.size

    def bw(g):
        s = np.sign(diff) * (g / n)
        return s, -s

    return _result(np.asarray(np.abs(diff).mean()), (pred, target), bw)


def leaky_relu(x, slope: float = 0.01) -> Tensor:
    """x for x >= 0, slope * x otherwise; gradient at 0 is taken as slope."""
    x = _as_tensor(x)
    pos = x.data > 0
    out = np.where(x.data >= 0, x.data, slope * x.data)
    return _result(out, (x,), lambda g: (np.where(pos, g, slope * g),))


# ---------------------------------------------------------------- convolution


def conv(x, w, b=None, pad: int | None = None) -> Tensor:
    """Cross-correlation of x (N, C, *S) with w (O, C, *k), stride 1.

    ``pad`` defaults to k // 2 (shape preserving for odd kernels).
    """
    x, w = _as_tensor(x), _as_tensor(w)
    nd = x.ndim - 2
    if w.ndim != nd + 2 or w.shape[1] != x.shape[1]:
        raise ValueError(f"conv: weight {w.shape} incompatible with input {x.shape}")
    ksize = w.shape[2:]
    if pad is None:
        pad = ksize[0] // 2
    n, c = x.shape[:2]
    o = w.shape[0]
    xp = np.pad(x.data, [(0, 0), (0, 0)] + [(pad, pad)] * nd) if pad else x.data
    out_sp = tuple(xp.shape[2 + i] - ksize[i] + 1 for i in range(nd))
    if min(out_sp) < 1:
        raise ValueError("conv: kernel larger than padded input")
    p = int(np.prod(out_sp))
    offsets = list(itertools.product(*(range(k) for k in ksize)))

    def window(arr, off):
        return arr[(slice(None), slice(None)) + tuple(slice(off[i], off[i] + out_sp[i]) for i in range(nd))]

    dtype = np.result_type(x.data, w.data)
    wd = w.data
    kc = c * len(offsets)
    cols = None
    if _EXACT:
        # fixed-order scalar accumulation: each output voxel's value does not
        # depend on the extent of the array it is computed in
        out = np.zeros((n, o, p), dtype=dtype)
        for off in offsets:
            xs = window(xp, off).reshape(n, c, p)
            wk = wd[(slice(None), slice(None)) + off]
            for ci in range(c):
                out += wk[None, :, ci, None] * xs[:, ci, None, :]
    else:
        # im2col: rows ordered (offset, channel) to match w2 below
        cols = np.empty((n, len(offsets), c, p), dtype=xp.dtype)
        for j, off in enumerate(offsets):
            cols[:, j] = window(xp, off).reshape(n, c, p)
        cols = cols.reshape(n, kc, p)
        w2 = np.moveaxis(wd.reshape(o, c, -1), 2, 1).reshape(o, kc)
        out = np.matmul(w2, cols)
    parents = [x, w]
    if b is not None:
        b = _as_tensor(b)
        out += b.data[None, :, None]
        parents.append(b)
    out = out.reshape((n, o) + out_sp)

    def bw(g):
        g2 = g.reshape(n, o, p)
        gx = gw = None
        if w.requires_grad:
            if cols is not None:
                gw2 = np.matmul(g2, cols.transpose(0, 2, 1)).sum(axis=0)  # (o, kc)
                gw = np.moveaxis(gw2.reshape(o, len(offsets), c), 1, 2).reshape(wd.shape)
            else:
                gw = np.zeros_like(wd)
                for off in offsets:
                    xs = window(xp, off).reshape(n, c, p)
                    gw[(slice(None), slice(None)) + off] = np.matmul(g2, xs.transpose(0, 2, 1)).sum(axis=0)
        if x.requires_grad:
            gx = np.zeros_like(xp)
            w2t = np.moveaxis(wd.reshape(o, c, -1), 2, 1).reshape(o, kc).T
            gcols = np.matmul(w2t, g2).reshape(n, len(offsets), c, p)
            for j, off in enumerate(offsets):
                window(gx, off)[...] += gcols[:, j].reshape((n, c) + out_sp)
            if pad:
                gx = gx[(slice(None), slice(None)) + (slice(pad, -pad),) * nd]
        grads = [gx, gw]
        if b is not None:
            grads.append(g2.sum(axis=(0, 2)))
        return grads

    return _result(out, parents, bw)


# ----------------------------------------------------------------- batch norm


def batchnorm(
    x,
    gamma,
    beta,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    training: bool,
    momentum: float = 0.1,
    eps: float = 1e-5,
) -> Tensor:
    """Per-channel normalization over batch and spatial axes.

    In training mode the running statistics are updated in place (unbiased
    variance, as in most frameworks).
    """
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ValueError(f"batchnorm: gamma/beta must have shape ({c},)")
    if x.data.size == 0:
        raise ValueError("batchnorm: empty batch")
    axes = (0,) + tuple(range(2, x.ndim))
    bshape = (1, c) + (1,) * (x.ndim - 2)
    if training:
        m = x.data.size // c
        mean = x.data.mean(axis=axes)
        var = x.data.var(axis=axes)
        running_mean *= 1 - momentum
        running_mean += momentum * mean
        running_var *= 1 - momentum
        running_var += momentum * (var * m / (m - 1) if m > 1 else var)
    else:
        mean, var = running_mean, running_var
    invstd = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean.reshape(bshape)) * invstd.reshape(bshape)
    out = xhat * gamma.data.reshape(bshape) + beta.data.reshape(bshape)

    def bw(g):
        ggamma = (g * xhat).sum(axis=axes)
        gbeta = g.sum(axis=axes)
        dxhat = g * gamma.data.reshape(bshape)
        if training:
            m = x.data.size // c
            gx = (invstd.reshape(bshape) / m) * (
                m * dxhat
                - dxhat.sum(axis=axes).reshape(bshape)
                - xhat * (dxhat * xhat).sum(axis=axes).reshape(bshape)
            )
        else:
            gx = dxhat * invstd.reshape(bshape)
        return gx, ggamma, gbeta

    return _result(out.astype(x.dtype, copy=False), (x, gamma, beta), bw)


# ------------------------------------------------------- pooling, upsampling


def maxpool(x) -> Tensor:
    """2x max pooling, stride 2, over every spatial axis. Ties go to the first element."""
    x = _as_tensor(x)
    nd = x.ndim - 2
    sp_shape = x.shape[2:]
    if any(s % 2 for s in sp_shape):
        raise ValueError(f"maxpool: spatial dims must be even, got {sp_shape}")
    n, c = x.shape[:2]
    split = (n, c) + tuple(v for s in sp_shape for v in (s // 2, 2))
    perm = (0, 1) + tuple(2 + 2 * i for i in range(nd)) + tuple(3 + 2 * i for i in range(nd))
    windows = x.data.reshape(split).transpose(perm)
    out_sp = tuple(s // 2 for s in sp_shape)
    flat = windows.reshape((n, c) + out_sp + (2**nd,))
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def bw(g):
        gflat = np.zeros_like(flat)
        np.put_along_axis(gflat, arg[..., None], g[..., None], axis=-1)
        gw = gflat.reshape(windows.shape).transpose(np.argsort(perm))
        return (gw.reshape(x.shape),)

    return _result(out, (x,), bw)


def _up_axis(a: np.ndarray, axis: int) -> np.ndarray:
    prev = np.concatenate([a.take([0], axis), a.take(range(a.shape[axis] - 1), axis)], axis)
    nxt = np.concatenate([a.take(range(1, a.shape[axis]), axis), a.take([-1], axis)], axis)
    even = 0.75 * a + 0.25 * prev
    odd = 0.75 * a + 0.25 * nxt
    out = np.stack([even, odd], axis=axis + 1)
    shape = list(a.shape)
    shape[axis] *= 2
    return out.reshape(shape)


def _up_axis_T(g: np.ndarray, axis: int) -> np.ndarray:
    n = g.shape[axis] // 2
    shape = list(g.shape)
    shape[axis : axis + 1] = [n, 2]
    g2 = g.reshape(shape)
    ge = g2.take(0, axis + 1)
    go = g2.take(1, axis + 1)
    out = 0.75 * (ge + go)
    # prev[i] = a[i-1] (a[0] at i=0); nxt[i] = a[i+1] (a[n-1] at i=n-1)
    lo = [slice(None)] * g.ndim
    hi = [slice(None)] * g.ndim
    lo[axis], hi[axis] = slice(0, n - 1), slice(1, n)
    out[tuple(lo)] += 0.25 * ge[tuple(hi)]
    out[tuple(hi)] += 0.25 * go[tuple(lo)]
    first = [slice(None)] * g.ndim
    last = [slice(None)] * g.ndim
    first[axis], last[axis] = slice(0, 1), slice(n - 1, n)
    out[tuple(first)] += 0.25 * ge[tuple(first)]
    out[tuple(last)] += 0.25 * go[tuple(last)]
    return out


def upsample(x) -> Tensor:
    """x2 (bi/tri)linear upsampling with half-pixel centers and border clamping.

    Output i along an axis samples source coordinate (i + 0.5) / 2 - 0.5.
    """
    x = _as_tensor(x)
    axes = range(2, x.ndim)
    out = x.data
    for ax in axes:
        out = _up_axis(out, ax)

    def bw(g):
        for ax in reversed(axes):
            g = _up_axis_T(g, ax)
        return (g,)

    return _result(out, (x,), bw)


# ------------------------------------------------------------ gradient check


def numerical_grad(f: Callable[[], float], arr: np.ndarray, index, h: float = 1e-5) -> float:
    """Central difference of scalar f() with respect to arr[index] (mutated in place)."""
    old = arr[index]
    arr[index] = old + h
    fp = f()
    arr[index] = old - h
    fm = f()
    arr[index] = old
    return (fp - fm) / (2 * h)
