"""Dense-tensor arithmetic with reverse-mode differentiation.

Small by design: only the primitives the dose networks and loss kernels
need. Volumes are channels-last (batch, z, y, x, channel); model math runs
in float32 with float64 accumulation inside reductions; gradient-check
tests run everything in float64.

Recording is explicit: operations build a backward graph only while a
`Tape` is active, so inference outside a tape allocates no graph.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable

import numpy as np

_RECORDING = 0


class Tape:
    """Enables graph recording for its dynamic extent. Single-owner."""

    def __enter__(self):
        global _RECORDING
        _RECORDING += 1
        return self

    def __exit__(self, *exc):
        global _RECORDING
        _RECORDING -= 1
        return False


def recording() -> bool:
    return _RECORDING > 0


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype) if dtype is not None else np.asarray(data)
        if self.data.dtype not in (np.float32, np.float64):
            self.data = self.data.astype(np.float32)
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}, grad={self.requires_grad})"

    # convenience arithmetic (delegates to primitives)
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def mean(self, axis=None):
        return mean(self, axis)

    def sum(self, axis=None):
        return tsum(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


class ShapeError(ValueError):
    """Operands have incompatible shapes; message carries both."""


def tensor(data, requires_grad: bool = False, dtype=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, dtype=dtype)


def _coerce(x, like: Tensor) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=like.dtype))


def _make(data, parents: Iterable[Tensor], backward: Callable | None) -> Tensor:
    out = Tensor(data)
    if recording() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
    return out


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.data.shape != b.data.shape and b.data.ndim != 0 and a.data.ndim != 0:
        raise ShapeError(f"{op}: shapes {a.data.shape} and {b.data.shape} differ")


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    # only scalar-vs-tensor broadcasting is permitted
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad, dtype=np.float64).astype(grad.dtype).reshape(shape)


# ---------------------------------------------------------------------------
# elementwise primitives
# ---------------------------------------------------------------------------

def add(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    _same_shape(a, b, "add")
    out_data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(g, b.data.shape)

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    _same_shape(a, b, "sub")
    out_data = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.data.shape), _unbroadcast(-g, b.data.shape)

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    _same_shape(a, b, "mul")
    out_data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.data.shape), _unbroadcast(g * a.data, b.data.shape)

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a = a if isinstance(a, Tensor) else Tensor(np.asarray(a, dtype=b.dtype))
    b = _coerce(b, a)
    _same_shape(a, b, "div")
    out_data = a.data / b.data

    def backward(g):
        ga = g / b.data
        gb = -g * a.data / (b.data * b.data)
        return _unbroadcast(ga, a.data.shape), _unbroadcast(gb, b.data.shape)

    return _make(out_data, (a, b), backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, 0)

    def backward(g):
        return (g * mask,)

    return _make(out_data, (x,), backward)


def leaky_relu(x: Tensor, slope: float = 0.2) -> Tensor:
    mask = x.data > 0
    out_data = np.where(mask, x.data, x.data * slope)

    def backward(g):
        return (np.where(mask, g, g * slope),)

    return _make(out_data, (x,), backward)


def tabs(x: Tensor) -> Tensor:
    sign = np.sign(x.data)
    out_data = np.abs(x.data)

    def backward(g):
        return (g * sign,)

    return _make(out_data, (x,), backward)


def exp(x: Tensor) -> Tensor:
    out_data = np.exp(x.data)

    def backward(g):
        return (g * out_data,)

    return _make(out_data, (x,), backward)


def log(x: Tensor) -> Tensor:
    out_data = np.log(x.data)

    def backward(g):
        return (g / x.data,)

    return _make(out_data, (x,), backward)


def softplus(x: Tensor) -> Tensor:
    out_data = np.logaddexp(0.0, x.data).astype(x.dtype)

    def backward(g):
        with np.errstate(over="ignore"):
            sig = 1.0 / (1.0 + np.exp(-x.data.astype(np.float64)))
        return (g * sig.astype(g.dtype),)

    return _make(out_data, (x,), backward)


def stop_gradient(x: Tensor) -> Tensor:
    """Pass values through; block gradient flow entirely."""
    return Tensor(x.data)


# ---------------------------------------------------------------------------
# shape / reduction primitives
# ---------------------------------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    shape = tuple(int(s) for s in shape)
    in_shape = x.data.shape
    out_data = x.data.reshape(shape)

    def backward(g):
        return (g.reshape(in_shape),)

    return _make(out_data, (x,), backward)


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def mean(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    count = int(np.prod([x.data.shape[a] for a in axes])) if axes else 1
    out_data = np.mean(x.data, axis=axes, dtype=np.float64).astype(x.dtype)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge / count, x.data.shape).astype(g.dtype),)

    return _make(out_data, (x,), backward)


def tsum(x: Tensor, axis=None) -> Tensor:
    axes = _norm_axes(axis, x.data.ndim)
    out_data = np.sum(x.data, axis=axes, dtype=np.float64).astype(x.dtype)

    def backward(g):
        ge = np.expand_dims(g, axes) if axes else g
        return (np.broadcast_to(ge, x.data.shape).copy(),)

    return _make(out_data, (x,), backward)


def matmul(a: Tensor, b: Tensor, bias: Tensor | None = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
        raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} incompatible")
    if bias is not None and bias.data.shape != (b.data.shape[1],):
        raise ShapeError(f"matmul: bias shape {bias.data.shape} != ({b.data.shape[1]},)")
    out_data = a.data @ b.data
    if bias is not None:
        out_data = out_data + bias.data

    parents = (a, b) if bias is None else (a, b, bias)

    def backward(g):
        ga, gb = g @ b.data.T, a.data.T @ g
        if bias is None:
            return ga, gb
        return ga, gb, np.sum(g, axis=0, dtype=np.float64).astype(g.dtype)

    return _make(out_data, parents, backward)


def gather(x: Tensor, indices) -> Tensor:
    """Select flat positions of x into a 1D tensor; backward scatter-adds."""
    idx = np.asarray(indices, dtype=np.int64).ravel()
    in_shape = x.data.shape
    out_data = x.data.reshape(-1)[idx]

    def backward(g):
        gx = np.zeros(int(np.prod(in_shape)), dtype=g.dtype)
        np.add.at(gx, idx, g)
        return (gx.reshape(in_shape),)

    return _make(out_data, (x,), backward)


def pairwise_sq_dist(z: Tensor) -> Tensor:
    """All pairwise squared Euclidean distances of row vectors: (B, D) -> (B, B)."""
    if z.data.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist: expected (B, D), got {z.data.shape}")
    diff = z.data[:, None, :] - z.data[None, :, :]
    out_data = np.sum(diff * diff, axis=-1, dtype=np.float64).astype(z.dtype)

    def backward(g):
        gsym = (g + g.T)[:, :, None]
        return (2.0 * np.sum(gsym * diff, axis=1, dtype=np.float64).astype(g.dtype),)

    return _make(out_data, (z,), backward)


# ---------------------------------------------------------------------------
# normalization / conditioning
# ---------------------------------------------------------------------------

def instance_norm(x: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each (batch, channel) slice over spatial axes to zero mean, unit variance."""
    if x.data.ndim < 3:
        raise ShapeError(f"instance_norm: expected (B, spatial..., C), got {x.data.shape}")
    axes = tuple(range(1, x.data.ndim - 1))
    mu = np.mean(x.data, axis=axes, keepdims=True, dtype=np.float64)
    var = np.var(x.data, axis=axes, keepdims=True, dtype=np.float64)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = ((x.data - mu) * inv).astype(x.dtype)
    n = int(np.prod([x.data.shape[a] for a in axes]))

    def backward(g):
        g64 = g.astype(np.float64)
        gm = np.mean(g64, axis=axes, keepdims=True)
        gx = np.mean(g64 * xhat, axis=axes, keepdims=True)
        gi = inv * (g64 - gm - xhat * gx)
        return (gi.astype(g.dtype),)

    return _make(xhat, (x,), backward)


def channel_scale_shift(x: Tensor, scale: Tensor, shift: Tensor) -> Tensor:
    """Per-(batch, channel) affine on a channels-last volume: x * scale + shift."""
    B, C = x.data.shape[0], x.data.shape[-1]
    if scale.data.shape != (B, C) or shift.data.shape != (B, C):
        raise ShapeError(
            f"channel_scale_shift: scale {scale.data.shape} / shift {shift.data.shape} "
            f"must be ({B}, {C}) for input {x.data.shape}")
    spatial_ones = (1,) * (x.data.ndim - 2)
    s = scale.data.reshape((B,) + spatial_ones + (C,))
    t = shift.data.reshape((B,) + spatial_ones + (C,))
    out_data = x.data * s + t
    axes = tuple(range(1, x.data.ndim - 1))

    def backward(g):
        gx = g * s
        gscale = np.sum(g * x.data, axis=axes, dtype=np.float64).astype(g.dtype)
        gshift = np.sum(g, axis=axes, dtype=np.float64).astype(g.dtype)
        return gx, gscale, gshift

    return _make(out_data, (x, scale, shift), backward)


# ---------------------------------------------------------------------------
# 3D convolution (channels-last, shift-and-GEMM)
# ---------------------------------------------------------------------------

def _conv_out_size(n, k, s, p):
    return (n + 2 * p - k) // s + 1


def conv3d(x: Tensor, w: Tensor, bias: Tensor | None = None,
           stride: int = 1, pad: int = 0) -> Tensor:
    """3D convolution. x: (B, D, H, W, Ci); w: (k, k, k, Ci, Co); bias: (Co,)."""
    B, D, H, W, Ci = x.data.shape
    k = w.data.shape[0]
    if w.data.shape[:3] != (k, k, k) or w.data.shape[3] != Ci:
        raise ShapeError(f"conv3d: weight {w.data.shape} incompatible with input {x.data.shape}")
    Co = w.data.shape[4]
    s, p = int(stride), int(pad)
    Do, Ho, Wo = (_conv_out_size(n, k, s, p) for n in (D, H, W))
    if min(Do, Ho, Wo) < 1:
        raise ShapeError(f"conv3d: output collapsed for input {x.data.shape}, k={k} s={s} p={p}")
    xp = np.pad(x.data, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else x.data
    wmat = w.data.reshape(k * k * k, Ci, Co)
    acc = np.zeros((B * Do * Ho * Wo, Co), dtype=x.dtype)
    t = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                slab = xp[:, dz:dz + s * Do:s, dy:dy + s * Ho:s, dx:dx + s * Wo:s, :]
                acc += slab.reshape(-1, Ci) @ wmat[t]
                t += 1
    out_data = acc.reshape(B, Do, Ho, Wo, Co)
    if bias is not None:
        out_data = out_data + bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gf = g.reshape(-1, Co)
        gxp = np.zeros_like(xp)
        gw = np.empty_like(w.data)
        t = 0
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    slab = xp[:, dz:dz + s * Do:s, dy:dy + s * Ho:s, dx:dx + s * Wo:s, :]
                    gw[dz, dy, dx] = slab.reshape(-1, Ci).T @ gf
                    gxp[:, dz:dz + s * Do:s, dy:dy + s * Ho:s, dx:dx + s * Wo:s, :] += \
                        (gf @ wmat[t].T).reshape(B, Do, Ho, Wo, Ci)
                    t += 1
        gx = gxp[:, p:p + D, p:p + H, p:p + W, :] if p else gxp
        if bias is None:
            return gx, gw
        gb = np.sum(gf, axis=0, dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _make(out_data, parents, backward)


def conv3d_transpose(x: Tensor, w: Tensor, bias: Tensor | None = None,
                     stride: int = 2, pad: int = 1) -> Tensor:
    """Transposed 3D convolution (adjoint of conv3d with the same stride/pad)."""
    B, D, H, W, Ci = x.data.shape
    k = w.data.shape[0]
    if w.data.shape[:3] != (k, k, k) or w.data.shape[3] != Ci:
        raise ShapeError(
            f"conv3d_transpose: weight {w.data.shape} incompatible with input {x.data.shape}")
    Co = w.data.shape[4]
    s, p = int(stride), int(pad)
    J, K_, L_ = (s * (n - 1) + k - 2 * p for n in (D, H, W))
    wmat = w.data.reshape(k * k * k, Ci, Co)
    xf = x.data.reshape(-1, Ci)
    # accumulate into a padded canvas so every tap lands on a valid slice
    canvas = np.zeros((B, J + 2 * p, K_ + 2 * p, L_ + 2 * p, Co), dtype=x.dtype)
    t = 0
    for dz in range(k):
        for dy in range(k):
            for dx in range(k):
                canvas[:, dz:dz + s * D:s, dy:dy + s * H:s, dx:dx + s * W:s, :] += \
                    (xf @ wmat[t]).reshape(B, D, H, W, Co)
                t += 1
    out_data = canvas[:, p:p + J, p:p + K_, p:p + L_, :] if p else canvas
    if bias is not None:
        out_data = out_data + bias.data

    parents = (x, w) if bias is None else (x, w, bias)

    def backward(g):
        gp = np.pad(g, ((0, 0), (p, p), (p, p), (p, p), (0, 0))) if p else g
        gx = np.zeros_like(x.data)
        gw = np.empty_like(w.data)
        gxf = gx.reshape(-1, Ci)
        t = 0
        for dz in range(k):
            for dy in range(k):
                for dx in range(k):
                    slab = gp[:, dz:dz + s * D:s, dy:dy + s * H:s, dx:dx + s * W:s, :]
                    sf = slab.reshape(-1, Co)
                    gxf += sf @ wmat[t].T
                    gw[dz, dy, dx] = xf.T @ sf
                    t += 1
        if bias is None:
            return gx, gw
        gb = np.sum(gp, axis=(0, 1, 2, 3), dtype=np.float64).astype(g.dtype)
        return gx, gw, gb

    return _make(out_data, parents, backward)


# ---------------------------------------------------------------------------
# smoothed quantile (shared surrogate for DV metrics)
# ---------------------------------------------------------------------------

def soft_quantile_value_and_weights(values: np.ndarray, fraction: float,
                                    temperature: float) -> tuple[float, np.ndarray]:
    """Solve mean(sigmoid((v_i - d)/T)) = fraction for d by bisection.

    Returns the smoothed dose-at-volume-fraction and the softmax-like weights
    that are its exact gradient w.r.t. the values (implicit differentiation).
    """
    v = np.asarray(values, dtype=np.float64).ravel()
    f = float(fraction)
    T = float(temperature)
    if not (0.0 < f < 1.0):
        raise ValueError(f"fraction must lie in (0, 1), got {f}")
    if not (T > 0):
        raise ValueError(f"temperature must be positive, got {T}")
    lo = float(v.min()) - 45.0 * T
    hi = float(v.max()) + 45.0 * T
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        sval = np.mean(1.0 / (1.0 + np.exp(np.clip((mid - v) / T, -60.0, 60.0))))
        if sval > f:
            lo = mid
        else:
            hi = mid
        if hi - lo <= 1e-13 * max(1.0, abs(mid)):
            break
    d = 0.5 * (lo + hi)
    sig = 1.0 / (1.0 + np.exp(np.clip((d - v) / T, -60.0, 60.0)))
    w = sig * (1.0 - sig)
    total = w.sum()
    if total <= 0:
        w = np.full_like(v, 1.0 / v.size)
    else:
        w = w / total
    return d, w


def soft_quantile(x: Tensor, fraction: float, temperature: float) -> Tensor:
    """Differentiable dose at volume fraction: smoothed (1-f)-style quantile of a 1D tensor."""
    if x.data.ndim != 1:
        raise ShapeError(f"soft_quantile: expected 1D tensor, got {x.data.shape}")
    d, wts = soft_quantile_value_and_weights(x.data, fraction, temperature)
    out_data = np.asarray(d, dtype=x.dtype)

    def backward(g):
        return ((g * wts).astype(g.dtype),)

    return _make(out_data, (x,), backward)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def backward(root: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse-mode sweep from a scalar root.

    Fills `.grad` on every requires_grad tensor in the graph and returns the
    map for the leaves (tensors without recorded parents).
    """
    if root.data.size != 1:
        raise ShapeError(f"backward root must be scalar, got shape {root.data.shape}")
    topo: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, processed = stack.pop()
        if processed:
            topo.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))

    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    leaf_map: dict[Tensor, np.ndarray] = {}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        node.grad = g if node.grad is None else node.grad + g
        if node._backward is None:
            leaf_map[node] = node.grad
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if not parent.requires_grad:
                continue
            if id(parent) in grads:
                grads[id(parent)] = grads[id(parent)] + pg
            else:
                grads[id(parent)] = pg
    return leaf_map


# every differentiable primitive; the gradient-check suite must cover all of them
PRIMITIVES = (
    "add", "sub", "mul", "div", "matmul", "conv3d", "conv3d_transpose",
    "relu", "leaky_relu", "instance_norm", "channel_scale_shift",
    "mean", "tsum", "reshape", "gather", "pairwise_sq_dist",
    "tabs", "exp", "log", "softplus", "soft_quantile", "stop_gradient",
)
