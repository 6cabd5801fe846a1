"""Minimal reverse-mode automatic differentiation on top of numpy.

Every op builds a node holding its parents and a closure that maps the
output gradient to one gradient per parent. ``backward`` walks the graph
in reverse topological order.

Precision is a process-wide setting (``set_precision``). Tests and gradient
checks run in ``"f64"``; training defaults to ``"f32"``.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterator, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ShapeError",
    "GraphError",
    "set_precision",
    "get_precision",
    "precision",
    "dtype",
    "eps",
    "no_grad",
    "as_tensor",
    "add",
    "sub",
    "mul",
    "div",
    "sqrt",
    "matmul",
    "tsum",
    "mean",
    "reshape",
    "transpose",
    "broadcast_to",
    "concat",
    "gather_rows",
    "scatter_rows",
    "layer_norm",
    "softmax",
    "gelu",
    "conv3d_fixed",
    "conv2d",
    "avg_pool2d",
    "mse",
    "stop_gradient",
]


class ShapeError(ValueError):
    """Raised on incompatible shapes, ranks or empty axes."""


class GraphError(RuntimeError):
    """Raised on malformed graphs or misuse of ``backward``."""


_PRECISIONS = {"f32": np.float32, "f64": np.float64}
# Additive guard for denominators and sqrt radicands.
_EPS = {"f32": 1e-6, "f64": 1e-12}
_state = {"precision": "f64", "grad": True}


def set_precision(name: str) -> None:
    if name not in _PRECISIONS:
        raise ValueError(f"unknown precision {name!r}; expected one of {sorted(_PRECISIONS)}")
    _state["precision"] = name


def get_precision() -> str:
    return _state["precision"]


def dtype() -> type:
    return _PRECISIONS[_state["precision"]]


def eps() -> float:
    return _EPS[_state["precision"]]


@contextlib.contextmanager
def precision(name: str) -> Iterator[None]:
    prev = get_precision()
    set_precision(name)
    try:
        yield
    finally:
        set_precision(prev)


@contextlib.contextmanager
def no_grad() -> Iterator[None]:
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __array_priority__ = 100  # so ndarray <op> Tensor dispatches to Tensor

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype != dtype():
            arr = arr.astype(dtype())
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @classmethod
    def _make(cls, data: np.ndarray, parents: Sequence["Tensor"], backward: BackwardFn) -> "Tensor":
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.name = None
        track = _state["grad"] and any(p.requires_grad for p in parents)
        out.requires_grad = track
        out._parents = tuple(parents) if track else ()
        out._backward = backward if track else None
        return out

    # -- introspection -------------------------------------------------

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return self._backward is None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # -- operators -----------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return _slice(self, key)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        return mean(self, axis, keepdims)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes) -> "Tensor":
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    # -- backward ------------------------------------------------------

    def backward(self) -> None:
        """Populate ``.grad`` on every reachable tensor that requires grad.

        Leaves must have ``grad is None`` beforehand; a second call without
        zeroing raises ``GraphError`` instead of accumulating silently.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("loss does not require grad; nothing to differentiate")
        order = _topological(self)
        for node in order:
            if node.is_leaf and node.grad is not None:
                raise GraphError(
                    "leaf tensor already holds a gradient; zero grads before calling backward() again"
                )
        grads: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                node.grad = g
                continue
            node.grad = g
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg
        # reachable through stop_gradient (or otherwise cut) edges only
        for node in order:
            if node.requires_grad and node.grad is None:
                node.grad = np.zeros_like(node.data)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack: list[tuple[Tensor, int]] = [(root, 0)]
    while stack:
        node, i = stack.pop()
        key = id(node)
        if i == 0:
            if state.get(key) == 2:
                continue
            if state.get(key) == 1:
                raise GraphError("cycle detected in computation graph")
            state[key] = 1
        parents = node._parents
        if i < len(parents):
            stack.append((node, i + 1))
            p = parents[i]
            ps = state.get(id(p))
            if ps == 1:
                raise GraphError("cycle detected in computation graph")
            if ps is None and p.requires_grad:
                stack.append((p, 0))
        else:
            state[key] = 2
            order.append(node)
    return order


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# -- elementwise -------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    sa, sb = a.shape, b.shape
    return Tensor._make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def bw(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(a.data * b.data, (a, b), bw)


def div(a, b) -> Tensor:
    """``a / (b + eps)``; meant for non-negative denominators such as norms."""
    a, b = as_tensor(a), as_tensor(b)
    den = b.data + eps()
    out = a.data / den

    def bw(g):
        ga = _unbroadcast(g / den, a.shape) if a.requires_grad else None
        gb = _unbroadcast(-g * out / den, b.shape) if b.requires_grad else None
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def sqrt(x) -> Tensor:
    """``sqrt(x + eps)``."""
    x = as_tensor(x)
    out = np.sqrt(x.data + eps())
    return Tensor._make(out, (x,), lambda g: (g * 0.5 / out,))


# GELU, tanh approximation:
#   gelu(x) = 0.5 * x * (1 + tanh(sqrt(2/pi) * (x + 0.044715 * x**3)))
_GELU_C = float(np.sqrt(2.0 / np.pi))
_GELU_A = 0.044715


def gelu(x) -> Tensor:
    x = as_tensor(x)
    xd = x.data
    inner = _GELU_C * (xd + _GELU_A * xd * xd * xd)
    t = np.tanh(inner)
    out = 0.5 * xd * (1.0 + t)

    def bw(g):
        dinner = _GELU_C * (1.0 + 3.0 * _GELU_A * xd * xd)
        return (g * (0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * dinner),)

    return Tensor._make(out, (x,), bw)


def mse(a, b) -> Tensor:
    """Mean of squared differences over all elements.

    The sum is exactly rounded (``math.fsum``) before the division, so the
    value does not depend on summation order or array layout.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mse operands differ in shape: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size
    out = np.asarray(math.fsum((diff * diff).ravel().tolist()) / n, dtype=diff.dtype)

    def bw(g):
        gd = (2.0 / n) * g * diff
        return (gd if a.requires_grad else None, -gd if b.requires_grad else None)

    return Tensor._make(out, (a, b), bw)


def stop_gradient(x) -> Tensor:
    """Identity forward; the edge back to ``x`` carries no gradient."""
    x = as_tensor(x)
    return Tensor._make(x.data, (x,), lambda g: (None,))


# -- reductions and shape ops -----------------------------------------


def _norm_axes(axis, ndim: int) -> tuple[int, ...]:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    shape = x.shape
    out = x.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return Tensor._make(np.asarray(out), (x,), bw)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    axes = _norm_axes(axis, x.ndim)
    n = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return mul(tsum(x, axes, keepdims), 1.0 / n)


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError as exc:
        raise ShapeError(f"cannot reshape {old} into {tuple(shape)}") from exc
    return Tensor._make(out, (x,), lambda g: (g.reshape(old),))


def transpose(x, axes=None) -> Tensor:
    x = as_tensor(x)
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    inv = tuple(np.argsort(axes))
    return Tensor._make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),))


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    old = x.shape
    return Tensor._make(np.broadcast_to(x.data, shape), (x,), lambda g: (_unbroadcast(g, old),))


def concat(xs: Sequence, axis: int = 0) -> Tensor:
    xs = [as_tensor(x) for x in xs]
    if not xs:
        raise ShapeError("concat of an empty list")
    out = np.concatenate([x.data for x in xs], axis=axis)
    bounds = np.cumsum([x.shape[axis] for x in xs])[:-1]

    def bw(g):
        return tuple(np.split(g, bounds, axis=axis))

    return Tensor._make(out, xs, bw)


def pad_edge3d(x) -> Tensor:
    """Pad the last three axes by one voxel, repeating the border values."""
    x = as_tensor(x)
    if x.ndim < 3:
        raise ShapeError(f"pad_edge3d needs rank >= 3, got {x.shape}")
    pad = [(0, 0)] * (x.ndim - 3) + [(1, 1)] * 3
    out = np.pad(x.data, pad, mode="edge")

    def bw(g):
        g = g.copy()
        for ax in range(x.ndim - 3, x.ndim):
            lo = [slice(None)] * x.ndim
            hi = [slice(None)] * x.ndim
            # fold the pad layers back onto the border they copied
            lo[ax], hi[ax] = 1, -2
            src_lo, src_hi = [slice(None)] * x.ndim, [slice(None)] * x.ndim
            src_lo[ax], src_hi[ax] = 0, -1
            g[tuple(lo)] += g[tuple(src_lo)]
            g[tuple(hi)] += g[tuple(src_hi)]
            keep = [slice(None)] * x.ndim
            keep[ax] = slice(1, -1)
            g = g[tuple(keep)]
        return (g,)

    return Tensor._make(out, (x,), bw)


def _is_basic_key(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis for k in items)


def _slice(x: Tensor, key) -> Tensor:
    shape = x.shape
    basic = _is_basic_key(key)

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        if basic:
            full[key] = g
        else:
            np.add.at(full, key, g)
        return (full,)

    return Tensor._make(x.data[key], (x,), bw)


def _batched_index(idx, lead: tuple[int, ...]) -> np.ndarray:
    idx = np.asarray(idx, dtype=np.intp)
    return np.broadcast_to(idx, lead + idx.shape[-1:])


def gather_rows(x, idx) -> Tensor:
    """Select rows along axis -2. ``x``: [..., n, d]; ``idx``: [m] or [..., m]."""
    x = as_tensor(x)
    if x.ndim < 2:
        raise ShapeError(f"gather_rows needs rank >= 2, got shape {x.shape}")
    lead, n = x.shape[:-2], x.shape[-2]
    bidx = _batched_index(idx, lead)
    if bidx.size and (bidx.min() < 0 or bidx.max() >= n):
        raise IndexError(f"row index out of range for {n} rows")
    out = np.take_along_axis(x.data, bidx[..., None], axis=-2)
    shape = x.shape

    def bw(g):
        full = np.zeros(shape, dtype=g.dtype)
        d = shape[-1]
        flat = full.reshape(-1, n, d)
        fi = bidx.reshape(-1, bidx.shape[-1])
        gf = g.reshape(-1, bidx.shape[-1], d)
        for b in range(flat.shape[0]):
            np.add.at(flat[b], fi[b], gf[b])
        return (full,)

    return Tensor._make(out, (x,), bw)


def scatter_rows(x, idx, n: int) -> Tensor:
    """Place rows of ``x`` ([..., m, d]) at positions ``idx`` of a zero [..., n, d] tensor."""
    x = as_tensor(x)
    lead, m, d = x.shape[:-2], x.shape[-2], x.shape[-1]
    bidx = _batched_index(idx, lead)
    if bidx.shape[-1] != m:
        raise ShapeError(f"index count {bidx.shape[-1]} does not match {m} rows")
    flat_idx = bidx.reshape(-1, m)
    if any(len(np.unique(r)) != m for r in flat_idx):
        raise ValueError("scatter_rows indices must be unique")
    out = np.zeros(lead + (n, d), dtype=x.data.dtype)
    np.put_along_axis(out, bidx[..., None], x.data, axis=-2)
    return Tensor._make(out, (x,), lambda g: (np.take_along_axis(g, bidx[..., None], axis=-2),))


# -- linear algebra ----------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul needs rank >= 2 operands, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    try:
        out = a.data @ b.data
    except ValueError as exc:
        raise ShapeError(f"matmul batch dimensions not broadcastable: {a.shape} @ {b.shape}") from exc

    def bw(g):
        ga = gb = None
        if a.requires_grad:
            if b.ndim == 2:
                ga = _unbroadcast(g @ b.data.T, a.shape)
            else:
                ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        if b.requires_grad:
            if b.ndim == 2:
                k, n = b.shape
                gb = a.data.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return Tensor._make(out, (a, b), bw)


def layer_norm(x, gamma, beta, eps_ln: float = 1e-6) -> Tensor:
    """Normalize over the last axis, then scale by ``gamma`` and shift by ``beta``."""
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    d = x.shape[-1] if x.ndim else 0
    if d == 0:
        raise ShapeError(f"layer_norm over an empty last axis (shape {x.shape})")
    if eps_ln <= 0:
        raise ValueError("layer_norm eps must be positive")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps_ln)
    xhat = xc * rstd
    out = xhat * gamma.data + beta.data

    def bw(g):
        gx = ggamma = gbeta = None
        if x.requires_grad:
            dxhat = g * gamma.data
            gx = rstd * (
                dxhat
                - dxhat.mean(axis=-1, keepdims=True)
                - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
            )
        if gamma.requires_grad:
            ggamma = (g * xhat).reshape(-1, d).sum(axis=0)
        if beta.requires_grad:
            gbeta = g.reshape(-1, d).sum(axis=0)
        return gx, ggamma, gbeta

    return Tensor._make(out, (x, gamma, beta), bw)


def softmax(x, axis: int = -1) -> Tensor:
    x = as_tensor(x)
    if x.ndim == 0 or not -x.ndim <= axis < x.ndim:
        raise ShapeError(f"softmax axis {axis} invalid for shape {x.shape}")
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return Tensor._make(out, (x,), bw)


# -- convolutions ------------------------------------------------------


def conv3d_fixed(x, kernels, padding: int = 1) -> Tensor:
    """3x3x3 cross-correlation (no kernel flip), stride 1, zero padding 0 or 1.

    ``x``: [..., C, D, H, W]; ``kernels``: [K, C, 3, 3, 3]; output
    [..., K, D', H', W'] with D' = D + 2 * padding - 2. Each output voxel
    accumulates its 27*C products in (c, kd, kh, kw) order, so results are
    reproducible term by term against a scalar loop. Exactly-zero taps are
    skipped; adding their zero product would not change the sum.
    """
    x, kernels = as_tensor(x), as_tensor(kernels)
    if x.ndim < 4:
        raise ShapeError(f"conv3d_fixed needs [..., C, D, H, W], got {x.shape}")
    K, C = kernels.shape[:2]
    if kernels.shape[2:] != (3, 3, 3):
        raise ShapeError(f"conv3d_fixed kernels must be [K, C, 3, 3, 3], got {kernels.shape}")
    if x.shape[-4] != C:
        raise ShapeError(f"input channels {x.shape[-4]} do not match kernel channels {C}")
    if padding not in (0, 1):
        raise ValueError(f"padding must be 0 or 1, got {padding}")
    D, H, W = (n + 2 * padding - 2 for n in x.shape[-3:])
    if min(D, H, W) < 1:
        raise ShapeError(f"conv3d_fixed output would be empty for input {x.shape[-3:]} with padding {padding}")
    lead = x.shape[:-4]
    pad = [(0, 0)] * (x.ndim - 3) + [(padding, padding)] * 3
    xp = np.pad(x.data, pad) if padding else x.data
    w = kernels.data
    acc = np.zeros(lead + (K, D, H, W), dtype=x.data.dtype)
    tmp = np.empty(lead + (D, H, W), dtype=x.data.dtype)
    taps = [(a, b, e) for a in range(3) for b in range(3) for e in range(3)]
    for k in range(K):
        out_k = acc[..., k, :, :, :]
        for c in range(C):
            for a, b, e in taps:
                wk = w[k, c, a, b, e]
                if wk == 0:
                    continue
                np.multiply(xp[..., c, a : a + D, b : b + H, e : e + W], wk, out=tmp)
                out_k += tmp

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a, b, e in taps:
                wt = w[:, :, a, b, e]
                if not wt.any():
                    continue
                contrib = np.einsum("kc,...kdhw->...cdhw", wt, g)
                gxp[..., a : a + D, b : b + H, e : e + W] += contrib
            gx = gxp[..., 1:-1, 1:-1, 1:-1] if padding else gxp
        if kernels.requires_grad:
            gw = np.zeros(w.shape, dtype=g.dtype)
            gf = g.reshape((-1, K, D * H * W))
            for a, b, e in taps:
                xs = xp[..., a : a + D, b : b + H, e : e + W].reshape((-1, C, D * H * W))
                gw[:, :, a, b, e] = np.einsum("nkv,ncv->kc", gf, xs)
        return gx, gw

    return Tensor._make(acc, (x, kernels), bw)


def conv2d(x, w, bias=None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, channels-last.

    ``x``: [N, H, W, C]; ``w``: [3, 3, C, K]; ``bias``: [K]; output [N, H, W, K].
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 4 or w.ndim != 4 or w.shape[:2] != (3, 3) or w.shape[2] != x.shape[3]:
        raise ShapeError(f"conv2d expects x [N,H,W,C] and w [3,3,C,K], got {x.shape} and {w.shape}")
    N, H, W, C = x.shape
    K = w.shape[3]
    xp = np.pad(x.data, ((0, 0), (1, 1), (1, 1), (0, 0)))
    out = np.zeros((N, H, W, K), dtype=x.data.dtype)
    for a in range(3):
        for b in range(3):
            out += xp[:, a : a + H, b : b + W, :] @ w.data[a, b]
    parents: list[Tensor] = [x, w]
    if bias is not None:
        bias = as_tensor(bias)
        out += bias.data
        parents.append(bias)

    def bw(g):
        gx = gw = None
        if x.requires_grad:
            gxp = np.zeros(xp.shape, dtype=g.dtype)
            for a in range(3):
                for b in range(3):
                    gxp[:, a : a + H, b : b + W, :] += g @ w.data[a, b].T
            gx = gxp[:, 1:-1, 1:-1, :]
        if w.requires_grad:
            gw = np.empty(w.shape, dtype=g.dtype)
            gf = g.reshape(-1, K)
            for a in range(3):
                for b in range(3):
                    gw[a, b] = xp[:, a : a + H, b : b + W, :].reshape(-1, C).T @ gf
        grads = [gx, gw]
        if bias is not None:
            grads.append(g.reshape(-1, K).sum(axis=0) if bias.requires_grad else None)
        return grads

    return Tensor._make(out, parents, bw)


def avg_pool2d(x) -> Tensor:
    """2x2 average pooling with stride 2 on [N, H, W, C]; H and W must be even."""
    x = as_tensor(x)
    N, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"avg_pool2d needs even spatial dims, got {(H, W)}")
    out = x.data.reshape(N, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def bw(g):
        g4 = np.broadcast_to((g * 0.25)[:, :, None, :, None, :], (N, H // 2, 2, W // 2, 2, C))
        return (g4.reshape(N, H, W, C),)

    return Tensor._make(out, (x,), bw)
