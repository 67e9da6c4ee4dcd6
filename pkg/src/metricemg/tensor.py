"""Minimal dense tensors with reverse-mode differentiation.

Every op records its parents and a backward closure mapping the output
gradient to one gradient per parent. ``grad_of`` walks the recorded graph
in reverse topological order. All data is float64.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import special


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward")
    # make numpy defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Tensor, ...] = ()
        self._backward: BackwardFn | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self) -> str:
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{label})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __getitem__(self, index):
        return take(self, index)

    def sum(self, axis=None):
        return tsum(self, axis)

    def mean(self, axis=None):
        return mean(self, axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    return _node(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data / b.data
    return _node(
        out,
        (a, b),
        lambda g: (
            _unbroadcast(g / b.data, a.shape),
            _unbroadcast(-g * out / b.data, b.shape),
        ),
    )


def power(a: Tensor, exponent: float) -> Tensor:
    return _node(
        a.data**exponent,
        (a,),
        lambda g: (g * exponent * a.data ** (exponent - 1),),
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _node(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return _node(np.log(a.data), (a,), lambda g: (g / a.data,))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def leaky_relu(a: Tensor, slope: float = 0.01) -> Tensor:
    if not 0.0 < slope <= 1.0:
        raise ValueError(f"leaky slope must lie in (0, 1], got {slope}")
    scale = np.where(a.data >= 0, 1.0, slope)
    return _node(a.data * scale, (a,), lambda g: (g * scale,))


def lgamma(a: Tensor) -> Tensor:
    return _node(special.gammaln(a.data), (a,), lambda g: (g * special.digamma(a.data),))


def digamma(a: Tensor) -> Tensor:
    return _node(special.digamma(a.data), (a,), lambda g: (g * special.polygamma(1, a.data),))


# ---------------------------------------------------------------- reductions / shape


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(np.asarray(out), (a,), backward)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    count = a.size if axis is None else np.prod([a.shape[ax] for ax in np.atleast_1d(axis)])
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a: Tensor, shape) -> Tensor:
    return _node(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], -1))


def take(a: Tensor, index) -> Tensor:
    def backward(g):
        full = np.zeros_like(a.data)
        np.add.at(full, index, g)
        return (full,)

    return _node(np.asarray(a.data[index]), (a,), backward)


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]
    return _node(
        np.concatenate([t.data for t in tensors], axis=axis),
        tuple(tensors),
        lambda g: tuple(np.split(g, bounds, axis=axis)),
    )


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    return _node(a.data @ b.data, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def log_softmax(logits: Tensor) -> Tensor:
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    probs = np.exp(out)
    return _node(out, (logits,), lambda g: (g - probs * g.sum(axis=1, keepdims=True),))


def softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------- layers


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """Row-wise affine map ``x @ weights.T + bias`` with weights of shape (M, N)."""
    if x.data.ndim != 2 or weights.data.ndim != 2 or x.shape[1] != weights.shape[1]:
        raise ShapeError(f"dense: input {x.shape} incompatible with weights {weights.shape}")
    if bias.shape != (weights.shape[0],):
        raise ShapeError(f"dense: bias {bias.shape} does not match {weights.shape[0]} units")
    xd, wd = x.data, weights.data
    return _node(
        xd @ wd.T + bias.data,
        (x, weights, bias),
        lambda g: (g @ wd, g.T @ xd, g.sum(axis=0)),
    )


def _same_pads(k: int) -> tuple[int, int]:
    before = (k - 1) // 2
    return before, k - 1 - before


def _live_offsets(k: int, pad_before: int, extent: int, out_extent: int) -> range:
    # kernel offsets whose window overlaps at least one unpadded input index
    lo = max(0, pad_before - out_extent + 1)
    hi = min(k, pad_before + extent)
    return range(lo, hi)


def _patches(xp: np.ndarray, ky: int, c0: int, c1: int, ho: int, wo: int) -> np.ndarray:
    # rows: (b, h, w) output sites; columns: (c_in, kx) for kernel row ky
    win = sliding_window_view(xp[:, :, ky : ky + ho, c0 : c1 + wo - 1], wo, axis=3)
    batch, c_in = xp.shape[:2]
    return win.transpose(0, 2, 4, 1, 3).reshape(batch * ho * wo, c_in * (c1 - c0))


def _correlate(xp: np.ndarray, w: np.ndarray, ho: int, wo: int, rows: range, cols: range) -> np.ndarray:
    """Valid cross-correlation of padded ``xp`` restricted to live kernel offsets."""
    batch = xp.shape[0]
    c_out = w.shape[0]
    c0, c1 = cols.start, cols.stop
    acc = np.zeros((batch * ho * wo, c_out))
    for ky in rows:
        acc += _patches(xp, ky, c0, c1, ho, wo) @ w[:, :, ky, c0:c1].reshape(c_out, -1).T
    return acc.reshape(batch, ho, wo, c_out).transpose(0, 3, 1, 2)


def conv2d(x: Tensor, weights: Tensor, bias: Tensor, padding: str = "same") -> Tensor:
    """2-D cross-correlation over a batch.

    ``x`` is (B, C_in, H, W) or (C_in, H, W); ``weights`` is (C_out, C_in, kh, kw).
    ``padding="same"`` zero-pads to keep H x W, putting the odd pixel of an
    even overhang at the bottom/right. ``padding="none"`` gives
    (H - kh + 1, W - kw + 1).
    """
    if x.data.ndim == 3:
        out = conv2d(reshape(x, (1,) + x.shape), weights, bias, padding)
        return reshape(out, out.shape[1:])
    if x.data.ndim != 4 or weights.data.ndim != 4:
        raise ShapeError(f"conv2d: expected 4-D input and weights, got {x.shape} and {weights.shape}")
    batch, c_in, h, w = x.shape
    c_out, wc_in, kh, kw = weights.shape
    if wc_in != c_in:
        raise ShapeError(f"conv2d: weights expect {wc_in} input channels, input has {c_in}")
    if bias.shape != (c_out,):
        raise ShapeError(f"conv2d: bias {bias.shape} does not match {c_out} filters")
    if padding == "same":
        (pt, pb), (pl, pr) = _same_pads(kh), _same_pads(kw)
        ho, wo = h, w
    elif padding == "none":
        if h < kh or w < kw:
            raise ShapeError(f"conv2d: kernel {kh}x{kw} does not fit input {h}x{w} without padding")
        pt = pb = pl = pr = 0
        ho, wo = h - kh + 1, w - kw + 1
    else:
        raise ValueError(f"unknown padding mode {padding!r}")

    xp = np.pad(x.data, ((0, 0), (0, 0), (pt, pb), (pl, pr)))
    rows = _live_offsets(kh, pt, h, ho)
    cols = _live_offsets(kw, pl, w, wo)
    wd = weights.data
    out = _correlate(xp, wd, ho, wo, rows, cols) + bias.data[None, :, None, None]

    def backward(g):
        g = np.ascontiguousarray(g)
        # input gradient: correlate the re-padded output gradient with the flipped kernel
        gt, gl = kh - 1 - pt, kw - 1 - pl
        gp = np.pad(g, ((0, 0), (0, 0), (gt, h + kh - 1 - ho - gt), (gl, w + kw - 1 - wo - gl)))
        wflip = wd[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
        dx = _correlate(gp, wflip, h, w, _live_offsets(kh, gt, ho, h), _live_offsets(kw, gl, wo, w))

        dw = np.zeros_like(wd)
        g_rows = g.transpose(0, 2, 3, 1).reshape(-1, c_out)
        c0, c1 = cols.start, cols.stop
        for ky in rows:
            dw[:, :, ky, c0:c1] = (g_rows.T @ _patches(xp, ky, c0, c1, ho, wo)).reshape(c_out, c_in, c1 - c0)
        return dx, dw, g.sum(axis=(0, 2, 3))

    return _node(np.ascontiguousarray(out), (x, weights, bias), backward)


class BatchNormState:
    """Running statistics of one batch-norm layer."""

    def __init__(self, channels: int, momentum: float = 0.9, eps: float = 1e-5):
        self.momentum = momentum
        self.eps = eps
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.initialized = False


def batch_norm(x: Tensor, gamma: Tensor, beta: Tensor, state: BatchNormState, train: bool) -> Tensor:
    """Per-channel normalization of a (B, C, H, W) or (B, C) batch."""
    axes = (0,) if x.data.ndim == 2 else (0, 2, 3)
    bshape = (1, -1) if x.data.ndim == 2 else (1, -1, 1, 1)
    g_, b_ = gamma.data.reshape(bshape), beta.data.reshape(bshape)
    if not train:
        if not state.initialized:
            raise RuntimeError("batch_norm: eval mode requested before any training-mode pass")
        inv = 1.0 / np.sqrt(state.running_var.reshape(bshape) + state.eps)
        xhat = (x.data - state.running_mean.reshape(bshape)) * inv
        return _node(
            xhat * g_ + b_,
            (x, gamma, beta),
            lambda g: (g * g_ * inv, (g * xhat).sum(axis=axes), g.sum(axis=axes)),
        )

    count = x.size // x.shape[1]
    if count < 2:
        raise ShapeError("batch_norm: training mode needs at least 2 values per channel")
    mu = x.data.mean(axis=axes, keepdims=True)
    centered = x.data - mu
    var = (centered**2).mean(axis=axes, keepdims=True)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = centered * inv

    m = state.momentum
    if state.initialized:
        state.running_mean = m * state.running_mean + (1 - m) * mu.ravel()
        state.running_var = m * state.running_var + (1 - m) * var.ravel()
    else:
        state.running_mean = mu.ravel().copy()
        state.running_var = var.ravel().copy()
        state.initialized = True

    def backward(g):
        dxhat = g * g_
        dx = inv * (
            dxhat
            - dxhat.mean(axis=axes, keepdims=True)
            - xhat * (dxhat * xhat).mean(axis=axes, keepdims=True)
        )
        return dx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return _node(xhat * g_ + b_, (x, gamma, beta), backward)


def dropout(x: Tensor, rate: float, train: bool, rng: np.random.Generator | None) -> Tensor:
    """Inverted dropout: survivors are scaled by 1 / (1 - rate)."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not train or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs a random generator")
    mask = (rng.random(x.shape) >= rate) / (1.0 - rate)
    return _node(x.data * mask, (x,), lambda g: (g * mask,))


def pairwise_sq_dist(emb: Tensor) -> Tensor:
    """B x B matrix of squared Euclidean distances between rows."""
    e = emb.data
    if e.ndim != 2:
        raise ShapeError(f"pairwise_sq_dist expects a 2-D matrix, got {emb.shape}")
    diff = e[:, None, :] - e[None, :, :]
    out = np.einsum("ijk,ijk->ij", diff, diff)

    def backward(g):
        sym = g + g.T
        return (2.0 * (sym.sum(axis=1)[:, None] * e - sym @ e),)

    return _node(out, (emb,), backward)


# ---------------------------------------------------------------- differentiation


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return order


def grad_of(loss: Tensor, params: Iterable[Tensor]) -> list[np.ndarray]:
    """Gradients of a scalar ``loss`` with respect to each of ``params``.

    Parameters the loss does not depend on get a zero gradient.
    """
    params = list(params)
    if loss.size != 1:
        raise ShapeError(f"grad_of needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topo_order(loss)):
        g = grads.get(id(node))
        if g is None or node._backward is None:
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = grads[key] + pg if key in grads else np.asarray(pg, dtype=np.float64)
    return [grads.get(id(p), np.zeros_like(p.data)).reshape(p.shape) for p in params]
