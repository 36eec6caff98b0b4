"""Small reverse-mode autodiff kernel.

Only the handful of operations the classifiers need are differentiable:
embedding lookup, same-length 1-d convolution, masked max pooling, masked
softmax attention, dropout, a linear output layer and the sigmoid/BCE loss.
Every op accepts optional leading batch axes so a mini-batch runs as a
single numpy call.
"""

from __future__ import annotations

import math
from typing import Callable, Iterable, Mapping

import numpy as np

DTYPE = np.float64


class KernelInputError(ValueError):
    """Raised when an op receives arguments violating its preconditions."""


class KernelInternalError(RuntimeError):
    """Raised on shape mismatches or non-finite values inside the kernel."""


class Tensor:
    """Dense array with an optional gradient slot and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None,
                 _parents: tuple = (), _backward: Callable | None = None):
        self.data = np.asarray(data, dtype=DTYPE) if not isinstance(data, np.ndarray) else data
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    def __repr__(self) -> str:
        label = f" {self.name}" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"

    def zero_grad(self) -> None:
        self.grad = None

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise KernelInternalError(f"gradient shape {g.shape} != data shape {self.data.shape}")
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate gradients to every ancestor that requires them."""
        if grad is None:
            if self.data.size != 1:
                raise KernelInputError("backward() without a seed gradient needs a scalar")
            grad = np.ones_like(self.data)

        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))

        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


def _needs_grad(*tensors: Tensor) -> bool:
    return any(t.requires_grad for t in tensors)


def as_mask(mask, length: int | None = None, prefix: bool = True) -> np.ndarray:
    """Boolean validity mask; for a single text the valid positions must form a prefix."""
    m = np.asarray(mask, dtype=bool)
    if length is not None and m.shape[-1] != length:
        raise KernelInputError(f"mask length {m.shape[-1]} != sequence length {length}")
    # prefix property: once invalid, never valid again
    if prefix and m.shape[-1] > 1 and np.any(m[..., 1:] & ~m[..., :-1]):
        raise KernelInputError("mask valid positions must form a prefix")
    return m


def prefix_mask(n_valid, length: int) -> np.ndarray:
    n = np.asarray(n_valid)
    return np.arange(length) < n[..., None]


# --------------------------------------------------------------------------
# ops
# --------------------------------------------------------------------------

def embed_lookup(ids, table: Tensor, frozen_rows: Iterable[int] = ()) -> Tensor:
    """Gather rows of ``table``; the backward pass scatters into those rows only.

    Rows listed in ``frozen_rows`` never receive gradient (used for PAD).
    """
    ids = np.asarray(ids)
    if not np.issubdtype(ids.dtype, np.integer):
        raise KernelInputError("token ids must be integers")
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise KernelInputError(f"token id out of range for table with {V} rows")
    out = table.data[ids]
    frozen = list(frozen_rows)

    def backward(g):
        gt = np.zeros_like(table.data)
        flat = ids.reshape(-1)
        if flat.size:
            # sort-and-reduce scatter; much faster than np.add.at for repeated ids
            order = np.argsort(flat, kind="stable")
            rows, starts = np.unique(flat[order], return_index=True)
            gt[rows] = np.add.reduceat(g.reshape(-1, table.shape[1])[order], starts, axis=0)
        if frozen:
            gt[frozen] = 0.0
        return (gt,)

    return Tensor(out, _needs_grad(table), _parents=(table,), _backward=backward)


def conv1d_same(x: Tensor, filters: Tensor, bias: Tensor, mask=None, relu: bool = True) -> Tensor:
    """Width-w convolution with right-edge zero padding so output length == input length.

    x: (..., L, E); filters: (w, E, F); bias: (F,).  Input rows at invalid
    mask positions are treated as zeros, so outputs at valid positions never
    depend on padding content.
    """
    w, E, F = filters.shape
    L = x.shape[-2]
    if x.shape[-1] != E:
        raise KernelInternalError(f"input width {x.shape[-1]} != filter depth {E}")
    if w not in (1, 2, 3):
        raise KernelInputError(f"filter width must be 1, 2 or 3, got {w}")
    if w > L:
        raise KernelInputError(f"filter width {w} exceeds input length {L}")
    if mask is None:
        m = None
        xin = x.data
    else:
        m = as_mask(mask, L)
        xin = np.where(m[..., None], x.data, 0.0)

    pad = [(0, 0)] * (x.data.ndim - 2) + [(0, w - 1), (0, 0)]
    xp = np.pad(xin, pad)
    lead = x.shape[:-2]
    # im2col: row t holds tokens t..t+w-1 side by side, so one GEMM does the work
    cols = np.concatenate([xp[..., k:k + L, :] for k in range(w)], axis=-1).reshape(-1, w * E)
    wmat = filters.data.reshape(w * E, F)
    pre = (cols @ wmat + bias.data).reshape(lead + (L, F))
    out = np.maximum(pre, 0.0) if relu else pre

    def backward(g):
        if relu:
            g = g * (pre > 0)
        g2 = g.reshape(-1, F)
        gx = gf = gb = None
        if x.requires_grad:
            gcols = (g2 @ wmat.T).reshape(lead + (L, w, E))
            gx = gcols[..., 0, :].copy()
            for k in range(1, w):
                # column block k of row t came from token t+k
                gx[..., k:, :] += gcols[..., :L - k, k, :]
            if m is not None:
                gx = np.where(m[..., None], gx, 0.0)
        if filters.requires_grad:
            gf = (cols.T @ g2).reshape(w, E, F)
        if bias.requires_grad:
            gb = g2.sum(axis=0)
        return gx, gf, gb

    return Tensor(out, _needs_grad(x, filters, bias), _parents=(x, filters, bias), _backward=backward)


def masked_max_pool(features: Tensor, mask) -> Tensor:
    """Per-channel max over valid positions: (..., L, F) -> (..., F).

    Gradient goes to the first argmax on ties.
    """
    L = features.shape[-2]
    m = as_mask(mask, L)
    if np.any(~m.any(axis=-1)):
        raise KernelInputError("max pooling needs at least one valid position")
    filled = np.where(m[..., None], features.data, -np.inf)
    idx = np.argmax(filled, axis=-2)  # first occurrence
    out = np.take_along_axis(features.data, idx[..., None, :], axis=-2)[..., 0, :]

    def backward(g):
        gf = np.zeros_like(features.data)
        np.put_along_axis(gf, idx[..., None, :], g[..., None, :], axis=-2)
        return (gf,)

    return Tensor(out, _needs_grad(features), _parents=(features,), _backward=backward)


def concat(tensors: list[Tensor], axis: int) -> Tensor:
    datas = [t.data for t in tensors]
    out = np.concatenate(datas, axis=axis)
    sizes = np.cumsum([d.shape[axis] for d in datas])[:-1]

    def backward(g):
        return tuple(np.split(g, sizes, axis=axis))

    return Tensor(out, _needs_grad(*tensors), _parents=tuple(tensors), _backward=backward)


def attention_logits(H: Tensor, q: Tensor) -> Tensor:
    """Scaled scores H.q / sqrt(d): (..., N, d) x (d,) -> (..., N)."""
    d = q.shape[-1]
    if H.shape[-1] != d:
        raise KernelInternalError(f"query dim {d} != feature dim {H.shape[-1]}")
    scale = 1.0 / math.sqrt(d)
    out = (H.data @ q.data) * scale

    def backward(g):
        gH = (g[..., None] * q.data) * scale if H.requires_grad else None
        gq = (g.reshape(-1) @ H.data.reshape(-1, d)) * scale if q.requires_grad else None
        return gH, gq

    return Tensor(out, _needs_grad(H, q), _parents=(H, q), _backward=backward)


def masked_softmax(logits: Tensor, mask) -> Tensor:
    """Softmax over the last axis; invalid positions get weight exactly 0."""
    # the attention mask repeats the text mask once per filter width
    m = as_mask(mask, logits.shape[-1], prefix=False)
    if np.any(~m.any(axis=-1)):
        raise KernelInputError("attention needs at least one valid position")
    z = np.where(m, logits.data, -np.inf)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.where(m, np.exp(z), 0.0)
    a = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (a * (g - (g * a).sum(axis=-1, keepdims=True)),)

    return Tensor(a, _needs_grad(logits), _parents=(logits,), _backward=backward)


def weighted_sum(alpha: Tensor, H: Tensor) -> Tensor:
    """v = sum_i alpha_i H_i : (..., N) x (..., N, d) -> (..., d)."""
    out = np.einsum("...n,...nd->...d", alpha.data, H.data)

    def backward(g):
        ga = np.einsum("...d,...nd->...n", g, H.data) if alpha.requires_grad else None
        gH = alpha.data[..., None] * g[..., None, :] if H.requires_grad else None
        return ga, gH

    return Tensor(out, _needs_grad(alpha, H), _parents=(alpha, H), _backward=backward)


def scaled_dot_attention(H: Tensor, q: Tensor, mask) -> tuple[Tensor, Tensor]:
    """Attention pooling of the rows of H with a learned query.

    Returns (v, alpha) where alpha = softmax(H.q / sqrt(d)) over valid rows
    and v = sum_i alpha_i H_i.
    """
    alpha = masked_softmax(attention_logits(H, q), mask)
    return weighted_sum(alpha, H), alpha


def linear(x: Tensor, weight: Tensor, bias: Tensor) -> Tensor:
    """Single-output affine map: (..., D) x (D,) + () -> (...)."""
    out = x.data @ weight.data + bias.data

    def backward(g):
        gx = g[..., None] * weight.data if x.requires_grad else None
        gw = g.reshape(-1) @ x.data.reshape(-1, weight.shape[0]) if weight.requires_grad else None
        gb = np.asarray(g.sum()).reshape(bias.shape) if bias.requires_grad else None
        return gx, gw, gb

    return Tensor(out, _needs_grad(x, weight, bias), _parents=(x, weight, bias), _backward=backward)


def dropout(x: Tensor, p: float, training: bool, rng: np.random.Generator | None = None) -> Tensor:
    """Inverted dropout. Identity when not training or p == 0."""
    if not 0.0 <= p < 1.0:
        raise KernelInputError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise KernelInputError("training-mode dropout needs an rng")
    keep = ((rng.random(x.shape, dtype=np.float32) >= p) / (1.0 - p)).astype(x.data.dtype)
    out = x.data * keep

    def backward(g):
        return (g * keep,)

    return Tensor(out, _needs_grad(x), _parents=(x,), _backward=backward)


def _float_array(z) -> np.ndarray:
    z = np.asarray(z)
    return z if np.issubdtype(z.dtype, np.floating) else z.astype(DTYPE)


def sigmoid(z):
    z = _float_array(z)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def bce_with_logits(z, y):
    """Elementwise stable -[y log s(z) + (1-y) log(1-s(z))]."""
    z = _float_array(z)
    y = np.asarray(y, dtype=z.dtype)
    return np.maximum(z, 0.0) - z * y + np.log1p(np.exp(-np.abs(z)))


def sigmoid_bce(logits: Tensor, labels, reduction: str = "mean") -> Tensor:
    """Binary cross-entropy on raw logits; gradient is (sigmoid(z) - y) / n for 'mean'."""
    y = np.asarray(labels, dtype=logits.data.dtype)
    if np.any((y != 0) & (y != 1)):
        raise KernelInputError("labels must be 0 or 1")
    if y.shape != logits.shape:
        y = np.broadcast_to(y, logits.shape)
    losses = bce_with_logits(logits.data, y)
    if reduction == "mean":
        scale = 1.0 / max(losses.size, 1)
    elif reduction == "sum":
        scale = 1.0
    else:
        raise KernelInputError(f"unknown reduction {reduction!r}")
    out = np.asarray(losses.sum() * scale)

    def backward(g):
        return ((sigmoid(logits.data) - y) * (g * scale),)

    return Tensor(out, _needs_grad(logits), _parents=(logits,), _backward=backward)


def tsum(x: Tensor) -> Tensor:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return Tensor(np.asarray(x.data.sum()), _needs_grad(x), _parents=(x,), _backward=backward)


def dot(x: Tensor, w: np.ndarray) -> Tensor:
    """Contract x with a constant array of the same shape (handy in tests)."""
    w = np.asarray(w, dtype=DTYPE)

    def backward(g):
        return (g * w,)

    return Tensor(np.asarray((x.data * w).sum()), _needs_grad(x), _parents=(x,), _backward=backward)


# --------------------------------------------------------------------------
# optimisation
# --------------------------------------------------------------------------

class AdamState:
    """Moment buffers for Adam; ``step`` counts completed updates."""

    def __init__(self, params: Mapping[str, Tensor], lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.step = 0
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.m = {k: np.zeros_like(p.data) for k, p in params.items()}
        self.u = {k: np.zeros_like(p.data) for k, p in params.items()}


def adam_step(params: Mapping[str, Tensor], grads: Mapping[str, np.ndarray | None],
              state: AdamState) -> None:
    """Bias-corrected Adam update applied in place to ``params``."""
    state.step += 1
    t = state.step
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for k, p in params.items():
        g = grads.get(k)
        if g is None:
            g = np.zeros_like(p.data)
        if g.shape != p.data.shape or state.m[k].shape != p.data.shape:
            raise KernelInternalError(f"shape mismatch for parameter {k!r}")
        m = state.m[k]
        u = state.u[k]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        u *= state.beta2
        u += (1.0 - state.beta2) * (g * g)
        p.data -= state.lr * (m / bc1) / (np.sqrt(u / bc2) + state.eps)


# --------------------------------------------------------------------------
# gradient checking
# --------------------------------------------------------------------------

def _relative_errors(analytic: np.ndarray, numeric: np.ndarray) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return np.abs(analytic - numeric) / denom


def grad_check_groups(f: Callable[[], Tensor], params: Mapping[str, Tensor],
                      eps: float = 1e-5, coords: Mapping[str, np.ndarray] | None = None,
                      numeric_dtype=np.longdouble) -> dict[str, float]:
    """Max relative error between backprop and central differences, per parameter.

    ``f`` must rebuild the scalar loss from the current parameter values each
    call. The analytic gradient comes from a float64 backward pass; the
    central differences are evaluated with every parameter cast to
    ``numeric_dtype`` (extended precision by default) so that rounding in the
    loss does not swamp gradients of order 1e-8. ``coords`` optionally
    restricts checking to flat indices per group.
    """
    for p in params.values():
        p.zero_grad()
    loss = f()
    if not np.isfinite(loss.data).all():
        raise KernelInternalError("loss is not finite")
    loss.backward()
    analytic = {k: (p.grad if p.grad is not None else np.zeros_like(p.data)).reshape(-1).copy()
                for k, p in params.items()}
    for p in params.values():
        p.zero_grad()

    saved = {k: p.data for k, p in params.items()}
    result = {}
    try:
        for p in params.values():
            p.data = p.data.astype(numeric_dtype)
        h = numeric_dtype(eps)
        for name, p in params.items():
            flat = p.data.reshape(-1)
            idx = np.arange(flat.size) if coords is None or name not in coords else np.asarray(coords[name])
            numeric = np.empty(idx.size)
            for j, i in enumerate(idx):
                orig = flat[i]
                flat[i] = orig + h
                fp = f().data[()]
                flat[i] = orig - h
                fm = f().data[()]
                flat[i] = orig
                if not (np.isfinite(fp) and np.isfinite(fm)):
                    raise KernelInternalError(f"non-finite loss while perturbing {name}[{i}]")
                numeric[j] = float((fp - fm) / (2 * h))
            err = _relative_errors(analytic[name][idx], numeric)
            result[name] = float(err.max()) if err.size else 0.0
    finally:
        for k, p in params.items():
            p.data = saved[k]
    return result


def grad_check(f: Callable[[], Tensor], params: Mapping[str, Tensor], eps: float = 1e-5,
               numeric_dtype=np.longdouble) -> float:
    """Max relative error over every coordinate of every parameter."""
    errs = grad_check_groups(f, params, eps, numeric_dtype=numeric_dtype)
    return max(errs.values()) if errs else 0.0
