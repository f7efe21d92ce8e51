"""Minimal reverse-mode autodiff over dense float64 arrays of rank <= 3.

Design: a thin tape of closures over numpy. Every op builds a node that
remembers its parents and a function mapping the output gradient to parent
gradients. `backward()` walks the tape in reverse topological order once.

Deliberate restrictions (they keep the gradient rules auditable):
  - float64 only, row-major numpy storage
  - no broadcasting beyond bias-add (trailing-dim vector added to a matrix)
  - rank <= 3; batched matmul follows numpy `@` semantics
"""

from __future__ import annotations

import warnings
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np


class GradOffState:
    enabled = True


_grad_state = GradOffState()


@contextmanager
def no_grad():
    """Disable tape construction inside the block (inference speed-up)."""
    prev = _grad_state.enabled
    _grad_state.enabled = False
    try:
        yield
    finally:
        _grad_state.enabled = prev


class ShapeError(ValueError):
    pass


class ContractError(RuntimeError):
    pass


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward_fn")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim > 3:
            raise ShapeError(f"rank {arr.ndim} > 3 not supported (shape {arr.shape})")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def zero_grad(self):
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def backward(self):
        """Accumulate d(self)/d(leaf) into every requires_grad leaf."""
        if self.data.shape != ():
            raise ContractError(f"backward requires a scalar, got shape {self.data.shape}")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.ones(())}
        for node in reversed(topo):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            if node._backward_fn is None:
                continue
            parent_grads = node._backward_fn(g)
            for p, pg in zip(node._parents, parent_grads):
                if pg is None:
                    continue
                if not (p.requires_grad or p._backward_fn is not None):
                    continue
                if id(p) in grads:
                    grads[id(p)] = grads[id(p)] + pg
                else:
                    grads[id(p)] = pg

    # -- convenience arithmetic -------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _node(data: np.ndarray, parents: tuple[Tensor, ...], backward_fn) -> Tensor:
    out = Tensor(data)
    if _grad_state.enabled and any(p.requires_grad or p._backward_fn is not None for p in parents):
        out._parents = parents
        out._backward_fn = backward_fn
    return out


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# -- elementwise ----------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape and not (b.ndim == 1 and a.shape[-1] == b.shape[0]):
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} (only bias-add broadcast allowed)")
    out = a.data + b.data

    def bwd(g):
        gb = g
        if b.shape != a.shape:
            gb = g.reshape(-1, b.shape[0]).sum(axis=0)
        return g, gb

    return _node(out, (a, b), bwd)


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} must match")

    def bwd(g):
        return g * b.data, g * a.data

    return _node(a.data * b.data, (a, b), bwd)


def scale(a: Tensor, s: float) -> Tensor:
    def bwd(g):
        return (g * s,)

    return _node(a.data * s, (a,), bwd)


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0

    def bwd(g):
        return (g * mask,)

    return _node(np.maximum(a.data, 0.0), (a,), bwd)


def tsum(a: Tensor) -> Tensor:
    shape = a.shape

    def bwd(g):
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.data.sum()), (a,), bwd)


# -- linear algebra -------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.shape[-1] != b.shape[-2 if b.ndim > 1 else 0]:
        raise ShapeError(f"matmul: inner extents differ: {a.shape} @ {b.shape}")
    if a.ndim == 3 and b.ndim == 3 and a.shape[0] != b.shape[0]:
        raise ShapeError(f"matmul: batch extents differ: {a.shape} @ {b.shape}")
    out = a.data @ b.data

    def bwd(g):
        if a.ndim == 2 and b.ndim == 2:
            return g @ b.data.T, a.data.T @ g
        if a.ndim == 3 and b.ndim == 2:
            k, n = a.shape[-1], g.shape[-1]
            return (g @ b.data.T,
                    a.data.reshape(-1, k).T @ g.reshape(-1, n))
        if a.ndim == 3 and b.ndim == 3:
            return g @ b.data.swapaxes(-1, -2), a.data.swapaxes(-1, -2) @ g
        raise ShapeError(f"matmul backward: unsupported ranks {a.ndim}, {b.ndim}")

    return _node(out, (a, b), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-12) -> Tensor:
    mu = x.data.mean(axis=-1, keepdims=True)
    var = x.data.var(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xn = (x.data - mu) * inv
    out = xn * gain.data + bias.data
    d = x.shape[-1]

    def bwd(g):
        gxn = g * gain.data
        dx = inv * (gxn - gxn.mean(axis=-1, keepdims=True)
                    - xn * (gxn * xn).mean(axis=-1, keepdims=True))
        ggain = (g * xn).reshape(-1, d).sum(axis=0)
        gbias = g.reshape(-1, d).sum(axis=0)
        return dx, ggain, gbias

    return _node(out, (x, gain, bias), bwd)


def normalize(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Pre-affine layer norm (zero mean, unit variance along the last axis)."""
    ones = Tensor(np.ones(x.shape[-1]))
    zeros = Tensor(np.zeros(x.shape[-1]))
    return layer_norm(x, ones, zeros, eps)


def embedding_lookup(table: Tensor, ids) -> Tensor:
    ids = np.asarray(ids, dtype=np.int64)
    if ids.ndim > 2:
        raise ShapeError(f"embedding ids rank {ids.ndim} > 2")
    if ids.size and (ids.min() < 0 or ids.max() >= table.shape[0]):
        raise IndexError(f"embedding id out of range [0, {table.shape[0]})")
    out = table.data[ids]
    d = table.shape[1]

    def bwd(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids.reshape(-1), g.reshape(-1, d))
        return (gt,)

    return _node(out, (table,), bwd)


# -- shape surgery --------------------------------------------------------

def _concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    out = np.concatenate([t.data for t in tensors], axis=axis)
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        return tuple(np.take(g, np.arange(offsets[i], offsets[i + 1]), axis=axis)
                     for i in range(len(tensors)))

    return _node(out, tuple(tensors), bwd)


def concat_time(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, axis=-2)


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    return _concat(tensors, axis=-1)


def _slice(x: Tensor, start: int, stop: int, axis: int) -> Tensor:
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)

    def bwd(g):
        gx = np.zeros_like(x.data)
        gx[idx] = g
        return (gx,)

    return _node(x.data[idx], (x,), bwd)


def slice_time(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, start, stop, axis=x.ndim - 2)


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return _slice(x, start, stop, axis=x.ndim - 1)


def stack_rows(tensors: Sequence[Tensor]) -> Tensor:
    """Stack rank-2 tensors of identical shape into one rank-3 batch."""
    tensors = [_as_tensor(t) for t in tensors]
    shape = tensors[0].shape
    for t in tensors:
        if t.shape != shape:
            raise ShapeError(f"stack_rows: shapes {shape} vs {t.shape}")
    out = np.stack([t.data for t in tensors], axis=0)

    def bwd(g):
        return tuple(g[i] for i in range(len(tensors)))

    return _node(out, tuple(tensors), bwd)


def avg_pool_time(x: Tensor, rate: int) -> Tensor:
    """Average pooling along time; a trailing partial window is averaged
    over its actual size."""
    if rate < 1:
        raise ShapeError(f"pool rate must be >= 1, got {rate}")
    if rate == 1:
        return x
    L = x.shape[-2]
    n_out = -(-L // rate)
    starts = [k * rate for k in range(n_out)]
    stops = [min((k + 1) * rate, L) for k in range(n_out)]
    taxis = x.ndim - 2
    out = np.stack([x.data.take(np.arange(a, b), axis=taxis).mean(axis=taxis)
                    for a, b in zip(starts, stops)], axis=taxis)

    def bwd(g):
        gx = np.zeros_like(x.data)
        for k, (a, b) in enumerate(zip(starts, stops)):
            gk = np.take(g, k, axis=taxis) / (b - a)
            idx = [slice(None)] * x.ndim
            idx[taxis] = slice(a, b)
            gx[tuple(idx)] += gk[..., None, :] if taxis == x.ndim - 2 else gk
        return (gx,)

    return _node(out, (x,), bwd)


# -- attention and loss ---------------------------------------------------

def causal_attention(q: Tensor, k: Tensor, v: Tensor) -> Tensor:
    """Scaled dot-product attention with a strict causal mask.

    Shapes: (S, h) or (B, S, h); position s attends to positions <= s.
    """
    if q.shape != k.shape or q.shape != v.shape:
        raise ShapeError(f"attention: q/k/v shapes differ: {q.shape}, {k.shape}, {v.shape}")
    h = q.shape[-1]
    S = q.shape[-2]
    inv = 1.0 / np.sqrt(h)
    scores = (q.data @ k.data.swapaxes(-1, -2)) * inv
    mask = np.triu(np.ones((S, S), dtype=bool), k=1)
    scores = np.where(mask, -np.inf, scores)
    m = scores.max(axis=-1, keepdims=True)
    e = np.exp(scores - m)
    p = e / e.sum(axis=-1, keepdims=True)
    out = p @ v.data

    def bwd(g):
        gv = p.swapaxes(-1, -2) @ g
        gp = g @ v.data.swapaxes(-1, -2)
        gs = p * (gp - (gp * p).sum(axis=-1, keepdims=True))
        gq = (gs @ k.data) * inv
        gk = (gs.swapaxes(-1, -2) @ q.data) * inv
        return gq, gk, gv

    return _node(out, (q, k, v), bwd)


def softmax_cross_entropy(logits: Tensor, targets, mask) -> Tensor:
    """Sum of -log softmax(logits)[target] over masked positions.

    `logits` is (S, V) or (B, S, V); `targets` and `mask` match the leading
    shape. An all-false mask yields loss 0 (with a warning).
    """
    targets = np.asarray(targets, dtype=np.int64)
    mask = np.asarray(mask, dtype=bool)
    V = logits.shape[-1]
    if targets.shape != logits.shape[:-1] or mask.shape != targets.shape:
        raise ShapeError(
            f"cross entropy: logits {logits.shape}, targets {targets.shape}, mask {mask.shape}")
    if mask.any() and (targets[mask].min() < 0 or targets[mask].max() >= V):
        raise IndexError(f"target id out of range [0, {V})")
    if not mask.any():
        warnings.warn("cross entropy over an all-false mask is 0", stacklevel=2)
    z = logits.data - logits.data.max(axis=-1, keepdims=True)
    logsumexp = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    logp = z - logsumexp
    picked = np.take_along_axis(logp, targets[..., None].clip(0, V - 1), axis=-1)[..., 0]
    loss = -(picked * mask).sum()

    def bwd(g):
        sm = np.exp(logp)
        grad = sm.copy()
        np.put_along_axis(grad, targets[..., None].clip(0, V - 1),
                          np.take_along_axis(grad, targets[..., None].clip(0, V - 1), axis=-1) - 1.0,
                          axis=-1)
        grad *= mask[..., None]
        return (grad * g,)

    return _node(np.asarray(loss), (logits,), bwd)
