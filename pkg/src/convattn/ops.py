"""Differentiable array operations.

Every public function here validates shapes, computes the forward value
with numpy, and records reverse-mode edges on the returned
:class:`~convattn.tensor.Tensor`.  Masks and integer indices are plain
numpy arrays: they parameterize an op but are never differentiated.

Conventions:

* all floating data is float64; outputs are fresh arrays or safe views,
  never in-place mutations of inputs;
* ``masked_softmax`` normalizes along the last axis and writes exact 0.0
  at inactive entries (the maximum-shift is taken over active entries
  only, so activating a subset never overflows);
* reductions delegate to numpy, so summation order is numpy's blocked
  order — deterministic for a given build and shape, which is what the
  reproducibility guarantees rest on.
"""

from __future__ import annotations

from functools import lru_cache
from typing import Sequence

import numpy as np

from .tensor import Tensor, from_op

__all__ = [
    "matmul",
    "transpose",
    "add",
    "sub",
    "mul",
    "scale",
    "relu",
    "add_bias",
    "masked_softmax",
    "split_heads",
    "merge_heads",
    "layer_norm",
    "gather_rows",
    "window_gather",
    "rowwise_dot",
    "rowwise_weighted_sum",
    "concat",
    "stack0",
    "index0",
    "reduce_sum",
    "cross_entropy",
]


def _require_tensor(x, name: str) -> Tensor:
    if not isinstance(x, Tensor):
        raise TypeError(f"{name} must be a Tensor, got {type(x).__name__}")
    return x


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a 2-D ``a`` with a 2-D ``b``."""
    _require_tensor(a, "a")
    _require_tensor(b, "b")
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ValueError(f"matmul shapes are incompatible: {a.shape} @ {b.shape}")
    out = a.data @ b.data
    return from_op(
        out,
        [
            (a, lambda g, bd=b.data: g @ bd.T),
            (b, lambda g, ad=a.data: ad.T @ g),
        ],
    )


def transpose(a: Tensor) -> Tensor:
    """Transpose of a 2-D tensor."""
    _require_tensor(a, "a")
    if a.ndim != 2:
        raise ValueError(f"transpose expects a 2-D tensor, got shape {a.shape}")
    return from_op(a.data.T, [(a, lambda g: g.T)])


def _elementwise_operand(b, shape):
    """Return (array, is_tensor) for the second elementwise operand."""
    if isinstance(b, Tensor):
        if b.shape != shape:
            raise ValueError(f"elementwise operands must match: {shape} vs {b.shape}")
        return b.data, True
    return np.float64(b), False


def add(a: Tensor, b) -> Tensor:
    """Elementwise ``a + b``; ``b`` is a same-shape tensor or a scalar."""
    _require_tensor(a, "a")
    bd, tracked = _elementwise_operand(b, a.shape)
    edges = [(a, lambda g: g)]
    if tracked:
        edges.append((b, lambda g: g))
    return from_op(a.data + bd, edges)


def sub(a: Tensor, b) -> Tensor:
    """Elementwise ``a - b``; ``b`` is a same-shape tensor or a scalar."""
    _require_tensor(a, "a")
    bd, tracked = _elementwise_operand(b, a.shape)
    edges = [(a, lambda g: g)]
    if tracked:
        edges.append((b, lambda g: -g))
    return from_op(a.data - bd, edges)


def mul(a: Tensor, b) -> Tensor:
    """Elementwise ``a * b``; ``b`` is a same-shape tensor or a scalar."""
    _require_tensor(a, "a")
    bd, tracked = _elementwise_operand(b, a.shape)
    edges = [(a, lambda g: g * bd)]
    if tracked:
        edges.append((b, lambda g, ad=a.data: g * ad))
    return from_op(a.data * bd, edges)


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply every entry by the constant ``c``."""
    _require_tensor(a, "a")
    c = float(c)
    return from_op(a.data * c, [(a, lambda g: g * c)])


def relu(a: Tensor) -> Tensor:
    _require_tensor(a, "a")
    keep = a.data > 0.0
    return from_op(np.where(keep, a.data, 0.0), [(a, lambda g: g * keep)])


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a length-``n`` bias vector to every row of a 2-D tensor."""
    _require_tensor(x, "x")
    _require_tensor(b, "b")
    if x.ndim != 2 or b.shape != (x.shape[1],):
        raise ValueError(f"add_bias expects x [m, n] and b [n], got {x.shape} and {b.shape}")
    return from_op(
        x.data + b.data,
        [(x, lambda g: g), (b, lambda g: g.sum(axis=0))],
    )


def masked_softmax(logits: Tensor, active: np.ndarray) -> Tensor:
    """Softmax along the last axis restricted to ``active`` entries.

    Inactive entries get an exact 0.0 weight; active entries of every row
    normalize to 1.  Each row must keep at least one active entry.
    """
    _require_tensor(logits, "logits")
    active = np.asarray(active)
    if active.dtype != np.bool_:
        raise ValueError(f"active mask must be boolean, got dtype {active.dtype}")
    if active.shape != logits.shape:
        raise ValueError(f"mask shape {active.shape} does not match logits shape {logits.shape}")
    if not active.any(axis=-1).all():
        raise ValueError("masked_softmax requires at least one active entry per row")

    shifted = np.where(active, logits.data, -np.inf)
    shifted = shifted - shifted.max(axis=-1, keepdims=True)
    weights = np.exp(shifted, where=active, out=np.zeros_like(shifted))
    weights /= weights.sum(axis=-1, keepdims=True)

    def backward(g, y=weights):
        inner = (g * y).sum(axis=-1, keepdims=True)
        return y * (g - inner)

    return from_op(weights, [(logits, backward)])


def split_heads(x: Tensor, n_heads: int) -> Tensor:
    """Reshape ``[I, d]`` into per-head subspaces ``[n_heads, I, d / n_heads]``."""
    _require_tensor(x, "x")
    if x.ndim != 2:
        raise ValueError(f"split_heads expects a 2-D tensor, got shape {x.shape}")
    rows, d = x.shape
    if n_heads < 1 or d % n_heads != 0:
        raise ValueError(f"cannot split width {d} into {n_heads} heads")
    out = x.data.reshape(rows, n_heads, d // n_heads).transpose(1, 0, 2)
    return from_op(out, [(x, lambda g: g.transpose(1, 0, 2).reshape(rows, d))])


def merge_heads(x: Tensor) -> Tensor:
    """Inverse of :func:`split_heads`: ``[H, I, dh]`` back to ``[I, H * dh]``."""
    _require_tensor(x, "x")
    if x.ndim != 3:
        raise ValueError(f"merge_heads expects a 3-D tensor, got shape {x.shape}")
    n_heads, rows, dh = x.shape
    out = x.data.transpose(1, 0, 2).reshape(rows, n_heads * dh)
    return from_op(out, [(x, lambda g: g.reshape(rows, n_heads, dh).transpose(1, 0, 2))])


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize each row of ``x`` to zero mean / unit variance, then affine."""
    _require_tensor(x, "x")
    _require_tensor(gain, "gain")
    _require_tensor(bias, "bias")
    if x.ndim != 2:
        raise ValueError(f"layer_norm expects a 2-D tensor, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ValueError(
            f"layer_norm gain/bias must have shape ({d},), got {gain.shape} and {bias.shape}"
        )
    mean = x.data.mean(axis=1, keepdims=True)
    centered = x.data - mean
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv_std = 1.0 / np.sqrt(var + eps)
    normed = centered * inv_std
    out = normed * gain.data + bias.data

    def backward_x(g, normed=normed, inv_std=inv_std, gd=gain.data):
        gn = g * gd
        return inv_std * (
            gn
            - gn.mean(axis=1, keepdims=True)
            - normed * (gn * normed).mean(axis=1, keepdims=True)
        )

    return from_op(
        out,
        [
            (x, backward_x),
            (gain, lambda g, normed=normed: (g * normed).sum(axis=0)),
            (bias, lambda g: g.sum(axis=0)),
        ],
    )


def _check_index_array(idx, size: int, name: str) -> np.ndarray:
    idx = np.asarray(idx)
    if not np.issubdtype(idx.dtype, np.integer):
        raise ValueError(f"{name} must be integers, got dtype {idx.dtype}")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ValueError(f"{name} out of range [0, {size})")
    return idx


def gather_rows(table: Tensor, ids) -> Tensor:
    """Select rows ``table[ids]`` (embedding lookup); ``ids`` is 1-D."""
    _require_tensor(table, "table")
    if table.ndim != 2:
        raise ValueError(f"gather_rows expects a 2-D table, got shape {table.shape}")
    ids = _check_index_array(ids, table.shape[0], "ids")
    if ids.ndim != 1:
        raise ValueError(f"ids must be 1-D, got shape {ids.shape}")

    def backward(g, ids=ids, shape=table.shape):
        dt = np.zeros(shape)
        np.add.at(dt, ids, g)
        return dt

    return from_op(table.data[ids], [(table, backward)])


def window_gather(x: Tensor, idx: np.ndarray) -> Tensor:
    """Gather row windows: ``x [I, dh]`` and ``idx [R, S]`` give ``[R, S, dh]``.

    Used to pull the key/value rows of each query's window in one shot;
    the backward pass scatter-adds, so repeated indices (clamped window
    edges) accumulate correctly.
    """
    _require_tensor(x, "x")
    if x.ndim != 2:
        raise ValueError(f"window_gather expects a 2-D tensor, got shape {x.shape}")
    idx = _check_index_array(idx, x.shape[0], "idx")
    if idx.ndim != 2:
        raise ValueError(f"idx must be 2-D, got shape {idx.shape}")

    def backward(g, idx=idx, shape=x.shape):
        dx = np.zeros(shape)
        np.add.at(dx, idx.ravel(), g.reshape(-1, shape[1]))
        return dx

    return from_op(x.data[idx], [(x, backward)])


def rowwise_dot(q: Tensor, kwin: Tensor) -> Tensor:
    """Per-row dot products: ``q [R, dh]`` with ``kwin [R, S, dh]`` -> ``[R, S]``."""
    _require_tensor(q, "q")
    _require_tensor(kwin, "kwin")
    if q.ndim != 2 or kwin.ndim != 3 or kwin.shape[0] != q.shape[0] or kwin.shape[2] != q.shape[1]:
        raise ValueError(f"rowwise_dot shapes are incompatible: {q.shape} vs {kwin.shape}")
    out = np.einsum("rd,rsd->rs", q.data, kwin.data)
    return from_op(
        out,
        [
            (q, lambda g, kd=kwin.data: np.einsum("rs,rsd->rd", g, kd)),
            (kwin, lambda g, qd=q.data: np.einsum("rs,rd->rsd", g, qd)),
        ],
    )


def rowwise_weighted_sum(w: Tensor, vwin: Tensor) -> Tensor:
    """Per-row combinations: ``w [R, S]`` with ``vwin [R, S, dh]`` -> ``[R, dh]``."""
    _require_tensor(w, "w")
    _require_tensor(vwin, "vwin")
    if w.ndim != 2 or vwin.ndim != 3 or vwin.shape[:2] != w.shape:
        raise ValueError(f"rowwise_weighted_sum shapes are incompatible: {w.shape} vs {vwin.shape}")
    out = np.einsum("rs,rsd->rd", w.data, vwin.data)
    return from_op(
        out,
        [
            (w, lambda g, vd=vwin.data: np.einsum("rd,rsd->rs", g, vd)),
            (vwin, lambda g, wd=w.data: np.einsum("rs,rd->rsd", wd, g)),
        ],
    )


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    """Concatenate tensors along ``axis``."""
    parts = list(parts)
    if not parts:
        raise ValueError("concat requires at least one tensor")
    for p in parts:
        _require_tensor(p, "parts")
        if p.ndim != parts[0].ndim:
            raise ValueError("concat requires matching ranks")
    out = np.concatenate([p.data for p in parts], axis=axis)
    edges = []
    offset = 0
    for p in parts:
        width = p.shape[axis]
        window = [slice(None)] * out.ndim
        window[axis] = slice(offset, offset + width)
        edges.append((p, lambda g, sl=tuple(window): g[sl]))
        offset += width
    return from_op(out, edges)


def stack0(parts: Sequence[Tensor]) -> Tensor:
    """Stack same-shape tensors along a new leading axis."""
    parts = list(parts)
    if not parts:
        raise ValueError("stack0 requires at least one tensor")
    shape = parts[0].shape
    for p in parts:
        _require_tensor(p, "parts")
        if p.shape != shape:
            raise ValueError(f"stack0 requires matching shapes, got {shape} and {p.shape}")
    out = np.stack([p.data for p in parts], axis=0)
    return from_op(out, [(p, lambda g, i=i: g[i]) for i, p in enumerate(parts)])


def index0(x: Tensor, i: int) -> Tensor:
    """Select slice ``x[i]`` along the leading axis."""
    _require_tensor(x, "x")
    if x.ndim < 1:
        raise ValueError("index0 requires at least one axis")
    i = int(i)
    if not 0 <= i < x.shape[0]:
        raise ValueError(f"index {i} out of range [0, {x.shape[0]})")

    def backward(g, i=i, shape=x.shape):
        dx = np.zeros(shape)
        dx[i] = g
        return dx

    return from_op(x.data[i], [(x, backward)])


def reduce_sum(x: Tensor) -> Tensor:
    """Sum of all entries, as a 0-D tensor."""
    _require_tensor(x, "x")
    out = np.asarray(np.sum(x.data))
    return from_op(out, [(x, lambda g, shape=x.shape: np.full(shape, float(g)))])


def cross_entropy(logits: Tensor, targets) -> Tensor:
    """Mean cross-entropy of row-wise softmax against integer targets.

    ``logits`` is ``[I, V]`` and ``targets`` holds ``I`` class ids in
    ``[0, V)``.  Uses the log-sum-exp shift, so large logits stay finite.
    """
    _require_tensor(logits, "logits")
    if logits.ndim != 2:
        raise ValueError(f"cross_entropy expects 2-D logits, got shape {logits.shape}")
    rows, n_classes = logits.shape
    targets = _check_index_array(targets, n_classes, "targets")
    if targets.shape != (rows,):
        raise ValueError(f"targets shape {targets.shape} does not match {rows} logit rows")

    shift = logits.data.max(axis=1, keepdims=True)
    z = logits.data - shift
    log_norm = np.log(np.exp(z).sum(axis=1)) + shift[:, 0]
    picked = logits.data[np.arange(rows), targets]
    out = np.asarray(np.mean(log_norm - picked))

    def backward(g, z=z, targets=targets, rows=rows):
        probs = np.exp(z)
        probs /= probs.sum(axis=1, keepdims=True)
        probs[np.arange(rows), targets] -= 1.0
        return probs * (float(g) / rows)

    return from_op(out, [(logits, backward)])


@lru_cache(maxsize=None)
def full_mask(n_rows: int, n_cols: int) -> np.ndarray:
    """An all-active boolean mask, cached because attention reuses it."""
    mask = np.ones((n_rows, n_cols), dtype=bool)
    mask.setflags(write=False)
    return mask
