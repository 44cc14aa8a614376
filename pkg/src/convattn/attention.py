"""Multi-head scaled dot-product self-attention in three scopes.

All three modes share one parameter set (``W_Q``, ``W_K``, ``W_V``,
``W_O`` — exactly ``4 * d**2`` weights); a mode only changes which
key/value entries a query may attend to:

* ``global`` — query (h, i) attends to every position of its own head.
* ``conv1d`` — query (h, i) attends to the ``M + 1`` positions centered
  at ``i`` within its own head.  Windows truncate at sequence ends and
  the softmax renormalizes over the surviving positions.
* ``conv2d`` — additionally attends to the same position window of the
  ``N + 1`` heads centered at ``h`` (no re-projection: keys and values
  of neighboring heads are used as-is in the shared d/H-wide subspace),
  with a single joint softmax over the whole (N+1) x (M+1) area.

``M`` and ``N`` must be even so the windows center exactly on the query;
odd values are rejected rather than rounded.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import ops
from .tensor import Tensor

GLOBAL = "global"
CONV1D = "conv1d"
CONV2D = "conv2d"


def _check_even_span(value, name: str) -> int:
    value = int(value)
    if value < 0:
        raise ValueError(f"{name} must be >= 0, got {value}")
    if value % 2 != 0:
        raise ValueError(f"{name} must be even (windows are centered, i +/- {name}/2), got {value}")
    return value


@dataclass(frozen=True)
class AttentionMode:
    """Key/value scope of every query: global, conv1d, or conv2d.

    ``window_m`` is the position-window size parameter (the window holds
    ``window_m + 1`` positions); ``head_span_n`` likewise on the head
    axis for conv2d.  Use the factory classmethods; they validate.
    """

    kind: str
    window_m: int | None = None
    head_span_n: int | None = None

    def __post_init__(self):
        if self.kind == GLOBAL:
            if self.window_m is not None or self.head_span_n is not None:
                raise ValueError("global attention takes no window or head span")
        elif self.kind == CONV1D:
            if self.window_m is None or self.head_span_n is not None:
                raise ValueError("conv1d attention takes a window and no head span")
            _check_even_span(self.window_m, "window_m")
        elif self.kind == CONV2D:
            if self.window_m is None or self.head_span_n is None:
                raise ValueError("conv2d attention takes both a window and a head span")
            _check_even_span(self.window_m, "window_m")
            _check_even_span(self.head_span_n, "head_span_n")
        else:
            raise ValueError(f"unknown attention kind {self.kind!r}")

    @classmethod
    def global_(cls) -> "AttentionMode":
        return cls(GLOBAL)

    @classmethod
    def conv1d(cls, window_m: int) -> "AttentionMode":
        return cls(CONV1D, window_m=window_m)

    @classmethod
    def conv2d(cls, window_m: int, head_span_n: int) -> "AttentionMode":
        return cls(CONV2D, window_m=window_m, head_span_n=head_span_n)

    @property
    def is_windowed(self) -> bool:
        return self.kind != GLOBAL

    def label(self) -> str:
        """Compact text form, e.g. ``global``, ``conv1d:4``, ``conv2d:4,2``."""
        if self.kind == GLOBAL:
            return GLOBAL
        if self.kind == CONV1D:
            return f"{CONV1D}:{self.window_m}"
        return f"{CONV2D}:{self.window_m},{self.head_span_n}"


def parse_mode(label: str) -> AttentionMode:
    """Inverse of :meth:`AttentionMode.label`."""
    text = label.strip()
    if text == GLOBAL:
        return AttentionMode.global_()
    kind, sep, args = text.partition(":")
    if kind == CONV1D and sep:
        try:
            return AttentionMode.conv1d(int(args))
        except ValueError as exc:
            raise ValueError(f"bad attention mode {label!r}: {exc}") from None
    if kind == CONV2D and sep:
        parts = args.split(",")
        if len(parts) == 2:
            try:
                return AttentionMode.conv2d(int(parts[0]), int(parts[1]))
            except ValueError as exc:
                raise ValueError(f"bad attention mode {label!r}: {exc}") from None
    raise ValueError(
        f"bad attention mode {label!r}; expected 'global', 'conv1d:M', or 'conv2d:M,N'"
    )


@dataclass
class MultiHeadParams:
    """Projection matrices shared by every attention mode."""

    w_q: Tensor
    w_k: Tensor
    w_v: Tensor
    w_o: Tensor
    n_heads: int

    def __post_init__(self):
        d = self.w_q.shape[0] if self.w_q.ndim == 2 else -1
        for name in ("w_q", "w_k", "w_v", "w_o"):
            t = getattr(self, name)
            if t.shape != (d, d):
                raise ValueError(f"{name} must be square [d, d], got {t.shape}")
        if self.n_heads < 1 or d % self.n_heads != 0:
            raise ValueError(f"head count {self.n_heads} must divide width {d}")

    @property
    def d(self) -> int:
        return self.w_q.shape[0]

    @property
    def head_dim(self) -> int:
        return self.d // self.n_heads

    def tensors(self) -> list[Tensor]:
        return [self.w_q, self.w_k, self.w_v, self.w_o]


@dataclass
class AttentionTrace:
    """Attention probabilities of one call, indexed [q_head, q_pos, k_head, k_pos].

    Entries outside a query's active set are exact zeros; each (q_head,
    q_pos) slice sums to 1 over the whole key plane.
    """

    weights: Tensor


def count_params(params: MultiHeadParams) -> int:
    """Number of attention weights: 4 * d**2, whatever the mode."""
    return sum(t.size for t in params.tensors())


def window_positions(i: int, seq_len: int, window_m: int) -> list[int]:
    """Positions query ``i`` may attend to: ``max(0, i - M/2) .. min(I-1, i + M/2)``."""
    window_m = _check_even_span(window_m, "window_m")
    if not 0 <= i < seq_len:
        raise ValueError(f"query position {i} out of range [0, {seq_len})")
    half = window_m // 2
    return list(range(max(0, i - half), min(seq_len - 1, i + half) + 1))


def head_window(h: int, n_heads: int, head_span_n: int) -> list[int]:
    """Heads query head ``h`` may attend to: ``max(0, h - N/2) .. min(H-1, h + N/2)``."""
    head_span_n = _check_even_span(head_span_n, "head_span_n")
    if not 0 <= h < n_heads:
        raise ValueError(f"head index {h} out of range [0, {n_heads})")
    half = head_span_n // 2
    return list(range(max(0, h - half), min(n_heads - 1, h + half) + 1))


@lru_cache(maxsize=None)
def _window_index(seq_len: int, window_m: int) -> tuple[np.ndarray, np.ndarray]:
    """Slot grid for vectorized windowing.

    Returns ``(idx, valid)``, both ``[I, M+1]``: slot ``t`` of query ``i``
    addresses position ``i - M/2 + t``.  ``valid`` marks in-range slots;
    ``idx`` is clamped so gathers stay legal (clamped slots are masked to
    exact zero weight downstream, so they never contribute).
    """
    half = window_m // 2
    span = np.arange(-half, half + 1)
    raw = np.arange(seq_len)[:, None] + span[None, :]
    valid = (raw >= 0) & (raw < seq_len)
    idx = np.clip(raw, 0, seq_len - 1)
    idx.setflags(write=False)
    valid.setflags(write=False)
    return idx, valid


def project_qkv(x: Tensor, params: MultiHeadParams) -> tuple[Tensor, Tensor, Tensor]:
    """Per-head queries, keys, values: split_heads(X @ W) for each projection."""
    if x.ndim != 2 or x.shape[1] != params.d:
        raise ValueError(f"input width must be {params.d}, got shape {x.shape}")
    q = ops.split_heads(ops.matmul(x, params.w_q), params.n_heads)
    k = ops.split_heads(ops.matmul(x, params.w_k), params.n_heads)
    v = ops.split_heads(ops.matmul(x, params.w_v), params.n_heads)
    return q, k, v


def scaled_dot_attention(q: Tensor, k_sel: Tensor, v_sel: Tensor) -> tuple[Tensor, Tensor]:
    """One query against an already-selected key/value set (forward only).

    Computes ``w = softmax(q . k_t / sqrt(dh))`` and ``o = sum w_t v_t``
    with the same stabilized softmax the batched path uses.
    """
    if q.ndim != 1:
        raise ValueError(f"q must be 1-D, got shape {q.shape}")
    if k_sel.ndim != 2 or v_sel.ndim != 2 or k_sel.shape != v_sel.shape:
        raise ValueError(f"keys/values must be matching [S, dh], got {k_sel.shape} and {v_sel.shape}")
    if k_sel.shape[0] < 1:
        raise ValueError("empty key/value selection")
    if k_sel.shape[1] != q.shape[0]:
        raise ValueError(f"key width {k_sel.shape[1]} does not match query width {q.shape[0]}")
    logits = k_sel.data @ q.data / math.sqrt(q.shape[0])
    shifted = logits - logits.max()
    weights = np.exp(shifted)
    weights /= weights.sum()
    return Tensor(weights @ v_sel.data), Tensor(weights)


def attend(
    x: Tensor,
    params: MultiHeadParams,
    mode: AttentionMode,
    with_trace: bool = True,
) -> tuple[Tensor, AttentionTrace | None]:
    """Multi-head self-attention over ``x [I, d]`` under ``mode``.

    Returns the projected output ``[I, d]`` and the full weight trace
    (pass ``with_trace=False`` to skip building the [H, I, H, I] trace,
    which benchmarking wants because the trace alone is quadratic in I).
    """
    seq_len = x.shape[0]
    n_heads = params.n_heads
    head_dim = params.head_dim
    inv_scale = 1.0 / math.sqrt(head_dim)

    q3, k3, v3 = project_qkv(x, params)
    queries = [ops.index0(q3, h) for h in range(n_heads)]
    keys = [ops.index0(k3, h) for h in range(n_heads)]
    values = [ops.index0(v3, h) for h in range(n_heads)]

    trace = np.zeros((n_heads, seq_len, n_heads, seq_len)) if with_trace else None
    head_outputs = []

    if mode.kind == GLOBAL:
        mask = ops.full_mask(seq_len, seq_len)
        for h in range(n_heads):
            logits = ops.scale(ops.matmul(queries[h], ops.transpose(keys[h])), inv_scale)
            weights = ops.masked_softmax(logits, mask)
            head_outputs.append(ops.matmul(weights, values[h]))
            if trace is not None:
                trace[h, :, h, :] = weights.data
    else:
        idx, valid = _window_index(seq_len, mode.window_m)
        slots = idx.shape[1]
        for h in range(n_heads):
            span = head_window(h, n_heads, mode.head_span_n or 0)
            k_parts = [ops.window_gather(keys[s], idx) for s in span]
            v_parts = [ops.window_gather(values[s], idx) for s in span]
            k_win = k_parts[0] if len(span) == 1 else ops.concat(k_parts, axis=1)
            v_win = v_parts[0] if len(span) == 1 else ops.concat(v_parts, axis=1)
            mask = valid if len(span) == 1 else np.concatenate([valid] * len(span), axis=1)
            logits = ops.scale(ops.rowwise_dot(queries[h], k_win), inv_scale)
            weights = ops.masked_softmax(logits, mask)
            head_outputs.append(ops.rowwise_weighted_sum(weights, v_win))
            if trace is not None:
                rows, cols = np.nonzero(valid)
                for block, s in enumerate(span):
                    w_block = weights.data[:, block * slots : (block + 1) * slots]
                    trace[h, rows, s, idx[rows, cols]] = w_block[rows, cols]

    merged = ops.merge_heads(ops.stack0(head_outputs))
    out = ops.matmul(merged, params.w_o)
    return out, (AttentionTrace(Tensor(trace)) if with_trace else None)
