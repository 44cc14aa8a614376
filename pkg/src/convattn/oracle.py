"""Brute-force reference implementations for validating the fast paths.

Everything here favors obviousness over speed.  ``ref_attend``,
``ref_encoder_layer``, and ``ref_encode`` re-derive the math with plain
Python scalar loops straight from the definitions (ascending-index sums,
one query at a time) and deliberately share no routines with the
optimized modules: agreement between the two is the point.  The finite
difference helper plays the same role for gradients.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .attention import CONV2D, GLOBAL, AttentionMode, MultiHeadParams
from .tensor import Tensor

_LN_EPS = 1e-5  # must mirror the layer-norm epsilon of the encoder contract


def _rows(x) -> list[list[float]]:
    data = x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)
    return [list(map(float, row)) for row in data]


def _mat_vec_rows(rows: list[list[float]], weight: list[list[float]]) -> list[list[float]]:
    """Row-by-row matrix product with explicit ascending-index loops."""
    n_out = len(weight[0])
    out = []
    for row in rows:
        out.append([sum(row[t] * weight[t][c] for t in range(len(row))) for c in range(n_out)])
    return out


def ref_attend(x, params: MultiHeadParams, mode: AttentionMode) -> Tensor:
    """Loop-based re-derivation of :func:`convattn.attention.attend`.

    For every query (head h, position i) the active key/value pairs are
    enumerated directly from the window definitions — positions
    ``max(0, i - M/2) .. min(I-1, i + M/2)``, heads
    ``max(0, h - N/2) .. min(H-1, h + N/2)`` — in head-major order, and
    a single softmax is taken over that list.
    """
    xv = _rows(x)
    wq, wk, wv, wo = (_rows(t) for t in params.tensors())
    seq_len = len(xv)
    d = len(xv[0]) if xv else 0
    n_heads = params.n_heads
    dh = d // n_heads

    q = _mat_vec_rows(xv, wq)
    k = _mat_vec_rows(xv, wk)
    v = _mat_vec_rows(xv, wv)

    def head_slice(full_row: list[float], h: int) -> list[float]:
        return full_row[h * dh : (h + 1) * dh]

    if mode.kind == GLOBAL:
        pos_window = lambda i: list(range(seq_len))
        head_span = 0
    else:
        half_m = mode.window_m // 2
        pos_window = lambda i: list(range(max(0, i - half_m), min(seq_len - 1, i + half_m) + 1))
        head_span = mode.head_span_n if mode.kind == CONV2D else 0

    merged = [[0.0] * d for _ in range(seq_len)]
    for h in range(n_heads):
        half_n = head_span // 2
        heads = list(range(max(0, h - half_n), min(n_heads - 1, h + half_n) + 1))
        for i in range(seq_len):
            active = [(s, j) for s in heads for j in pos_window(i)]
            q_vec = head_slice(q[i], h)
            logits = [
                sum(q_vec[c] * head_slice(k[j], s)[c] for c in range(dh)) / math.sqrt(dh)
                for s, j in active
            ]
            peak = max(logits)
            exps = [math.exp(val - peak) for val in logits]
            norm = sum(exps)
            weights = [e / norm for e in exps]
            out_vec = [0.0] * dh
            for w, (s, j) in zip(weights, active):
                v_vec = head_slice(v[j], s)
                for c in range(dh):
                    out_vec[c] += w * v_vec[c]
            merged[i][h * dh : (h + 1) * dh] = out_vec

    return Tensor(np.array(_mat_vec_rows(merged, wo)))


def _ref_layer_norm(rows: list[list[float]], gain: list[float], bias: list[float]) -> list[list[float]]:
    out = []
    for row in rows:
        n = len(row)
        mean = sum(row) / n
        var = sum((val - mean) ** 2 for val in row) / n
        inv_std = 1.0 / math.sqrt(var + _LN_EPS)
        out.append([(val - mean) * inv_std * gain[c] + bias[c] for c, val in enumerate(row)])
    return out


def ref_encoder_layer(x, layer, mode: AttentionMode) -> Tensor:
    """Loop-based residual + layer-norm + FFN block around ``ref_attend``."""
    xv = _rows(x)
    attn = _rows(ref_attend(x, layer.attn, mode))
    gain1, bias1 = list(map(float, layer.ln1_gain.data)), list(map(float, layer.ln1_bias.data))
    gain2, bias2 = list(map(float, layer.ln2_gain.data)), list(map(float, layer.ln2_bias.data))

    x1 = _ref_layer_norm(
        [[a + b for a, b in zip(row_x, row_a)] for row_x, row_a in zip(xv, attn)], gain1, bias1
    )

    w1, w2 = _rows(layer.ffn_in), _rows(layer.ffn_out)
    b1 = list(map(float, layer.ffn_in_b.data))
    b2 = list(map(float, layer.ffn_out_b.data))
    hidden = [
        [max(0.0, val + b1[c]) for c, val in enumerate(row)] for row in _mat_vec_rows(x1, w1)
    ]
    ffn = [[val + b2[c] for c, val in enumerate(row)] for row in _mat_vec_rows(hidden, w2)]

    out = _ref_layer_norm(
        [[a + b for a, b in zip(row_x, row_f)] for row_x, row_f in zip(x1, ffn)], gain2, bias2
    )
    return Tensor(np.array(out))


def ref_encode(tokens, params, config) -> Tensor:
    """Loop-based full forward pass: embed + PE, layer stack, linear head."""
    d = config.d_model
    table = _rows(params.embedding)
    scale = math.sqrt(d)
    rows = []
    for i, tok in enumerate(tokens):
        row = [table[int(tok)][c] * scale for c in range(d)]
        for t in range(d // 2):
            angle = i / 10000.0 ** (2 * t / d)
            row[2 * t] += math.sin(angle)
            row[2 * t + 1] += math.cos(angle)
        rows.append(row)

    x = Tensor(np.array(rows))
    for layer, mode in zip(params.layers, config.layer_modes):
        x = ref_encoder_layer(x, layer, mode)

    logits = _mat_vec_rows(_rows(x), _rows(params.out_w))
    out_b = list(map(float, params.out_b.data))
    return Tensor(np.array([[val + out_b[c] for c, val in enumerate(row)] for row in logits]))


@dataclass(frozen=True)
class OracleReport:
    """Elementwise agreement summary between two same-shape tensors."""

    max_abs: float
    max_rel: float
    worst_index: tuple[int, ...]


def compare(a, b) -> OracleReport:
    """Max absolute and relative deviation, with the worst element's index.

    The relative deviation uses ``|a - b| / (|b| + 1e-12)`` so zero
    entries of ``b`` stay harmless; the worst index is by absolute
    deviation.
    """
    av = a.data if isinstance(a, Tensor) else np.asarray(a, dtype=np.float64)
    bv = b.data if isinstance(b, Tensor) else np.asarray(b, dtype=np.float64)
    if av.shape != bv.shape:
        raise ValueError(f"compare requires equal shapes, got {av.shape} and {bv.shape}")
    diff = np.abs(av - bv)
    rel = diff / (np.abs(bv) + 1e-12)
    worst = np.unravel_index(np.argmax(diff), diff.shape) if diff.size else ()
    return OracleReport(float(diff.max(initial=0.0)), float(rel.max(initial=0.0)), tuple(int(w) for w in worst))


def finite_diff(f: Callable[[Tensor], float], x: Tensor, eps: float = 1e-5) -> Tensor:
    """Central-difference gradient of a scalar function at ``x``.

    Perturbs ``x.data`` in place one coordinate at a time and restores
    it, so ``f`` may simply close over ``x``.
    """
    if eps <= 0:
        raise ValueError(f"eps must be positive, got {eps}")
    grad = np.zeros_like(x.data)
    for index in np.ndindex(*x.shape):
        original = x.data[index]
        x.data[index] = original + eps
        f_plus = float(f(x))
        x.data[index] = original - eps
        f_minus = float(f(x))
        x.data[index] = original
        grad[index] = (f_plus - f_minus) / (2.0 * eps)
    return Tensor(grad)


@dataclass(frozen=True)
class GradCheckRow:
    """Per-parameter-tensor outcome of a model gradient check."""

    name: str
    rel_err: float
    ok: bool


def gradcheck_model(config, seed: int = 0, eps: float = 1e-5, tol: float = 1e-4) -> list[GradCheckRow]:
    """Check backward against central differences for every parameter tensor.

    Builds the model from ``seed``, evaluates the cross-entropy of one
    fixed random example, and compares the backward-pass gradient of each
    parameter tensor with :func:`finite_diff` of the same loss.  The
    relative error of a tensor is ``max|g - g_fd| / (max|g_fd| + 1e-12)``.
    Rejects configs above 20,000 parameters — central differences cost
    two forward passes per parameter.
    """
    from . import encoder as enc
    from . import ops

    n_params = enc.total_params(config)
    if n_params > 20_000:
        raise ValueError(
            f"gradcheck needs a toy-sized config (<= 20000 parameters), got {n_params}"
        )

    params = enc.init_model(config, seed)
    rng = np.random.default_rng(np.random.SeedSequence([seed, 7]))
    seq_len = min(5, config.max_len)
    tokens = rng.integers(0, config.vocab_size, size=seq_len)
    targets = rng.integers(0, config.vocab_size, size=seq_len)

    def loss_value(_ignored: Tensor | None = None) -> float:
        return ops.cross_entropy(enc.encode(tokens, params, config), targets).item()

    for tensor in params.tensor_dict().values():
        tensor.zero_grad()
    loss = ops.cross_entropy(enc.encode(tokens, params, config), targets)
    loss.backward()

    rows = []
    for name, tensor in params.tensor_dict().items():
        fd = finite_diff(loss_value, tensor, eps=eps)
        deviation = float(np.abs(tensor.grad - fd.data).max())
        scale = float(np.abs(fd.data).max())
        rel = deviation / (scale + 1e-12)
        rows.append(GradCheckRow(name, rel, rel < tol))
    return rows
