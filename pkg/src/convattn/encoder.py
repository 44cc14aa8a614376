"""Toy Transformer encoder with per-layer attention scopes.

The stack follows the classic post-norm arrangement — ``X1 =
LayerNorm(X + attend(X))`` then ``LayerNorm(X1 + FFN(X1))`` with a ReLU
FFN — plus sinusoidal positions and a per-token linear head, so locality
claims can be tested as sequence tagging.  Windowed attention is only
allowed in the lower layers: once a layer is global, every layer above
it must be global too, and the config constructor enforces that.

Parameter count is a pure function of the dimensions; attention modes
never add or remove tensors, which keeps windowed and global stacks at
exactly the same size.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import lru_cache

import numpy as np

from . import ops
from .attention import AttentionMode, MultiHeadParams, attend
from .tensor import Tensor, parameter

_LN_EPS = 1e-5
_INIT_STREAM = 3  # seed-stream tag for parameter initialization


@dataclass
class EncoderConfig:
    """Architecture description; validates the lower-layers-only rule."""

    n_layers: int
    d_model: int
    n_heads: int
    d_ff: int
    layer_modes: tuple[AttentionMode, ...]
    vocab_size: int
    max_len: int

    def __post_init__(self):
        self.layer_modes = tuple(self.layer_modes)
        if self.n_layers < 1:
            raise ValueError(f"n_layers must be >= 1, got {self.n_layers}")
        if self.d_model < 2 or self.d_model % 2 != 0:
            raise ValueError(
                f"d_model must be a positive even width (sinusoidal encoding pairs sin/cos), got {self.d_model}"
            )
        if self.n_heads < 1 or self.d_model % self.n_heads != 0:
            raise ValueError(f"n_heads {self.n_heads} must divide d_model {self.d_model}")
        if self.d_ff < 1:
            raise ValueError(f"d_ff must be >= 1, got {self.d_ff}")
        if self.vocab_size < 1:
            raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
        if self.max_len < 1:
            raise ValueError(f"max_len must be >= 1, got {self.max_len}")
        if len(self.layer_modes) != self.n_layers:
            raise ValueError(
                f"layer_modes has {len(self.layer_modes)} entries for {self.n_layers} layers"
            )
        seen_global = False
        for depth, mode in enumerate(self.layer_modes):
            if mode.is_windowed and seen_global:
                raise ValueError(
                    f"windowed attention at layer {depth} sits above a global layer; "
                    "convolutional modes are restricted to the lowest layers"
                )
            seen_global = seen_global or not mode.is_windowed


def toy_config(vocab_size: int = 8, max_len: int = 32, window_m: int = 4) -> EncoderConfig:
    """Default toy stack: 4 layers, windowed attention in the lowest 2."""
    conv = AttentionMode.conv1d(window_m)
    glob = AttentionMode.global_()
    return EncoderConfig(
        n_layers=4,
        d_model=64,
        n_heads=4,
        d_ff=128,
        layer_modes=(conv, conv, glob, glob),
        vocab_size=vocab_size,
        max_len=max_len,
    )


@dataclass
class LayerParams:
    """One encoder layer: attention projections, two layer norms, the FFN."""

    attn: MultiHeadParams
    ln1_gain: Tensor
    ln1_bias: Tensor
    ffn_in: Tensor
    ffn_in_b: Tensor
    ffn_out: Tensor
    ffn_out_b: Tensor
    ln2_gain: Tensor
    ln2_bias: Tensor


@dataclass
class ModelParams:
    """Every trainable tensor of the encoder plus the classification head."""

    embedding: Tensor
    layers: list[LayerParams] = field(default_factory=list)
    out_w: Tensor = None
    out_b: Tensor = None

    def tensor_dict(self) -> dict[str, Tensor]:
        """Canonical name -> tensor enumeration (checkpoint and update order)."""
        entries: dict[str, Tensor] = {"embedding": self.embedding}
        for index, layer in enumerate(self.layers):
            prefix = f"layer{index}"
            entries[f"{prefix}.attn.w_q"] = layer.attn.w_q
            entries[f"{prefix}.attn.w_k"] = layer.attn.w_k
            entries[f"{prefix}.attn.w_v"] = layer.attn.w_v
            entries[f"{prefix}.attn.w_o"] = layer.attn.w_o
            entries[f"{prefix}.ln1_gain"] = layer.ln1_gain
            entries[f"{prefix}.ln1_bias"] = layer.ln1_bias
            entries[f"{prefix}.ffn_in"] = layer.ffn_in
            entries[f"{prefix}.ffn_in_b"] = layer.ffn_in_b
            entries[f"{prefix}.ffn_out"] = layer.ffn_out
            entries[f"{prefix}.ffn_out_b"] = layer.ffn_out_b
            entries[f"{prefix}.ln2_gain"] = layer.ln2_gain
            entries[f"{prefix}.ln2_bias"] = layer.ln2_bias
        entries["out_w"] = self.out_w
        entries["out_b"] = self.out_b
        return entries


@lru_cache(maxsize=None)
def _pe_table(seq_len: int, d: int) -> np.ndarray:
    positions = np.arange(seq_len, dtype=np.float64)[:, None]
    pair = np.arange(d // 2, dtype=np.float64)[None, :]
    angles = positions / np.power(10000.0, 2.0 * pair / d)
    table = np.empty((seq_len, d))
    table[:, 0::2] = np.sin(angles)
    table[:, 1::2] = np.cos(angles)
    table.setflags(write=False)
    return table


def sinusoidal_pe(seq_len: int, d: int) -> Tensor:
    """Fixed position features: PE[i, 2t] = sin(i / 10000^(2t/d)), odd columns cos."""
    if seq_len < 1:
        raise ValueError(f"seq_len must be >= 1, got {seq_len}")
    if d < 2 or d % 2 != 0:
        raise ValueError(f"width must be positive and even to pair sin/cos columns, got {d}")
    return Tensor(_pe_table(seq_len, d))


def encoder_layer(x: Tensor, layer: LayerParams, mode: AttentionMode, trace_sink=None) -> Tensor:
    """Post-norm block: attention sublayer then FFN sublayer, residuals on both.

    ``trace_sink`` (a list, when given) receives the layer's AttentionTrace;
    the default skips trace assembly entirely.
    """
    attn_out, trace = attend(x, layer.attn, mode, with_trace=trace_sink is not None)
    if trace_sink is not None:
        trace_sink.append(trace)
    x1 = ops.layer_norm(ops.add(x, attn_out), layer.ln1_gain, layer.ln1_bias, eps=_LN_EPS)
    hidden = ops.relu(ops.add_bias(ops.matmul(x1, layer.ffn_in), layer.ffn_in_b))
    ffn = ops.add_bias(ops.matmul(hidden, layer.ffn_out), layer.ffn_out_b)
    return ops.layer_norm(ops.add(x1, ffn), layer.ln2_gain, layer.ln2_bias, eps=_LN_EPS)


def encode(tokens, params: ModelParams, config: EncoderConfig, trace_sink=None) -> Tensor:
    """Logits ``[I, vocab_size]`` for a token sequence."""
    tokens = np.asarray(tokens)
    if tokens.ndim != 1 or tokens.size < 1:
        raise ValueError(f"tokens must be a non-empty 1-D sequence, got shape {tokens.shape}")
    if not np.issubdtype(tokens.dtype, np.integer):
        raise ValueError(f"tokens must be integers, got dtype {tokens.dtype}")
    if tokens.size > config.max_len:
        raise ValueError(f"sequence length {tokens.size} exceeds max_len {config.max_len}")
    if tokens.min() < 0 or tokens.max() >= config.vocab_size:
        raise ValueError(f"token out of range [0, {config.vocab_size})")

    embedded = ops.gather_rows(params.embedding, tokens)
    x = ops.add(
        ops.scale(embedded, math.sqrt(config.d_model)),
        sinusoidal_pe(tokens.size, config.d_model),
    )
    for layer, mode in zip(params.layers, config.layer_modes):
        x = encoder_layer(x, layer, mode, trace_sink=trace_sink)
    return ops.add_bias(ops.matmul(x, params.out_w), params.out_b)


def total_params(config: EncoderConfig) -> int:
    """Exact parameter count; a function of dimensions only, never of modes."""
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    per_layer = (
        4 * d * d  # attention projections
        + 2 * d  # first layer norm
        + d * d_ff + d_ff  # FFN in
        + d_ff * d + d  # FFN out
        + 2 * d  # second layer norm
    )
    return vocab * d + config.n_layers * per_layer + d * vocab + vocab


def _build_model(config: EncoderConfig, weight) -> ModelParams:
    """Assemble a ModelParams, calling ``weight(fan_in, fan_out)`` for every
    2-D tensor in canonical enumeration order."""
    d, d_ff, vocab = config.d_model, config.d_ff, config.vocab_size
    embedding = weight(vocab, d)
    layers = []
    for _ in range(config.n_layers):
        attn = MultiHeadParams(
            w_q=weight(d, d), w_k=weight(d, d), w_v=weight(d, d), w_o=weight(d, d),
            n_heads=config.n_heads,
        )
        layers.append(
            LayerParams(
                attn=attn,
                ln1_gain=parameter(np.ones(d)),
                ln1_bias=parameter(np.zeros(d)),
                ffn_in=weight(d, d_ff),
                ffn_in_b=parameter(np.zeros(d_ff)),
                ffn_out=weight(d_ff, d),
                ffn_out_b=parameter(np.zeros(d)),
                ln2_gain=parameter(np.ones(d)),
                ln2_bias=parameter(np.zeros(d)),
            )
        )
    return ModelParams(
        embedding=embedding,
        layers=layers,
        out_w=weight(d, vocab),
        out_b=parameter(np.zeros(vocab)),
    )


def init_model(config: EncoderConfig, seed: int) -> ModelParams:
    """Glorot-uniform weights (limit sqrt(6 / (fan_in + fan_out))) from ``seed``.

    Matrices are drawn in canonical enumeration order; biases start at
    zero and layer-norm gains at one, so two models from the same seed
    are bit-identical.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, _INIT_STREAM]))

    def draw(fan_in: int, fan_out: int) -> Tensor:
        limit = math.sqrt(6.0 / (fan_in + fan_out))
        return parameter(rng.uniform(-limit, limit, size=(fan_in, fan_out)))

    return _build_model(config, draw)


_CHECKPOINT_MAGIC = "convattn-checkpoint v1"


def save_checkpoint(path, params: ModelParams) -> None:
    """Text header (tensor names and shapes) then raw little-endian float64."""
    entries = params.tensor_dict()
    header = [_CHECKPOINT_MAGIC]
    header.extend(
        f"tensor {name} {' '.join(str(n) for n in tensor.shape)}"
        for name, tensor in entries.items()
    )
    header.append("end")
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        for tensor in entries.values():
            fh.write(np.ascontiguousarray(tensor.data, dtype="<f8").tobytes())


def load_checkpoint(path, config: EncoderConfig) -> ModelParams:
    """Read a checkpoint written for an identically-shaped config."""
    model = _build_model(config, lambda fi, fo: parameter(np.zeros((fi, fo))))
    expected = model.tensor_dict()
    with open(path, "rb") as fh:
        def next_line() -> str:
            raw = bytearray()
            while (byte := fh.read(1)) not in (b"", b"\n"):
                raw.extend(byte)
            return raw.decode("ascii")

        if next_line() != _CHECKPOINT_MAGIC:
            raise ValueError(f"{path} is not a recognized checkpoint file")
        declared = []
        while (line := next_line()) != "end":
            if not line.startswith("tensor "):
                raise ValueError(f"malformed checkpoint header line: {line!r}")
            name, *dims = line.split()[1:]
            declared.append((name, tuple(int(n) for n in dims)))
        expected_decl = [(name, tensor.shape) for name, tensor in expected.items()]
        if declared != expected_decl:
            raise ValueError(
                "checkpoint does not match the config: "
                f"expected {len(expected_decl)} tensors, header lists {len(declared)}"
                + next(
                    (
                        f"; first mismatch {a} vs {b}"
                        for a, b in zip(expected_decl, declared)
                        if a != b
                    ),
                    "",
                )
            )
        for name, tensor in expected.items():
            raw = fh.read(tensor.size * 8)
            if len(raw) != tensor.size * 8:
                raise ValueError(f"checkpoint truncated while reading {name}")
            tensor.data[...] = np.frombuffer(raw, dtype="<f8").reshape(tensor.shape)
        if fh.read(1):
            raise ValueError("checkpoint has trailing bytes after the declared tensors")
    return model
