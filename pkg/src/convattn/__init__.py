"""Windowed multi-head self-attention, verifiably.

A small float64 library implementing global, 1D-windowed, and cross-head
2D-windowed scaled dot-product attention with exact masking semantics,
plus a toy Transformer encoder, seeded synthetic tasks, a training loop,
loop-based oracles, and a benchmarking CLI.

Re-exports resolve lazily (PEP 562) so that importing the package stays
free of numpy until something numeric is actually touched — the CLI
relies on this to pin BLAS thread counts before numpy loads.
"""

from importlib import import_module

__version__ = "0.1.0"

_EXPORTS = {
    # tensor core
    "Tensor": ".tensor",
    "parameter": ".tensor",
    # attention
    "AttentionMode": ".attention",
    "MultiHeadParams": ".attention",
    "AttentionTrace": ".attention",
    "attend": ".attention",
    "project_qkv": ".attention",
    "scaled_dot_attention": ".attention",
    "window_positions": ".attention",
    "head_window": ".attention",
    "count_params": ".attention",
    "parse_mode": ".attention",
    # encoder
    "EncoderConfig": ".encoder",
    "LayerParams": ".encoder",
    "ModelParams": ".encoder",
    "sinusoidal_pe": ".encoder",
    "encoder_layer": ".encoder",
    "encode": ".encoder",
    "total_params": ".encoder",
    "init_model": ".encoder",
    "toy_config": ".encoder",
    "save_checkpoint": ".encoder",
    "load_checkpoint": ".encoder",
    # tasks + training
    "TaskSpec": ".tasks",
    "generate": ".tasks",
    "write_examples": ".tasks",
    "read_examples": ".tasks",
    "TrainConfig": ".training",
    "Metrics": ".training",
    "DivergenceError": ".training",
    "cross_entropy": ".training",
    "train": ".training",
    "fit": ".training",
    "evaluate": ".training",
    # oracle
    "OracleReport": ".oracle",
    "ref_attend": ".oracle",
    "ref_encoder_layer": ".oracle",
    "ref_encode": ".oracle",
    "finite_diff": ".oracle",
    "compare": ".oracle",
}

__all__ = sorted(_EXPORTS) + ["__version__"]


def __getattr__(name):
    try:
        module = _EXPORTS[name]
    except KeyError:
        raise AttributeError(f"module {__name__!r} has no attribute {name!r}") from None
    value = getattr(import_module(module, __name__), name)
    globals()[name] = value
    return value


def __dir__():
    return sorted(set(globals()) | set(_EXPORTS))
