"""Command-line front end for experiments, sweeps, checks, and benchmarks.

Subcommands: ``train``, ``eval``, ``sweep``, ``gradcheck``, ``bench``,
``params``.  All tabular output is CSV with fixed schemas:

* metrics:  ``step,loss,accuracy``
* sweep:    ``axis_value,final_loss,final_accuracy,steps``
* bench:    ``I,mode,M,N,median_seconds,trials``
* trace:    ``q_head,q_pos,k_head,k_pos,weight``

Exit codes: 0 success, 1 validation error, 2 numeric failure (training
divergence or a failed gradient check).  CSVs never contain timestamps,
so identical inputs and seeds reproduce them byte-for-byte; progress and
timing chatter goes to the stderr log only.

Only the standard library is imported at module level: the numeric
modules load lazily inside the command bodies so that ``bench`` can pin
the BLAS thread-count environment variables before numpy first loads.
"""

from __future__ import annotations

import argparse
import csv
import logging
import os
import statistics
import sys
import time
from dataclasses import dataclass, replace

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

log = logging.getLogger(__name__)

_MODE_KINDS = ("global", "conv1d", "conv2d")
_BENCH_STREAM = 5  # seed-stream tag for benchmark inputs

_ENCODER_KEYS = {"n_layers", "d_model", "n_heads", "d_ff", "vocab_size", "max_len", "layer_modes"}
_TASK_KEYS = {"kind", "seq_len", "vocab_size", "pattern_len", "n_train", "n_eval", "seed"}
_TASK_REQUIRED = _TASK_KEYS - {"pattern_len"}
_TRAIN_KEYS = {
    "optimizer", "learning_rate", "beta1", "beta2", "eps",
    "batch_size", "max_steps", "eval_every", "seed",
}


@dataclass(frozen=True)
class RunSpec:
    """What the user asked for, independent of argparse plumbing."""

    subcommand: str
    config: str | None
    out: str | None
    seed: int | None


@dataclass(frozen=True)
class BenchResult:
    """Median attend-forward wall time for one (sequence length, mode) cell."""

    seq_len: int
    mode: str
    window_m: int | None
    head_span_n: int | None
    median_seconds: float
    trials: int


@dataclass(frozen=True)
class LoadedConfig:
    encoder: object
    task: object | None
    train: object | None


def _check_keys(section: str, mapping: dict, allowed: set, required=()) -> None:
    unknown = sorted(set(mapping) - allowed)
    if unknown:
        raise ValueError(f"[{section}] has unknown keys: {', '.join(unknown)}")
    missing = sorted(set(required) - set(mapping))
    if missing:
        raise ValueError(f"[{section}] is missing required keys: {', '.join(missing)}")


def load_config(path, want_task: bool = False, want_train: bool = False) -> LoadedConfig:
    """Parse a TOML config with [encoder] and optional [task]/[train] sections.

    Unknown sections or keys are hard errors: a silently ignored typo in
    a window size would invalidate an experiment.
    """
    from .attention import parse_mode
    from .encoder import EncoderConfig
    from .tasks import TaskSpec
    from .training import TrainConfig

    with open(path, "rb") as fh:
        raw = tomllib.load(fh)

    unknown = sorted(set(raw) - {"encoder", "task", "train"})
    if unknown:
        raise ValueError(f"{path}: unknown sections: {', '.join(unknown)}")
    if "encoder" not in raw:
        raise ValueError(f"{path}: missing [encoder] section")

    enc_map = dict(raw["encoder"])
    _check_keys("encoder", enc_map, _ENCODER_KEYS, _ENCODER_KEYS)
    mode_labels = enc_map.pop("layer_modes")
    if not isinstance(mode_labels, list) or not all(isinstance(m, str) for m in mode_labels):
        raise ValueError("[encoder] layer_modes must be a list of strings like 'conv1d:4'")
    encoder_cfg = EncoderConfig(layer_modes=tuple(parse_mode(m) for m in mode_labels), **enc_map)

    task = None
    if "task" in raw:
        task_map = dict(raw["task"])
        _check_keys("task", task_map, _TASK_KEYS, _TASK_REQUIRED)
        task = TaskSpec(**task_map)
        if task.vocab_size != encoder_cfg.vocab_size:
            raise ValueError(
                f"task.vocab_size {task.vocab_size} must equal encoder.vocab_size {encoder_cfg.vocab_size}"
            )
    elif want_task:
        raise ValueError(f"{path}: a [task] section is required for this subcommand")

    train_cfg = None
    if "train" in raw:
        train_map = dict(raw["train"])
        _check_keys("train", train_map, _TRAIN_KEYS)
        train_cfg = TrainConfig(**train_map)
    elif want_train:
        raise ValueError(f"{path}: a [train] section is required for this subcommand")

    return LoadedConfig(encoder_cfg, task, train_cfg)


def apply_mode_overrides(encoder_cfg, mode_kind=None, window=None, head_span=None):
    """Rewrite a config's layer modes from the --mode/--window/--head-span flags.

    ``--mode global`` turns every layer global; the other flags rewrite
    only the layers that are already windowed (``--head-span`` promotes
    conv1d layers to conv2d, so a head-span sweep works on a conv1d base
    config).
    """
    from .attention import AttentionMode

    if mode_kind is None and window is None and head_span is None:
        return encoder_cfg
    if mode_kind == "global":
        if window is not None or head_span is not None:
            raise ValueError("--window/--head-span have no effect with --mode global")
        return replace(
            encoder_cfg,
            layer_modes=tuple(AttentionMode.global_() for _ in encoder_cfg.layer_modes),
        )
    if mode_kind == "conv1d" and head_span is not None:
        raise ValueError("--head-span conflicts with --mode conv1d")

    modes = list(encoder_cfg.layer_modes)
    windowed = [i for i, m in enumerate(modes) if m.is_windowed]
    if not windowed:
        raise ValueError(
            "config has no windowed layers to override; set conv modes in layer_modes first"
        )
    for i in windowed:
        current = modes[i]
        new_window = window if window is not None else current.window_m
        kind = mode_kind or current.kind
        if head_span is not None:
            kind = "conv2d"
        if kind == "conv2d":
            span = head_span
            if span is None:
                span = current.head_span_n if current.kind == "conv2d" else 0
            modes[i] = AttentionMode.conv2d(new_window, span)
        else:
            modes[i] = AttentionMode.conv1d(new_window)
    return replace(encoder_cfg, layer_modes=tuple(modes))


def _format_cell(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _write_csv(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="ascii") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_format_cell(cell) for cell in row])


def write_metrics_csv(path, history) -> None:
    _write_csv(path, ("step", "loss", "accuracy"), [(m.step, m.loss, m.accuracy) for m in history])


def write_trace_csv(path, trace) -> None:
    """Dump a full [H, I, H, I] attention trace, one weight per row."""
    weights = trace.weights.data
    n_heads, seq_len = weights.shape[0], weights.shape[1]
    rows = (
        (h, i, s, j, float(weights[h, i, s, j]))
        for h in range(n_heads)
        for i in range(seq_len)
        for s in range(n_heads)
        for j in range(seq_len)
    )
    _write_csv(path, ("q_head", "q_pos", "k_head", "k_pos", "weight"), rows)


def run_sweep(encoder_cfg, task, train_cfg, axis: str, values, window=None):
    """Train once per axis value; returns (value, final_loss, final_acc, steps) rows.

    Every value is validated (and every derived config built) before the
    first training step runs, so a bad value never wastes a half-done
    sweep.  When sweeping ``head_span_n``, the window stays fixed.
    """
    from .training import train

    if axis not in ("window_m", "head_span_n"):
        raise ValueError(f"sweep axis must be 'window_m' or 'head_span_n', got {axis!r}")
    values = list(values)
    if not values:
        raise ValueError("sweep needs at least one value")

    configs = []
    for value in values:
        if axis == "window_m":
            configs.append(apply_mode_overrides(encoder_cfg, window=value))
        else:
            configs.append(apply_mode_overrides(encoder_cfg, window=window, head_span=value))

    rows = []
    for value, cfg in zip(values, configs):
        log.info("sweep %s=%d starting", axis, value)
        final = train(cfg, task, train_cfg)[-1]
        rows.append((value, final.loss, final.accuracy, final.step))
    return rows


def run_bench(
    sizes,
    mode_kinds,
    trials: int = 5,
    d_model: int = 64,
    n_heads: int = 4,
    window: int = 10,
    head_span: int = 2,
    seed: int = 0,
) -> list[BenchResult]:
    """Median attend-forward wall time per (size, mode), one warm-up excluded."""
    import numpy as np

    from .attention import AttentionMode, MultiHeadParams, attend
    from .tensor import Tensor

    if trials < 5:
        raise ValueError(f"bench needs at least 5 trials for a stable median, got {trials}")
    sizes = list(sizes)
    if not sizes or any(size < 1 for size in sizes):
        raise ValueError(f"bench sizes must be positive, got {sizes}")
    mode_by_kind = {
        "global": AttentionMode.global_(),
        "conv1d": AttentionMode.conv1d(window),
        "conv2d": AttentionMode.conv2d(window, head_span),
    }
    unknown = [kind for kind in mode_kinds if kind not in mode_by_kind]
    if unknown:
        raise ValueError(f"unknown bench modes: {', '.join(unknown)}")

    results = []
    for size in sizes:
        rng = np.random.default_rng(np.random.SeedSequence([seed, _BENCH_STREAM, size]))
        scale = 1.0 / float(np.sqrt(d_model))
        params = MultiHeadParams(
            w_q=Tensor(rng.standard_normal((d_model, d_model)) * scale),
            w_k=Tensor(rng.standard_normal((d_model, d_model)) * scale),
            w_v=Tensor(rng.standard_normal((d_model, d_model)) * scale),
            w_o=Tensor(rng.standard_normal((d_model, d_model)) * scale),
            n_heads=n_heads,
        )
        x = Tensor(rng.standard_normal((size, d_model)))
        for kind in mode_kinds:
            mode = mode_by_kind[kind]
            attend(x, params, mode, with_trace=False)  # warm-up, excluded
            times = []
            for _ in range(trials):
                start = time.perf_counter()
                attend(x, params, mode, with_trace=False)
                times.append(time.perf_counter() - start)
            result = BenchResult(
                size, kind, mode.window_m, mode.head_span_n, statistics.median(times), trials
            )
            log.info(
                "bench I=%d mode=%s median %.6f s over %d trials",
                size, kind, result.median_seconds, trials,
            )
            results.append(result)
    return results


def run_gradcheck(encoder_cfg, seed: int = 0):
    """Backward vs. central finite differences for every parameter tensor."""
    from .oracle import gradcheck_model

    return gradcheck_model(encoder_cfg, seed=seed)


def run_params(config_a, config_b) -> tuple[int, int]:
    from .encoder import total_params

    return total_params(config_a), total_params(config_b)


def _default_gradcheck_config():
    from .attention import AttentionMode
    from .encoder import EncoderConfig

    return EncoderConfig(
        n_layers=2,
        d_model=8,
        n_heads=2,
        d_ff=16,
        layer_modes=(AttentionMode.conv2d(4, 2), AttentionMode.global_()),
        vocab_size=8,
        max_len=32,
    )


# ---------------------------------------------------------------------------
# Command handlers


def _overridden_encoder(spec: RunSpec, args) -> object:
    loaded = load_config(spec.config)
    return apply_mode_overrides(loaded.encoder, args.mode, args.window, args.head_span)


def _cmd_train(spec: RunSpec, args) -> int:
    from . import tasks
    from .encoder import save_checkpoint
    from .training import fit

    loaded = load_config(spec.config, want_task=True, want_train=True)
    encoder_cfg = apply_mode_overrides(loaded.encoder, args.mode, args.window, args.head_span)
    task, train_cfg = loaded.task, loaded.train
    if spec.seed is not None:
        task = replace(task, seed=spec.seed)
        train_cfg = replace(train_cfg, seed=spec.seed)

    params, history = fit(encoder_cfg, task, train_cfg)
    write_metrics_csv(spec.out, history)
    log.info("wrote %d metric rows to %s", len(history), spec.out)
    if args.save_params:
        save_checkpoint(args.save_params, params)
        log.info("saved parameters to %s", args.save_params)
    if args.dump_data:
        os.makedirs(args.dump_data, exist_ok=True)
        train_set, eval_set = tasks.generate(task)
        tasks.write_examples(os.path.join(args.dump_data, "train.txt"), train_set)
        tasks.write_examples(os.path.join(args.dump_data, "eval.txt"), eval_set)
        log.info("dumped datasets under %s", args.dump_data)
    return 0


def _cmd_eval(spec: RunSpec, args) -> int:
    from .encoder import encode, load_checkpoint
    from .tasks import generate
    from .training import evaluate

    loaded = load_config(spec.config, want_task=True)
    encoder_cfg = apply_mode_overrides(loaded.encoder, args.mode, args.window, args.head_span)
    task = loaded.task
    if spec.seed is not None:
        task = replace(task, seed=spec.seed)

    params = load_checkpoint(args.params, encoder_cfg)
    _, eval_set = generate(task)
    metrics = evaluate(params, encoder_cfg, eval_set)
    write_metrics_csv(spec.out, [metrics])
    log.info("eval loss %.6f accuracy %.4f", metrics.loss, metrics.accuracy)

    if args.dump_trace:
        if not 0 <= args.trace_layer < encoder_cfg.n_layers:
            raise ValueError(f"--trace-layer must be in [0, {encoder_cfg.n_layers})")
        if not 0 <= args.trace_example < len(eval_set):
            raise ValueError(f"--trace-example must be in [0, {len(eval_set)})")
        sink = []
        encode(eval_set[args.trace_example][0], params, encoder_cfg, trace_sink=sink)
        write_trace_csv(args.dump_trace, sink[args.trace_layer])
        log.info("wrote layer-%d attention trace to %s", args.trace_layer, args.dump_trace)
    return 0


def _cmd_sweep(spec: RunSpec, args) -> int:
    loaded = load_config(spec.config, want_task=True, want_train=True)
    encoder_cfg = apply_mode_overrides(loaded.encoder, args.mode, args.window, args.head_span)
    task, train_cfg = loaded.task, loaded.train
    if spec.seed is not None:
        task = replace(task, seed=spec.seed)
        train_cfg = replace(train_cfg, seed=spec.seed)

    values = _parse_int_list(args.values, "--values")
    rows = run_sweep(encoder_cfg, task, train_cfg, args.axis, values, window=args.window)
    _write_csv(spec.out, ("axis_value", "final_loss", "final_accuracy", "steps"), rows)
    log.info("wrote %d sweep rows to %s", len(rows), spec.out)
    return 0


def _cmd_gradcheck(spec: RunSpec, args) -> int:
    if spec.config is None:
        encoder_cfg = _default_gradcheck_config()
    else:
        encoder_cfg = load_config(spec.config).encoder
    encoder_cfg = apply_mode_overrides(encoder_cfg, args.mode, args.window, args.head_span)

    rows = run_gradcheck(encoder_cfg, seed=spec.seed or 0)
    for row in rows:
        print(f"{row.name}: rel_err={row.rel_err:.3e} {'PASS' if row.ok else 'FAIL'}")
    failed = [row for row in rows if not row.ok]
    print(f"gradcheck: {len(rows) - len(failed)}/{len(rows)} tensors pass")
    return 2 if failed else 0


def _cmd_bench(spec: RunSpec, args) -> int:
    sizes = _parse_int_list(args.sizes, "--sizes")
    mode_kinds = [kind.strip() for kind in args.modes.split(",") if kind.strip()]
    results = run_bench(
        sizes,
        mode_kinds,
        trials=args.trials,
        d_model=args.d_model,
        n_heads=args.n_heads,
        window=args.window,
        head_span=args.head_span,
        seed=spec.seed or 0,
    )
    _write_csv(
        spec.out,
        ("I", "mode", "M", "N", "median_seconds", "trials"),
        [
            (r.seq_len, r.mode, r.window_m, r.head_span_n, r.median_seconds, r.trials)
            for r in results
        ],
    )
    log.info("wrote %d bench rows to %s", len(results), spec.out)
    return 0


def _cmd_params(spec: RunSpec, args) -> int:
    total_a = load_config(args.config_a).encoder
    total_b = load_config(args.config_b).encoder
    count_a, count_b = run_params(total_a, total_b)
    print(f"{args.config_a}: {count_a}")
    print(f"{args.config_b}: {count_b}")
    print(f"difference: {count_a - count_b}")
    return 0 if count_a == count_b else 1


_COMMANDS = {
    "train": _cmd_train,
    "eval": _cmd_eval,
    "sweep": _cmd_sweep,
    "gradcheck": _cmd_gradcheck,
    "bench": _cmd_bench,
    "params": _cmd_params,
}


# ---------------------------------------------------------------------------
# Argument parsing


def _parse_int_list(text: str, flag: str) -> list[int]:
    try:
        return [int(piece) for piece in text.split(",") if piece.strip() != ""]
    except ValueError:
        raise ValueError(f"{flag} must be a comma-separated integer list, got {text!r}") from None


class _Parser(argparse.ArgumentParser):
    """argparse exits with 2 on usage errors; this project reserves 2 for
    numeric failures, so downgrade usage problems to exit code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _add_mode_flags(parser) -> None:
    parser.add_argument("--mode", choices=_MODE_KINDS, default=None,
                        help="override the kind of the config's windowed layers")
    parser.add_argument("--window", type=int, default=None, metavar="M",
                        help="override window size M of windowed layers (even)")
    parser.add_argument("--head-span", type=int, default=None, metavar="N",
                        help="override head span N (even); promotes conv1d layers to conv2d")


def _add_seed_flag(parser) -> None:
    parser.add_argument("--seed", type=int, default=None,
                        help="override the task and training seeds")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="convattn", description="Windowed-attention experiment harness.")
    sub = parser.add_subparsers(dest="subcommand", required=True, parser_class=_Parser)

    p = sub.add_parser("train", help="train a model and write a metrics CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_seed_flag(p)
    _add_mode_flags(p)
    p.add_argument("--save-params", default=None, help="write a parameter checkpoint here")
    p.add_argument("--dump-data", default=None, metavar="DIR",
                   help="also dump the generated train/eval datasets")

    p = sub.add_parser("eval", help="evaluate a checkpoint on the eval split")
    p.add_argument("--config", required=True)
    p.add_argument("--params", required=True, help="checkpoint path to load")
    p.add_argument("--out", required=True, help="metrics CSV path")
    _add_seed_flag(p)
    _add_mode_flags(p)
    p.add_argument("--dump-trace", default=None, help="attention-trace CSV path")
    p.add_argument("--trace-layer", type=int, default=0)
    p.add_argument("--trace-example", type=int, default=0)

    p = sub.add_parser("sweep", help="train once per axis value, write a summary CSV")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", required=True, choices=("window_m", "head_span_n"))
    p.add_argument("--values", required=True, help="comma-separated axis values, e.g. 0,2,4,8")
    _add_seed_flag(p)
    _add_mode_flags(p)

    p = sub.add_parser("gradcheck", help="compare backward against finite differences")
    p.add_argument("--config", default=None,
                   help="encoder config (defaults to a small built-in model)")
    _add_seed_flag(p)
    _add_mode_flags(p)

    p = sub.add_parser("bench", help="time attend() across sizes and modes")
    p.add_argument("--out", required=True)
    p.add_argument("--sizes", default="128,256,512,1024")
    p.add_argument("--modes", default="global,conv1d")
    p.add_argument("--trials", type=int, default=5)
    p.add_argument("--window", type=int, default=10)
    p.add_argument("--head-span", type=int, default=2)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=4)
    _add_seed_flag(p)

    p = sub.add_parser("params", help="compare total parameter counts of two configs")
    p.add_argument("config_a")
    p.add_argument("config_b")

    return parser


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:  # argparse handles --help (0) and usage errors (1)
        return 0 if exc.code is None else int(exc.code)

    if args.subcommand == "bench":
        # Must happen before numpy's first import anywhere in the process.
        for var in (
            "OMP_NUM_THREADS",
            "OPENBLAS_NUM_THREADS",
            "MKL_NUM_THREADS",
            "NUMEXPR_NUM_THREADS",
            "VECLIB_MAXIMUM_THREADS",
        ):
            os.environ.setdefault(var, "1")

    logging.basicConfig(
        stream=sys.stderr,
        level=logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    spec = RunSpec(
        subcommand=args.subcommand,
        config=getattr(args, "config", None),
        out=getattr(args, "out", None),
        seed=getattr(args, "seed", None),
    )
    if spec.seed is not None and spec.seed < 0:
        log.error("--seed must be nonnegative, got %d", spec.seed)
        return 1

    from .training import DivergenceError  # deferred so bench pins threads first

    try:
        return _COMMANDS[spec.subcommand](spec, args)
    except DivergenceError as exc:
        log.error("numeric failure: %s", exc)
        return 2
    except (OSError, ValueError) as exc:
        log.error("%s", exc)
        return 1


if __name__ == "__main__":
    sys.exit(main())
