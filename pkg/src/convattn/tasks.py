"""Seeded synthetic sequence-tagging tasks.

Three generators with very different dependency ranges:

* ``copy`` — label_i = token_i (purely pointwise).
* ``reverse`` — label_i = token_{I-1-i} (deliberately global: a windowed
  stack cannot solve it, which makes it a useful contrast).
* ``local_pattern`` — a fixed pattern ``p`` of length ``k`` is drawn from
  the seed; label_i = 1 iff ``p`` occurs contiguously inside the token
  window ``max(0, i-k) .. min(I-1, i+k)``.  The scan radius matches the
  attention window geometry, so a conv window of M = 2k is exactly wide
  enough to see everything a label depends on.

Everything is a pure function of ``TaskSpec.seed``: the train split, the
eval split, and the pattern each use their own derived seed stream, so
the two splits are disjoint by construction and bit-reproducible.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

KINDS = ("copy", "reverse", "local_pattern")

# Sub-stream tags hung off TaskSpec.seed.
_TRAIN_STREAM = 0
_EVAL_STREAM = 1
_PATTERN_STREAM = 2

Example = tuple[np.ndarray, np.ndarray]


@dataclass(frozen=True)
class TaskSpec:
    """Description of one synthetic dataset; the seed fixes it completely."""

    kind: str
    seq_len: int
    vocab_size: int
    n_train: int
    n_eval: int
    seed: int
    pattern_len: int | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ValueError(f"unknown task kind {self.kind!r}; expected one of {KINDS}")
        if self.seq_len < 1:
            raise ValueError(f"seq_len must be >= 1, got {self.seq_len}")
        if self.n_train < 1 or self.n_eval < 1:
            raise ValueError("n_train and n_eval must both be >= 1")
        if self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed}")
        if self.kind == "local_pattern":
            if self.vocab_size < 2:
                raise ValueError("local_pattern needs vocab_size >= 2 for the 0/1 labels")
            if self.pattern_len is None:
                raise ValueError("local_pattern requires pattern_len")
            if not 1 <= self.pattern_len <= self.seq_len:
                raise ValueError(
                    f"pattern_len must be in [1, seq_len], got {self.pattern_len} with seq_len {self.seq_len}"
                )
        else:
            if self.vocab_size < 1:
                raise ValueError(f"vocab_size must be >= 1, got {self.vocab_size}")
            if self.pattern_len is not None:
                raise ValueError(f"pattern_len only applies to local_pattern, not {self.kind}")


def _stream(seed: int, tag: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([seed, tag]))


def pattern_of(spec: TaskSpec) -> np.ndarray:
    """The pattern a local_pattern spec tags (drawn from its own stream)."""
    if spec.kind != "local_pattern":
        raise ValueError(f"{spec.kind} has no pattern")
    rng = _stream(spec.seed, _PATTERN_STREAM)
    return rng.integers(0, spec.vocab_size, size=spec.pattern_len)


def local_pattern_labels(tokens: np.ndarray, pattern: np.ndarray, radius: int) -> np.ndarray:
    """Direct window scan: label_i = 1 iff ``pattern`` occurs contiguously
    inside ``tokens[max(0, i-radius) .. min(I-1, i+radius)]``."""
    k = len(pattern)
    labels = np.zeros(len(tokens), dtype=np.int64)
    for i in range(len(tokens)):
        window = tokens[max(0, i - radius) : min(len(tokens) - 1, i + radius) + 1]
        for start in range(len(window) - k + 1):
            if np.array_equal(window[start : start + k], pattern):
                labels[i] = 1
                break
    return labels


def _labels_for(spec: TaskSpec, tokens: np.ndarray, pattern: np.ndarray | None) -> np.ndarray:
    if spec.kind == "copy":
        return tokens.copy()
    if spec.kind == "reverse":
        return tokens[::-1].copy()
    return local_pattern_labels(tokens, pattern, spec.pattern_len)


def _split(spec: TaskSpec, tag: int, count: int, pattern: np.ndarray | None) -> list[Example]:
    rng = _stream(spec.seed, tag)
    examples = []
    for _ in range(count):
        tokens = rng.integers(0, spec.vocab_size, size=spec.seq_len)
        if pattern is not None and rng.random() < 0.5:
            # Plant the pattern in roughly half the sequences so positive
            # labels are never vanishingly rare.
            start = int(rng.integers(0, spec.seq_len - spec.pattern_len + 1))
            tokens[start : start + spec.pattern_len] = pattern
        examples.append((tokens, _labels_for(spec, tokens, pattern)))
    return examples


def generate(spec: TaskSpec) -> tuple[list[Example], list[Example]]:
    """(train split, eval split) of (tokens, labels) pairs, fixed by the seed."""
    pattern = pattern_of(spec) if spec.kind == "local_pattern" else None
    train = _split(spec, _TRAIN_STREAM, spec.n_train, pattern)
    eval_ = _split(spec, _EVAL_STREAM, spec.n_eval, pattern)
    return train, eval_


def write_examples(path, examples: list[Example]) -> None:
    """One example per line: space-separated tokens, a tab, space-separated labels."""
    with open(path, "w", encoding="ascii") as fh:
        for tokens, labels in examples:
            fh.write(" ".join(map(str, tokens)))
            fh.write("\t")
            fh.write(" ".join(map(str, labels)))
            fh.write("\n")


def read_examples(path) -> list[Example]:
    """Inverse of :func:`write_examples`."""
    examples = []
    with open(path, "r", encoding="ascii") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.rstrip("\n")
            left, tab, right = line.partition("\t")
            if not tab:
                raise ValueError(f"{path}:{line_no}: expected 'tokens<TAB>labels'")
            tokens = np.array([int(tok) for tok in left.split()], dtype=np.int64)
            labels = np.array([int(lab) for lab in right.split()], dtype=np.int64)
            if len(tokens) != len(labels):
                raise ValueError(
                    f"{path}:{line_no}: {len(tokens)} tokens but {len(labels)} labels"
                )
            examples.append((tokens, labels))
    return examples
