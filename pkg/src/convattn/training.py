"""Deterministic training loop, optimizers, and evaluation metrics.

The whole pipeline is a pure function of the task seed and the train
seed: dataset generation, parameter init, and batch order all draw from
derived seed streams, and gradients are reduced over the batch in fixed
index order.  Two runs with the same seeds therefore produce bit-equal
metric histories.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass

import numpy as np

from .encoder import EncoderConfig, ModelParams, encode, init_model
from .ops import cross_entropy
from .tasks import Example, TaskSpec, generate
from .tensor import Tensor

__all__ = [
    "TrainConfig",
    "Metrics",
    "DivergenceError",
    "Sgd",
    "Adam",
    "make_optimizer",
    "prediction_metrics",
    "evaluate",
    "fit",
    "train",
    "cross_entropy",
]

log = logging.getLogger(__name__)

_ORDER_STREAM = 4  # seed-stream tag for batch shuffling


class DivergenceError(RuntimeError):
    """Training loss became non-finite (NaN/Inf)."""


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adam"
    learning_rate: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    batch_size: int = 8
    max_steps: int = 1000
    eval_every: int = 100
    seed: int = 0

    def __post_init__(self):
        if self.optimizer not in ("sgd", "adam"):
            raise ValueError(f"optimizer must be 'sgd' or 'adam', got {self.optimizer!r}")
        # Zero is allowed: a null update is well-defined and useful in tests.
        if self.learning_rate < 0:
            raise ValueError(f"learning_rate must be >= 0, got {self.learning_rate}")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ValueError("Adam betas must lie in [0, 1)")
        if self.eps <= 0:
            raise ValueError(f"eps must be positive, got {self.eps}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.max_steps < 1:
            raise ValueError(f"max_steps must be >= 1, got {self.max_steps}")
        if self.eval_every < 1:
            raise ValueError(f"eval_every must be >= 1, got {self.eval_every}")
        if self.seed < 0:
            raise ValueError(f"seed must be a nonnegative integer, got {self.seed}")


@dataclass(frozen=True)
class Metrics:
    step: int
    loss: float
    accuracy: float


class Sgd:
    def __init__(self, tensors: list[Tensor], lr: float):
        self.tensors = tensors
        self.lr = lr

    def step(self) -> None:
        for t in self.tensors:
            t.data -= self.lr * t.grad


class Adam:
    """Adam with bias correction (defaults 0.9 / 0.999 / 1e-8)."""

    def __init__(self, tensors: list[Tensor], lr: float, beta1: float, beta2: float, eps: float):
        self.tensors = tensors
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.m = [np.zeros_like(t.data) for t in tensors]
        self.v = [np.zeros_like(t.data) for t in tensors]
        self.t = 0

    def step(self) -> None:
        self.t += 1
        fix1 = 1.0 - self.beta1**self.t
        fix2 = 1.0 - self.beta2**self.t
        for tensor, m, v in zip(self.tensors, self.m, self.v):
            g = tensor.grad
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            tensor.data -= self.lr * (m / fix1) / (np.sqrt(v / fix2) + self.eps)


def make_optimizer(tc: TrainConfig, tensors: list[Tensor]):
    if tc.optimizer == "sgd":
        return Sgd(tensors, tc.learning_rate)
    return Adam(tensors, tc.learning_rate, tc.beta1, tc.beta2, tc.eps)


def prediction_metrics(pairs: list[tuple[np.ndarray, np.ndarray]], step: int = 0) -> Metrics:
    """Mean cross-entropy and argmax token accuracy over (logits, labels) pairs."""
    if not pairs:
        raise ValueError("need at least one (logits, labels) pair")
    total_loss = 0.0
    correct = 0
    total = 0
    for logits, labels in pairs:
        logits_t = logits if isinstance(logits, Tensor) else Tensor(logits)
        total_loss += cross_entropy(logits_t, labels).item() * len(labels)
        correct += int((logits_t.data.argmax(axis=1) == np.asarray(labels)).sum())
        total += len(labels)
    return Metrics(step=step, loss=total_loss / total, accuracy=correct / total)


def evaluate(params: ModelParams, config: EncoderConfig, examples: list[Example], step: int = 0) -> Metrics:
    """Run the model over a dataset split and score every token position."""
    return prediction_metrics(
        [(encode(tokens, params, config), labels) for tokens, labels in examples], step=step
    )


def _batch_indices(n: int, batch_size: int, rng: np.random.Generator):
    """Endless epochs of shuffled indices, chunked; ragged tails included."""
    while True:
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            yield order[start : start + batch_size]


def fit(config: EncoderConfig, task: TaskSpec, tc: TrainConfig) -> tuple[ModelParams, list[Metrics]]:
    """Train a freshly initialized model; returns it with its metric history.

    Gradients of a batch are averaged by seeding each example's backward
    pass with 1/batch and accumulating in fixed index order.  Raises
    :class:`DivergenceError` as soon as the batch loss stops being finite.
    """
    if task.vocab_size != config.vocab_size:
        raise ValueError(
            f"task vocab {task.vocab_size} does not match encoder vocab {config.vocab_size}"
        )
    if task.seq_len > config.max_len:
        raise ValueError(f"task seq_len {task.seq_len} exceeds encoder max_len {config.max_len}")

    train_set, eval_set = generate(task)
    params = init_model(config, tc.seed)
    tensors = list(params.tensor_dict().values())
    optimizer = make_optimizer(tc, tensors)
    order_rng = np.random.default_rng(np.random.SeedSequence([tc.seed, _ORDER_STREAM]))
    batches = _batch_indices(len(train_set), tc.batch_size, order_rng)

    history: list[Metrics] = []
    for step in range(1, tc.max_steps + 1):
        batch = next(batches)
        for t in tensors:
            t.zero_grad()
        batch_loss = 0.0
        for index in batch:
            tokens, labels = train_set[index]
            loss = cross_entropy(encode(tokens, params, config), labels)
            batch_loss += loss.item()
            loss.backward(np.asarray(1.0 / len(batch)))
        if not math.isfinite(batch_loss):
            raise DivergenceError(f"non-finite training loss at step {step}")
        optimizer.step()
        if step % tc.eval_every == 0 or step == tc.max_steps:
            metrics = evaluate(params, config, eval_set, step=step)
            history.append(metrics)
            log.info(
                "step %d: loss %.6f, accuracy %.4f", metrics.step, metrics.loss, metrics.accuracy
            )
    return params, history


def train(config: EncoderConfig, task: TaskSpec, tc: TrainConfig) -> list[Metrics]:
    """Metrics history of :func:`fit` (the common case: nothing keeps the model)."""
    return fit(config, task, tc)[1]
