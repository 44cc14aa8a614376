"""Dense float64 tensors with reverse-mode automatic differentiation.

The graph is recorded eagerly: every operation in :mod:`convattn.ops`
attaches ``(parent, vjp)`` edges to its output, where ``vjp`` maps the
output cotangent to the parent cotangent.  :meth:`Tensor.backward` replays
those edges in reverse topological order and accumulates into the ``grad``
buffers of tracked leaves.  Values are treated as immutable once produced;
only optimizers mutate leaf ``data`` between passes.
"""

from __future__ import annotations

from typing import Callable

import numpy as np

Vjp = Callable[[np.ndarray], np.ndarray]


class Tensor:
    """Row-major float64 array plus optional autodiff bookkeeping.

    A tensor created with ``requires_grad=True`` is a leaf parameter: its
    ``grad`` buffer (same shape, zero-initialized) accumulates cotangents
    across backward passes until :meth:`zero_grad` resets it.  Tensors
    produced by ops carry the recorded edges instead and have no ``grad``
    buffer of their own.
    """

    __slots__ = ("data", "grad", "requires_grad", "_edges")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad = np.zeros_like(self.data) if self.requires_grad else None
        self._edges: tuple[tuple[Tensor, Vjp], ...] = ()

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() requires a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        """Reset the accumulated gradient of a leaf to exact zeros."""
        if self.grad is not None:
            self.grad.fill(0.0)

    def backward(self, seed=None) -> None:
        """Accumulate d(self)/d(leaf) * seed into every tracked leaf.

        ``seed`` is the cotangent of ``self`` and must match its shape; it
        defaults to 1.0 for single-element outputs (the common scalar-loss
        case).  Repeated calls keep accumulating, which is what mini-batch
        loops rely on.
        """
        if seed is None:
            if self.data.size != 1:
                raise ValueError(
                    f"backward() without a seed requires a single-element output, got shape {self.shape}"
                )
            seed = np.ones_like(self.data)
        else:
            seed = np.asarray(seed, dtype=np.float64)
            if seed.shape != self.data.shape:
                raise ValueError(
                    f"cotangent shape {seed.shape} does not match output shape {self.data.shape}"
                )

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
            for parent, _ in node._edges:
                if id(parent) not in seen:
                    stack.append((parent, False))

        cotangents: dict[int, np.ndarray] = {id(self): seed}
        for node in reversed(order):
            grad_out = cotangents.pop(id(node), None)
            if grad_out is None:
                continue
            if node.requires_grad:
                node.grad += grad_out
            for parent, vjp in node._edges:
                contribution = vjp(grad_out)
                key = id(parent)
                if key in cotangents:
                    # VJPs may return views of grad_out, so never add in place.
                    cotangents[key] = cotangents[key] + contribution
                else:
                    cotangents[key] = contribution

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"


def parameter(data) -> Tensor:
    """A trainable leaf: float64 copy of ``data`` with a zeroed grad buffer."""
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def from_op(data: np.ndarray, edges) -> Tensor:
    """Build an op output node, keeping only edges that can reach a leaf."""
    out = Tensor.__new__(Tensor)
    out.data = data
    out.requires_grad = False
    out.grad = None
    out._edges = tuple((p, fn) for p, fn in edges if p.requires_grad or p._edges)
    return out
