"""Dense tensors with reverse-mode automatic differentiation.

A Tensor wraps a float32/float64 numpy array. Operators (ops.py) attach
a backward closure and the parent tensors to their outputs; calling
``backward()`` on a scalar result replays the closures in reverse
topological order and deposits gradients on every ``requires_grad``
leaf. Tensors are immutable after construction apart from ``grad``;
a recorded graph belongs to one logical thread.
"""

from __future__ import annotations

import numpy as np

from .errors import UsageError

_FLOAT_DTYPES = (np.dtype(np.float32), np.dtype(np.float64))

_grad_enabled = True


class no_grad:
    """Context manager that disables graph recording (inference mode)."""

    def __enter__(self) -> "no_grad":
        global _grad_enabled
        self._prev = _grad_enabled
        _grad_enabled = False
        return self

    def __exit__(self, *exc) -> bool:
        global _grad_enabled
        _grad_enabled = self._prev
        return False


def grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "_used")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self._used = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self) -> np.dtype:
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def is_finite(self) -> bool:
        return bool(np.isfinite(self.data).all())

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{flag})"

    def _toposort(self) -> list["Tensor"]:
        # Iterative postorder; subgraphs without requires_grad cannot
        # contribute gradients and are pruned.
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        return topo

    def backward(self) -> None:
        """Populate ``grad`` on every requires_grad leaf reachable from here."""
        if self.data.size != 1:
            raise UsageError(f"backward() needs a scalar loss, got shape {self.data.shape}")
        if self._used:
            raise UsageError("backward() already ran on this graph; rebuild the forward pass first")
        self._used = True
        if not self.requires_grad:
            return
        grads: dict[Tensor, np.ndarray] = {self: np.ones_like(self.data)}
        for node in reversed(self._toposort()):
            g = grads.pop(node, None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if parent in grads:
                    grads[parent] = grads[parent] + pg
                else:
                    grads[parent] = pg

    # Arithmetic conveniences are attached by ops.py to avoid an import
    # cycle; see the bottom of that module.
