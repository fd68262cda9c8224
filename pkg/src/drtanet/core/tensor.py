"""Dense tensors with tape-based reverse-mode differentiation.

A :class:`Tensor` wraps a numpy array. Operations in :mod:`drtanet.core.ops`
record their parents and a backward closure on the result; :func:`backward`
walks that graph in reverse topological order.

Gradients accumulate into ``Tensor.grad`` of leaf tensors until they are
explicitly zeroed (:meth:`ParamStore.zero_grad`).
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_DEFAULT_DTYPE = np.float32
_GRAD_ENABLED = True


def default_dtype():
    return _DEFAULT_DTYPE


@contextlib.contextmanager
def precision(dtype):
    """Temporarily change the dtype used for new tensors and parameters.

    ``with precision(np.float64): ...`` is the 64-bit test mode.
    """
    global _DEFAULT_DTYPE
    previous = _DEFAULT_DTYPE
    _DEFAULT_DTYPE = np.dtype(dtype).type
    try:
        yield
    finally:
        _DEFAULT_DTYPE = previous


@contextlib.contextmanager
def no_grad():
    """Disable graph recording (inference)."""
    global _GRAD_ENABLED
    previous = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = previous


def grad_enabled() -> bool:
    return _GRAD_ENABLED


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data, dtype=dtype or _DEFAULT_DTYPE)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self.op = ""

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = np.zeros_like(self.data)

    def backward(self):
        backward(self)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # operator sugar; the implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)


def make_result(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str = "") -> Tensor:
    """Wrap ``data`` as the output of an op.

    ``backward_fn(grad_out)`` must return one gradient (or ``None``) per parent.
    """
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.op = op
    needs = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    out.requires_grad = needs
    if needs:
        out._parents = tuple(parents)
        out._backward = backward_fn
    else:
        out._parents = ()
        out._backward = None
    return out


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


def backward(loss: Tensor, params: "ParamStore | None" = None) -> None:
    """Accumulate d(loss)/d(leaf) into every reachable leaf's ``grad``.

    ``loss`` must hold a single element. When ``params`` is given, every entry
    ends up with a grad array (zeros if the loss does not depend on it).
    """
    if loss.data.size != 1:
        raise ValueError(f"backward() needs a scalar loss, got shape {loss.shape}")
    if params is not None:
        for p in params.values():
            if p.grad is None:
                p.zero_grad()
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            # leaf
            if node.grad is None:
                node.grad = np.zeros_like(node.data)
            node.grad += g.astype(node.data.dtype, copy=False)
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


class ParamStore:
    """Ordered name -> trainable tensor mapping."""

    def __init__(self, items: Iterable[tuple[str, Tensor]] = ()):
        self._entries: OrderedDict[str, Tensor] = OrderedDict()
        for name, t in items:
            self.add(name, t)

    def add(self, name: str, tensor: Tensor) -> Tensor:
        if name in self._entries:
            raise KeyError(f"duplicate parameter name {name!r}")
        tensor.requires_grad = True
        self._entries[name] = tensor
        return tensor

    def __getitem__(self, name: str) -> Tensor:
        return self._entries[name]

    def __contains__(self, name: str) -> bool:
        return name in self._entries

    def __len__(self) -> int:
        return len(self._entries)

    def __iter__(self) -> Iterator[str]:
        return iter(self._entries)

    def items(self):
        return self._entries.items()

    def keys(self):
        return self._entries.keys()

    def values(self):
        return self._entries.values()

    def zero_grad(self):
        for t in self._entries.values():
            t.zero_grad()

    def num_elements(self, predicate: Callable[[str], bool] | None = None) -> int:
        return sum(t.size for n, t in self._entries.items() if predicate is None or predicate(n))

    def state(self) -> "OrderedDict[str, np.ndarray]":
        return OrderedDict((n, t.data) for n, t in self._entries.items())

    def load(self, arrays: dict[str, np.ndarray]):
        missing = [n for n in self._entries if n not in arrays]
        if missing:
            raise KeyError(f"checkpoint lacks parameters: {', '.join(missing)}")
        for name, t in self._entries.items():
            src = np.asarray(arrays[name])
            if src.shape != t.shape:
                raise ValueError(f"{name}: checkpoint shape {src.shape} != parameter shape {t.shape}")
            t.data = src.astype(t.dtype)

    def astype(self, dtype):
        for t in self._entries.values():
            t.data = t.data.astype(dtype)
            if t.grad is not None:
                t.grad = t.grad.astype(dtype)
