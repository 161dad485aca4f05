"""Dense tensors and a single-use tape for reverse-mode differentiation.

Operators (see :mod:`smartnet.ops`) record themselves on the innermost active
:class:`Tape`. Outside a tape they only compute values, which is the fast
path used for inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable, Optional, Sequence

import numpy as np

from smartnet.errors import DimensionError, UsageError

BackwardFn = Callable[[np.ndarray, Sequence[bool]], Sequence[Optional[np.ndarray]]]

_active_tapes: list["Tape"] = []


class Tensor:
    """An n-dimensional float array that can take part in a tape.

    Args:
        data: Anything ``np.asarray`` accepts.
        requires_grad: Whether ``backward`` should populate ``grad`` for this tensor.
        dtype: Floating dtype; defaults to the dtype of ``data`` if floating,
            otherwise float32.
        name: Optional label used in diagnostics and checkpoints.
    """

    __slots__ = ("data", "requires_grad", "grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        arr = np.asarray(data)
        if dtype is None:
            dtype = arr.dtype if np.issubdtype(arr.dtype, np.floating) else np.float32
        self.data: np.ndarray = np.asarray(arr, dtype=dtype, order="C")
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag}, requires_grad={self.requires_grad})"

    # operator sugar; implementations live in smartnet.ops
    def __add__(self, other):
        from smartnet import ops

        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from smartnet import ops

        return ops.sub(self, other)

    def __rsub__(self, other):
        from smartnet import ops

        return ops.sub(other, self)

    def __mul__(self, other):
        from smartnet import ops

        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from smartnet import ops

        return ops.mul(self, -1.0)

    def sum(self):
        from smartnet import ops

        return ops.sum(self)

    def mean(self):
        from smartnet import ops

        return ops.mean(self)

    def reshape(self, *shape):
        from smartnet import ops

        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return ops.reshape(self, shape)


def as_tensor(value, dtype=None) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


@dataclass
class _Record:
    inputs: tuple
    output: Tensor
    backward: BackwardFn


class Tape:
    """Ordered record of operations for one forward build.

    Use as a context manager; ``backward`` may run once.
    """

    def __init__(self) -> None:
        self.records: list[_Record] = []
        self._done = False

    def __enter__(self) -> "Tape":
        if self._done:
            raise UsageError("tape already consumed by backward")
        _active_tapes.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _active_tapes.remove(self)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(
        self,
        loss: Tensor,
        wrt: Optional[Iterable[Tensor]] = None,
        grad_output: Optional[np.ndarray] = None,
    ) -> None:
        """Populate ``grad`` with d(loss)/d(tensor).

        With ``wrt`` only those tensors receive ``grad`` and branches that do not
        lead to them are skipped; otherwise every ``requires_grad`` tensor in the
        graph does. Existing ``grad`` values are overwritten, not accumulated.
        """
        if self._done:
            raise UsageError("backward called twice on the same tape")
        if grad_output is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad_output = np.ones_like(loss.data)
        self._done = True

        if wrt is not None:
            targets = {id(t) for t in wrt}
            needed = set(targets)
            for rec in self.records:
                if any(id(t) in needed for t in rec.inputs):
                    needed.add(id(rec.output))
        else:
            targets = None
            needed = None

        grads: dict[int, np.ndarray] = {id(loss): grad_output}
        seen: dict[int, Tensor] = {id(loss): loss}
        for rec in reversed(self.records):
            g_out = grads.get(id(rec.output))
            if g_out is None:
                continue
            if needed is None:
                flags = [t.requires_grad for t in rec.inputs]
            else:
                flags = [t.requires_grad and id(t) in needed for t in rec.inputs]
            if not any(flags):
                continue
            in_grads = rec.backward(g_out, flags)
            for t, flag, g in zip(rec.inputs, flags, in_grads):
                if not flag or g is None:
                    continue
                key = id(t)
                if key in grads:
                    grads[key] = grads[key] + g
                else:
                    grads[key] = g
                    seen[key] = t

        for key, t in seen.items():
            if not t.requires_grad:
                continue
            if targets is not None and key not in targets:
                continue
            t.grad = grads[key]
        if targets is not None:
            for t in wrt:  # type: ignore[union-attr]
                if id(t) not in grads:
                    t.grad = np.zeros_like(t.data)
        self.records.clear()


def current_tape() -> Optional[Tape]:
    return _active_tapes[-1] if _active_tapes else None


def backward(loss: Tensor, tape: Tape, wrt: Optional[Iterable[Tensor]] = None) -> None:
    """Run ``tape.backward(loss)``; see :meth:`Tape.backward`."""
    tape.backward(loss, wrt=wrt)
