"""Tensor values, named parameters and the recording tape for reverse-mode AD.

Operations only record themselves while a :class:`Tape` is active, so plain
inference carries no bookkeeping overhead::

    with Tape() as tape:
        loss = some_function(params)
    tape.backward(loss)          # fills Parameter.grad
"""
from __future__ import annotations

import threading
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np

DEFAULT_DTYPE = np.float32


class Tensor:
    """Dense float array with an optional ``requires_grad`` flag.

    Tensors are treated as immutable once produced by an operation.
    """

    __slots__ = ("data", "requires_grad", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if dtype is None and arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(DEFAULT_DTYPE)
        if any(d < 1 for d in arr.shape):
            raise ValueError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> Tuple[int, ...]:
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
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    # arithmetic sugar; implementations live in ops
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        from . import ops
        return ops.div(self, other)

    def __rtruediv__(self, other):
        from . import ops
        return ops.div(other, self)

    def __neg__(self):
        from . import ops
        return ops.mul(self, -1.0)


class Parameter(Tensor):
    """Trainable tensor with a name and an accumulated gradient buffer."""

    __slots__ = ("name", "grad")

    def __init__(self, data, name: str = "", dtype=None):
        super().__init__(data, requires_grad=True, dtype=dtype)
        self.name = name
        self.grad = np.zeros_like(self.data)

    @property
    def value(self) -> Tensor:
        return self

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape})"


BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class _Record:
    __slots__ = ("inputs", "output", "backward")

    def __init__(self, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn):
        self.inputs = inputs
        self.output = output
        self.backward = backward


_state = threading.local()


def _stack() -> List["Tape"]:
    if not hasattr(_state, "tapes"):
        _state.tapes = []
    return _state.tapes


def active_tape() -> Optional["Tape"]:
    stack = _stack()
    return stack[-1] if stack else None


class Tape:
    """Ordered log of differentiable operations.

    Each record keeps its inputs, its output and a closure mapping the
    upstream gradient to one gradient per input (``None`` for inputs that
    need none). Tapes are thread-local; nesting is allowed and the innermost
    tape records.
    """

    def __init__(self):
        self.records: List[_Record] = []
        self._produced: Dict[int, int] = {}

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _stack()
        if not stack or stack[-1] is not self:
            raise RuntimeError("tape stack corrupted")
        stack.pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Sequence[Tensor], output: Tensor, backward: BackwardFn) -> None:
        self._produced[id(output)] = len(self.records)
        self.records.append(_Record(tuple(inputs), output, backward))

    def backward(self, loss: Tensor, wrt: Sequence[Tensor] = ()) -> List[np.ndarray]:
        """Accumulate d(loss)/d(param) into every reachable Parameter.

        Returns the gradients of the extra tensors listed in ``wrt`` (zeros
        when unreachable); other non-parameter gradients are discarded.
        """
        if loss.size != 1:
            raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
        end = self._produced.get(id(loss))
        if end is None or self.records[end].output is not loss:
            raise ValueError("loss was not produced on this tape")

        wrt_ids = {id(w) for w in wrt}
        grads: Dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        visited = set()
        for pos in range(end, -1, -1):
            rec = self.records[pos]
            key = id(rec.output)
            upstream = grads.get(key) if key in wrt_ids else grads.pop(key, None)
            if upstream is None:
                continue
            if key in visited:
                raise RuntimeError("cycle detected on tape")
            visited.add(key)
            for inp, g in zip(rec.inputs, rec.backward(upstream)):
                if g is None or not inp.requires_grad:
                    continue
                k = id(inp)
                src = self._produced.get(k)
                if src is not None and src >= pos:
                    raise RuntimeError("cycle detected on tape")
                if isinstance(inp, Parameter):
                    inp.grad = inp.grad + g
                    if k not in wrt_ids:
                        continue
                grads[k] = grads[k] + g if k in grads else g
        return [grads.get(id(w), np.zeros_like(w.data)) for w in wrt]


def backward(tape: Tape, loss: Tensor, wrt: Sequence[Tensor] = ()) -> List[np.ndarray]:
    return tape.backward(loss, wrt)


def make_result(data: np.ndarray, inputs: Sequence[Tensor], backward_fn: BackwardFn) -> Tensor:
    """Wrap an op's forward result and record it if any input needs grad."""
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs, dtype=data.dtype)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward_fn)
    return out


def as_tensor(x, like: Optional[Tensor] = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype) if dtype is not None else x)
