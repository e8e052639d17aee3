"""Reverse-mode automatic differentiation on numpy arrays.

The engine is tape based.  A :class:`Tape` is a context manager that records
every differentiable operation executed inside it, in execution order.
Because the tape is append-only and each output tensor is created by exactly
one operation, reversing the record list is already a valid topological order
for backpropagation; no explicit graph sort is needed.

Values are :class:`Tensor` objects wrapping ``float32`` or ``float64``
arrays.  Trainable leaves are :class:`Parameter` objects, which carry a name,
a parameter-group label and an eagerly allocated gradient buffer so that a
parameter untouched by a forward pass reads back an all-zero gradient rather
than ``None``.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "EngineError",
    "ShapeError",
    "TapeError",
    "NumericsError",
    "Tensor",
    "Parameter",
    "Tape",
    "active_tape",
    "record_op",
    "backward",
    "grad_check",
    "set_strict_numerics",
    "strict_numerics",
]


class EngineError(Exception):
    """Base class for autodiff engine failures."""


class ShapeError(EngineError):
    """An operand's shape violates the operation's contract."""


class TapeError(EngineError):
    """Tape misuse: backward without a tape, or re-running a consumed tape."""


class NumericsError(EngineError):
    """A strict-mode finiteness check failed."""


_FLOAT_DTYPES = (np.float32, np.float64)

# Strict numerics is a process-wide debugging switch, off by default so the
# hot path stays free of np.isfinite scans.
_strict = False


def set_strict_numerics(enabled: bool) -> None:
    """Toggle finiteness checking of every op output (slow, for debugging)."""
    global _strict
    _strict = bool(enabled)


def strict_numerics() -> bool:
    return _strict


def check_finite(arr: np.ndarray, op_name: str) -> None:
    """Raise :class:`NumericsError` if strict mode is on and ``arr`` has NaN/Inf."""
    if _strict and not np.isfinite(arr).all():
        n_bad = int(np.size(arr) - np.isfinite(arr).sum())
        raise NumericsError(
            f"{op_name} produced {n_bad} non-finite value(s) in an output of shape {arr.shape}"
        )


def _coerce(data, dtype=None) -> np.ndarray:
    arr = np.asarray(data)
    if dtype is not None:
        return arr.astype(dtype, copy=False)
    if arr.dtype in _FLOAT_DTYPES:
        return arr
    return arr.astype(np.float32)


class Tensor:
    """A numpy array plus gradient bookkeeping.

    ``requires_grad`` is set automatically on op outputs whenever an input
    requires grad and a tape is active.  ``grad`` is populated by
    :func:`backward` and always matches ``data`` in shape and dtype.
    """

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _coerce(data, dtype)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._tape: "Tape | None" = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        if self.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        """A view of the same data with no grad tracking."""
        return Tensor(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0

    def _accumulate(self, g: np.ndarray) -> None:
        if g.shape != self.data.shape:
            raise ShapeError(
                f"gradient shape {g.shape} does not match tensor shape {self.data.shape}"
            )
        if self.grad is None:
            self.grad = g.astype(self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"


class Parameter:
    """A named, grouped trainable tensor.

    The group label ("backbone" or "film" in the model) is fixed at
    construction; freezing and optimizer selection key off it.  The gradient
    buffer exists from the start, so a parameter that never participates in a
    forward pass contributes an all-zero gradient instead of ``None``.
    """

    __slots__ = ("tensor", "name", "_group")

    def __init__(self, data, name: str, group: str, dtype=None):
        if not name:
            raise ValueError("parameter name must be non-empty")
        self.tensor = Tensor(data, requires_grad=True, dtype=dtype)
        self.tensor.grad = np.zeros_like(self.tensor.data)
        self.name = name
        self._group = str(group)

    @property
    def group(self) -> str:
        return self._group

    @property
    def data(self) -> np.ndarray:
        return self.tensor.data

    @property
    def grad(self) -> np.ndarray | None:
        return self.tensor.grad

    @property
    def shape(self) -> tuple[int, ...]:
        return self.tensor.shape

    @property
    def size(self) -> int:
        return self.tensor.size

    def __repr__(self) -> str:
        return f"Parameter({self.name!r}, shape={self.shape}, group={self.group!r})"


class _Record:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn):
        self.output = output
        self.inputs = inputs
        self.backward_fn = backward_fn


_local = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_local, "tapes", None)
    if stack is None:
        stack = []
        _local.tapes = stack
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tape:
    """Records operations for one forward pass; single-use for backward."""

    def __init__(self):
        self._records: list[_Record] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise TapeError("tape context exited out of order")
        stack.pop()

    @property
    def num_records(self) -> int:
        return len(self._records)

    @property
    def consumed(self) -> bool:
        return self._consumed

    def _record(self, output: Tensor, inputs: tuple[Tensor, ...], backward_fn) -> None:
        if self._consumed:
            raise TapeError("cannot record onto a tape whose backward has already run")
        self._records.append(_Record(output, inputs, backward_fn))

    def _run_backward(self, loss: Tensor) -> None:
        if self._consumed:
            raise TapeError(
                "backward already ran for this tape; build a new tape and re-run the forward pass"
            )
        self._consumed = True
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        loss._accumulate(np.ones_like(loss.data))
        for rec in reversed(self._records):
            g = rec.output.grad
            if g is None:
                continue  # this record does not feed the loss
            grads = rec.backward_fn(g)
            if len(grads) != len(rec.inputs):
                raise EngineError(
                    f"backward fn returned {len(grads)} gradients for {len(rec.inputs)} inputs"
                )
            for inp, gi in zip(rec.inputs, grads):
                if gi is None or not inp.requires_grad:
                    continue
                inp._accumulate(np.asarray(gi))
            if rec.output is not loss:
                rec.output.grad = None  # free intermediate grads eagerly
        self._records.clear()  # release cached forward buffers (im2col etc.)


def record_op(
    output: Tensor,
    inputs: Sequence[Tensor],
    backward_fn: Callable[[np.ndarray], tuple],
) -> Tensor:
    """Attach ``output`` to the active tape if any input requires grad.

    Outside a tape, or when no input requires grad, this is a no-op and the
    output stays a plain constant tensor.
    """
    tape = active_tape()
    if tape is None:
        return output
    if not any(t.requires_grad for t in inputs):
        return output
    output.requires_grad = True
    output._tape = tape
    tape._record(output, tuple(inputs), backward_fn)
    return output


def backward(loss: Tensor) -> None:
    """Backpropagate from a scalar loss through the tape that recorded it."""
    if not isinstance(loss, Tensor):
        raise TypeError(f"backward expects a Tensor, got {type(loss).__name__}")
    tape = loss._tape
    if tape is None:
        raise TapeError(
            "loss is not attached to a tape; run the forward pass inside `with Tape():`"
        )
    tape._run_backward(loss)


def grad_check(
    f: Callable[[Tensor], Tensor],
    x: Tensor,
    h: float = 1e-4,
) -> float:
    """Maximum relative disagreement between analytic and numeric gradients.

    ``f`` must map ``x`` to a scalar tensor.  The check runs in float64: the
    analytic gradient comes from one taped forward/backward, the numeric one
    from central differences with step ``h`` on each entry of ``x``.  Other
    tensors captured by ``f`` are used as-is, so pass float64 weights when
    checking through layers.  Returns
    ``max |analytic - numeric| / max(1e-8, |analytic| + |numeric|)``.
    """
    x64 = Tensor(np.array(x.data, dtype=np.float64), requires_grad=True)
    with Tape():
        y = f(x64)
    if y.size != 1:
        raise ShapeError(f"grad_check target must be scalar, got shape {y.shape}")
    backward(y)
    analytic = np.zeros_like(x64.data) if x64.grad is None else x64.grad.copy()

    numeric = np.zeros_like(x64.data)
    flat = x64.data.reshape(-1)
    nflat = numeric.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = f(x64).item()
        flat[i] = orig - h
        fm = f(x64).item()
        flat[i] = orig
        nflat[i] = (fp - fm) / (2.0 * h)

    denom = np.maximum(1e-8, np.abs(analytic) + np.abs(numeric))
    return float(np.max(np.abs(analytic - numeric) / denom))
