# circuitlab/core/autodiff.py
"""
Reverse-mode differentiation over dense float64 arrays.

Every primitive computes its output with numpy, checks it is finite and, when any input
lives on a Tape, records a closure that maps the output gradient back to its inputs.
Tensors are immutable: their data arrays are flagged read-only on creation.

Broadcasting is limited to missing leading (batch) dimensions of the second operand.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from circuitlab.core.errors import ConfigError, NonFiniteError, ShapeError, TapeError

ArrayLike = Union[np.ndarray, float, int, Sequence]
BackwardFn = Callable[[np.ndarray, Tuple[bool, ...]], Tuple[Optional[np.ndarray], ...]]
Program = Callable[[Dict[str, "Tensor"]], Dict[str, "Tensor"]]

_GELU_C = math.sqrt(2.0 / math.pi)


@dataclass(frozen=True)
class Record:
    op: str
    inputs: Tuple[Optional[int], ...]  # None marks a constant operand
    output: int
    backward: BackwardFn


class Tape:
    """Topologically ordered list of recorded primitives"""

    def __init__(self):
        self.records: List[Record] = []
        self.inputs: Dict[str, int] = {}
        self._shapes: Dict[int, Tuple[int, ...]] = {}
        self._next_id = 0

    def _allocate(self, shape: Tuple[int, ...]) -> int:
        tensor_id = self._next_id
        self._next_id += 1
        self._shapes[tensor_id] = shape
        return tensor_id

    def leaf(self, value: ArrayLike, name: Optional[str] = None) -> "Tensor":
        tensor = Tensor(value)
        tensor.tape = self
        tensor.id = self._allocate(tensor.shape)
        if name is not None:
            self.inputs[name] = tensor.id
        return tensor

    def shape_of(self, tensor_id: int) -> Tuple[int, ...]:
        if tensor_id not in self._shapes:
            raise TapeError(f"tensor id {tensor_id} is not on this tape")
        return self._shapes[tensor_id]

    def __contains__(self, tensor_id: int) -> bool:
        return tensor_id in self._shapes

    def __len__(self) -> int:
        return len(self.records)

    @property
    def last_output(self) -> int:
        if not self.records:
            raise TapeError("tape has no recorded operations")
        return self.records[-1].output

    def ops(self) -> List[Tuple[str, Tuple[Optional[int], ...], int]]:
        return [(r.op, r.inputs, r.output) for r in self.records]


class Tensor:
    __slots__ = ("data", "id", "tape")

    def __init__(self, data: ArrayLike):
        array = np.array(data, dtype=np.float64)
        if array.ndim == 0:
            array = array.reshape(1)
        if not np.isfinite(array).all():
            raise NonFiniteError("tensor", "input contains NaN or Inf")
        array.flags.writeable = False
        self.data = array
        self.id: Optional[int] = None
        self.tape: Optional[Tape] = None

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single element, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def __repr__(self):
        return f"Tensor(shape={self.shape}, id={self.id})"


Operand = Union[Tensor, np.ndarray, float, int]


# ----------------------------------------------------------------------------
# Plumbing
# ----------------------------------------------------------------------------

def _data(x: Operand) -> np.ndarray:
    if isinstance(x, Tensor):
        return x.data
    return np.asarray(x, dtype=np.float64)


def _tape_of(operands: Sequence[Operand]) -> Optional[Tape]:
    tape = None
    for x in operands:
        if isinstance(x, Tensor) and x.tape is not None:
            if tape is not None and x.tape is not tape:
                raise TapeError("operands live on different tapes")
            tape = x.tape
    return tape


def _emit(op: str, operands: Sequence[Operand], out: np.ndarray, backward: BackwardFn) -> Tensor:
    if not np.isfinite(out).all():
        raise NonFiniteError(op)
    result = Tensor.__new__(Tensor)
    out = np.ascontiguousarray(out, dtype=np.float64)
    out.flags.writeable = False
    result.data = out
    result.id = None
    result.tape = None
    tape = _tape_of(operands)
    if tape is not None:
        result.tape = tape
        result.id = tape._allocate(out.shape)
        ids = tuple(
            x.id if isinstance(x, Tensor) and x.tape is tape else None for x in operands
        )
        tape.records.append(Record(op, ids, result.id, backward))
    return result


def _check_trailing(big: Tuple[int, ...], small: Tuple[int, ...], op: str):
    if len(small) > len(big) or tuple(big[len(big) - len(small):]) != tuple(small):
        raise ShapeError(f"{op}: shapes {big} and {small} are not batch-compatible")


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    return grad.reshape(shape)


def _ordered(a: Operand, b: Operand) -> bool:
    """True when `a` carries the full shape and `b` may lack leading dims"""
    sa, sb = np.shape(_data(a)), np.shape(_data(b))
    return len(sa) >= len(sb)


# ----------------------------------------------------------------------------
# Primitives
# ----------------------------------------------------------------------------

def add(a: Operand, b: Operand) -> Tensor:
    if not _ordered(a, b):
        return add(b, a)
    da, db = _data(a), _data(b)
    if db.size != 1 or isinstance(b, Tensor):
        _check_trailing(da.shape, db.shape, "add")

    def backward(g, needs):
        return (g if needs[0] else None, _unbroadcast(g, db.shape) if needs[1] else None)

    return _emit("add", (a, b), da + db, backward)


def mul(a: Operand, b: Operand) -> Tensor:
    if not _ordered(a, b):
        return mul(b, a)
    da, db = _data(a), _data(b)
    if db.size != 1 or isinstance(b, Tensor):
        _check_trailing(da.shape, db.shape, "mul")

    def backward(g, needs):
        ga = g * db if needs[0] else None
        gb = _unbroadcast(g * da, db.shape) if needs[1] else None
        return ga, gb

    return _emit("mul", (a, b), da * db, backward)


def matmul(a: Operand, b: Operand) -> Tensor:
    da, db = _data(a), _data(b)
    if da.ndim < 2 or db.ndim < 2 or da.shape[-1] != db.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {da.shape} @ {db.shape}")
    batch_a, batch_b = da.shape[:-2], db.shape[:-2]
    if len(batch_a) >= len(batch_b):
        _check_trailing(batch_a, batch_b, "matmul")
    else:
        _check_trailing(batch_b, batch_a, "matmul")

    def backward(g, needs):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(db, -1, -2)), da.shape) if needs[0] else None
        gb = _unbroadcast(np.matmul(np.swapaxes(da, -1, -2), g), db.shape) if needs[1] else None
        return ga, gb

    return _emit("matmul", (a, b), np.matmul(da, db), backward)


def rms_norm(x: Operand, eps: float = 1e-5) -> Tensor:
    dx = _data(x)
    n = dx.shape[-1]
    scale = (np.mean(dx * dx, axis=-1, keepdims=True) + eps) ** -0.5

    def backward(g, needs):
        dot = np.sum(dx * g, axis=-1, keepdims=True)
        return (scale * (g - (scale * scale / n) * dx * dot),)

    return _emit("rms_norm", (x,), dx * scale, backward)


def softmax(x: Operand, mask: Optional[np.ndarray] = None) -> Tensor:
    """Softmax over the last axis; entries where `mask` is True get probability 0"""
    dx = _data(x)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        _check_trailing(dx.shape, mask.shape, "softmax")
        dx = np.where(mask, -np.inf, dx)
    shifted = dx - dx.max(axis=-1, keepdims=True)
    exps = np.exp(shifted)
    probs = exps / exps.sum(axis=-1, keepdims=True)

    def backward(g, needs):
        return (probs * (g - np.sum(g * probs, axis=-1, keepdims=True)),)

    return _emit("softmax", (x,), probs, backward)


def log_softmax(x: Operand) -> Tensor:
    dx = _data(x)
    shifted = dx - dx.max(axis=-1, keepdims=True)
    log_z = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - log_z
    probs = np.exp(out)

    def backward(g, needs):
        return (g - probs * np.sum(g, axis=-1, keepdims=True),)

    return _emit("log_softmax", (x,), out, backward)


def gelu(x: Operand) -> Tensor:
    dx = _data(x)
    inner = _GELU_C * (dx + 0.044715 * dx ** 3)
    t = np.tanh(inner)

    def backward(g, needs):
        d_inner = _GELU_C * (1.0 + 3 * 0.044715 * dx * dx)
        return (g * (0.5 * (1.0 + t) + 0.5 * dx * (1.0 - t * t) * d_inner),)

    return _emit("gelu", (x,), 0.5 * dx * (1.0 + t), backward)


def embedding(table: Operand, ids: np.ndarray) -> Tensor:
    dt = _data(table)
    ids = np.asarray(ids, dtype=np.int64)
    if dt.ndim != 2:
        raise ShapeError(f"embedding table must be 2-D, got {dt.shape}")
    if ids.size and (ids.min() < 0 or ids.max() >= dt.shape[0]):
        raise ShapeError(f"embedding ids out of range [0, {dt.shape[0]})")

    def backward(g, needs):
        grad = np.zeros_like(dt)
        np.add.at(grad, ids.reshape(-1), g.reshape(-1, dt.shape[1]))
        return (grad,)

    return _emit("embedding", (table,), dt[ids], backward)


def gather(x: Operand, index: np.ndarray) -> Tensor:
    """Pick `index[..., k]` from the last axis of `x` row by row"""
    dx = _data(x)
    index = np.asarray(index, dtype=np.int64)
    if index.shape[:-1] != dx.shape[:-1]:
        raise ShapeError(f"gather: index shape {index.shape} does not match {dx.shape}")
    if index.size and (index.min() < 0 or index.max() >= dx.shape[-1]):
        raise ShapeError("gather: index out of range")

    def backward(g, needs):
        flat = np.zeros((int(np.prod(dx.shape[:-1], dtype=np.int64)), dx.shape[-1]))
        rows = np.arange(flat.shape[0])[:, None]
        np.add.at(flat, (rows, index.reshape(flat.shape[0], -1)), g.reshape(flat.shape[0], -1))
        return (flat.reshape(dx.shape),)

    return _emit("gather", (x,), np.take_along_axis(dx, index, axis=-1), backward)


def slice_(x: Operand, axis: int, start: int, stop: int) -> Tensor:
    dx = _data(x)
    axis = axis % dx.ndim
    if not 0 <= start < stop <= dx.shape[axis]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for axis of size {dx.shape[axis]}")
    key = (slice(None),) * axis + (slice(start, stop),)

    def backward(g, needs):
        grad = np.zeros_like(dx)
        grad[key] = g
        return (grad,)

    return _emit("slice", (x,), dx[key], backward)


def concat(tensors: Sequence[Operand], axis: int) -> Tensor:
    arrays = [_data(t) for t in tensors]
    if not arrays:
        raise ShapeError("concat needs at least one operand")
    axis = axis % arrays[0].ndim
    for arr in arrays[1:]:
        if arr.ndim != arrays[0].ndim or any(
            s != r for i, (s, r) in enumerate(zip(arr.shape, arrays[0].shape)) if i != axis
        ):
            raise ShapeError(f"concat: incompatible shapes {arr.shape} and {arrays[0].shape}")
    bounds = np.cumsum([arr.shape[axis] for arr in arrays])[:-1]

    def backward(g, needs):
        return tuple(np.split(g, bounds, axis=axis))

    return _emit("concat", tuple(tensors), np.concatenate(arrays, axis=axis), backward)


def reshape(x: Operand, shape: Sequence[int]) -> Tensor:
    dx = _data(x)
    try:
        out = dx.reshape(tuple(shape))
    except ValueError as exc:
        raise ShapeError(f"reshape {dx.shape} -> {tuple(shape)}: {exc}") from exc

    def backward(g, needs):
        return (g.reshape(dx.shape),)

    return _emit("reshape", (x,), out, backward)


def transpose(x: Operand, axes: Sequence[int]) -> Tensor:
    dx = _data(x)
    axes = tuple(axes)
    inverse = tuple(np.argsort(axes))

    def backward(g, needs):
        return (np.transpose(g, inverse),)

    return _emit("transpose", (x,), np.transpose(dx, axes), backward)


def sum_(x: Operand, axis: Optional[int] = None, keepdims: bool = False) -> Tensor:
    dx = _data(x)
    out = np.sum(dx, axis=axis, keepdims=keepdims)
    scalar = np.ndim(out) == 0

    def backward(g, needs):
        if axis is None or scalar:
            return (np.broadcast_to(g.reshape(-1)[0], dx.shape).copy(),)
        g_full = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(g_full, dx.shape).copy(),)

    return _emit("sum", (x,), np.atleast_1d(out), backward)


def hook(x: Operand, name: str) -> Tensor:
    """Identity with its own tensor id, so gradients at a hook point can be requested"""

    def backward(g, needs):
        return (g,)

    return _emit(f"hook:{name}", (x,), _data(x), backward)


# ----------------------------------------------------------------------------
# Drivers
# ----------------------------------------------------------------------------

def forward(program: Program, inputs: Dict[str, ArrayLike]) -> Tuple[Dict[str, Tensor], Tape]:
    """Run `program` on fresh leaves of a new tape"""
    tape = Tape()
    leaves = {name: tape.leaf(value, name) for name, value in inputs.items()}
    outputs = program(leaves)
    if not isinstance(outputs, dict) or not all(isinstance(v, Tensor) for v in outputs.values()):
        raise ShapeError("program must return a dict of Tensors")
    return outputs, tape


def evaluate(program: Program, inputs: Dict[str, ArrayLike]) -> Dict[str, np.ndarray]:
    """Run `program` without recording"""
    leaves = {name: Tensor(value) for name, value in inputs.items()}
    return {name: t.data for name, t in program(leaves).items()}


def backward(
    tape: Tape,
    seed_gradient: ArrayLike,
    wrt: Iterable[int],
    output: Union[Tensor, int, None] = None,
) -> Dict[int, np.ndarray]:
    """dOutput/dTensor for every id in `wrt`, seeded with `seed_gradient`"""
    wanted = list(wrt)
    wanted_set = set(wanted)
    for tensor_id in wanted:
        if tensor_id not in tape:
            raise TapeError(f"tensor id {tensor_id} is not on this tape")
    if output is None:
        out_id = tape.last_output
    else:
        out_id = output.id if isinstance(output, Tensor) else int(output)
    out_shape = tape.shape_of(out_id)
    seed = np.asarray(seed_gradient, dtype=np.float64)
    if seed.shape != out_shape:
        if seed.size == 1 and int(np.prod(out_shape)) == 1:
            seed = seed.reshape(out_shape)
        else:
            raise ShapeError(f"seed gradient shape {seed.shape} != output shape {out_shape}")

    # Only ids downstream of a requested id need gradients
    reach = set(wanted_set)
    for rec in tape.records:
        if any(i in reach for i in rec.inputs if i is not None):
            reach.add(rec.output)

    grads: Dict[int, np.ndarray] = {out_id: seed}
    for rec in reversed(tape.records):
        g = grads.get(rec.output)
        if g is None:
            continue
        needs = tuple(i is not None and i in reach for i in rec.inputs)
        if any(needs):
            for input_id, grad in zip(rec.inputs, rec.backward(g, needs)):
                if input_id is None or grad is None or input_id not in reach:
                    continue
                if input_id in grads:
                    grads[input_id] = grads[input_id] + grad
                else:
                    grads[input_id] = grad
        if rec.output not in wanted_set:
            del grads[rec.output]

    result = {}
    for tensor_id in wanted:
        grad = grads.get(tensor_id)
        if grad is None:
            grad = np.zeros(tape.shape_of(tensor_id))
        if not np.isfinite(grad).all():
            raise NonFiniteError("backward", f"gradient of tensor {tensor_id}")
        result[tensor_id] = grad
    return result


def finite_difference_check(
    program: Program,
    point: Dict[str, ArrayLike],
    step: float,
    output: str = "metric",
) -> float:
    """Max over all input elements of |fd - backprop| / (|fd| + |backprop| + 1e-12)"""
    if not step > 0:
        raise ConfigError(f"invalid step {step}: must be > 0")
    outputs, tape = forward(program, point)
    if output not in outputs:
        raise TapeError(f"program has no output named {output!r}")
    metric = outputs[output]
    if metric.data.size != 1:
        raise ShapeError(f"finite-difference output must be scalar, got {metric.shape}")
    ids = {name: tape.inputs[name] for name in point}
    grads = backward(tape, np.ones(metric.shape), ids.values(), output=metric)

    worst = 0.0
    base = {name: np.array(value, dtype=np.float64) for name, value in point.items()}
    for name, array in base.items():
        analytic = grads[ids[name]].reshape(-1)
        flat = array.reshape(-1)
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + step
            plus = evaluate(program, base)[output].reshape(-1)[0]
            flat[i] = original - step
            minus = evaluate(program, base)[output].reshape(-1)[0]
            flat[i] = original
            numeric = (plus - minus) / (2.0 * step)
            error = abs(numeric - analytic[i]) / (abs(numeric) + abs(analytic[i]) + 1e-12)
            worst = max(worst, error)
    return worst
