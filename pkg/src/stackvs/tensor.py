"""Minimal define-by-run tensor engine with reverse-mode gradients.

Every op takes :class:`Tensor` operands and returns a new :class:`Tensor`.
If any operand lives on a :class:`Tape`, the op is recorded there together
with a closure that maps the output gradient to input gradients. Operands
without a tape are constants. A fresh tape is built for every training step.

Values are float64 numpy arrays. Any op that produces NaN or Inf raises
:class:`~stackvs.errors.NumericError` naming the op.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass, field
from typing import Callable, Iterator, Mapping, Sequence

import numpy as np

from .errors import NumericError, ShapeError

LOG_FLOOR = 1e-300

# Test hook: op name -> factor applied to that op's input gradients.
_GRAD_SCALE: dict[str, float] = {}


@contextlib.contextmanager
def corrupt_gradient(op: str, factor: float) -> Iterator[None]:
    """Scale the analytic gradient of ``op`` by ``factor`` (self-check hook)."""
    previous = _GRAD_SCALE.get(op)
    _GRAD_SCALE[op] = factor
    try:
        yield
    finally:
        if previous is None:
            _GRAD_SCALE.pop(op, None)
        else:
            _GRAD_SCALE[op] = previous


BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


@dataclass
class Node:
    op: str
    inputs: tuple[int, ...]
    shape: tuple[int, ...]
    backward: BackwardFn | None = None


class Tensor:
    """A dense float64 array, optionally bound to a node on a tape."""

    __slots__ = ("value", "tape", "node")

    def __init__(self, value, tape: Tape | None = None, node: int | None = None):
        self.value = np.asarray(value, dtype=np.float64)
        self.tape = tape
        self.node = node

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.value.reshape(-1)

    def numpy(self) -> np.ndarray:
        return self.value

    def __repr__(self) -> str:
        where = f", node={self.node}" if self.tape is not None else ""
        return f"Tensor(shape={self.shape}{where})"

    # Operator sugar keeps equation transcriptions readable.
    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value) -> Tensor:
    return Tensor(value)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class Tape:
    """Ordered record of operations; node ids index into ``nodes``."""

    nodes: list[Node] = field(default_factory=list)

    def leaf(self, value, op: str = "leaf") -> Tensor:
        arr = np.array(value, dtype=np.float64)
        self.nodes.append(Node(op, (), arr.shape))
        return Tensor(arr, self, len(self.nodes) - 1)

    def parameters(self, arrays: Mapping[str, np.ndarray]) -> dict[str, Tensor]:
        return {name: self.leaf(arr, "param") for name, arr in arrays.items()}

    def __len__(self) -> int:
        return len(self.nodes)


class Gradients(Mapping):
    """Gradient table keyed by node id; unreachable nodes read as zeros."""

    def __init__(self, tape: Tape, table: dict[int, np.ndarray]):
        self._tape = tape
        self._table = table

    def __getitem__(self, key: Tensor | int) -> np.ndarray:
        node = key.node if isinstance(key, Tensor) else key
        if node is None:
            raise KeyError("constant tensor has no gradient")
        got = self._table.get(node)
        if got is None:
            return np.zeros(self._tape.nodes[node].shape)
        return got

    def __iter__(self):
        return iter(range(len(self._tape.nodes)))

    def __len__(self) -> int:
        return len(self._tape.nodes)


def _record(op: str, value: np.ndarray, operands: Sequence[Tensor], backward: BackwardFn) -> Tensor:
    # A NaN/Inf anywhere makes the sum non-finite; cheaper than an elementwise scan.
    if not math.isfinite(value.sum()):
        raise NumericError(f"{op} produced non-finite values (shape {value.shape})")
    tape = None
    for t in operands:
        if t.tape is not None:
            if tape is not None and t.tape is not tape:
                raise ValueError(f"{op}: operands recorded on different tapes")
            tape = t.tape
    if tape is None:
        return Tensor(value)
    inputs = tuple(-1 if t.tape is None else t.node for t in operands)
    tape.nodes.append(Node(op, inputs, value.shape, backward))
    return Tensor(value, tape, len(tape.nodes) - 1)


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if grad.shape == shape:
        return grad
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def backward(tape: Tape, loss: Tensor) -> Gradients:
    """Reverse sweep from a scalar ``loss``; returns the gradient table."""
    if loss.tape is not tape or loss.node is None:
        raise ValueError("loss is not recorded on this tape")
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    table: dict[int, np.ndarray] = {loss.node: np.ones(loss.shape)}
    for idx in range(loss.node, -1, -1):
        grad = table.get(idx)
        node = tape.nodes[idx]
        if grad is None or node.backward is None:
            continue
        parts = node.backward(grad)
        factor = _GRAD_SCALE.get(node.op)
        for src, part in zip(node.inputs, parts):
            if src < 0 or part is None:
                continue
            if factor is not None:
                part = part * factor
            if src in table:
                table[src] = table[src] + part
            else:
                table[src] = part
    return Gradients(tape, table)


# ---------------------------------------------------------------------------
# ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.value.ndim < 2 or b.value.ndim < 2:
        raise ShapeError(f"matmul needs matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    av, bv = a.value, b.value
    out = av @ bv

    def grad(g):
        ga = _unbroadcast(g @ np.swapaxes(bv, -1, -2), av.shape)
        gb = _unbroadcast(np.swapaxes(av, -1, -2) @ g, bv.shape)
        return ga, gb

    return _record("matmul", out, (a, b), grad)


def _broadcast_error(op: str, a: Tensor, b: Tensor) -> ShapeError:
    return ShapeError(f"{op}: shapes {a.shape} and {b.shape} do not broadcast")


def add(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    try:
        out = a.value + b.value
    except ValueError:
        raise _broadcast_error("add", a, b) from None
    sa, sb = a.shape, b.shape
    return _record("add", out, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    av, bv = a.value, b.value
    try:
        out = av * bv
    except ValueError:
        raise _broadcast_error("mul", a, b) from None
    return _record(
        "mul", out, (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
    )


def scale(x: Tensor, c: float) -> Tensor:
    x = _as_tensor(x)
    return _record("scale", x.value * c, (x,), lambda g: (g * c,))


def tanh(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    y = np.tanh(x.value)
    return _record("tanh", y, (x,), lambda g: (g * (1.0 - y * y),))


def sigmoid(x: Tensor) -> Tensor:
    x = _as_tensor(x)
    # tanh form never overflows, unlike 1/(1+exp(-x)).
    y = 0.5 * (1.0 + np.tanh(0.5 * x.value))
    return _record("sigmoid", y, (x,), lambda g: (g * y * (1.0 - y),))


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max-subtraction."""
    x = _as_tensor(x)
    if x.value.ndim == 0 or x.shape[-1] == 0:
        raise ShapeError("softmax of an empty vector")
    z = x.value - x.value.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def grad(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return _record("softmax", y, (x,), grad)


def concat(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate along the last axis."""
    parts = [_as_tensor(p) for p in parts]
    lead = {p.shape[:-1] for p in parts}
    if len(lead) != 1:
        raise ShapeError(f"concat: leading shapes differ: {[p.shape for p in parts]}")
    out = np.concatenate([p.value for p in parts], axis=-1)
    bounds = np.cumsum([0] + [p.shape[-1] for p in parts])

    def grad(g):
        return [g[..., bounds[i]:bounds[i + 1]] for i in range(len(parts))]

    return _record("concat", out, parts, grad)


def slice_last(x: Tensor, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    if not 0 <= start < stop <= x.shape[-1]:
        raise ShapeError(f"slice [{start}:{stop}] out of range for {x.shape}")
    out = x.value[..., start:stop]
    shape = x.shape

    def grad(g):
        full = np.zeros(shape)
        full[..., start:stop] = g
        return (full,)

    return _record("slice", out, (x,), grad)


def row_select(table: Tensor, ids) -> Tensor:
    """Embedding lookup: ``table[ids]`` for an integer index array of any shape."""
    table = _as_tensor(table)
    ids = np.asarray(ids)
    if ids.dtype.kind not in "iu":
        raise ShapeError(f"row_select needs integer ids, got {ids.dtype}")
    n = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= n):
        raise ShapeError(f"row_select id out of range [0, {n})")
    out = table.value[ids]
    shape = table.shape

    def grad(g):
        full = np.zeros(shape)
        np.add.at(full, ids, g)
        return (full,)

    return _record("row_select", out, (table,), grad)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    x = _as_tensor(x)
    old = x.shape
    try:
        out = x.value.reshape(shape)
    except ValueError:
        raise ShapeError(f"cannot reshape {old} to {shape}") from None
    return _record("reshape", out, (x,), lambda g: (g.reshape(old),))


def transpose(x: Tensor) -> Tensor:
    """Swap the last two axes."""
    x = _as_tensor(x)
    out = np.swapaxes(x.value, -1, -2)
    return _record("transpose", out, (x,), lambda g: (np.swapaxes(g, -1, -2),))


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors the op name
    x = _as_tensor(x)
    shape = x.shape
    out = np.asarray(x.value.sum())
    return _record("sum", out, (x,), lambda g: (np.broadcast_to(g, shape).copy(),))


def log(x: Tensor) -> Tensor:
    """Natural log with inputs clamped at ``LOG_FLOOR``."""
    x = _as_tensor(x)
    xv = x.value
    if np.any(xv < 0):
        raise NumericError("log of a negative value")
    clamped = np.maximum(xv, LOG_FLOOR)
    live = xv > LOG_FLOOR
    return _record("log", np.log(clamped), (x,), lambda g: (np.where(live, g / clamped, 0.0),))


def nll_gather(probs: Tensor, targets, weights=None) -> Tensor:
    """``-sum_b w_b * log p[b, targets[b]]`` as a scalar.

    ``probs`` is ``(V,)`` or ``(B, V)``; ``targets`` holds one id per row.
    """
    probs = _as_tensor(probs)
    pv = probs.value
    single = pv.ndim == 1
    p2 = pv[None, :] if single else pv
    tgt = np.atleast_1d(np.asarray(targets))
    if tgt.shape != (p2.shape[0],):
        raise ShapeError(f"nll_gather: {tgt.shape[0]} targets for {p2.shape[0]} rows")
    if tgt.size and (tgt.min() < 0 or tgt.max() >= p2.shape[1]):
        raise ShapeError("nll_gather: target id out of range")
    w = np.ones(p2.shape[0]) if weights is None else np.asarray(weights, dtype=np.float64)
    rows = np.arange(p2.shape[0])
    picked = p2[rows, tgt]
    clamped = np.maximum(picked, LOG_FLOOR)
    out = np.asarray(-(w * np.log(clamped)).sum())

    def grad(g):
        full = np.zeros_like(p2)
        full[rows, tgt] = np.where(picked > LOG_FLOOR, -g * w / clamped, 0.0)
        return (full[0] if single else full,)

    return _record("nll_gather", out, (probs,), grad)


# ---------------------------------------------------------------------------
# verification


def grad_check(
    f: Callable[[dict[str, Tensor]], Tensor],
    params: Mapping[str, np.ndarray],
    eps: float = 1e-5,
) -> float:
    """Max relative error between tape gradients and central differences.

    ``f`` maps a dict of tensors (same keys as ``params``) to a scalar tensor.
    Error per coordinate is ``|a - d| / max(|a|, |d|, 1e-8)``.
    """
    if not 1e-7 <= eps <= 1e-3:
        raise ValueError(f"eps must lie in [1e-7, 1e-3], got {eps}")
    base = {k: np.array(v, dtype=np.float64) for k, v in params.items()}
    tape = Tape()
    bound = tape.parameters(base)
    grads = backward(tape, f(bound))

    def evaluate(name, index, value):
        trial = dict(base)
        arr = base[name].copy()
        arr[index] = value
        trial[name] = arr
        try:
            out = float(f({k: Tensor(v) for k, v in trial.items()}).value)
        except NumericError as exc:
            raise NumericError(f"gradient check at {name}{list(index)}: {exc}") from exc
        if not np.isfinite(out):
            raise NumericError(f"NaN in gradient check at {name}{list(index)}")
        return out

    worst = 0.0
    for name, arr in base.items():
        analytic = grads[bound[name]]
        for index in np.ndindex(arr.shape):
            x0 = arr[index]
            hi = evaluate(name, index, x0 + eps)
            lo = evaluate(name, index, x0 - eps)
            numeric = (hi - lo) / (2.0 * eps)
            a = analytic[index]
            if not (np.isfinite(numeric) and np.isfinite(a)):
                raise NumericError(f"NaN in gradient check at {name}{list(index)}")
            err = abs(a - numeric) / max(abs(a), abs(numeric), 1e-8)
            worst = max(worst, err)
    return worst
