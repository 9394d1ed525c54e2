"""Reverse-mode automatic differentiation over dense numpy arrays.

Ops execute eagerly and, when a gradient tape is active, record a backward
closure on it. ``backward(loss)`` replays the recorded closures in reverse
execution order (a valid topological order by construction), accumulating
gradients with ``+=`` so several losses compose; the tape is cleared
afterwards. Running ops with no active tape gives a cheap inference mode.

Custom ops can be added from outside by constructing a ``Tensor`` and
calling ``active_tape().record(out, backward_fn)`` with a closure that
feeds ``accumulate_grad`` on the inputs.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError, ValidationError

# Clamp applied to probabilities inside log losses; prevents -inf on
# confident mistakes.
PROB_EPS = 1e-12

_LOCAL = threading.local()


def _tape_stack() -> list["Tape"]:
    stack = getattr(_LOCAL, "stack", None)
    if stack is None:
        stack = []
        _LOCAL.stack = stack
    return stack


def active_tape() -> "Tape | None":
    """The innermost tape on this thread, or None outside any tape."""
    stack = _tape_stack()
    return stack[-1] if stack else None


class Tensor:
    """Dense numeric array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_tape")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = np.asarray(data, dtype=dtype)
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
        return float(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def accumulate_grad(t: Tensor, g: np.ndarray) -> None:
    """Add ``g`` into ``t.grad``, allocating the slot on first use."""
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


class Tape:
    """Ordered record of executed ops for one forward/backward pass.

    Ops are appended in execution order, which is a topological order of
    the dataflow graph; ``backward`` visits each node exactly once in
    reverse and then clears the record.
    """

    def __init__(self):
        self._nodes: list[tuple[Tensor, Callable[[np.ndarray], None]]] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        stack = _tape_stack()
        if not stack or stack[-1] is not self:
            raise ContractError("tape stack corrupted: exiting a non-innermost tape")
        stack.pop()

    def __len__(self) -> int:
        return len(self._nodes)

    def record(self, out: Tensor, backward_fn: Callable[[np.ndarray], None]) -> None:
        out._tape = self
        self._nodes.append((out, backward_fn))

    def backward(self, loss: Tensor) -> None:
        if loss.data.ndim != 0:
            raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
        loss.grad = np.ones_like(loss.data)
        for out, backward_fn in reversed(self._nodes):
            if out.grad is None:
                continue
            backward_fn(out.grad)
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on every tensor the loss depends on."""
    if loss.data.ndim != 0:
        raise ContractError(f"backward requires a scalar loss, got shape {loss.shape}")
    if loss._tape is None:
        raise ContractError("loss was not recorded on a tape; run the forward pass inside `with Tape():`")
    loss._tape.backward(loss)


def _record(out: Tensor, inputs: Sequence[Tensor], backward_fn) -> Tensor:
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        tape.record(out, backward_fn)
    return out


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def constant(data, dtype=None) -> Tensor:
    """A tensor that never receives gradients."""
    return Tensor(np.asarray(data, dtype=dtype))


# ---------------------------------------------------------------------------
# core ops
# ---------------------------------------------------------------------------


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    out = Tensor(a.data @ b.data)

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(a, g @ b.data.T)
        accumulate_grad(b, a.data.T @ g)

    return _record(out, (a, b), bwd)


def _check_elementwise(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise DimensionError(f"{op}: shapes {a.shape} and {b.shape} must match (or one side scalar)")


def add(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_elementwise(a, b, "add")
    out = Tensor(a.data + b.data)

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(a, g if a.ndim else g.sum())
        accumulate_grad(b, g if b.ndim else g.sum())

    return _record(out, (a, b), bwd)


def mul(a: Tensor, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b, like=a)
    _check_elementwise(a, b, "mul")
    out = Tensor(a.data * b.data)

    def bwd(g: np.ndarray) -> None:
        ga = g * b.data
        gb = g * a.data
        accumulate_grad(a, ga if a.ndim else ga.sum())
        accumulate_grad(b, gb if b.ndim else gb.sum())

    return _record(out, (a, b), bwd)


def scale(a: Tensor, c: float) -> Tensor:
    return mul(a, float(c))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """Add a [1 x d] bias row to every row of a [m x d] matrix."""
    if x.ndim != 2 or bias.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: got {x.shape} and {bias.shape}")
    out = Tensor(x.data + bias.data)

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g)
        accumulate_grad(bias, g.sum(axis=0, keepdims=True))

    return _record(out, (x, bias), bwd)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat: need at least one input")
    ndim = parts[0].ndim
    if any(p.ndim != ndim for p in parts) or axis not in range(ndim):
        raise DimensionError(
            f"concat: inputs must share rank and axis must be valid, got shapes "
            f"{[p.shape for p in parts]} axis {axis}"
        )
    off_axis = [tuple(s for i, s in enumerate(p.shape) if i != axis) for p in parts]
    if any(o != off_axis[0] for o in off_axis):
        raise DimensionError(f"concat: off-axis shapes differ: {[p.shape for p in parts]}")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bwd(g: np.ndarray) -> None:
        offset = 0
        for p, s in zip(parts, sizes):
            sl = [slice(None)] * ndim
            sl[axis] = slice(offset, offset + s)
            accumulate_grad(p, g[tuple(sl)])
            offset += s

    return _record(out, parts, bwd)


def relu(x: Tensor) -> Tensor:
    out = Tensor(np.maximum(x.data, 0))
    mask = x.data > 0  # subgradient at 0 is 0

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g * mask)

    return _record(out, (x,), bwd)


def sigmoid(x: Tensor) -> Tensor:
    d = x.data
    y = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))), np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))
    out = Tensor(y.astype(d.dtype, copy=False))

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g * out.data * (1.0 - out.data))

    return _record(out, (x,), bwd)


def softmax(x: Tensor, axis: int) -> Tensor:
    if x.ndim != 2 or axis not in (0, 1):
        raise DimensionError(f"softmax: expected a 2-D input with axis 0 or 1, got {x.shape}, axis {axis}")
    if x.size == 0:
        return _record(Tensor(x.data.copy()), (x,), lambda g: accumulate_grad(x, g))
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=axis, keepdims=True)
    out = Tensor(y)

    def bwd(g: np.ndarray) -> None:
        dot = (g * y).sum(axis=axis, keepdims=True)
        accumulate_grad(x, y * (g - dot))

    return _record(out, (x,), bwd)


def transpose(x: Tensor) -> Tensor:
    if x.ndim != 2:
        raise DimensionError(f"transpose: expected 2-D, got {x.shape}")
    out = Tensor(x.data.T.copy())

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g.T)

    return _record(out, (x,), bwd)


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    out = Tensor(x.data.reshape(shape))

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g.reshape(x.shape))

    return _record(out, (x,), bwd)


def gather_rows(x: Tensor, indices: Sequence[int]) -> Tensor:
    """Select rows of a [m x d] matrix; duplicate indices are allowed."""
    if x.ndim != 2:
        raise DimensionError(f"gather_rows: expected 2-D, got {x.shape}")
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size and (idx.min() < 0 or idx.max() >= x.shape[0]):
        raise IndexError(f"gather_rows: index out of range for {x.shape[0]} rows")
    out = Tensor(x.data[idx])

    def bwd(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        np.add.at(buf, idx, g)
        accumulate_grad(x, buf)

    return _record(out, (x,), bwd)


def scatter_rows(x: Tensor, indices: Sequence[int], n_rows: int) -> Tensor:
    """Place rows of x at the given positions of an otherwise-zero [n_rows x d] matrix."""
    if x.ndim != 2:
        raise DimensionError(f"scatter_rows: expected 2-D, got {x.shape}")
    idx = np.asarray(list(indices), dtype=np.intp)
    if idx.size != x.shape[0]:
        raise DimensionError(f"scatter_rows: {x.shape[0]} rows but {idx.size} indices")
    if len(set(idx.tolist())) != idx.size:
        raise ContractError("scatter_rows: duplicate target indices")
    if idx.size and (idx.min() < 0 or idx.max() >= n_rows):
        raise IndexError(f"scatter_rows: index out of range for {n_rows} rows")
    buf = np.zeros((n_rows, x.shape[1]), dtype=x.dtype)
    buf[idx] = x.data
    out = Tensor(buf)

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, g[idx])

    return _record(out, (x,), bwd)


def slice_cols(x: Tensor, start: int, stop: int) -> Tensor:
    if x.ndim != 2 or not (0 <= start <= stop <= x.shape[1]):
        raise DimensionError(f"slice_cols: invalid range [{start}, {stop}) for shape {x.shape}")
    out = Tensor(x.data[:, start:stop].copy())

    def bwd(g: np.ndarray) -> None:
        buf = np.zeros_like(x.data)
        buf[:, start:stop] = g
        accumulate_grad(x, buf)

    return _record(out, (x,), bwd)


def sum_all(x: Tensor) -> Tensor:
    out = Tensor(x.data.sum())

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, np.full_like(x.data, g))

    return _record(out, (x,), bwd)


def mean_all(x: Tensor) -> Tensor:
    if x.size == 0:
        raise DimensionError("mean_all: empty tensor")
    out = Tensor(x.data.mean())

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, np.full_like(x.data, g / x.size))

    return _record(out, (x,), bwd)


def mean_rows(x: Tensor) -> Tensor:
    """Column-wise mean of a [m x d] matrix, as a [1 x d] row."""
    if x.ndim != 2 or x.shape[0] == 0:
        raise DimensionError(f"mean_rows: expected a non-empty 2-D input, got {x.shape}")
    m = x.shape[0]
    out = Tensor(x.data.mean(axis=0, keepdims=True))

    def bwd(g: np.ndarray) -> None:
        accumulate_grad(x, np.repeat(g / m, m, axis=0))

    return _record(out, (x,), bwd)


def detach(x: Tensor) -> Tensor:
    """Same values, no gradient path."""
    return Tensor(x.data)


def cross_entropy(probs: Tensor, targets) -> Tensor:
    """Mean negative log-likelihood of target classes under probability rows.

    ``probs`` is [m x n] (a single [n] vector is treated as one row) and each
    row must already be a distribution; probabilities are clamped to
    [PROB_EPS, 1] inside the log.
    """
    if probs.ndim == 1:
        probs = reshape(probs, (1, probs.shape[0]))
    if np.isscalar(targets) or isinstance(targets, (int, np.integer)):
        targets = [int(targets)]
    t = np.asarray(list(targets), dtype=np.intp)
    m, n = probs.shape
    if t.size != m:
        raise DimensionError(f"cross_entropy: {m} rows but {t.size} targets")
    if t.size and (t.min() < 0 or t.max() >= n):
        raise IndexError(f"cross_entropy: target out of range [0, {n})")
    row_sums = probs.data.sum(axis=1)
    # tolerance is looser than the softmax guarantee to absorb float32 noise
    if m and np.abs(row_sums - 1.0).max() > 1e-4:
        raise ValidationError("cross_entropy: rows are not probability distributions")
    rows = np.arange(m)
    p = probs.data[rows, t]
    p_clamped = np.clip(p, PROB_EPS, 1.0)
    out = Tensor(np.asarray(-np.log(p_clamped).mean() if m else 0.0, dtype=probs.dtype))
    if m == 0:
        return out

    def bwd(g: np.ndarray) -> None:
        buf = np.zeros_like(probs.data)
        live = p >= PROB_EPS  # clamped-off probabilities get zero gradient
        buf[rows, t] = np.where(live, -1.0 / p_clamped, 0.0) * (g / m)
        accumulate_grad(probs, buf)

    return _record(out, (probs,), bwd)


def binary_cross_entropy(pred: Tensor, target: Tensor) -> Tensor:
    """Mean Bernoulli log loss of predictions in [0, 1] against 0/1 targets."""
    target = _as_tensor(target, like=pred)
    if pred.shape != target.shape:
        raise DimensionError(f"binary_cross_entropy: shapes {pred.shape} and {target.shape} differ")
    t = target.data
    if not np.all((t == 0) | (t == 1)):
        raise ValidationError("binary_cross_entropy: targets must be 0 or 1")
    if pred.size == 0:
        raise DimensionError("binary_cross_entropy: empty input")
    p = np.clip(pred.data, PROB_EPS, 1.0 - PROB_EPS)
    losses = -(t * np.log(p) + (1.0 - t) * np.log(1.0 - p))
    out = Tensor(np.asarray(losses.mean(), dtype=pred.dtype))
    n = pred.size
    live = (pred.data >= PROB_EPS) & (pred.data <= 1.0 - PROB_EPS)

    def bwd(g: np.ndarray) -> None:
        grad = np.where(live, (-t / p + (1.0 - t) / (1.0 - p)), 0.0) * (g / n)
        accumulate_grad(pred, grad.astype(pred.dtype, copy=False))

    return _record(out, (pred,), bwd)


def linear(x: Tensor, w: Tensor, b: Tensor | None = None) -> Tensor:
    """x @ w (+ bias row). Weights are stored [in x out]."""
    out = matmul(x, w)
    if b is not None:
        out = add_bias(out, b)
    return out


# ---------------------------------------------------------------------------
# parameters
# ---------------------------------------------------------------------------


class ParameterStore:
    """Named trainable tensors with deterministic (sorted) iteration order."""

    def __init__(self, dtype=np.float32):
        self.dtype = np.dtype(dtype)
        self._params: dict[str, Tensor] = {}

    def add(self, name: str, values: np.ndarray) -> Tensor:
        if name in self._params:
            raise ContractError(f"parameter {name!r} already exists")
        t = Tensor(np.asarray(values, dtype=self.dtype), requires_grad=True)
        self._params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return sorted(self._params)

    def items(self) -> list[tuple[str, Tensor]]:
        return [(n, self._params[n]) for n in self.names()]

    def zero_grads(self) -> None:
        for _, t in self.items():
            t.grad = None

    def n_scalars(self) -> int:
        return sum(t.size for t in self._params.values())

    def snapshot(self) -> dict[str, np.ndarray]:
        return {n: t.data.copy() for n, t in self.items()}

    def load_values(self, values: dict[str, np.ndarray]) -> None:
        if set(values) != set(self._params):
            missing = set(self._params) - set(values)
            extra = set(values) - set(self._params)
            raise ValidationError(f"parameter name mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for name, arr in values.items():
            t = self._params[name]
            if arr.shape != t.shape:
                raise ValidationError(f"parameter {name!r}: shape {arr.shape} != {t.shape}")
            t.data = np.asarray(arr, dtype=self.dtype).copy()


# ---------------------------------------------------------------------------
# gradient checking
# ---------------------------------------------------------------------------


@dataclass
class GradCheckResult:
    max_rel_error: float
    worst_param: str
    n_checked: int

    def __str__(self) -> str:
        return f"max_rel_error={self.max_rel_error:.3e} param={self.worst_param} checked={self.n_checked}"


def finite_difference_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    eps: float = 1e-5,
) -> GradCheckResult:
    """Compare analytic gradients of a deterministic scalar loss against
    central finite differences, parameter scalar by parameter scalar.

    The relative error divides by max(|fd|, 1e-6) so a doubled gradient
    reads as ~1.0 and near-zero gradients do not blow up the ratio.
    """
    if eps <= 0:
        raise ContractError("finite_difference_check: eps must be positive")
    store.zero_grads()
    with Tape():
        loss = loss_fn()
        backward(loss)
    analytic = {name: (t.grad.copy() if t.grad is not None else np.zeros_like(t.data)) for name, t in store.items()}

    worst = 0.0
    worst_name = ""
    checked = 0
    for name, t in store.items():
        flat = t.data.reshape(-1)
        grad_flat = analytic[name].reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            fd = (f_plus - f_minus) / (2.0 * eps)
            rel = abs(grad_flat[i] - fd) / max(abs(fd), 1e-6)
            checked += 1
            if rel > worst:
                worst = rel
                worst_name = f"{name}[{i}]"
    store.zero_grads()
    return GradCheckResult(max_rel_error=worst, worst_param=worst_name, n_checked=checked)
