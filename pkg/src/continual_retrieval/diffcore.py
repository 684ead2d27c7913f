"""Dense float64 tensors with a recording tape for exact reverse-mode gradients.

Forward ops work with or without a tape: untaped tensors are plain values,
taped tensors get a backward closure recorded so that `backward` can replay
the tape in reverse and accumulate per-parameter gradients. The op set is
deliberately small; only row-wise bias addition is broadcast.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, DimensionError

NORM_EPS = 1e-12


class Tensor:
    """A float64 array plus the tape (if any) it was computed on."""

    __slots__ = ("data", "tape")

    def __init__(self, data, tape: "GradTape | None" = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.tape = tape

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() requires a scalar, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, taped={self.tape is not None})"


class _TapeEntry:
    __slots__ = ("out", "inputs")

    def __init__(self, out: Tensor, inputs: list[tuple[Tensor, Callable[[np.ndarray], np.ndarray]]]):
        self.out = out
        self.inputs = inputs  # (input tensor, vjp: grad_out -> grad_input)


class GradTape:
    """Ordered record of primitive ops; replayed strictly in reverse by `backward`."""

    def __init__(self):
        self._entries: list[_TapeEntry] = []
        self._params: dict[int, Tensor] = {}  # keyed by id(array) to dedupe watch calls

    def watch(self, array: np.ndarray) -> Tensor:
        """Register a parameter array; repeated calls return the same tensor."""
        key = id(array)
        existing = self._params.get(key)
        if existing is not None:
            return existing
        if array.dtype != np.float64:
            raise ContractError("parameters must be float64 arrays")
        t = Tensor.__new__(Tensor)
        t.data = array
        t.tape = self
        self._params[key] = t
        return t

    @property
    def parameters(self) -> list[Tensor]:
        return list(self._params.values())

    def _record(self, out: Tensor, inputs) -> None:
        self._entries.append(_TapeEntry(out, inputs))

    def __len__(self) -> int:
        return len(self._entries)


def as_tensor(x, tape: GradTape | None = None) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x, tape)


def _tape_of(*tensors: Tensor) -> GradTape | None:
    tape = None
    for t in tensors:
        if t.tape is not None:
            if tape is not None and tape is not t.tape:
                raise ContractError("operands belong to different tapes")
            tape = t.tape
    return tape


def _unary(a: Tensor, out_data: np.ndarray, vjp) -> Tensor:
    tape = _tape_of(a)
    out = Tensor(out_data, tape)
    if tape is not None:
        tape._record(out, [(a, vjp)])
    return out


def _binary(a: Tensor, b: Tensor, out_data: np.ndarray, vjp_a, vjp_b) -> Tensor:
    tape = _tape_of(a, b)
    out = Tensor(out_data, tape)
    if tape is not None:
        tape._record(out, [(a, vjp_a), (b, vjp_b)])
    return out


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product of a (m, k) and b (k, n)."""
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise DimensionError(f"matmul needs 2-D operands, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dims disagree: {a.shape} x {b.shape}")
    out = a.data @ b.data
    return _binary(a, b, out,
                   lambda g: g @ b.data.T,
                   lambda g: a.data.T @ g)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes, got {a.shape} and {b.shape}")
    return _binary(a, b, a.data + b.data, lambda g: g, lambda g: g)


def sub(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"sub needs equal shapes, got {a.shape} and {b.shape}")
    return _binary(a, b, a.data - b.data, lambda g: g, lambda g: -g)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes, got {a.shape} and {b.shape}")
    return _binary(a, b, a.data * b.data,
                   lambda g: g * b.data,
                   lambda g: g * a.data)


def add_row(m: Tensor, v: Tensor) -> Tensor:
    """Add a row vector v (d,) to every row of m (n, d) — the only broadcast allowed."""
    if m.data.ndim != 2 or v.data.ndim != 1 or m.shape[1] != v.shape[0]:
        raise DimensionError(f"add_row needs (n, d) + (d,), got {m.shape} and {v.shape}")
    return _binary(m, v, m.data + v.data,
                   lambda g: g,
                   lambda g: g.sum(axis=0))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _unary(a, a.data * c, lambda g: g * c)


def square(a: Tensor) -> Tensor:
    return _unary(a, a.data * a.data, lambda g: 2.0 * a.data * g)


def relu(a: Tensor) -> Tensor:
    """Elementwise max(0, x); subgradient at 0 is 0."""
    mask = a.data > 0.0
    return _unary(a, np.where(mask, a.data, 0.0), lambda g: g * mask)


def sum_all(a: Tensor) -> Tensor:
    shape = a.shape
    return _unary(a, np.asarray(a.data.sum()),
                  lambda g: np.full(shape, float(g)))


def sum_rows(m: Tensor) -> Tensor:
    """Row sums of m (n, d) -> (n,)."""
    if m.data.ndim != 2:
        raise DimensionError(f"sum_rows needs a matrix, got {m.shape}")
    return _unary(m, m.data.sum(axis=1), lambda g: np.repeat(g[:, None], m.shape[1], axis=1))


def take_row(m: Tensor, i: int) -> Tensor:
    """Row i of m (n, d) -> (d,); gradient scatters back into row i."""
    if m.data.ndim != 2:
        raise DimensionError(f"take_row needs a matrix, got {m.shape}")
    n, d = m.shape

    def vjp(g):
        full = np.zeros((n, d))
        full[i] = g
        return full

    return _unary(m, m.data[i].copy(), vjp)


def take_entries(m: Tensor, cols: Sequence[int]) -> Tensor:
    """Per-row picks m[i, cols[i]] -> (n,)."""
    if m.data.ndim != 2:
        raise DimensionError(f"take_entries needs a matrix, got {m.shape}")
    idx = np.asarray(cols, dtype=np.intp)
    if idx.shape != (m.shape[0],):
        raise DimensionError(f"take_entries needs one column per row, got {idx.shape} for {m.shape}")
    rows = np.arange(m.shape[0])
    n, d = m.shape

    def vjp(g):
        full = np.zeros((n, d))
        full[rows, idx] = g
        return full

    return _unary(m, m.data[rows, idx], vjp)


def _normalized(arr: np.ndarray, axis: int, eps: float):
    norms = np.sqrt((arr * arr).sum(axis=axis, keepdims=True))
    denom = np.maximum(norms, eps)
    return arr / denom, denom, norms


def _normalize_vjp(out_data, denom, norms, eps, axis):
    # Where the norm clears eps the Jacobian is the projection (I - uu^T)/||v||;
    # in the clamped branch it is I/eps.
    def vjp(g):
        inner = (g * out_data).sum(axis=axis, keepdims=True)
        proj = (g - inner * out_data) / denom
        clamped = g / eps
        return np.where(norms >= eps, proj, clamped)

    return vjp


def l2_normalize(v: Tensor, eps: float = NORM_EPS) -> Tensor:
    """v / max(||v||, eps) for a 1-D vector."""
    if v.data.ndim != 1:
        raise DimensionError(f"l2_normalize needs a vector, got {v.shape}")
    out, denom, norms = _normalized(v.data, 0, eps)
    return _unary(v, out, _normalize_vjp(out, denom, norms, eps, 0))


def normalize_rows(m: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Each row of m scaled to unit length (eps-guarded)."""
    if m.data.ndim != 2:
        raise DimensionError(f"normalize_rows needs a matrix, got {m.shape}")
    out, denom, norms = _normalized(m.data, 1, eps)
    return _unary(m, out, _normalize_vjp(out, denom, norms, eps, 1))


def normalize_columns(m: Tensor, eps: float = NORM_EPS) -> Tensor:
    """Each column of m scaled to unit length (eps-guarded)."""
    if m.data.ndim != 2:
        raise DimensionError(f"normalize_columns needs a matrix, got {m.shape}")
    out, denom, norms = _normalized(m.data, 0, eps)
    return _unary(m, out, _normalize_vjp(out, denom, norms, eps, 0))


def log_softmax_rows(m: Tensor) -> Tensor:
    """Row-wise log-softmax, stabilized by max subtraction."""
    if m.data.ndim != 2:
        raise DimensionError(f"log_softmax_rows needs a matrix, got {m.shape}")
    shifted = m.data - m.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    out = shifted - lse
    soft = np.exp(out)
    return _unary(m, out, lambda g: g - soft * g.sum(axis=1, keepdims=True))


def backward(tape: GradTape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Gradients of a scalar loss w.r.t. every watched parameter on the tape.

    Replays recorded ops in exact reverse order; tensors that never influence
    the loss keep a zero gradient.
    """
    if loss.tape is not tape:
        raise ContractError("loss was not computed on this tape")
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for entry in reversed(tape._entries):
        g_out = grads.get(id(entry.out))
        if g_out is None:
            continue
        for tensor, vjp in entry.inputs:
            contribution = vjp(g_out)
            key = id(tensor)
            if key in grads:
                grads[key] = grads[key] + contribution
            else:
                grads[key] = np.asarray(contribution, dtype=np.float64)

    result: dict[Tensor, np.ndarray] = {}
    for param in tape.parameters:
        g = grads.get(id(param))
        result[param] = np.zeros_like(param.data) if g is None else g.reshape(param.data.shape)
    return result
