"""Reverse-mode automatic differentiation over dense 2-D float64 arrays.

The surface is deliberately small: just the primitives needed for MLPs,
layer normalization, gather/scatter message passing, and scalar losses.
Computation is define-by-run: every primitive takes an optional ``Tape``
and appends one entry per call, so entries are already in topological
order and a single reverse sweep visits each exactly once.  Passing
``tape=None`` runs the primitive without recording (inference mode).

All arrays are 64-bit floats.  All primitives are deterministic:
identical inputs yield bitwise-identical outputs and gradients.
"""

from __future__ import annotations

import numpy as np

_LN_EPS = 1e-8


class Tensor:
    """A 2-D float64 array participating in autodiff.

    Identity (not value) is what the tape tracks: reusing the same Tensor
    object in several ops accumulates its gradient contributions.
    """

    __slots__ = ("value",)

    def __init__(self, value):
        v = np.asarray(value, dtype=np.float64)
        if v.ndim != 2:
            raise ValueError(f"Tensor must be 2-D, got shape {v.shape}")
        self.value = v

    @property
    def shape(self) -> tuple[int, int]:
        return self.value.shape

    @property
    def rows(self) -> int:
        return self.value.shape[0]

    @property
    def cols(self) -> int:
        return self.value.shape[1]

    def __repr__(self):
        return f"Tensor(shape={self.value.shape})"


class Tape:
    """Ordered record of primitive ops for one forward computation.

    Invariant: every operand of entry k was produced by an earlier entry
    or is a leaf, so the reversed entry list is a valid backward order.
    A tape is confined to a single worker; build a fresh one per step.
    """

    def __init__(self):
        self._entries: list[tuple[Tensor, object]] = []
        self._produced: set[int] = set()

    def record(self, out: Tensor, backward_fn) -> None:
        self._entries.append((out, backward_fn))
        self._produced.add(id(out))

    def __len__(self) -> int:
        return len(self._entries)


def _accumulate(grads: dict, t: Tensor, g: np.ndarray) -> None:
    held = grads.get(t)
    grads[t] = g if held is None else held + g


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Reverse sweep from a scalar loss; returns gradients for all leaves.

    The result maps each leaf Tensor (one not produced by an op on this
    tape) that the loss depends on to its gradient array.  Leaves the
    loss does not reach are absent; treat missing entries as zero.
    """
    if loss.shape != (1, 1):
        raise ValueError(f"loss must be a 1x1 scalar, got shape {loss.shape}")
    grads: dict[Tensor, np.ndarray] = {loss: np.ones((1, 1))}
    for out, backward_fn in reversed(tape._entries):
        g = grads.get(out)
        if g is None:
            continue
        backward_fn(g, grads)
    return {t: g for t, g in grads.items() if id(t) not in tape._produced}


def matmul(a: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    if a.cols != b.rows:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    out = Tensor(a.value @ b.value)
    if tape is not None:
        av, bv = a.value, b.value

        def back(g, grads):
            _accumulate(grads, a, g @ bv.T)
            _accumulate(grads, b, av.T @ g)

        tape.record(out, back)
    return out


def _check_addable(a: Tensor, b: Tensor, opname: str) -> bool:
    """Same shape, or b is a single row broadcast over a's rows."""
    if a.shape == b.shape:
        return False
    if b.rows == 1 and b.cols == a.cols:
        return True
    raise ValueError(f"{opname} shape mismatch: {a.shape} vs {b.shape}")


def add(a: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    broadcast = _check_addable(a, b, "add")
    out = Tensor(a.value + b.value)
    if tape is not None:

        def back(g, grads):
            _accumulate(grads, a, g)
            _accumulate(grads, b, g.sum(axis=0, keepdims=True) if broadcast else g)

        tape.record(out, back)
    return out


def sub(a: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    broadcast = _check_addable(a, b, "sub")
    out = Tensor(a.value - b.value)
    if tape is not None:

        def back(g, grads):
            _accumulate(grads, a, g)
            _accumulate(grads, b, -(g.sum(axis=0, keepdims=True) if broadcast else g))

        tape.record(out, back)
    return out


def mul(a: Tensor, b: Tensor, tape: Tape | None) -> Tensor:
    """Elementwise product; shapes must match exactly."""
    if a.shape != b.shape:
        raise ValueError(f"mul shape mismatch: {a.shape} vs {b.shape}")
    out = Tensor(a.value * b.value)
    if tape is not None:
        av, bv = a.value, b.value

        def back(g, grads):
            _accumulate(grads, a, g * bv)
            _accumulate(grads, b, g * av)

        tape.record(out, back)
    return out


def scale(a: Tensor, c: float, tape: Tape | None) -> Tensor:
    """Multiply by a non-differentiated constant."""
    out = Tensor(a.value * c)
    if tape is not None:

        def back(g, grads):
            _accumulate(grads, a, g * c)

        tape.record(out, back)
    return out


def relu(a: Tensor, tape: Tape | None) -> Tensor:
    out = Tensor(np.maximum(a.value, 0.0))
    if tape is not None:
        mask = a.value > 0.0

        def back(g, grads):
            _accumulate(grads, a, g * mask)

        tape.record(out, back)
    return out


def tanh(a: Tensor, tape: Tape | None) -> Tensor:
    out = Tensor(np.tanh(a.value))
    if tape is not None:
        ov = out.value

        def back(g, grads):
            _accumulate(grads, a, g * (1.0 - ov * ov))

        tape.record(out, back)
    return out


def layer_norm(a: Tensor, tape: Tape | None, eps: float = _LN_EPS) -> Tensor:
    """Normalize each row to zero mean and unit variance over the feature axis.

    No learned gain/shift; purely a normalization.  ``eps`` guards the
    variance, so constant rows map to zero rather than dividing by zero.
    """
    d = a.cols
    mu = a.value.mean(axis=1, keepdims=True)
    centered = a.value - mu
    var = (centered * centered).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    out = Tensor(centered * inv)
    if tape is not None:
        y = out.value

        def back(g, grads):
            # d/dx of (x - mu)/sqrt(var + eps), row-wise
            g_mean = g.mean(axis=1, keepdims=True)
            gy_mean = (g * y).mean(axis=1, keepdims=True)
            _accumulate(grads, a, inv * (g - g_mean - y * gy_mean))

        tape.record(out, back)
    return out


def concat_cols(parts: list[Tensor], tape: Tape | None) -> Tensor:
    """Concatenate along the feature axis; all parts share the row count."""
    if not parts:
        raise ValueError("concat_cols needs at least one input")
    n = parts[0].rows
    for p in parts:
        if p.rows != n:
            raise ValueError(
                f"concat_cols row mismatch: {[p.shape for p in parts]}"
            )
    out = Tensor(np.concatenate([p.value for p in parts], axis=1))
    if tape is not None:
        widths = [p.cols for p in parts]

        def back(g, grads):
            col = 0
            for p, w in zip(parts, widths):
                _accumulate(grads, p, g[:, col:col + w])
                col += w

        tape.record(out, back)
    return out


def _check_indices(indices: np.ndarray, bound: int, opname: str) -> np.ndarray:
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise IndexError(f"{opname} indices must be 1-D, got shape {idx.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= bound):
        raise IndexError(f"{opname} index out of range [0, {bound})")
    return idx


def gather_rows(values: Tensor, indices, tape: Tape | None) -> Tensor:
    """Row k of the output is row indices[k] of the input; adjoint scatters."""
    idx = _check_indices(indices, values.rows, "gather_rows")
    out = Tensor(values.value[idx])
    if tape is not None:
        n = values.rows
        d = values.cols

        def back(g, grads):
            acc = np.zeros((n, d))
            np.add.at(acc, idx, g)
            _accumulate(grads, values, acc)

        tape.record(out, back)
    return out


def scatter_sum(values: Tensor, receivers, n_out: int, tape: Tape | None) -> Tensor:
    """Sum value rows into output rows by receiver index.

    Row i of the output is the sum of value rows k with receivers[k] == i,
    accumulated in ascending k for bitwise reproducibility; rows with no
    contributions stay zero.  The adjoint is a gather.
    """
    idx = _check_indices(receivers, n_out, "scatter_sum")
    if idx.size != values.rows:
        raise IndexError(
            f"scatter_sum got {values.rows} rows but {idx.size} receiver indices"
        )
    acc = np.zeros((n_out, values.cols))
    np.add.at(acc, idx, values.value)
    out = Tensor(acc)
    if tape is not None:

        def back(g, grads):
            _accumulate(grads, values, g[idx])

        tape.record(out, back)
    return out


def broadcast_rows(row: Tensor, n: int, tape: Tape | None) -> Tensor:
    """Repeat a 1xd row n times; adjoint sums the rows back."""
    if row.rows != 1:
        raise ValueError(f"broadcast_rows expects a 1xd input, got {row.shape}")
    out = Tensor(np.repeat(row.value, n, axis=0))
    if tape is not None:

        def back(g, grads):
            _accumulate(grads, row, g.sum(axis=0, keepdims=True))

        tape.record(out, back)
    return out


def sum_all(a: Tensor, tape: Tape | None) -> Tensor:
    out = Tensor(np.array([[a.value.sum()]]))
    if tape is not None:
        shape = a.shape

        def back(g, grads):
            _accumulate(grads, a, np.full(shape, g[0, 0]))

        tape.record(out, back)
    return out


def mean_all(a: Tensor, tape: Tape | None) -> Tensor:
    if a.value.size == 0:
        raise ValueError("mean_all of an empty tensor")
    out = Tensor(np.array([[a.value.mean()]]))
    if tape is not None:
        shape = a.shape
        inv_n = 1.0 / a.value.size

        def back(g, grads):
            _accumulate(grads, a, np.full(shape, g[0, 0] * inv_n))

        tape.record(out, back)
    return out
