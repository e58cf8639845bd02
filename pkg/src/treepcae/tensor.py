"""Dense float64 tensors with reverse-mode differentiation on an explicit tape.

The operation set is deliberately small: exactly what the tree autoencoder's
forward pass and the Chamfer loss need. Every operation records a backward
rule on a Tape; `Tape.backward` replays the records in reverse order, so
gradient accumulation order is fixed and training runs are bit-reproducible.

There is no broadcasting beyond row-wise bias addition, no views into live
buffers, and no global state: a Tape and the tensors it produced belong to one
thread, and independent tapes may run concurrently.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .errors import ContractError, NumericError, ShapeError


class Tensor:
    """Immutable row-major float64 array plus an optional gradient buffer.

    `data` is frozen at construction; only `Tape.backward` writes `grad`.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NumericError("tensor data must be finite")
        arr.setflags(write=False)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a one-element tensor, got shape {self.data.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(arr: np.ndarray, *inputs: Tensor) -> Tensor:
    # Internal results skip the copy + finiteness check of Tensor.__init__.
    out = Tensor.__new__(Tensor)
    arr.setflags(write=False)
    out.data = arr
    out.requires_grad = any(t.requires_grad for t in inputs)
    out.grad = None
    return out


def pairwise_sqdist_array(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Squared Euclidean distances between rows of `a` (N,F) and `b` (M,F).

    Computed with explicit differences (not the norm-expansion identity) so
    the result is bit-identical to a per-pair `sum((a_i - b_j)**2)` loop.
    """
    diff = a[:, None, :] - b[None, :, :]
    return (diff * diff).sum(axis=2)


class Tape:
    """Ordered record of one forward pass; replays backward exactly once."""

    def __init__(self):
        self._entries: list[tuple[Tensor, Callable[[np.ndarray], list]]] = []
        self._produced: set[int] = set()
        self._used = False

    def _emit(self, arr, inputs, backward) -> Tensor:
        out = _wrap(np.asarray(arr), *inputs)
        self._entries.append((out, backward))
        self._produced.add(id(out))
        return out

    # ------------------------------------------------------------------ ops

    def matmul(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[0]:
            raise ShapeError(f"matmul: shapes {a.data.shape} and {b.data.shape} do not agree")

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g @ b.data.T))
            if b.requires_grad:
                pairs.append((b, a.data.T @ g))
            return pairs

        return self._emit(a.data @ b.data, (a, b), backward)

    def add(self, a: Tensor, b: Tensor) -> Tensor:
        if a.data.shape != b.data.shape:
            raise ShapeError(f"add: shapes {a.data.shape} and {b.data.shape} differ")

        def backward(g):
            pairs = []
            if a.requires_grad:
                pairs.append((a, g))
            if b.requires_grad:
                pairs.append((b, g))
            return pairs

        return self._emit(a.data + b.data, (a, b), backward)

    def add_bias(self, x: Tensor, bias: Tensor) -> Tensor:
        """Row-wise bias addition: (N,F) + (F,). The one permitted broadcast."""
        if x.data.ndim != 2 or bias.data.shape != (x.data.shape[1],):
            raise ShapeError(f"add_bias: shapes {x.data.shape} and {bias.data.shape} do not agree")

        def backward(g):
            pairs = []
            if x.requires_grad:
                pairs.append((x, g))
            if bias.requires_grad:
                pairs.append((bias, g.sum(axis=0)))
            return pairs

        return self._emit(x.data + bias.data[None, :], (x, bias), backward)

    def scale(self, x: Tensor, factor: float) -> Tensor:
        factor = float(factor)
        if not np.isfinite(factor):
            raise NumericError("scale factor must be finite")

        def backward(g):
            return [(x, g * factor)] if x.requires_grad else []

        return self._emit(x.data * factor, (x,), backward)

    def leaky_relu(self, x: Tensor, slope: float) -> Tensor:
        slope = float(slope)
        if not 0.0 < slope < 1.0:
            raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")

        def backward(g):
            if not x.requires_grad:
                return []
            return [(x, g * np.where(x.data > 0.0, 1.0, slope))]

        return self._emit(np.maximum(x.data, slope * x.data), (x,), backward)

    def group_max(self, x: Tensor, group: int) -> Tensor:
        """Elementwise max over each block of `group` consecutive rows.

        Gradient goes to the first (lowest-index) maximal row per block and
        column, which makes the subgradient deterministic.
        """
        if x.data.ndim != 2:
            raise ShapeError(f"group_max: expected a 2-d tensor, got shape {x.data.shape}")
        group = int(group)
        if group < 1:
            raise ContractError(f"group_max: group must be >= 1, got {group}")
        n, f = x.data.shape
        if n % group != 0:
            raise ShapeError(f"group_max: {n} rows not divisible by group {group}")
        blocks = n // group
        cube = x.data.reshape(blocks, group, f)
        argmax = cube.argmax(axis=1)  # first max on ties

        def backward(g):
            if not x.requires_grad:
                return []
            gx = np.zeros((blocks, group, f))
            np.put_along_axis(gx, argmax[:, None, :], g.reshape(blocks, 1, f), axis=1)
            return [(x, gx.reshape(n, f))]

        return self._emit(cube.max(axis=1), (x,), backward)

    def concat_rows(self, parts: Sequence[Tensor]) -> Tensor:
        parts = list(parts)
        if not parts:
            raise ContractError("concat_rows: need at least one tensor")
        cols = parts[0].data.shape[1:] if parts[0].data.ndim == 2 else None
        if any(p.data.ndim != 2 or p.data.shape[1:] != cols for p in parts):
            raise ShapeError("concat_rows: all tensors must be 2-d with equal column count")
        sizes = [p.data.shape[0] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return [(p, piece) for p, piece in zip(parts, np.split(g, splits, axis=0))
                    if p.requires_grad]

        return self._emit(np.concatenate([p.data for p in parts], axis=0), tuple(parts), backward)

    def concat_cols(self, parts: Sequence[Tensor]) -> Tensor:
        parts = list(parts)
        if not parts:
            raise ContractError("concat_cols: need at least one tensor")
        rows = parts[0].data.shape[0] if parts[0].data.ndim == 2 else None
        if any(p.data.ndim != 2 or p.data.shape[0] != rows for p in parts):
            raise ShapeError("concat_cols: all tensors must be 2-d with equal row count")
        sizes = [p.data.shape[1] for p in parts]
        splits = np.cumsum(sizes)[:-1]

        def backward(g):
            return [(p, piece) for p, piece in zip(parts, np.split(g, splits, axis=1))
                    if p.requires_grad]

        return self._emit(np.concatenate([p.data for p in parts], axis=1), tuple(parts), backward)

    def reshape(self, x: Tensor, shape: Sequence[int]) -> Tensor:
        shape = tuple(int(s) for s in shape)
        try:
            arr = x.data.reshape(shape)
        except ValueError as exc:
            raise ShapeError(f"reshape: cannot view shape {x.data.shape} as {shape}") from exc

        def backward(g):
            return [(x, g.reshape(x.data.shape))] if x.requires_grad else []

        return self._emit(arr, (x,), backward)

    def repeat_rows(self, x: Tensor, times: int) -> Tensor:
        """Repeat each row `times` times consecutively; gradients sum back."""
        if x.data.ndim != 2:
            raise ShapeError(f"repeat_rows: expected a 2-d tensor, got shape {x.data.shape}")
        times = int(times)
        if times < 1:
            raise ContractError(f"repeat_rows: times must be >= 1, got {times}")
        n, f = x.data.shape

        def backward(g):
            if not x.requires_grad:
                return []
            return [(x, g.reshape(n, times, f).sum(axis=1))]

        return self._emit(np.repeat(x.data, times, axis=0), (x,), backward)

    def reduce_sum(self, x: Tensor) -> Tensor:
        def backward(g):
            if not x.requires_grad:
                return []
            return [(x, np.full(x.data.shape, float(g)))]

        return self._emit(np.asarray(np.sum(x.data)), (x,), backward)

    def row_min(self, x: Tensor) -> Tensor:
        """Per-row minimum of an (N,M) tensor; ties route grad to lowest column."""
        if x.data.ndim != 2:
            raise ShapeError(f"row_min: expected a 2-d tensor, got shape {x.data.shape}")
        n = x.data.shape[0]
        argmin = x.data.argmin(axis=1)

        def backward(g):
            if not x.requires_grad:
                return []
            gx = np.zeros_like(x.data)
            gx[np.arange(n), argmin] = g
            return [(x, gx)]

        return self._emit(x.data[np.arange(n), argmin], (x,), backward)

    def col_min(self, x: Tensor) -> Tensor:
        """Per-column minimum of an (N,M) tensor; ties route grad to lowest row."""
        if x.data.ndim != 2:
            raise ShapeError(f"col_min: expected a 2-d tensor, got shape {x.data.shape}")
        m = x.data.shape[1]
        argmin = x.data.argmin(axis=0)

        def backward(g):
            if not x.requires_grad:
                return []
            gx = np.zeros_like(x.data)
            gx[argmin, np.arange(m)] = g
            return [(x, gx)]

        return self._emit(x.data[argmin, np.arange(m)], (x,), backward)

    def pairwise_sqdist(self, a: Tensor, b: Tensor) -> Tensor:
        """All-pairs squared distances between rows of (N,F) and (M,F)."""
        if a.data.ndim != 2 or b.data.ndim != 2 or a.data.shape[1] != b.data.shape[1]:
            raise ShapeError(
                f"pairwise_sqdist: shapes {a.data.shape} and {b.data.shape} do not agree")

        def backward(g):
            pairs = []
            if a.requires_grad or b.requires_grad:
                diff = a.data[:, None, :] - b.data[None, :, :]
                if a.requires_grad:
                    pairs.append((a, 2.0 * np.einsum("nm,nmf->nf", g, diff)))
                if b.requires_grad:
                    pairs.append((b, -2.0 * np.einsum("nm,nmf->mf", g, diff)))
            return pairs

        return self._emit(pairwise_sqdist_array(a.data, b.data), (a, b), backward)

    # ------------------------------------------------------------- backward

    def backward(self, loss: Tensor) -> None:
        """Accumulate gradients of `loss` into every reachable requires_grad tensor.

        May be called once per tape; a second call is a contract error.
        """
        if self._used:
            raise ContractError("backward already ran on this tape")
        if id(loss) not in self._produced:
            raise ContractError("loss was not recorded on this tape")
        if loss.data.shape != ():
            raise ContractError(f"loss must be a scalar, got shape {loss.data.shape}")
        self._used = True

        pending: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=np.float64)}
        holders: dict[int, Tensor] = {id(loss): loss}
        for out, backward in reversed(self._entries):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            if out.requires_grad:
                out.grad = g if out.grad is None else out.grad + g
            for tensor, piece in backward(g):
                key = id(tensor)
                if key in pending:
                    pending[key] = pending[key] + piece
                else:
                    pending[key] = piece
                    holders[key] = tensor
        for key, g in pending.items():
            tensor = holders[key]
            if tensor.requires_grad:
                tensor.grad = g if tensor.grad is None else tensor.grad + g


def finite_diff_check(f, x, step: float) -> float:
    """Max relative error between the tape gradient of `f` at `x` and central
    finite differences with the given step.

    `f` is a pure callable `(tape, tensor) -> scalar Tensor`. The relative
    error denominator is max(|analytic|, |numeric|, 1e-8) per element.
    """
    step = float(step)
    if not step > 0.0:
        raise ContractError(f"finite-difference step must be positive, got {step}")
    base = np.array(x.data if isinstance(x, Tensor) else x, dtype=np.float64)

    tape = Tape()
    probe = Tensor(base, requires_grad=True)
    out = f(tape, probe)
    if out.data.shape != ():
        raise ContractError("f must return a scalar tensor")
    if not np.isfinite(out.data):
        raise NumericError("f evaluated to a non-finite value")
    tape.backward(out)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    def evaluate(values: np.ndarray) -> float:
        result = f(Tape(), Tensor(values)).data
        if not np.isfinite(result):
            raise NumericError("f evaluated to a non-finite value")
        return float(result)

    numeric = np.zeros_like(base)
    flat_base = base.reshape(-1)
    flat_numeric = numeric.reshape(-1)
    for i in range(flat_base.size):
        plus = base.copy()
        plus.reshape(-1)[i] = flat_base[i] + step
        minus = base.copy()
        minus.reshape(-1)[i] = flat_base[i] - step
        flat_numeric[i] = (evaluate(plus) - evaluate(minus)) / (2.0 * step)

    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-8)
    return float(np.max(np.abs(analytic - numeric) / denom)) if base.size else 0.0
