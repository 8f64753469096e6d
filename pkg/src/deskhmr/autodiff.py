"""Dense float64 tensors recorded on a define-by-run reverse-mode tape.

Operations only record while a :class:`Tape` is active (``with Tape() as tape``).
Outside a tape they compute values and nothing else, which is what the
finite-difference checker and inference paths rely on.

Broadcasting is limited to a shorter operand whose shape is a suffix of the
longer one (a bias over leading batch dims) or a Python scalar. Anything else
needs an explicit ``expand``/``reshape``.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor", "Tape", "ShapeError", "ContractError", "NumericError", "GradCheckReport",
    "tensor", "as_tensor", "active_tape", "record",
    "add", "sub", "mul", "div", "neg", "matmul", "exp", "log", "silu", "sigmoid",
    "softplus", "sqrt", "square", "abs", "softmax_lastdim", "conv1d_depthwise",
    "gather_rows", "scatter_rows", "bilinear_sample_2d", "reduce_mean", "reduce_sum",
    "concat", "slice", "reshape", "transpose", "expand", "backward", "grad_check",
]


class ShapeError(ValueError):
    """Operand shapes are incompatible for a primitive."""


class ContractError(RuntimeError):
    """A caller broke an operation's precondition."""


class NumericError(ArithmeticError):
    """A value that must be finite was not."""


_local = threading.local()


def _stack() -> list:
    st = getattr(_local, "stack", None)
    if st is None:
        st = _local.stack = []
    return st


def active_tape() -> "Tape | None":
    st = _stack()
    return st[-1] if st else None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "__weakref__")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.size == 0 or any(d < 1 for d in arr.shape):
            raise ShapeError(f"tensor dims must all be >= 1, got {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _not_scalar(self)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _not_scalar(t: Tensor):
    raise ContractError(f"item() needs a single-element tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False, name: str | None = None) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=requires_grad, name=name)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    op: str
    out: Tensor
    parents: tuple[Tensor, ...]
    vjp: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of primitive applications.

    Nodes are appended in execution order, so walking them backwards is a
    valid reverse topological order. A tape supports one ``backward``; call
    :meth:`reset` to reuse it.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self.grads: dict[Tensor, np.ndarray] = {}
        self._outs: set[int] = set()
        self._consumed = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        st = _stack()
        if st and st[-1] is self:
            st.pop()

    def reset(self) -> None:
        self.nodes.clear()
        self.grads = {}
        self._outs.clear()
        self._consumed = False

    def record(self, op: str, out: Tensor, parents: tuple[Tensor, ...], vjp) -> None:
        if self._consumed:
            raise ContractError("tape already ran backward; reset() before recording again")
        self.nodes.append(_Node(op, out, parents, vjp))
        self._outs.add(id(out))

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self._consumed:
            raise ContractError("backward already ran on this tape; reset() first")
        if loss.data.size != 1:
            raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
        if id(loss) not in self._outs:
            raise ContractError("loss was not produced on this tape")
        self._consumed = True
        acc: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = acc.pop(id(node.out), None)
            if g is None:
                continue
            pgrads = node.vjp(g)
            for p, pg in zip(node.parents, pgrads):
                if not p.requires_grad:
                    continue
                if id(p) not in self._outs:
                    leaves[id(p)] = p
                if pg is None:
                    continue
                if pg.shape != p.data.shape:
                    raise ShapeError(
                        f"{node.op}: gradient shape {pg.shape} != operand shape {p.data.shape}"
                    )
                k = id(p)
                if k in acc:
                    acc[k] = acc[k] + pg
                else:
                    acc[k] = pg
        out: dict[Tensor, np.ndarray] = {}
        for k, leaf in leaves.items():
            g = acc.get(k)
            g = np.zeros_like(leaf.data) if g is None else g
            leaf.grad = g
            out[leaf] = g
        self.grads = out
        return out


def backward(tape: Tape, loss: Tensor) -> dict[Tensor, np.ndarray]:
    return tape.backward(loss)


def record(op: str, data: np.ndarray, parents: Sequence, vjp) -> Tensor:
    """Wrap ``data`` as the output of ``op`` and record it when a tape is active.

    ``vjp`` maps the output cotangent to one cotangent (or None) per parent.
    Custom fused primitives use this directly.
    """
    parents = tuple(parents)
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        tape.record(op, out, parents, vjp)
    return out


# ----------------------------------------------------------------------------
# broadcasting helpers


def _operands(op: str, a, b) -> tuple[Tensor, Tensor]:
    a = as_tensor(a)
    b = as_tensor(b)
    sa, sb = a.shape, b.shape
    if sa == sb or a.data.size == 1 and a.ndim == 0 or b.data.size == 1 and b.ndim == 0:
        return a, b
    short, long_ = (sa, sb) if len(sa) <= len(sb) else (sb, sa)
    if len(short) < len(long_) and long_[len(long_) - len(short):] == short:
        return a, b
    raise ShapeError(f"{op}: incompatible shapes {sa} and {sb} (only leading-batch broadcast)")


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    if len(shape) == 0:
        return np.asarray(g.sum())
    lead = g.ndim - len(shape)
    return g.sum(axis=tuple(range(lead))) if lead > 0 else g


# ----------------------------------------------------------------------------
# elementwise


def add(a, b) -> Tensor:
    a, b = _operands("add", a, b)
    return record("add", a.data + b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _operands("sub", a, b)
    return record("sub", a.data - b.data, (a, b),
                  lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _operands("mul", a, b)
    ad, bd = a.data, b.data
    return record("mul", ad * bd, (a, b),
                  lambda g: (_unbroadcast(g * bd, a.shape), _unbroadcast(g * ad, b.shape)))


def div(a, b) -> Tensor:
    a, b = _operands("div", a, b)
    ad, bd = a.data, b.data
    out = ad / bd
    return record("div", out, (a, b),
                  lambda g: (_unbroadcast(g / bd, a.shape), _unbroadcast(-g * out / bd, b.shape)))


def neg(a) -> Tensor:
    a = as_tensor(a)
    return record("neg", -a.data, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return record("exp", out, (a,), lambda g: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    ad = a.data
    return record("log", np.log(ad), (a,), lambda g: (g / ad,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _sigmoid(a.data)
    return record("sigmoid", s, (a,), lambda g: (g * s * (1.0 - s),))


def silu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    s = _sigmoid(x)
    return record("silu", x * s, (a,), lambda g: (g * (s + x * s * (1.0 - s)),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return record("softplus", out, (a,), lambda g: (g * _sigmoid(x),))


def sqrt(a) -> Tensor:
    """Square root; the cotangent at exactly 0 is taken as 0 (subgradient)."""
    a = as_tensor(a)
    out = np.sqrt(a.data)

    def vjp(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out > 0, g / (2.0 * safe), 0.0),)

    return record("sqrt", out, (a,), vjp)


def square(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return record("square", x * x, (a,), lambda g: (2.0 * g * x,))


def abs(a) -> Tensor:  # noqa: A001 - mirrors numpy naming
    a = as_tensor(a)
    x = a.data
    return record("abs", np.abs(x), (a,), lambda g: (g * np.sign(x),))


def softmax_lastdim(a) -> Tensor:
    a = as_tensor(a)
    z = a.data - a.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=-1, keepdims=True)

    def vjp(g):
        return (y * (g - (g * y).sum(axis=-1, keepdims=True)),)

    return record("softmax_lastdim", y, (a,), vjp)


# ----------------------------------------------------------------------------
# linear algebra and structure


def matmul(a, b) -> Tensor:
    """Batched matmul: ``a`` is (..., n, k); ``b`` is (k, m) or (..., k, m) with equal batch."""
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError(f"matmul: operands need >= 2 dims, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ShapeError(f"matmul: batch dims differ, {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def vjp(g):
        ga = g @ np.swapaxes(bd, -1, -2)
        if bd.ndim == 2:
            gb = ad.reshape(-1, ad.shape[-1]).T @ g.reshape(-1, g.shape[-1])
        else:
            gb = np.swapaxes(ad, -1, -2) @ g
        return ga, gb

    return record("matmul", ad @ bd, (a, b), vjp)


def reshape(a, shape: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(tuple(shape))
    except ValueError as e:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from e
    return record("reshape", out, (a,), lambda g: (g.reshape(old),))


def transpose(a, axes: Sequence[int]) -> Tensor:
    a = as_tensor(a)
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return record("transpose", np.transpose(a.data, axes), (a,),
                  lambda g: (np.transpose(g, inv),))


def expand(a, axis: int, n: int) -> Tensor:
    """Insert a new axis of length ``n`` at ``axis`` by copying."""
    a = as_tensor(a)
    axis = axis if axis >= 0 else a.ndim + 1 + axis
    out = np.repeat(np.expand_dims(a.data, axis), n, axis=axis)
    return record("expand", out, (a,), lambda g: (g.sum(axis=axis),))


def reduce_sum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return record("reduce_sum", np.asarray(out), (a,), vjp)


def reduce_mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    out = a.data.mean(axis=axis, keepdims=keepdims)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([shape[i] for i in axes]))

    def vjp(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / count, shape).copy(),)

    return record("reduce_mean", np.asarray(out), (a,), vjp)


def concat(tensors: Sequence, axis: int = -1) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    if not ts:
        raise ShapeError("concat: no operands")
    nd = ts[0].ndim
    ax = axis if axis >= 0 else nd + axis
    for t in ts:
        if t.ndim != nd or t.shape[:ax] + t.shape[ax + 1:] != ts[0].shape[:ax] + ts[0].shape[ax + 1:]:
            raise ShapeError(f"concat: shapes {[t.shape for t in ts]} disagree off axis {axis}")
    sizes = np.cumsum([t.shape[ax] for t in ts])[:-1]
    out = np.concatenate([t.data for t in ts], axis=ax)
    return record("concat", out, tuple(ts), lambda g: tuple(np.split(g, sizes, axis=ax)))


def slice(a, axis: int, start: int, stop: int) -> Tensor:  # noqa: A001
    a = as_tensor(a)
    ax = axis if axis >= 0 else a.ndim + axis
    n = a.shape[ax]
    if not 0 <= start < stop <= n:
        raise ShapeError(f"slice: [{start}:{stop}] out of range for axis {axis} of size {n}")
    idx = (np.s_[:],) * ax + (np.s_[start:stop],)
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        full[idx] = g
        return (full,)

    return record("slice", a.data[idx].copy(), (a,), vjp)


def gather_rows(a, index, axis: int = 0) -> Tensor:
    """``out = a.take(index, axis)``; repeated indices accumulate on the way back."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    ax = axis if axis >= 0 else a.ndim + axis
    if idx.ndim != 1 or (idx.size and (idx.min() < 0 or idx.max() >= a.shape[ax])):
        raise ShapeError(f"gather_rows: index out of range for axis {axis} of size {a.shape[ax]}")
    shape = a.shape

    def vjp(g):
        full = np.zeros(shape)
        np.add.at(np.moveaxis(full, ax, 0), idx, np.moveaxis(g, ax, 0))
        return (full,)

    return record("gather_rows", np.take(a.data, idx, axis=ax), (a,), vjp)


def scatter_rows(a, index, size: int, axis: int = 0) -> Tensor:
    """Place row ``i`` of ``a`` at ``index[i]`` of a zero tensor with ``size`` rows on ``axis``."""
    a = as_tensor(a)
    idx = np.asarray(index, dtype=np.int64)
    ax = axis if axis >= 0 else a.ndim + axis
    if idx.shape != (a.shape[ax],):
        raise ShapeError(f"scatter_rows: {idx.shape[0]} indices for {a.shape[ax]} rows")
    if idx.size and (idx.min() < 0 or idx.max() >= size):
        raise ShapeError(f"scatter_rows: index out of range for size {size}")
    shape = list(a.shape)
    shape[ax] = size
    out = np.zeros(shape)
    np.add.at(np.moveaxis(out, ax, 0), idx, np.moveaxis(a.data, ax, 0))
    return record("scatter_rows", out, (a,), lambda g: (np.take(g, idx, axis=ax),))


def conv1d_depthwise(x, w, segments=None) -> Tensor:
    """Causal depthwise convolution over axis 1 of ``x`` (B, L, D) with taps ``w`` (K, D).

    ``y[:, t] = sum_k w[k] * x[:, t - k]``. With ``segments`` (length-L ids), taps
    never reach across a segment boundary.
    """
    x, w = as_tensor(x), as_tensor(w)
    if x.ndim != 3 or w.ndim != 2 or w.shape[1] != x.shape[2]:
        raise ShapeError(f"conv1d_depthwise: x {x.shape} and w {w.shape} (need (B,L,D), (K,D))")
    B, L, D = x.shape
    K = w.shape[0]
    seg = None if segments is None else np.asarray(segments)
    if seg is not None and seg.shape != (L,):
        raise ShapeError(f"conv1d_depthwise: segments length {seg.shape} != L={L}")
    xd, wd = x.data, w.data
    masks = []
    for k in range(K):
        m = np.zeros(L, dtype=bool)
        m[k:] = True
        if seg is not None and k:
            m[k:] &= seg[k:] == seg[:-k]
        masks.append(m)
    out = np.zeros_like(xd)
    for k in range(min(K, L)):
        m = masks[k]
        out[:, k:] += np.where(m[k:, None], xd[:, : L - k] * wd[k], 0.0)

    def vjp(g):
        gx = np.zeros_like(xd)
        gw = np.zeros_like(wd)
        for k in range(min(K, L)):
            gm = np.where(masks[k][k:, None], g[:, k:], 0.0)
            gx[:, : L - k] += gm * wd[k]
            gw[k] = (gm * xd[:, : L - k]).sum(axis=(0, 1))
        return gx, gw

    return record("conv1d_depthwise", out, (x, w), vjp)


def bilinear_sample_2d(grid, coords) -> Tensor:
    """Sample ``grid`` (N, H, W, C) at ``coords`` (N, P, 2) holding (x, y) in [-1, 1].

    x indexes columns, y rows; -1 and 1 land on the first and last cell centres.
    Coordinates outside the square are clamped to the border, where the
    coordinate gradient is zero.
    """
    grid, coords = as_tensor(grid), as_tensor(coords)
    if grid.ndim != 4 or coords.ndim != 3 or coords.shape[2] != 2 or coords.shape[0] != grid.shape[0]:
        raise ShapeError(f"bilinear_sample_2d: grid {grid.shape}, coords {coords.shape}")
    N, H, W, C = grid.shape
    if H < 2 or W < 2:
        raise ShapeError(f"bilinear_sample_2d: grid must be at least 2x2, got {H}x{W}")
    gd, cd = grid.data, coords.data
    cx = np.clip(cd[..., 0], -1.0, 1.0)
    cy = np.clip(cd[..., 1], -1.0, 1.0)
    inside_x = (cd[..., 0] > -1.0) & (cd[..., 0] < 1.0)
    inside_y = (cd[..., 1] > -1.0) & (cd[..., 1] < 1.0)
    col = (cx + 1.0) * 0.5 * (W - 1)
    row = (cy + 1.0) * 0.5 * (H - 1)
    # NaN coordinates still yield NaN through the weights; only the cell index needs a finite stand-in
    c0 = np.clip(np.floor(np.nan_to_num(col)).astype(np.int64), 0, W - 2)
    r0 = np.clip(np.floor(np.nan_to_num(row)).astype(np.int64), 0, H - 2)
    fx = (col - c0)[..., None]
    fy = (row - r0)[..., None]
    n = np.arange(N)[:, None]
    v00 = gd[n, r0, c0]
    v01 = gd[n, r0, c0 + 1]
    v10 = gd[n, r0 + 1, c0]
    v11 = gd[n, r0 + 1, c0 + 1]
    out = (1 - fx) * (1 - fy) * v00 + fx * (1 - fy) * v01 + (1 - fx) * fy * v10 + fx * fy * v11

    def vjp(g):
        gg = np.zeros_like(gd)
        nn = np.broadcast_to(n, r0.shape)
        np.add.at(gg, (nn, r0, c0), g * (1 - fx) * (1 - fy))
        np.add.at(gg, (nn, r0, c0 + 1), g * fx * (1 - fy))
        np.add.at(gg, (nn, r0 + 1, c0), g * (1 - fx) * fy)
        np.add.at(gg, (nn, r0 + 1, c0 + 1), g * fx * fy)
        dcol = ((1 - fy) * (v01 - v00) + fy * (v11 - v10)) * g
        drow = ((1 - fx) * (v10 - v00) + fx * (v11 - v01)) * g
        gc = np.zeros_like(cd)
        gc[..., 0] = dcol.sum(-1) * 0.5 * (W - 1) * inside_x
        gc[..., 1] = drow.sum(-1) * 0.5 * (H - 1) * inside_y
        return gg, gc

    return record("bilinear_sample_2d", out, (grid, coords), vjp)


# ----------------------------------------------------------------------------
# finite-difference checking


@dataclass
class GradCheckReport:
    max_rel_err: float
    tol: float
    n_coords: int
    worst: tuple[str, int] | None

    @property
    def passed(self) -> bool:
        return self.max_rel_err <= self.tol


def grad_check(f, x, step: float = 1e-5, tol: float = 1e-4, coords=None,
               rng: np.random.Generator | None = None, max_coords: int | None = None) -> GradCheckReport:
    """Compare tape gradients of scalar ``f`` with central differences.

    ``x`` is an array (``f`` receives one Tensor) or a dict of arrays (``f``
    receives a dict of Tensors). Per coordinate the error is
    ``|g - fd| / max(|g|, |fd|, floor)`` with ``floor = 1e-6 * max(1, |f(x)|)``,
    which keeps roundoff in coordinates with negligible gradient from
    dominating. ``max_coords`` samples that many coordinates per input.
    """
    if step <= 0:
        raise ContractError("grad_check: step must be positive")
    single = not isinstance(x, dict)
    arrays = {"x": np.asarray(x, dtype=np.float64)} if single else {
        k: np.asarray(v, dtype=np.float64) for k, v in x.items()}

    def call(vals: dict[str, np.ndarray], grad: bool):
        ts = {k: Tensor(v.copy(), requires_grad=grad) for k, v in vals.items()}
        out = f(ts["x"] if single else ts)
        return ts, out

    with Tape() as tape:
        ts, out = call(arrays, True)
        if out.data.size != 1:
            raise ContractError(f"grad_check: f must be scalar-valued, got shape {out.shape}")
        f0 = float(out.data.reshape(-1)[0])
        if not np.isfinite(f0):
            raise NumericError("grad_check: f(x) is not finite")
        grads = tape.backward(out)
    analytic = {k: grads.get(t, np.zeros_like(t.data)) for k, t in ts.items()}
    for k, g in analytic.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"grad_check: non-finite tape gradient for {k!r}")

    floor = 1e-6 * max(1.0, float(np.abs(f0)))
    worst, worst_err, count = None, 0.0, 0
    rng = rng or np.random.default_rng(0)
    for k, arr in arrays.items():
        flat_idx = np.arange(arr.size)
        if coords is not None and k in coords:
            flat_idx = np.asarray(coords[k])
        elif max_coords is not None and arr.size > max_coords:
            flat_idx = np.sort(rng.choice(arr.size, size=max_coords, replace=False))
        for i in flat_idx:
            vals = dict(arrays)
            plus = arr.copy().reshape(-1)
            plus[i] += step
            minus = arr.copy().reshape(-1)
            minus[i] -= step
            vals[k] = plus.reshape(arr.shape)
            fp = float(call(vals, False)[1].data.reshape(-1)[0])
            vals[k] = minus.reshape(arr.shape)
            fm = float(call(vals, False)[1].data.reshape(-1)[0])
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise NumericError(f"grad_check: non-finite f at {k}[{i}]")
            fd = (fp - fm) / (2 * step)
            a = float(analytic[k].reshape(-1)[i])
            err = np.abs(a - fd) / max(np.abs(a), np.abs(fd), floor)
            count += 1
            if err > worst_err or worst is None:
                worst_err, worst = float(err), (k, int(i))
    return GradCheckReport(max_rel_err=worst_err, tol=tol, n_coords=count, worst=worst)
