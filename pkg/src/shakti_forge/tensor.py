"""Dense tensors with tape-based reverse-mode differentiation.

Every differentiable operation records one node on the active :class:`Tape`.
Nodes are appended in execution order, so the tape is topologically sorted by
construction and :func:`backward` simply walks it in reverse.
"""

from __future__ import annotations

import contextlib
import itertools
import math
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "TapeError",
    "DimensionError",
    "DegenerateBatchError",
    "tensor",
    "zeros",
    "ones",
    "precision",
    "get_dtype",
    "no_grad",
    "grad_enabled",
    "backward",
    "gradcheck",
    "matmul",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "scale",
    "exp",
    "log",
    "sqrt",
    "sigmoid",
    "log_sigmoid",
    "tanh",
    "sum",
    "mean",
    "variance",
    "reshape",
    "transpose",
    "concat",
    "getitem",
    "embedding",
    "softmax",
    "log_softmax",
    "cross_entropy",
    "where_const",
]


class TapeError(RuntimeError):
    """Raised on misuse of the autodiff tape (e.g. backward twice)."""


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


class DegenerateBatchError(ValueError):
    """Raised when a loss has no contributing positions."""


_state = {"dtype": np.float32, "grad": True}


def get_dtype():
    return _state["dtype"]


@contextlib.contextmanager
def precision(dtype):
    """Temporarily switch the default floating dtype (``np.float64`` for gradcheck)."""
    prev = _state["dtype"]
    _state["dtype"] = np.dtype(dtype).type
    try:
        yield
    finally:
        _state["dtype"] = prev


@contextlib.contextmanager
def no_grad():
    prev = _state["grad"]
    _state["grad"] = False
    try:
        yield
    finally:
        _state["grad"] = prev


def grad_enabled() -> bool:
    return _state["grad"]


class Tape:
    """Ordered record of differentiable operations.

    A tape supports exactly one backward pass. Once consumed, new operations
    are recorded on a fresh tape.
    """

    _ids = itertools.count()

    def __init__(self):
        self.id = next(Tape._ids)
        self.nodes: list[tuple[Tensor, tuple[Tensor, ...], Callable]] = []
        self.consumed = False

    def record(self, out: "Tensor", parents: tuple["Tensor", ...], rule: Callable) -> None:
        self.nodes.append((out, parents, rule))
        out.tape_id = (self.id, len(self.nodes) - 1)
        out._tape = self

    def __len__(self):
        return len(self.nodes)


_active = {"tape": None}


def _current_tape() -> Tape:
    tape = _active["tape"]
    if tape is None or tape.consumed:
        tape = Tape()
        _active["tape"] = tape
    return tape


class Tensor:
    """An n-dimensional array with an optional gradient buffer.

    ``data`` is always a contiguous numpy array in the current default dtype
    (float32 unless inside ``precision(np.float64)``).
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_id", "_tape", "name", "__weakref__")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, dtype=None, name: str | None = None):
        dtype = dtype or _state["dtype"]
        self.data = np.ascontiguousarray(data, dtype=dtype)
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self.tape_id = None
        self._tape: Tape | None = None
        self.name = name

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

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(()))

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def __repr__(self):
        rg = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{rg})"

    # operator sugar
    def __add__(self, o):
        return add(self, o)

    def __radd__(self, o):
        return add(o, self)

    def __sub__(self, o):
        return sub(self, o)

    def __rsub__(self, o):
        return sub(o, self)

    def __mul__(self, o):
        return mul(self, o)

    def __rmul__(self, o):
        return mul(o, self)

    def __truediv__(self, o):
        return div(self, o)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, o)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    @property
    def T(self):
        return transpose(self, None)


def tensor(data, requires_grad=False, name=None) -> Tensor:
    return Tensor(data, requires_grad=requires_grad, name=name)


def zeros(shape, requires_grad=False) -> Tensor:
    return Tensor(np.zeros(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def ones(shape, requires_grad=False) -> Tensor:
    return Tensor(np.ones(shape, dtype=_state["dtype"]), requires_grad=requires_grad)


def _as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if like is not None else None
    return Tensor(x, dtype=dtype)


def _result(data: np.ndarray, parents: Sequence[Tensor], rule: Callable) -> Tensor:
    """Wrap an op result, recording ``rule`` if any parent needs a gradient.

    ``rule(g)`` returns one gradient (or None) per parent.
    """
    needs = _state["grad"] and any(p.requires_grad for p in parents)
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    out.grad = None
    out.requires_grad = needs
    out.tape_id = None
    out._tape = None
    out.name = None
    if needs:
        _current_tape().record(out, tuple(parents), rule)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _norm_axis(axis: int, ndim: int) -> int:
    if not -ndim <= axis < ndim:
        raise DimensionError(f"axis {axis} out of range for {ndim}-d tensor")
    return axis % ndim


# ---------------------------------------------------------------- backward


def backward(loss: Tensor, grad_scale: float = 1.0) -> None:
    """Populate ``.grad`` of every reachable tensor with ``requires_grad``.

    Gradients accumulate into existing buffers, which is what gradient
    accumulation across micro-batches relies on.
    """
    if loss.size != 1 or loss.ndim > 1 and any(s != 1 for s in loss.shape):
        raise TapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    tape = loss._tape
    if tape is None or tape.consumed:
        raise TapeError("tape already consumed; re-run the forward pass before calling backward again")
    tape.consumed = True
    _, idx = loss.tape_id
    grads: dict[int, np.ndarray] = {id(loss): np.full(loss.shape, grad_scale, dtype=loss.data.dtype)}
    nodes = tape.nodes
    for i in range(idx, -1, -1):
        out, parents, rule = nodes[i]
        g = grads.pop(id(out), None)
        if g is None:
            continue
        pgrads = rule(g)
        for p, pg in zip(parents, pgrads):
            if pg is None or not p.requires_grad:
                continue
            if p._tape is tape:
                prev = grads.get(id(p))
                grads[id(p)] = pg if prev is None else prev + pg
            else:
                p.accumulate_grad(pg)
    tape.nodes = []


# ---------------------------------------------------------------- binary ops


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def rule(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), rule)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def rule(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), rule)


def neg(a: Tensor) -> Tensor:
    return _result(-a.data, (a,), lambda g: (-g,))


def scale(a: Tensor, c: float) -> Tensor:
    """Multiply by a Python constant."""
    c = a.data.dtype.type(c)
    return _result(a.data * c, (a,), lambda g: (g * c,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix product with numpy batching semantics over leading axes."""
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    if bd.ndim == 2 and ad.ndim > 2:
        # shared weight: one flat GEMM each way
        k = ad.shape[-1]
        out = (ad.reshape(-1, k) @ bd).reshape(ad.shape[:-1] + (bd.shape[1],))

        def flat_rule(g):
            g2 = g.reshape(-1, g.shape[-1])
            ga = (g2 @ bd.T).reshape(ad.shape) if a.requires_grad else None
            gb = ad.reshape(-1, k).T @ g2 if b.requires_grad else None
            return ga, gb

        return _result(out, (a, b), flat_rule)
    try:
        out = np.matmul(ad, bd)
    except ValueError as exc:
        raise DimensionError(f"matmul shape mismatch: {a.shape} @ {b.shape}") from exc

    def rule(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, (a, b), rule)


def where_const(cond: np.ndarray, a: Tensor, fill: float) -> Tensor:
    """``a`` where ``cond`` is true, else the constant ``fill`` (no gradient there)."""
    out = np.where(cond, a.data, a.data.dtype.type(fill))
    return _result(out, (a,), lambda g: (_unbroadcast(np.where(cond, g, 0), a.shape),))


# ---------------------------------------------------------------- unary ops


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.log(ad), (a,), lambda g: (g / ad,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return _result(out, (a,), lambda g: (g * 0.5 / out,))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # tanh form: one transcendental, no overflow for either sign
    h = x.dtype.type(0.5)
    return h + h * np.tanh(h * x)


def sigmoid(a: Tensor) -> Tensor:
    s = _sigmoid(a.data)
    return _result(s, (a,), lambda g: (g * s * (1 - s),))


def log_sigmoid(a: Tensor) -> Tensor:
    x = a.data
    out = np.minimum(x, 0) - np.log1p(np.exp(-np.abs(x)))
    return _result(out, (a,), lambda g: (g * _sigmoid(-x),))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1 - out * out),))


# ---------------------------------------------------------------- reductions


def sum(a: Tensor, axis=None, keepdims=False) -> Tensor:  # noqa: A001
    shape = a.shape
    out = np.sum(a.data, axis=axis, keepdims=keepdims)

    def rule(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(out), (a,), rule)


def mean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return scale(sum(a, axis, keepdims), 1.0 / n)


def variance(a: Tensor, axis=-1, keepdims=False) -> Tensor:
    """Population variance (divides by n)."""
    mu = mean(a, axis, keepdims=True)
    d = sub(a, mu)
    return mean(mul(d, d), axis, keepdims)


# ---------------------------------------------------------------- shape ops


def reshape(a: Tensor, shape) -> Tensor:
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError as exc:
        raise DimensionError(f"cannot reshape {old} to {tuple(shape)}") from exc
    return _result(out, (a,), lambda g: (g.reshape(old),))


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(range(a.ndim))[::-1]
    inv = tuple(np.argsort(axes))
    return _result(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),))


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise DimensionError("concat of zero tensors")
    axis = _norm_axis(axis, parts[0].ndim)
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise DimensionError(f"concat shape mismatch: {[p.shape for p in parts]}") from exc
    bounds = np.cumsum([0] + sizes)

    def rule(g):
        sl = [slice(None)] * g.ndim
        res = []
        for i in range(len(parts)):
            sl[axis] = slice(bounds[i], bounds[i + 1])
            res.append(g[tuple(sl)])
        return res

    return _result(out, parts, rule)


def getitem(a: Tensor, idx) -> Tensor:
    """Basic or advanced indexing; the backward scatter-adds into a zero buffer."""
    shape, dtype = a.shape, a.data.dtype
    out = np.array(a.data[idx], copy=True)

    def rule(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, idx, g)
        return (full,)

    return _result(out, (a,), rule)


def embedding(table: Tensor, ids) -> Tensor:
    """Row lookup ``table[ids]`` for an integer array of any shape."""
    ids = np.asarray(ids, dtype=np.int64)
    V = table.shape[0]
    if ids.size and (ids.min() < 0 or ids.max() >= V):
        raise IndexError(f"token id out of range [0, {V})")
    td = table.data

    def rule(g):
        full = np.zeros_like(td)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, td.shape[1]))
        return (full,)

    return _result(td[ids], (table,), rule)


# ---------------------------------------------------------------- softmax & losses


def softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def rule(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _result(s, (x,), rule)


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    axis = _norm_axis(axis, x.ndim)
    z = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def rule(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), rule)


def cross_entropy(logits: Tensor, targets, ignore_mask=None) -> Tensor:
    """Mean negative log-likelihood over positions where ``ignore_mask`` is false.

    ``logits`` has shape ``[..., V]`` and ``targets`` the leading shape.
    """
    V = logits.shape[-1]
    x = logits.data.reshape(-1, V)
    t = np.asarray(targets, dtype=np.int64).reshape(-1)
    if t.shape[0] != x.shape[0]:
        raise DimensionError(f"targets shape {np.shape(targets)} does not match logits {logits.shape}")
    keep = np.ones(t.shape, dtype=bool) if ignore_mask is None else ~np.asarray(ignore_mask, dtype=bool).reshape(-1)
    if keep.shape != t.shape:
        raise DimensionError("ignore_mask length differs from targets")
    n = int(keep.sum())
    if n == 0:
        raise DegenerateBatchError("every position is masked; loss undefined")
    tk = t[keep]
    if tk.min() < 0 or tk.max() >= V:
        raise IndexError(f"target id out of range [0, {V})")
    rows = np.nonzero(keep)[0]
    z = x - x.max(axis=1, keepdims=True)
    e = np.exp(z)
    se = e.sum(axis=1, keepdims=True)
    logp = z[rows, tk] - np.log(se[rows, 0])
    loss = -logp.sum() / n

    def rule(g):
        p = e / se
        gx = np.zeros_like(x)
        gx[rows] = p[rows]
        gx[rows, tk] -= 1.0
        gx *= g / n
        return (gx.reshape(logits.shape),)

    return _result(np.asarray(loss, dtype=x.dtype), (logits,), rule)


# ---------------------------------------------------------------- gradcheck


def gradcheck(
    op: Callable[..., Tensor],
    inputs: Sequence,
    eps: float = 1e-3,
    seed: int = 0,
    max_elements: int | None = None,
    wrt: Iterable[int] | None = None,
    order: int = 4,
) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``op`` maps the input tensors to a tensor; non-scalar outputs are reduced
    with a fixed random projection. Runs in float64. ``max_elements`` limits
    the number of probed entries per input (sampled without replacement).

    ``order`` selects the central stencil with step ``eps``: 2 is the classic
    ``(f(x+h) - f(x-h)) / 2h``; 4 (default) is the five-point formula, whose
    O(h^4) truncation keeps curved composites from tripping the relative bound
    at entries where the true gradient is near zero.
    """
    if order not in (2, 4):
        raise ValueError(f"order must be 2 or 4, got {order}")
    rng = np.random.default_rng(seed)
    with precision(np.float64):
        xs = [Tensor(np.asarray(x.data if isinstance(x, Tensor) else x, dtype=np.float64), requires_grad=True)
              for x in inputs]
        probe = None

        def f() -> Tensor:
            nonlocal probe
            out = op(*xs)
            if out.size == 1:
                return reshape(out, ())
            if probe is None:
                probe = rng.standard_normal(out.shape)
            return sum(mul(out, Tensor(probe)))

        loss = f()
        if not loss.requires_grad:
            return 0.0
        backward(loss)
        worst = 0.0
        targets = range(len(xs)) if wrt is None else wrt
        with no_grad():
            for i in targets:
                x = xs[i]
                analytic = np.zeros(x.shape) if x.grad is None else x.grad.copy()
                flat = x.data.reshape(-1)
                idxs = np.arange(flat.size)
                if max_elements is not None and flat.size > max_elements:
                    idxs = np.sort(rng.choice(flat.size, max_elements, replace=False))
                for j in idxs:
                    orig = flat[j]

                    def at(delta):
                        flat[j] = orig + delta
                        return f().item()

                    if order == 2:
                        cd = (at(eps) - at(-eps)) / (2 * eps)
                    else:
                        cd = (8 * (at(eps) - at(-eps)) - (at(2 * eps) - at(-2 * eps))) / (12 * eps)
                    flat[j] = orig
                    a = analytic.reshape(-1)[j]
                    err = abs(a - cd) / max(abs(a), abs(cd), 1e-8)
                    if err > worst:
                        worst = err
    return float(worst)


def is_finite(x: Tensor) -> bool:
    return bool(np.all(np.isfinite(x.data)))


def global_grad_norm(params: Iterable[Tensor]) -> float:
    tot = 0.0
    for p in params:
        if p.grad is not None:
            tot += float(np.sum(p.grad.astype(np.float64) ** 2))
    return math.sqrt(tot)
