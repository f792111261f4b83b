"""Reverse-mode automatic differentiation on float64 numpy buffers.

The engine is deliberately small. A :class:`Tensor` wraps a contiguous
float64 array and an optional accumulated gradient. A :class:`Tape`
records every operation executed while it is active (entered with
``with``), and ``backward`` replays the records in reverse order to
accumulate adjoints. One tape per training step; with no active tape
every op is a plain forward computation, which is what inference uses.

Conventions:

* float64 everywhere, row-major (C-order) storage;
* a "scalar" is a tensor with exactly one element (usually shape ());
* binary elementwise ops broadcast only scalar-vs-tensor; any other
  shape mismatch raises DimensionError. Fused ops (layer_norm,
  add_bias, scale_rows, ...) own their internal broadcasting;
* every op output is checked for NaN/Inf and rejected with
  NumericalError;
* gradients accumulate: running backward twice (on two tapes) adds
  into ``.grad``; callers zero grads between optimizer steps.

A tape and the tensors recorded on it are confined to one thread;
the active-tape slot is thread-local so parallel evaluation workers
can each run their own tape.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Sequence

import numpy as np
from scipy.special import erf

from .errors import ContractError, DimensionError, NumericalError, StateError

Array = np.ndarray

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """A contiguous float64 array plus an optional accumulated gradient."""

    __slots__ = ("data", "requires_grad", "grad", "_retain")

    def __init__(self, data, requires_grad: bool = False):
        # note: order="C" (not ascontiguousarray) so 0-d scalars stay 0-d
        arr = np.asarray(data, dtype=np.float64, order="C")
        if not np.all(np.isfinite(arr)):
            raise NumericalError("tensor data contains NaN or Inf")
        self.data: Array = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Array | None = None
        self._retain = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def retain_grad(self) -> "Tensor":
        """Ask backward() to populate .grad even though this is an intermediate."""
        self._retain = True
        return self

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        if self.size != 1:
            raise ContractError(f"item() needs a one-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self) -> str:  # pragma: no cover - debugging aid
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # A little operator sugar; the named functions below are the real API.
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op: str, inputs: tuple[Tensor, ...], output: Tensor,
                 backward: Callable[[Array], tuple[Array | None, ...]]):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


_tls = threading.local()


def _active_tape() -> "Tape | None":
    return getattr(_tls, "tape", None)


class Tape:
    """Ordered record of operations for one reverse-mode pass.

    Usage::

        with Tape() as tape:
            loss = ...            # ops executed here are recorded
        tape.backward(loss)       # adjoints land in .grad buffers

    A tape is single-use: after backward() it refuses further work
    until reset(). Nodes are stored in execution order, which is a
    topological order of the graph, so the reverse sweep sees every
    consumer before its producer and visits each node exactly once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False
        self._entered = False

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise StateError("another tape is already active on this thread; tapes do not nest")
        if self._spent:
            raise StateError("tape already consumed by backward(); call reset() first")
        _tls.tape = self
        self._entered = True
        return self

    def __exit__(self, exc_type, exc, tb) -> None:
        _tls.tape = None
        self._entered = False

    def _record(self, node: _Node) -> None:
        if self._spent:
            raise StateError("tape already consumed by backward(); call reset() first")
        self.nodes.append(node)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(x) into x.grad for every recorded tensor x
        that requires grad or was marked retain_grad()."""
        if self._spent:
            raise StateError("tape already consumed by backward(); call reset() first")
        if loss.size != 1:
            raise ContractError(f"backward() needs a scalar loss, got shape {loss.shape}")
        if self.nodes and loss is not self.nodes[-1].output:
            produced = any(loss is n.output for n in self.nodes)
            if not produced:
                raise ContractError("loss tensor was not produced on this tape")
        if not self.nodes:
            raise ContractError("tape is empty; nothing was recorded")
        self._spent = True

        acc: dict[int, Array] = {id(loss): np.ones_like(loss.data)}
        holders: dict[int, Tensor] = {id(loss): loss}

        def flush(t: Tensor, g: Array) -> None:
            if t.requires_grad or t._retain:
                t.grad = g.copy() if t.grad is None else t.grad + g

        for node in reversed(self.nodes):
            g = acc.pop(id(node.output), None)
            if g is None:
                continue
            flush(node.output, g)
            grads = node.backward(g)
            if len(grads) != len(node.inputs):
                raise ContractError(f"{node.op}: backward returned {len(grads)} grads "
                                    f"for {len(node.inputs)} inputs")
            for inp, gi in zip(node.inputs, grads):
                if gi is None:
                    continue
                if gi.shape != inp.data.shape:
                    raise DimensionError(f"{node.op}: gradient shape {gi.shape} does not "
                                         f"match input shape {inp.data.shape}")
                key = id(inp)
                if key in acc:
                    acc[key] = acc[key] + gi
                else:
                    acc[key] = gi
                    holders[key] = inp

        # whatever is left never appears as a node output: these are the leaves
        for key, g in acc.items():
            flush(holders[key], g)

    def reset(self) -> None:
        if self._entered:
            raise StateError("cannot reset a tape that is still active")
        self.nodes.clear()
        self._spent = False


def backward(tape: Tape, loss: Tensor) -> None:
    """Free-function spelling of tape.backward(loss)."""
    tape.backward(loss)


# ---------------------------------------------------------------------------
# op plumbing


def _as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    if isinstance(x, (int, float, np.floating, np.integer)):
        return Tensor(np.float64(x))
    if isinstance(x, np.ndarray):
        return Tensor(x)
    raise ContractError(f"expected Tensor or number, got {type(x).__name__}")


def _apply(op: str, inputs: tuple[Tensor, ...], out_data: Array,
           backward_fn: Callable[[Array], tuple[Array | None, ...]]) -> Tensor:
    try:
        out = Tensor(out_data)
    except NumericalError:
        raise NumericalError(f"{op}: result contains NaN or Inf") from None
    out.requires_grad = any(t.requires_grad for t in inputs)
    tape = _active_tape()
    if tape is not None:
        tape._record(_Node(op, inputs, out, backward_fn))
    return out


def _check_pair(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise DimensionError(f"{op}: incompatible shapes {a.shape} and {b.shape}; only "
                         "identical shapes or scalar-vs-tensor broadcast are supported")


def _reduce_to(g: Array, shape: tuple[int, ...]) -> Array:
    """Undo scalar broadcasting: collapse g onto a size-1 target shape."""
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape)


# ---------------------------------------------------------------------------
# binary elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("add", a, b)

    def bw(g: Array):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return _apply("add", (a, b), a.data + b.data, bw)


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("sub", a, b)

    def bw(g: Array):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return _apply("sub", (a, b), a.data - b.data, bw)


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("mul", a, b)
    ad, bd = a.data, b.data

    def bw(g: Array):
        return _reduce_to(g * bd, a.shape), _reduce_to(g * ad, b.shape)

    return _apply("mul", (a, b), ad * bd, bw)


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("div", a, b)
    ad, bd = a.data, b.data
    with np.errstate(divide="ignore", invalid="ignore"):
        out = ad / bd  # zeros in b surface as NumericalError via the output check

    def bw(g: Array):
        return _reduce_to(g / bd, a.shape), _reduce_to(-g * ad / (bd * bd), b.shape)

    return _apply("div", (a, b), out, bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)

    def bw(g: Array):
        return (-g,)

    return _apply("neg", (a,), -a.data, bw)


# ---------------------------------------------------------------------------
# linear algebra


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul: needs 2-d operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: inner dimensions disagree: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def bw(g: Array):
        return g @ bd.T, ad.T @ g

    return _apply("matmul", (a, b), ad @ bd, bw)


def transpose(a) -> Tensor:
    a = _as_tensor(a)
    if a.ndim != 2:
        raise DimensionError(f"transpose: needs a 2-d tensor, got shape {a.shape}")

    def bw(g: Array):
        return (np.ascontiguousarray(g.T),)

    return _apply("transpose", (a,), a.data.T, bw)


def add_bias(x, b) -> Tensor:
    """x: (m, d), b: (1, d). Adds b to every row of x."""
    x, b = _as_tensor(x), _as_tensor(b)
    if x.ndim != 2 or b.shape != (1, x.shape[1]):
        raise DimensionError(f"add_bias: expected x (m,d) and b (1,d), got {x.shape} and {b.shape}")

    def bw(g: Array):
        return g, g.sum(axis=0, keepdims=True)

    return _apply("add_bias", (x, b), x.data + b.data, bw)


def scale_rows(x, s) -> Tensor:
    """x: (m, k), s: (m, 1). Multiplies row i of x by s[i]."""
    x, s = _as_tensor(x), _as_tensor(s)
    if x.ndim != 2 or s.shape != (x.shape[0], 1):
        raise DimensionError(f"scale_rows: expected x (m,k) and s (m,1), got {x.shape} and {s.shape}")
    xd, sd = x.data, s.data

    def bw(g: Array):
        return g * sd, (g * xd).sum(axis=1, keepdims=True)

    return _apply("scale_rows", (x, s), xd * sd, bw)


def scale_rows_to_sums(x, target, eps: float = 1e-12) -> Tensor:
    """Rescale each row of x so it sums to target[i]; rows whose current
    sum is within eps of zero are left untouched (factor 1)."""
    x, target = _as_tensor(x), _as_tensor(target)
    if x.ndim != 2 or target.shape != (x.shape[0], 1):
        raise DimensionError("scale_rows_to_sums: expected x (m,k) and target (m,1), "
                             f"got {x.shape} and {target.shape}")
    xd, td = x.data, target.data
    r = xd.sum(axis=1, keepdims=True)
    live = np.abs(r) > eps
    safe_r = np.where(live, r, 1.0)
    factor = np.where(live, td / safe_r, 1.0)

    def bw(g: Array):
        inner = (g * xd).sum(axis=1, keepdims=True)
        gx = g * factor - np.where(live, td / (safe_r * safe_r), 0.0) * inner
        gt = np.where(live, inner / safe_r, 0.0)
        return gx, gt

    return _apply("scale_rows_to_sums", (x, target), xd * factor, bw)


# ---------------------------------------------------------------------------
# unary nonlinearities


def relu(x) -> Tensor:
    x = _as_tensor(x)
    mask = x.data > 0.0

    def bw(g: Array):
        return (g * mask,)

    return _apply("relu", (x,), np.where(mask, x.data, 0.0), bw)


def gelu(x) -> Tensor:
    """Exact (erf-based) GELU."""
    x = _as_tensor(x)
    xd = x.data
    phi = 0.5 * (1.0 + erf(xd * _INV_SQRT2))
    pdf = np.exp(-0.5 * xd * xd) * _INV_SQRT2PI

    def bw(g: Array):
        return (g * (phi + xd * pdf),)

    return _apply("gelu", (x,), xd * phi, bw)


def sigmoid(x) -> Tensor:
    x = _as_tensor(x)
    s = _stable_sigmoid(x.data)

    def bw(g: Array):
        return (g * s * (1.0 - s),)

    return _apply("sigmoid", (x,), s, bw)


def _stable_sigmoid(z: Array) -> Array:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


# ---------------------------------------------------------------------------
# row and reduction ops


def softmax_rows(x) -> Tensor:
    """Row-wise softmax of a 2-d tensor, stabilized by the row max."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"softmax_rows: needs a 2-d tensor, got shape {x.shape}")
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)

    def bw(g: Array):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    return _apply("softmax_rows", (x,), y, bw)


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    """Per-row layer normalization of a 2-d tensor with affine (1, d) params."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    if x.ndim != 2:
        raise DimensionError(f"layer_norm: needs a 2-d input, got shape {x.shape}")
    d = x.shape[1]
    if gain.shape != (1, d) or bias.shape != (1, d):
        raise DimensionError(f"layer_norm: gain/bias must be (1,{d}), got {gain.shape} and {bias.shape}")
    mu = x.data.mean(axis=1, keepdims=True)
    var = x.data.var(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mu) * inv
    gd = gain.data

    def bw(g: Array):
        ggain = (g * xhat).sum(axis=0, keepdims=True)
        gbias = g.sum(axis=0, keepdims=True)
        gg = g * gd
        gx = inv * (gg - gg.mean(axis=1, keepdims=True)
                    - xhat * (gg * xhat).mean(axis=1, keepdims=True))
        return gx, ggain, gbias

    return _apply("layer_norm", (x, gain, bias), xhat * gd + bias.data, bw)


def sum_rows(x) -> Tensor:
    """Row sums of a 2-d tensor, shape (m, 1)."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"sum_rows: needs a 2-d tensor, got shape {x.shape}")
    k = x.shape[1]

    def bw(g: Array):
        return (g * np.ones((1, k)),)

    return _apply("sum_rows", (x,), x.data.sum(axis=1, keepdims=True), bw)


def mean(x) -> Tensor:
    x = _as_tensor(x)
    n = float(x.size)
    shape = x.shape

    def bw(g: Array):
        return (np.full(shape, float(g) / n),)

    return _apply("mean", (x,), np.asarray(x.data.mean()), bw)


def abs_mean(a, b) -> Tensor:
    """mean(|a - b|). Nondifferentiable where a == b; see grad_check."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("abs_mean", a, b)
    d = a.data - b.data
    n = float(d.size)
    sign = np.sign(d)

    def bw(g: Array):
        ga = float(g) / n * sign
        return _reduce_to(ga, a.shape), _reduce_to(-ga, b.shape)

    return _apply("abs_mean", (a, b), np.asarray(np.abs(d).mean()), bw)


def smooth_l1_mean(a, b, delta: float = 1.0) -> Tensor:
    """Huber distance, averaged over elements: 0.5 d^2 inside |d| <= delta,
    delta * (|d| - 0.5 delta) outside."""
    a, b = _as_tensor(a), _as_tensor(b)
    _check_pair("smooth_l1_mean", a, b)
    if delta <= 0:
        raise ContractError("smooth_l1_mean: delta must be positive")
    d = a.data - b.data
    n = float(d.size)
    absd = np.abs(d)
    inside = absd <= delta
    elems = np.where(inside, 0.5 * d * d, delta * (absd - 0.5 * delta))

    def bw(g: Array):
        slope = np.where(inside, d, delta * np.sign(d))
        ga = float(g) / n * slope
        return _reduce_to(ga, a.shape), _reduce_to(-ga, b.shape)

    return _apply("smooth_l1_mean", (a, b), np.asarray(elems.mean()), bw)


def bce_with_logits(logits, targets) -> Tensor:
    """Mean binary cross entropy on raw logits, numerically stabilized."""
    z, t = _as_tensor(logits), _as_tensor(targets)
    if z.shape != t.shape:
        raise DimensionError(f"bce_with_logits: logits {z.shape} vs targets {t.shape}")
    zd, td = z.data, t.data
    n = float(zd.size)
    elems = np.maximum(zd, 0.0) - zd * td + np.log1p(np.exp(-np.abs(zd)))
    s = _stable_sigmoid(zd)

    def bw(g: Array):
        return float(g) / n * (s - td), float(g) / n * (-zd)

    return _apply("bce_with_logits", (z, t), np.asarray(elems.mean()), bw)


# ---------------------------------------------------------------------------
# shape surgery


def reshape(x, shape) -> Tensor:
    x = _as_tensor(x)
    shape = tuple(int(s) for s in (shape if isinstance(shape, (tuple, list)) else (shape,)))
    if int(np.prod(shape, dtype=np.int64)) != x.size and shape != ():
        raise DimensionError(f"reshape: cannot view {x.shape} as {shape}")
    if shape == () and x.size != 1:
        raise DimensionError(f"reshape: cannot view {x.shape} as a scalar")
    old = x.shape

    def bw(g: Array):
        return (g.reshape(old),)

    return _apply("reshape", (x,), x.data.reshape(shape), bw)


def concat(parts: Sequence[Tensor], axis: int) -> Tensor:
    parts = tuple(_as_tensor(p) for p in parts)
    if not parts:
        raise ContractError("concat: needs at least one part")
    if axis not in (0, 1):
        raise ContractError(f"concat: axis must be 0 or 1, got {axis}")
    if any(p.ndim != 2 for p in parts):
        raise DimensionError("concat: all parts must be 2-d")
    other = 1 - axis
    if len({p.shape[other] for p in parts}) != 1:
        raise DimensionError(f"concat: parts disagree on axis {other}: {[p.shape for p in parts]}")
    sizes = [p.shape[axis] for p in parts]
    splits = np.cumsum(sizes)[:-1]

    def bw(g: Array):
        return tuple(np.ascontiguousarray(piece) for piece in np.split(g, splits, axis=axis))

    return _apply("concat", parts, np.concatenate([p.data for p in parts], axis=axis), bw)


def slice2d(x, row_start=None, row_stop=None, col_start=None, col_stop=None) -> Tensor:
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"slice2d: needs a 2-d tensor, got shape {x.shape}")
    rs = slice(row_start, row_stop)
    cs = slice(col_start, col_stop)
    out = x.data[rs, cs]
    if out.size == 0:
        raise DimensionError(f"slice2d: empty slice of {x.shape}")
    shape = x.shape

    def bw(g: Array):
        gx = np.zeros(shape)
        gx[rs, cs] = g
        return (gx,)

    return _apply("slice2d", (x,), np.ascontiguousarray(out), bw)


def pick(x, index: int) -> Tensor:
    """Scalar element of a 1-d tensor."""
    x = _as_tensor(x)
    if x.ndim != 1:
        raise DimensionError(f"pick: needs a 1-d tensor, got shape {x.shape}")
    index = int(index)
    if not 0 <= index < x.shape[0]:
        raise ContractError(f"pick: index {index} out of range for length {x.shape[0]}")
    shape = x.shape

    def bw(g: Array):
        gx = np.zeros(shape)
        gx[index] = float(g)
        return (gx,)

    return _apply("pick", (x,), np.asarray(x.data[index]), bw)


def permute_rc(x, row_index, col_index) -> Tensor:
    """Differentiable gather out[i, j] = x[row_index[i], col_index[j]]."""
    x = _as_tensor(x)
    if x.ndim != 2:
        raise DimensionError(f"permute_rc: needs a 2-d tensor, got shape {x.shape}")
    ri = np.asarray(row_index, dtype=np.intp)
    ci = np.asarray(col_index, dtype=np.intp)
    if ri.ndim != 1 or ci.ndim != 1:
        raise DimensionError("permute_rc: index arrays must be 1-d")
    if ri.size and (ri.min() < 0 or ri.max() >= x.shape[0]):
        raise ContractError(f"permute_rc: row indices out of range for {x.shape}")
    if ci.size and (ci.min() < 0 or ci.max() >= x.shape[1]):
        raise ContractError(f"permute_rc: column indices out of range for {x.shape}")
    shape = x.shape

    def bw(g: Array):
        gx = np.zeros(shape)
        np.add.at(gx, np.ix_(ri, ci), g)
        return (gx,)

    return _apply("permute_rc", (x,), np.ascontiguousarray(x.data[np.ix_(ri, ci)]), bw)


# ---------------------------------------------------------------------------
# gradient verification


def grad_check(f, x: Tensor, step: float = 1e-5, max_coords: int | None = None,
               rng: np.random.Generator | None = None, exclude=None) -> float:
    """Compare reverse-mode gradients of scalar-valued f against central
    finite differences at x.

    Returns the worst per-coordinate error |a - n| / max(1, |a|, |n|): a
    relative error with a unit floor, so exactly-zero gradients are judged
    by absolute finite-difference noise instead of blowing up the ratio.

    f must be deterministic and smooth at x; coordinates sitting on kinks
    (relu, |.|) should be excluded by the caller via the boolean mask
    `exclude` or by sampling x away from them. `max_coords` limits the
    check to a random coordinate subset (seeded through `rng`) for big
    tensors.
    """
    base = np.array(x.data, dtype=np.float64, copy=True)
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        y = f(probe)
    if not isinstance(y, Tensor) or y.size != 1:
        raise ContractError("grad_check: f must return a scalar tensor")
    tape.backward(y)
    analytic = probe.grad if probe.grad is not None else np.zeros_like(base)

    coords = [tuple(idx) for idx in np.ndindex(base.shape)] if base.shape else [()]
    if exclude is not None:
        mask = np.asarray(exclude, dtype=bool)
        if mask.shape != base.shape:
            raise DimensionError("grad_check: exclude mask shape must match x")
        coords = [c for c in coords if not mask[c]]
    if max_coords is not None and len(coords) > max_coords:
        gen = rng if rng is not None else np.random.default_rng(0)
        chosen = gen.choice(len(coords), size=max_coords, replace=False)
        coords = [coords[int(i)] for i in sorted(chosen)]

    def eval_at(arr: Array) -> float:
        out = f(Tensor(arr))
        if out.size != 1:
            raise ContractError("grad_check: f must return a scalar tensor")
        return float(out.data.reshape(()))

    worst = 0.0
    for idx in coords:
        hi = base.copy()
        hi[idx] += step
        lo = base.copy()
        lo[idx] -= step
        numeric = (eval_at(hi) - eval_at(lo)) / (2.0 * step)
        a = float(analytic[idx])
        err = abs(a - numeric) / max(1.0, abs(a), abs(numeric))
        if err > worst:
            worst = err
    return worst
