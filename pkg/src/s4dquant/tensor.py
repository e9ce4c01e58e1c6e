"""Dense float64 tensors with tape-based reverse-mode differentiation.

Forward ops compute on numpy arrays. While a Tape is active, any op whose
inputs require gradients records a backward closure; Tape.backward replays
the closures in reverse creation order (creation order is a topological
order of the graph) and accumulates into per-tensor .grad buffers.

Broadcasting is restricted to scalar-vs-tensor; anything else must go
through reshape/expand so every gradient path stays explicit.
"""

from __future__ import annotations

import math
import threading
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import erf as _np_erf

__all__ = [
    "Tensor",
    "ComplexTensor",
    "Tape",
    "ShapeError",
    "NonFiniteError",
    "tensor",
    "zeros",
    "backward",
    "record",
    "elementwise",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "exp",
    "log",
    "sin",
    "cos",
    "sqrt",
    "sigmoid",
    "gelu",
    "clamp",
    "matmul",
    "linear",
    "concat",
    "reshape",
    "expand",
    "slice_axis",
    "sum_",
    "mean_",
    "layer_norm",
    "softmax_cross_entropy",
    "check_gradients",
]

_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class ShapeError(ValueError):
    pass


class NonFiniteError(ArithmeticError):
    """An op produced NaN/Inf, or was handed non-finite data."""


class Tensor:
    """A dense float64 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = bool(requires_grad)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _scalar_err(self)

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def detach(self) -> "Tensor":
        return Tensor(self.data.copy())

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # operator sugar; scalars are lifted to 0-d tensors
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def _scalar_err(t: Tensor):
    raise ShapeError(f"expected a scalar tensor, got shape {t.shape}")


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def zeros(shape, requires_grad: bool = False) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float64))


# ---------------------------------------------------------------------------
# tape

class _Node:
    __slots__ = ("out", "inputs", "fn")

    def __init__(self, out: Tensor, inputs: tuple[Tensor, ...], fn: Callable):
        self.out = out
        self.inputs = inputs
        self.fn = fn


_local = threading.local()


def _active_tape() -> Optional["Tape"]:
    return getattr(_local, "tape", None)


class Tape:
    """Ordered record of differentiable ops for one worker.

    Use as a context manager; ops executed inside the block are recorded
    when any of their inputs requires gradients.
    """

    __slots__ = ("_nodes",)

    def __init__(self):
        self._nodes: list[_Node] = []

    def __enter__(self) -> "Tape":
        if _active_tape() is not None:
            raise RuntimeError("tapes do not nest; one tape per worker")
        _local.tape = self
        return self

    def __exit__(self, *exc) -> None:
        _local.tape = None

    def __len__(self) -> int:
        return len(self._nodes)

    def backward(self, loss: Tensor) -> None:
        """Accumulate d(loss)/d(tensor) into .grad for every tensor on the tape.

        loss must be scalar. The tape is cleared afterwards.
        """
        if loss.data.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        if not np.isfinite(loss.data).all():
            raise NonFiniteError("loss is not finite")
        loss.accumulate_grad(np.ones_like(loss.data))
        for node in reversed(self._nodes):
            og = node.out.grad
            if og is None:
                continue
            grads = node.fn(og)
            for inp, g in zip(node.inputs, grads):
                if g is None or not inp.requires_grad:
                    continue
                if inp.grad is not None:
                    inp.grad += g
                elif g is og or (getattr(g, "base", None) is og):
                    # closures may hand back the incoming gradient (or a view
                    # of it); materialize before anyone accumulates into it
                    inp.grad = np.array(g, dtype=np.float64)
                else:
                    inp.grad = np.asarray(g, dtype=np.float64)
        self._nodes.clear()


def backward(loss: Tensor) -> None:
    """Backward through the active tape (must be inside a `with Tape()` block)."""
    tape = _active_tape()
    if tape is None or len(tape) == 0:
        raise RuntimeError("no active non-empty tape to backpropagate through")
    tape.backward(loss)


def record(out: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> Tensor:
    """Attach a backward closure for a custom op.

    backward_fn(out_grad) must return one gradient array (or None) per input.
    No-op unless a tape is active and some input requires gradients; this is
    the extension point fused ops elsewhere in the package use.
    """
    tape = _active_tape()
    if tape is not None and any(i.requires_grad for i in inputs):
        out.requires_grad = True
        tape._nodes.append(_Node(out, tuple(inputs), backward_fn))
    return out


def grad_enabled_for(*inputs: Tensor) -> bool:
    """True when a custom op must stash buffers for a later backward pass."""
    return _active_tape() is not None and any(i.requires_grad for i in inputs)


# ---------------------------------------------------------------------------
# shape policy

def _binary_shapes(a: Tensor, b: Tensor) -> None:
    if a.shape == b.shape or a.size == 1 or b.size == 1:
        return
    raise ShapeError(f"shapes {a.shape} and {b.shape} neither match nor are scalar")


def _reduce_to(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    # collapse a broadcast gradient back onto a scalar operand
    if g.shape == shape:
        return g
    return np.sum(g).reshape(shape) if int(np.prod(shape, dtype=int)) == 1 else g.reshape(shape)


def _check_finite(arr: np.ndarray, op: str) -> np.ndarray:
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    return arr


# ---------------------------------------------------------------------------
# elementwise ops

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data + b.data)
    return record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(g, b.shape)))


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data - b.data)
    return record(out, (a, b), lambda g: (_reduce_to(g, a.shape), _reduce_to(-g, b.shape)))


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    out = Tensor(a.data * b.data)
    return record(
        out,
        (a, b),
        lambda g: (_reduce_to(g * b.data, a.shape), _reduce_to(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    _binary_shapes(a, b)
    if np.any(b.data == 0.0):
        raise ZeroDivisionError("division by zero")
    out = Tensor(a.data / b.data)
    inv = 1.0 / b.data

    def bwd(g):
        return (
            _reduce_to(g * inv, a.shape),
            _reduce_to(-g * a.data * inv * inv, b.shape),
        )

    return record(out, (a, b), bwd)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(-a.data)
    return record(out, (a,), lambda g: (-g,))


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="raise"):
        try:
            y = np.exp(a.data)
        except FloatingPointError as e:
            raise NonFiniteError("exp overflow") from e
    out = Tensor(_check_finite(y, "exp"))
    return record(out, (a,), lambda g: (g * y,))


def log(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data <= 0.0):
        raise NonFiniteError("log of non-positive value")
    out = Tensor(np.log(a.data))
    return record(out, (a,), lambda g: (g / a.data,))


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    if np.any(a.data < 0.0):
        raise NonFiniteError("sqrt of negative value")
    y = np.sqrt(a.data)
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * 0.5 / np.maximum(y, 1e-300),))


def sin(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.sin(a.data))
    return record(out, (a,), lambda g: (g * np.cos(a.data),))


def cos(a) -> Tensor:
    a = _as_tensor(a)
    out = Tensor(np.cos(a.data))
    return record(out, (a,), lambda g: (-g * np.sin(a.data),))


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    # stable two-sided logistic
    y = np.where(a.data >= 0, 1.0 / (1.0 + np.exp(-np.abs(a.data))),
                 np.exp(-np.abs(a.data)) / (1.0 + np.exp(-np.abs(a.data))))
    out = Tensor(y)
    return record(out, (a,), lambda g: (g * y * (1.0 - y),))


def gelu(a) -> Tensor:
    """Exact Gaussian-CDF form: x * Phi(x)."""
    a = _as_tensor(a)
    phi = 0.5 * (1.0 + _np_erf(a.data * _INV_SQRT2))
    out = Tensor(a.data * phi)

    def bwd(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * a.data * a.data)
        return (g * (phi + a.data * pdf),)

    return record(out, (a,), bwd)


def clamp(a, lo: float, hi: float) -> Tensor:
    """Clip to [lo, hi]; subgradient 1 inside the interval (inclusive), 0 outside."""
    a = _as_tensor(a)
    if not (lo <= hi):
        raise ValueError(f"clamp bounds reversed: {lo} > {hi}")
    out = Tensor(np.clip(a.data, lo, hi))
    inside = ((a.data >= lo) & (a.data <= hi)).astype(np.float64)
    return record(out, (a,), lambda g: (g * inside,))


_ELEMENTWISE = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "div": div,
    "neg": neg,
    "exp": exp,
    "clamp": clamp,
}


def elementwise(kind: str, a, b=None, **kwargs) -> Tensor:
    """Dispatch by op name; the named functions are the primary API."""
    fn = _ELEMENTWISE.get(kind)
    if fn is None:
        raise ValueError(f"unknown elementwise op {kind!r}")
    if kind in ("add", "sub", "mul", "div"):
        return fn(a, b)
    if kind == "clamp":
        return fn(a, **kwargs)
    return fn(a)


# ---------------------------------------------------------------------------
# linear algebra and shape ops

def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"inner dimensions disagree: {a.shape} @ {b.shape}")
    out = Tensor(a.data @ b.data)
    return record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))


def linear(x: Tensor, w: Tensor, b: Optional[Tensor] = None) -> Tensor:
    """Affine map over the last axis: x[..., K] @ w[K, N] (+ b[N])."""
    x, w = _as_tensor(x), _as_tensor(w)
    if w.ndim != 2 or x.shape[-1] != w.shape[0]:
        raise ShapeError(f"linear shapes disagree: {x.shape} @ {w.shape}")
    lead = x.shape[:-1]
    xf = x.data.reshape(-1, x.shape[-1])
    y = xf @ w.data
    if b is not None:
        if b.shape != (w.shape[1],):
            raise ShapeError(f"bias shape {b.shape} does not match output width {w.shape[1]}")
        y = y + b.data
    out = Tensor(y.reshape(*lead, w.shape[1]))
    inputs = (x, w) if b is None else (x, w, b)

    def bwd(g):
        gf = g.reshape(-1, w.shape[1])
        gx = (gf @ w.data.T).reshape(x.shape)
        gw = xf.T @ gf
        if b is None:
            return (gx, gw)
        return (gx, gw, gf.sum(axis=0))

    return record(out, inputs, bwd)


def reshape(x: Tensor, shape) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape))
    return record(out, (x,), lambda g: (g.reshape(x.shape),))


def expand(x: Tensor, shape) -> Tensor:
    """Explicit broadcast to `shape`; gradient sums over the expanded axes."""
    x = _as_tensor(x)
    shape = tuple(shape)
    out = Tensor(np.broadcast_to(x.data, shape).copy())

    def bwd(g):
        g = np.asarray(g)
        extra = g.ndim - x.ndim
        if extra:
            g = g.sum(axis=tuple(range(extra)))
        axes = tuple(i for i, (gs, xs) in enumerate(zip(g.shape, x.shape)) if xs == 1 and gs != 1)
        if axes:
            g = g.sum(axis=axes, keepdims=True)
        return (g.reshape(x.shape),)

    return record(out, (x,), bwd)


def slice_axis(x: Tensor, axis: int, start: int, stop: int) -> Tensor:
    x = _as_tensor(x)
    idx = [slice(None)] * x.ndim
    idx[axis] = slice(start, stop)
    idx = tuple(idx)
    out = Tensor(x.data[idx].copy())

    def bwd(g):
        full = np.zeros(x.shape)
        full[idx] = g
        return (full,)

    return record(out, (x,), bwd)


def concat(parts: Sequence[Tensor], axis: int = 0) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    if not parts:
        raise ShapeError("concat needs at least one tensor")
    out = Tensor(np.concatenate([p.data for p in parts], axis=axis))
    sizes = [p.shape[axis] for p in parts]

    def bwd(g):
        splits = np.split(g, np.cumsum(sizes)[:-1], axis=axis)
        return tuple(splits)

    return record(out, tuple(parts), bwd)


def sum_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    out = Tensor(np.sum(x.data, axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, x.shape).copy(),)
        if not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape).copy(),)

    return record(out, (x,), bwd)


def mean_(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    x = _as_tensor(x)
    n = x.size if axis is None else x.shape[axis]
    out = Tensor(np.mean(x.data, axis=axis, keepdims=keepdims))

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g / n, x.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg / n, x.shape).copy(),)

    return record(out, (x,), bwd)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then scale and shift per channel."""
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    c = x.shape[-1]
    if gain.shape != (c,) or bias.shape != (c,):
        raise ShapeError(f"layer_norm gain/bias must have shape ({c},)")
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = Tensor(gain.data * xhat + bias.data)

    def bwd(g):
        dxhat = g * gain.data
        m1 = dxhat.mean(axis=-1, keepdims=True)
        m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
        dx = inv * (dxhat - m1 - xhat * m2)
        red = tuple(range(g.ndim - 1))
        return (dx, (g * xhat).sum(axis=red), g.sum(axis=red))

    return record(out, (x, gain, bias), bwd)


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray) -> Tensor:
    """Mean cross-entropy from raw logits [B, K] against integer labels [B]."""
    logits = _as_tensor(logits)
    if logits.ndim != 2:
        raise ShapeError(f"expected [batch, classes] logits, got {logits.shape}")
    labels = np.asarray(labels, dtype=np.int64)
    n = logits.shape[0]
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    ez = np.exp(z)
    sez = ez.sum(axis=1, keepdims=True)
    logp = z - np.log(sez)
    loss = -logp[np.arange(n), labels].mean()
    out = Tensor(_check_finite(np.asarray(loss), "cross_entropy"))

    def bwd(g):
        p = ez / sez
        p[np.arange(n), labels] -= 1.0
        return (p * (float(g) / n),)

    return record(out, (logits,), bwd)


# ---------------------------------------------------------------------------
# complex pairs

class ComplexTensor:
    """A complex array stored as separate real and imaginary Tensors."""

    __slots__ = ("re", "im")

    def __init__(self, re: Tensor, im: Tensor):
        if re.shape != im.shape:
            raise ShapeError(f"re/im shapes differ: {re.shape} vs {im.shape}")
        self.re = re
        self.im = im

    @property
    def shape(self) -> tuple[int, ...]:
        return self.re.shape

    @classmethod
    def from_numpy(cls, z: np.ndarray, requires_grad: bool = False) -> "ComplexTensor":
        z = np.asarray(z, dtype=np.complex128)
        return cls(Tensor(z.real.copy(), requires_grad), Tensor(z.imag.copy(), requires_grad))

    def to_numpy(self) -> np.ndarray:
        return self.re.data + 1j * self.im.data

    def add(self, o: "ComplexTensor") -> "ComplexTensor":
        return ComplexTensor(add(self.re, o.re), add(self.im, o.im))

    def mul(self, o: "ComplexTensor") -> "ComplexTensor":
        # (a+bi)(c+di) = (ac - bd) + (ad + bc)i
        return ComplexTensor(
            sub(mul(self.re, o.re), mul(self.im, o.im)),
            add(mul(self.re, o.im), mul(self.im, o.re)),
        )

    def mul_real(self, t) -> "ComplexTensor":
        return ComplexTensor(mul(self.re, t), mul(self.im, t))

    def div(self, o: "ComplexTensor") -> "ComplexTensor":
        d = add(mul(o.re, o.re), mul(o.im, o.im))
        num = self.mul(ComplexTensor(o.re, neg(o.im)))
        return ComplexTensor(div(num.re, d), div(num.im, d))

    def exp(self) -> "ComplexTensor":
        # e^(a+bi) = e^a (cos b + i sin b)
        mag = exp(self.re)
        return ComplexTensor(mul(mag, cos(self.im)), mul(mag, sin(self.im)))

    def abs(self) -> Tensor:
        return sqrt(add(mul(self.re, self.re), mul(self.im, self.im)))


# ---------------------------------------------------------------------------
# gradient checking

def check_gradients(
    f: Callable[[Tensor], Tensor],
    point: Tensor,
    eps: float = 1e-5,
    exclude: Optional[np.ndarray] = None,
) -> float:
    """Max relative error between tape gradients of f and central differences.

    f must map a Tensor to a scalar Tensor. `exclude` masks coordinates
    (e.g. near kinks of piecewise-linear ops) out of the comparison.

    Relative error is |analytic - numeric| / max(1, |numeric|) per coordinate.
    """
    base = point.data.copy()
    probe = Tensor(base.copy(), requires_grad=True)
    with Tape() as tape:
        loss = f(probe)
        tape.backward(loss)
    if probe.grad is None:
        raise RuntimeError("f does not depend on the probe point")
    analytic = probe.grad.reshape(-1)

    flat = base.reshape(-1)
    numeric = np.zeros_like(flat)
    for i in range(flat.size):
        for sign, slot in ((+1, 0), (-1, 1)):
            shifted = flat.copy()
            shifted[i] += sign * eps
            val = f(Tensor(shifted.reshape(base.shape))).data
            if not np.isfinite(val).all():
                raise NonFiniteError("non-finite value while probing gradients")
            if slot == 0:
                hi = float(val)
            else:
                lo = float(val)
        numeric[i] = (hi - lo) / (2.0 * eps)

    err = np.abs(analytic - numeric) / np.maximum(1.0, np.abs(numeric))
    if exclude is not None:
        err = err[~exclude.reshape(-1)]
    return float(err.max()) if err.size else 0.0
