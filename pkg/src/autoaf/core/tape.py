"""Tape-based reverse-mode autodiff over complex numpy arrays.

Gradients follow the conjugate Wirtinger convention: for a real loss ``L``
the gradient of a complex node ``z`` is ``dL/dz*``, so that ``z - mu * grad``
is a descent step. For a real-valued node this equals half the ordinary
derivative; the seed for the loss is therefore ``1/2``.

Every backward rule is itself written with recorded operations, so a
backward pass run with ``create_graph=True`` lands on the tape and can be
differentiated again. The learned-optimizer inner loop relies on this: the
optimizee gradient fed to the optimizer stays a function of the optimizer
weights.
"""
from __future__ import annotations

import heapq
import threading
from contextlib import contextmanager
from typing import Callable, Sequence

import numpy as np

from . import fft as _fft

_local = threading.local()


class ContractError(ValueError):
    """Raised when an autodiff call violates its preconditions."""


def _recording() -> bool:
    return getattr(_local, "recording", True)


@contextmanager
def recording(enabled: bool):
    """Enable or disable recording of new nodes on this thread."""
    prev = _recording()
    _local.recording = enabled
    try:
        yield
    finally:
        _local.recording = prev


def no_grad():
    return recording(False)


class Tape:
    """Append-only record of primitive operations.

    Nodes only ever reference earlier nodes, so the list index is a valid
    topological order.
    """

    def __init__(self):
        self.nodes: list[Var] = []

    def _append(self, var: "Var") -> None:
        var.index = len(self.nodes)
        self.nodes.append(var)

    def leaf(self, value, name: str | None = None) -> "Var":
        v = Var(np.asarray(value), tape=self, op="leaf", name=name)
        self._append(v)
        return v

    def __len__(self) -> int:
        return len(self.nodes)

    def replay(self, leaf_values: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        """Recompute every node's forward value from the recorded ops."""
        leaf_values = leaf_values or {}
        values: list[np.ndarray] = []
        for node in self.nodes:
            if node.op == "leaf":
                values.append(np.asarray(leaf_values.get(node.index, node.value)))
                continue
            args = [values[i.index] if i.tape is self else i.value for i in node.inputs]
            values.append(node.fwd(*args))
        return values


class Var:
    """A value, optionally recorded on a tape.

    ``tape is None`` marks a constant: no gradient flows into it.
    """

    __slots__ = ("value", "tape", "index", "op", "fwd", "inputs", "vjp", "name")
    __array_ufunc__ = None

    def __init__(self, value, tape: Tape | None = None, op: str = "const", name=None):
        self.value = value
        self.tape = tape
        self.index = -1
        self.op = op
        self.fwd = None
        self.inputs: tuple[Var, ...] = ()
        self.vjp = None
        self.name = name

    @property
    def requires_grad(self) -> bool:
        return self.tape is not None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    @property
    def is_complex(self) -> bool:
        return np.iscomplexobj(self.value)

    def __repr__(self) -> str:
        kind = "const" if self.tape is None else f"node#{self.index}:{self.op}"
        return f"Var({kind}, shape={self.shape}, dtype={self.value.dtype})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def conj(self):
        return conj(self)

    @property
    def real(self):
        return real(self)

    @property
    def imag(self):
        return imag(self)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None):
        return mean(self, axis=axis)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], tuple):
            shape = shape[0]
        return reshape(self, shape)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(np.asarray(x))


def const(x) -> Var:
    return Var(np.asarray(x))


def detach(x) -> Var:
    """Same value, cut from every tape."""
    return Var(as_var(x).value)


def _op(name: str, fwd: Callable, inputs: Sequence, vjp: Callable) -> Var:
    ins = tuple(as_var(i) for i in inputs)
    out = fwd(*(i.value for i in ins))
    tape = None
    if _recording():
        for i in ins:
            if i.tape is not None:
                if tape is None:
                    tape = i.tape
                elif i.tape is not tape:
                    raise ContractError("operands live on different tapes")
    if tape is None:
        return Var(out)
    v = Var(out, tape=tape, op=name)
    v.fwd = fwd
    v.inputs = ins
    v.vjp = vjp
    tape._append(v)
    return v


def _sum_to(g: Var, shape: tuple[int, ...]) -> Var:
    """Reduce a broadcast gradient back to ``shape``."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = sum_(g, axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = sum_(g, axis=axes, keepdims=True)
    return g


# --- elementwise arithmetic -------------------------------------------------

def add(x, y) -> Var:
    return _op("add", np.add, (x, y), lambda g, z, x, y: (g, g))


def sub(x, y) -> Var:
    return _op("sub", np.subtract, (x, y), lambda g, z, x, y: (g, neg(g)))


def neg(x) -> Var:
    return _op("neg", np.negative, (x,), lambda g, z, x: (neg(g),))


def mul(x, y) -> Var:
    return _op("mul", np.multiply, (x, y), lambda g, z, x, y: (g * conj(y), g * conj(x)))


def div(x, y) -> Var:
    def vjp(g, z, x, y):
        gx = g / conj(y)
        return gx, neg(gx * conj(z))
    return _op("div", np.divide, (x, y), vjp)


def conj(x) -> Var:
    x = as_var(x)
    if not x.is_complex:
        return x
    return _op("conj", np.conj, (x,), lambda g, z, x: (conj(g),))


def real(x) -> Var:
    x = as_var(x)
    if not x.is_complex:
        return x
    return _op("real", np.real, (x,), lambda g, z, x: (real(g),))


def imag(x) -> Var:
    x = as_var(x)
    if not x.is_complex:
        return _op("imag", np.zeros_like, (x,), lambda g, z, x: (None,))
    return _op("imag", np.imag, (x,), lambda g, z, x: (mul(1j, real(g)),))


def make_complex(re, im) -> Var:
    """``re + 1j * im`` from two real arrays."""
    return _op("complex", lambda a, b: a + 1j * b, (re, im),
               lambda g, z, a, b: (real(g), imag(g)))


def square(x) -> Var:
    """Holomorphic square ``x * x``."""
    return _op("square", np.square, (x,), lambda g, z, x: (g * conj(2.0 * x),))


def abs2(x) -> Var:
    """``|x|^2`` (real valued)."""
    return _op("abs2", lambda a: np.real(a * np.conj(a)), (x,),
               lambda g, z, x: (2.0 * real(g) * x,))


def abs_(x) -> Var:
    """``|x|`` with gradient zero at the origin."""
    def vjp(g, z, x):
        safe = z + const((z.value == 0).astype(np.float64))
        return (real(g) * x / safe,)
    return _op("abs", np.abs, (x,), vjp)


def exp(x) -> Var:
    return _op("exp", np.exp, (x,), lambda g, z, x: (g * conj(z),))


def log(x) -> Var:
    return _op("log", np.log, (x,), lambda g, z, x: (g / conj(x),))


def sqrt(x) -> Var:
    return _op("sqrt", np.sqrt, (x,), lambda g, z, x: (g / conj(2.0 * z),))


def tanh(x) -> Var:
    return _op("tanh", np.tanh, (x,), lambda g, z, x: (g * conj(1.0 - z * z),))


def _np_sigmoid(a):
    return 0.5 * (np.tanh(0.5 * a) + 1.0)


def sigmoid(x) -> Var:
    return _op("sigmoid", _np_sigmoid, (x,), lambda g, z, x: (g * conj(z * (1.0 - z)),))


def relu(x) -> Var:
    def vjp(g, z, x):
        return (g * const((x.value > 0).astype(np.float64)),)
    return _op("relu", lambda a: np.maximum(a, 0.0), (x,), vjp)


def clip(x, lo: float, hi: float) -> Var:
    """Clamp a real array; gradient passes only strictly inside the range."""
    def vjp(g, z, x):
        inside = (x.value > lo) & (x.value < hi)
        return (g * const(inside.astype(np.float64)),)
    return _op("clip", lambda a: np.clip(a, lo, hi), (x,), vjp)


def where(mask, a, b) -> Var:
    mask = np.asarray(mask, dtype=bool)
    def vjp(g, z, a, b):
        zero = const(np.zeros((), dtype=g.value.dtype))
        return where(mask, g, zero), where(mask, zero, g)
    return _op("where", lambda p, q: np.where(mask, p, q), (a, b), vjp)


# --- split complex activations ---------------------------------------------

def _split_scale(g: Var, dre: Var, dim: Var) -> Var:
    return make_complex(real(g) * dre, imag(g) * dim)


def csigmoid(x) -> Var:
    """Logistic applied separately to real and imaginary parts."""
    def fwd(a):
        return _np_sigmoid(a.real) + 1j * _np_sigmoid(a.imag)
    def vjp(g, z, x):
        sr, si = real(z), imag(z)
        return (_split_scale(g, sr * (1.0 - sr), si * (1.0 - si)),)
    return _op("csigmoid", fwd, (x,), vjp)


def ctanh(x) -> Var:
    """tanh applied separately to real and imaginary parts."""
    def fwd(a):
        return np.tanh(a.real) + 1j * np.tanh(a.imag)
    def vjp(g, z, x):
        tr, ti = real(z), imag(z)
        return (_split_scale(g, 1.0 - tr * tr, 1.0 - ti * ti),)
    return _op("ctanh", fwd, (x,), vjp)


def crelu(x) -> Var:
    """ReLU applied separately to real and imaginary parts."""
    def fwd(a):
        return np.maximum(a.real, 0.0) + 1j * np.maximum(a.imag, 0.0)
    def vjp(g, z, x):
        mr = const((x.value.real > 0).astype(np.float64))
        mi = const((x.value.imag > 0).astype(np.float64))
        return (_split_scale(g, mr, mi),)
    return _op("crelu", fwd, (x,), vjp)


def smul(x, y) -> Var:
    """Componentwise product: ``Re x * Re y + 1j * Im x * Im y``."""
    def fwd(a, b):
        return a.real * b.real + 1j * (a.imag * b.imag)
    return _op("smul", fwd, (x, y), lambda g, z, x, y: (smul(g, y), smul(g, x)))


# --- linear algebra and shape ------------------------------------------------

def _mT(v: Var) -> Var:
    return swapaxes(v, -1, -2)


def matmul(x, y) -> Var:
    def vjp(g, z, x, y):
        return g @ conj(_mT(y)), conj(_mT(x)) @ g
    return _op("matmul", np.matmul, (x, y), vjp)


def sum_(x, axis=None, keepdims=False) -> Var:
    x = as_var(x)
    in_shape = x.shape

    def vjp(g, z, x):
        if axis is None:
            gk = reshape(g, (1,) * len(in_shape))
        elif keepdims:
            gk = g
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = sorted(a % len(in_shape) for a in axes)
            shp = list(g.shape)
            for a in axes:
                shp.insert(a, 1)
            gk = reshape(g, tuple(shp))
        return (broadcast_to(gk, in_shape),)
    return _op("sum", lambda a: np.sum(a, axis=axis, keepdims=keepdims), (x,), vjp)


def mean(x, axis=None) -> Var:
    x = as_var(x)
    if axis is None:
        n = x.value.size
    else:
        axes = (axis,) if isinstance(axis, int) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return sum_(x, axis=axis) * (1.0 / n)


def broadcast_to(x, shape) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    return _op("broadcast", lambda a: np.broadcast_to(a, shape), (x,),
               lambda g, z, x: (_sum_to(g, x.shape),))


def reshape(x, shape) -> Var:
    x = as_var(x)
    shape = tuple(shape)
    return _op("reshape", lambda a: np.reshape(a, shape), (x,),
               lambda g, z, x: (reshape(g, x.shape),))


def swapaxes(x, a1: int, a2: int) -> Var:
    return _op("swapaxes", lambda a: np.swapaxes(a, a1, a2), (x,),
               lambda g, z, x: (swapaxes(g, a1, a2),))


def getitem(x, idx) -> Var:
    x = as_var(x)
    return _op("getitem", lambda a: a[idx], (x,),
               lambda g, z, x: (scatter(g, idx, x.shape),))


def scatter(x, idx, shape) -> Var:
    """Zero array of ``shape`` with ``x`` added at ``idx``."""
    shape = tuple(shape)

    def fwd(a):
        out = np.zeros(shape, dtype=a.dtype)
        np.add.at(out, idx, a)
        return out
    return _op("scatter", fwd, (x,), lambda g, z, x: (getitem(g, idx),))


def concatenate(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]
    sizes = [x.shape[axis] for x in xs]
    bounds = np.cumsum([0] + sizes)

    def vjp(g, z, *ins):
        out = []
        for k in range(len(ins)):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(int(bounds[k]), int(bounds[k + 1]))
            out.append(getitem(g, tuple(sl)))
        return tuple(out)
    return _op("concat", lambda *a: np.concatenate(a, axis=axis), xs, vjp)


def stack(xs: Sequence, axis: int = 0) -> Var:
    xs = [as_var(x) for x in xs]

    def vjp(g, z, *ins):
        out = []
        for k in range(len(ins)):
            sl = [slice(None)] * g.ndim
            sl[axis] = k
            out.append(getitem(g, tuple(sl)))
        return tuple(out)
    return _op("stack", lambda *a: np.stack(a, axis=axis), xs, vjp)


def fft(x) -> Var:
    """Radix-2 FFT along the last axis (unnormalized)."""
    x = as_var(x)
    n = x.shape[-1]
    return _op("fft", _fft.fft, (x,), lambda g, z, x: (ifft(g) * float(n),))


def ifft(x) -> Var:
    """Inverse FFT along the last axis (1/N scaling)."""
    x = as_var(x)
    n = x.shape[-1]
    return _op("ifft", _fft.ifft, (x,), lambda g, z, x: (fft(g) * (1.0 / n),))


# --- reverse pass ------------------------------------------------------------

def grad(loss: Var, params: Sequence[Var], create_graph: bool = False) -> list[Var]:
    """Conjugate-Wirtinger gradients of a real scalar ``loss``.

    ``params`` may be leaves or any recorded node; gradients are total
    derivatives through paths that pass through the node. Parameters the loss
    does not depend on get zero gradients. With ``create_graph`` the backward
    computation is recorded on the tape and returned gradients are
    differentiable.
    """
    if not isinstance(loss, Var) or loss.value.size != 1:
        raise ContractError("loss must be a scalar")
    lv = complex(loss.value.reshape(()))
    if abs(lv.imag) > 1e-12 * max(1.0, abs(lv.real)):
        raise ContractError("loss must be real valued")
    for p in params:
        if p.tape is None:
            raise ContractError("gradient requested for a constant")
    if loss.tape is None:
        return [const(np.zeros_like(p.value)) for p in params]
    tape = loss.tape
    for p in params:
        if p.tape is not tape:
            raise ContractError("parameter lives on a different tape")

    wanted = {p.index for p in params}
    stop = min(wanted)
    grads: dict[int, Var] = {loss.index: const(np.full(loss.shape, 0.5))}
    heap = [-loss.index]
    found: dict[int, Var] = {}
    with recording(create_graph):
        while heap:
            i = -heapq.heappop(heap)
            if i < stop:
                break
            node = tape.nodes[i]
            g = grads.pop(i)
            if i in wanted:
                found[i] = g
            if node.vjp is None:
                continue
            contribs = node.vjp(g, node, *node.inputs)
            for inp, gi in zip(node.inputs, contribs):
                if gi is None or inp.tape is None:
                    continue
                gi = _sum_to(as_var(gi), inp.shape)
                if not inp.is_complex and gi.is_complex:
                    gi = real(gi)
                j = inp.index
                if j in grads:
                    grads[j] = grads[j] + gi
                else:
                    grads[j] = gi
                    heapq.heappush(heap, -j)
    out = []
    for p in params:
        g = found.get(p.index)
        if g is None:
            g = const(np.zeros_like(p.value))
        elif g.shape != p.shape:
            g = broadcast_to(g, p.shape)
        out.append(g)
    return out


def value_and_grad(fn: Callable[..., Var], *values) -> tuple[float, list[np.ndarray]]:
    """Evaluate ``fn`` on fresh leaves and return its value and gradients."""
    tape = Tape()
    leaves = [tape.leaf(v) for v in values]
    loss = fn(*leaves)
    gs = grad(loss, leaves)
    return float(np.real(loss.value)), [g.value for g in gs]
