"""Tensor-granularity reverse-mode automatic differentiation.

A Tape records primitive ops in execution order (a valid topological order).
backward() replays that record in reverse, accumulating adjoints. Every vjp
rule is written in terms of the public primitives, so a backward pass run
with create_graph=True is itself recorded and can be differentiated again
(needed for the critic's gradient penalty).

All tensors are float32, C-contiguous, CPU-only.
"""

from __future__ import annotations

import threading
from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ContractError, ShapeError

_STATE = threading.local()


def _stack():
    if not hasattr(_STATE, "tapes"):
        _STATE.tapes = []
    return _STATE.tapes


def _active_tape():
    s = _stack()
    return s[-1] if s else None


class Tensor:
    """A float32 array plus its place in the recorded graph.

    grad is an accumulated numpy buffer, only filled for leaves passed to
    backward(); intermediate adjoints live in the backward pass alone.
    """

    __slots__ = ("data", "grad", "requires_grad", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data, dtype=np.float32)
        if not arr.flags.c_contiguous:
            arr = np.ascontiguousarray(arr)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self):
        return float(self.data)

    def detach(self):
        return Tensor(self.data, requires_grad=False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad}{tag})"

    # Arithmetic sugar; the functional forms below do the real work.
    def __add__(self, other):
        return add(self, _as_tensor(other))

    def __radd__(self, other):
        return add(_as_tensor(other), self)

    def __sub__(self, other):
        return sub(self, _as_tensor(other))

    def __rsub__(self, other):
        return sub(_as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, _as_tensor(other))

    def __rmul__(self, other):
        return mul(_as_tensor(other), self)

    def __truediv__(self, other):
        return div(self, _as_tensor(other))

    def __rtruediv__(self, other):
        return div(_as_tensor(other), self)

    def __neg__(self):
        return neg(self)

    def sum(self, axis=None, keepdims=False):
        return bsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x, name=None):
    return Tensor(x, requires_grad=False, name=name)


class Node:
    """One recorded primitive: its output, differentiable parents, vjp rule."""

    __slots__ = ("out", "parents", "vjp")

    def __init__(self, out, parents, vjp):
        self.out = out
        self.parents = parents
        self.vjp = vjp


class Tape:
    """Execution-ordered op record; use as a context manager around forwards."""

    def __init__(self):
        self.nodes = []
        self.recording = True

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.nodes)


@contextmanager
def _use_tape(tape, recording):
    _stack().append(tape)
    prev = tape.recording
    tape.recording = recording
    try:
        yield
    finally:
        tape.recording = prev
        _stack().pop()


@contextmanager
def no_grad():
    """Suspend recording on the active tape (if any) for the enclosed ops."""
    tape = _active_tape()
    if tape is None:
        yield
        return
    prev = tape.recording
    tape.recording = False
    try:
        yield
    finally:
        tape.recording = prev


def _record(out, parents, vjp):
    tape = _active_tape()
    if tape is not None and tape.recording:
        tape.nodes.append(Node(out, parents, vjp))


def _rg(*tensors):
    return any(t.requires_grad for t in tensors)


# ---------------------------------------------------------------------------
# Primitives. Each vjp is built from these same primitives so that double
# backward works; constants captured in closures stay out of the graph.
# ---------------------------------------------------------------------------


def _sum_to(g, shape):
    """Reduce a broadcast adjoint back to the original operand shape."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = bsum(g, axis=tuple(range(extra)))
    axes = tuple(i for i, (have, want) in enumerate(zip(g.shape, shape)) if want == 1 and have != 1)
    if axes:
        g = bsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data + b.data, requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            return (_sum_to(g, a.shape), _sum_to(g, b.shape))
        _record(out, (a, b), vjp)
    return out


def sub(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data - b.data, requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            return (_sum_to(g, a.shape), neg(_sum_to(g, b.shape)))
        _record(out, (a, b), vjp)
    return out


def neg(a):
    out = Tensor(-a.data, requires_grad=a.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (neg(g),)
        _record(out, (a,), vjp)
    return out


def mul(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data * b.data, requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _sum_to(mul(g, b), a.shape) if a.requires_grad else None
            gb = _sum_to(mul(g, a), b.shape) if b.requires_grad else None
            return (ga, gb)
        _record(out, (a, b), vjp)
    return out


def div(a, b):
    a, b = _as_tensor(a), _as_tensor(b)
    out = Tensor(a.data / b.data, requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            ga = _sum_to(div(g, b), a.shape) if a.requires_grad else None
            gb = _sum_to(neg(div(mul(g, out), b)), b.shape) if b.requires_grad else None
            return (ga, gb)
        _record(out, (a, b), vjp)
    return out


def _matmul_vjp_args(ta, tb, g, a, b):
    """Operands and transpose flags that yield (ga, gb) for C = op(a) @ op(b)."""
    if not ta and not tb:
        return (g, b, False, True), (a, g, True, False)
    if ta and not tb:
        return (b, g, False, True), (a, g, False, False)
    if not ta and tb:
        return (g, b, False, False), (g, a, True, False)
    return (b, g, True, True), (g, a, True, True)


def matmul(a, b, ta=False, tb=False):
    """2-D product op(a) @ op(b); op transposes when the flag is set."""
    a, b = _as_tensor(a), _as_tensor(b)
    ka = a.shape[0] if ta else a.shape[1]
    kb = b.shape[1] if tb else b.shape[0]
    if a.ndim != 2 or b.ndim != 2 or ka != kb:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} (ta={ta}) and {b.shape} (tb={tb})")
    out = Tensor(kernels.matmul(a.data, b.data, ta, tb), requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            ga_args, gb_args = _matmul_vjp_args(ta, tb, g, a, b)
            ga = matmul(*ga_args) if a.requires_grad else None
            gb = matmul(*gb_args) if b.requires_grad else None
            return (ga, gb)

        _record(out, (a, b), vjp)
    return out


def bmm(a, b, ta=False, tb=False):
    """Batched 3-D product out[i] = op(a[i]) @ op(b[i]). Same vjp table as matmul."""
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[0] != b.shape[0]:
        raise ShapeError(f"bmm: incompatible shapes {a.shape} and {b.shape}")
    lhs = a.data.transpose(0, 2, 1) if ta else a.data
    rhs = b.data.transpose(0, 2, 1) if tb else b.data
    out = Tensor(np.matmul(lhs, rhs), requires_grad=_rg(a, b))
    if out.requires_grad:
        def vjp(g):
            ga_args, gb_args = _matmul_vjp_args(ta, tb, g, a, b)
            ga = bmm(*ga_args) if a.requires_grad else None
            gb = bmm(*gb_args) if b.requires_grad else None
            return (ga, gb)

        _record(out, (a, b), vjp)
    return out


def linear(x, w, b):
    """Dense layer y = x @ w.T + b with w shaped [out, in] and b [out]."""
    x, w, b = _as_tensor(x), _as_tensor(w), _as_tensor(b)
    if x.ndim != 2 or w.ndim != 2 or x.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {x.shape} incompatible with weight {w.shape}")
    out = Tensor(kernels.linear_forward(x.data, w.data, b.data), requires_grad=_rg(x, w, b))
    if out.requires_grad:
        def vjp(g):
            gx = matmul(g, w) if x.requires_grad else None
            gw = matmul(g, x, ta=True) if w.requires_grad else None
            gb = bsum(g, axis=0) if b.requires_grad else None
            return (gx, gw, gb)
        _record(out, (x, w, b), vjp)
    return out


def leaky_relu(x, slope=0.2):
    if not 0.0 < slope < 1.0:
        raise ContractError(f"leaky_relu slope must be in (0,1), got {slope}")
    x = _as_tensor(x)
    out = Tensor(kernels.leaky_relu(x.data, slope), requires_grad=x.requires_grad)
    if out.requires_grad:
        xdata = x.data

        def vjp(g):
            return (_leaky_mask(g, xdata, slope),)

        _record(out, (x,), vjp)
    return out


def _leaky_mask(g, xdata, slope):
    """g * (xdata > 0 ? 1 : slope); the mask is constant, so this rule is
    closed under differentiation (the second derivative is zero a.e.)."""
    g = _as_tensor(g)
    out = Tensor(kernels.leaky_relu_grad(g.data, xdata, slope), requires_grad=g.requires_grad)
    if out.requires_grad:
        def vjp(gg):
            return (_leaky_mask(gg, xdata, slope),)
        _record(out, (g,), vjp)
    return out


def exp(x):
    x = _as_tensor(x)
    out = Tensor(np.exp(x.data), requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (mul(g, out),)
        _record(out, (x,), vjp)
    return out


def log(x):
    x = _as_tensor(x)
    out = Tensor(np.log(x.data), requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (div(g, x),)
        _record(out, (x,), vjp)
    return out


def sqrt(x):
    x = _as_tensor(x)
    out = Tensor(np.sqrt(x.data), requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (div(g, mul(out, constant(np.float32(2.0)))),)
        _record(out, (x,), vjp)
    return out


def sigmoid(x):
    x = _as_tensor(x)
    data = np.empty_like(x.data)
    pos = x.data >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x.data[pos]))
    ex = np.exp(x.data[~pos])
    data[~pos] = ex / (1.0 + ex)
    out = Tensor(data, requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (mul(g, mul(out, sub(constant(np.float32(1.0)), out))),)
        _record(out, (x,), vjp)
    return out


def softplus(x):
    """log(1 + e^x), numerically stable; derivative is sigmoid(x)."""
    x = _as_tensor(x)
    out = Tensor(np.logaddexp(np.float32(0.0), x.data), requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (mul(g, sigmoid(x)),)
        _record(out, (x,), vjp)
    return out


def _norm_axis(axis, ndim):
    if axis is None:
        return None
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(a % ndim for a in axis))


def bsum(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    axis = _norm_axis(axis, x.ndim)
    out = Tensor(x.data.sum(axis=axis, keepdims=keepdims, dtype=np.float32),
                 requires_grad=x.requires_grad)
    if out.requires_grad:
        xshape = x.shape

        def vjp(g):
            if axis is None:
                kept = (1,) * len(xshape)
            elif keepdims:
                kept = g.shape
            else:
                kept = tuple(1 if i in axis else s for i, s in enumerate(xshape))
            return (expand(reshape(g, kept), xshape),)

        _record(out, (x,), vjp)
    return out


def mean(x, axis=None, keepdims=False):
    x = _as_tensor(x)
    naxis = _norm_axis(axis, x.ndim)
    count = x.data.size if naxis is None else int(np.prod([x.shape[i] for i in naxis]))
    return div(bsum(x, axis=axis, keepdims=keepdims), constant(np.float32(count)))


def expand(x, shape):
    x = _as_tensor(x)
    out = Tensor(np.ascontiguousarray(np.broadcast_to(x.data, shape)),
                 requires_grad=x.requires_grad)
    if out.requires_grad:
        def vjp(g):
            return (_sum_to(g, x.shape),)
        _record(out, (x,), vjp)
    return out


def reshape(x, shape):
    x = _as_tensor(x)
    out = Tensor(x.data.reshape(shape), requires_grad=x.requires_grad)
    if out.requires_grad:
        xshape = x.shape

        def vjp(g):
            return (reshape(g, xshape),)

        _record(out, (x,), vjp)
    return out


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                 requires_grad=_rg(*tensors))
    if out.requires_grad:
        offsets = np.cumsum([0] + [t.shape[axis] for t in tensors])

        def vjp(g):
            return tuple(
                slice_axis(g, axis, int(offsets[i]), int(offsets[i + 1]))
                if t.requires_grad else None
                for i, t in enumerate(tensors)
            )

        _record(out, tuple(tensors), vjp)
    return out


def slice_axis(x, axis, start, stop):
    x = _as_tensor(x)
    index = tuple(slice(None) if i != axis else slice(start, stop) for i in range(x.ndim))
    out = Tensor(x.data[index], requires_grad=x.requires_grad)
    if out.requires_grad:
        after = x.shape[axis] - stop

        def vjp(g):
            return (pad_axis(g, axis, start, after),)

        _record(out, (x,), vjp)
    return out


def pad_axis(x, axis, before, after):
    x = _as_tensor(x)
    widths = [(0, 0)] * x.ndim
    widths[axis] = (before, after)
    out = Tensor(np.pad(x.data, widths), requires_grad=x.requires_grad)
    if out.requires_grad:
        start, stop = before, before + x.shape[axis]

        def vjp(g):
            return (slice_axis(g, axis, start, stop),)

        _record(out, (x,), vjp)
    return out


# ---------------------------------------------------------------------------
# Backward passes.
# ---------------------------------------------------------------------------


def _walk(tape, output, create_graph):
    if output.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {output.shape}")
    adjoints = {id(output): Tensor(np.ones(output.shape, dtype=np.float32))}
    nodes = tape.nodes[:]
    with _use_tape(tape, recording=create_graph):
        for node in reversed(nodes):
            g = adjoints.pop(id(node.out), None)
            if g is None:
                continue
            for parent, contrib in zip(node.parents, node.vjp(g)):
                if contrib is None or not parent.requires_grad:
                    continue
                prev = adjoints.get(id(parent))
                adjoints[id(parent)] = contrib if prev is None else add(prev, contrib)
    return adjoints


def backward(tape, loss, params):
    """Accumulate d(loss)/d(p) into p.grad for every p in params.

    Only the listed parameters receive gradients; adjoints for everything
    else are discarded, which is what keeps generator and critic updates
    from leaking into one another.
    """
    adjoints = _walk(tape, loss, create_graph=False)
    for p in params:
        a = adjoints.get(id(p))
        if a is None:
            continue
        if p.grad is None:
            p.grad = a.data.copy()
        else:
            p.grad += a.data


def grad(tape, output, wrt, create_graph=False):
    """Return d(output)/d(t) for each t in wrt as Tensors.

    With create_graph=True the backward computation is recorded on the same
    tape, so the returned tensors can enter another differentiable expression
    (second-order gradients, e.g. a gradient penalty).
    """
    adjoints = _walk(tape, output, create_graph=create_graph)
    return [adjoints.get(id(t)) or Tensor(np.zeros(t.shape, dtype=np.float32)) for t in wrt]
