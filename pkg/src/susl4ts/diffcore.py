"""Small reverse-mode autodiff engine over numpy arrays.

Every op returns an :class:`Array`. When a :class:`Tape` is active and at
least one input requires a gradient, the op is recorded on the tape together
with a closure that pushes the output gradient back to its inputs. Because
nodes are appended in creation order, walking the tape backwards is already a
reverse topological order.

Broadcasting is deliberately limited to adding a bias over leading axes.
"""
from __future__ import annotations

import threading

import numpy as np

__all__ = [
    "Array", "Tape", "ShapeError", "NumericalError", "backward", "constant",
    "matmul", "conv1d", "conv_transpose1d", "add", "sub", "mul", "neg", "scale",
    "relu", "softplus", "exp", "log", "softmax", "log_softmax", "sum", "mean",
    "concat", "reshape", "take", "conv1d_output_length",
    "conv_transpose1d_output_length",
]


class ShapeError(ValueError):
    def __init__(self, op, *shapes, detail=""):
        self.op = op
        self.shapes = shapes
        msg = f"{op}: incompatible shapes " + " and ".join(str(s) for s in shapes)
        if detail:
            msg += f" ({detail})"
        super().__init__(msg)


class NumericalError(FloatingPointError):
    """Raised when an op produces a non-finite value from finite inputs."""


_state = threading.local()


def _active_tape():
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Array:
    """A dense float array plus the bookkeeping needed for backprop."""

    __slots__ = ("value", "grad", "requires_grad", "op", "_parents", "_backward")
    __array_priority__ = 100  # make ndarray <op> Array defer to Array

    def __init__(self, value, requires_grad=False, dtype=None):
        value = np.asarray(value, dtype=dtype if dtype is not None else None)
        if value.dtype.kind != "f":
            value = value.astype(np.float64)
        self.value = value
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    def __repr__(self):
        return f"Array(shape={self.shape}, op={self.op!r})"

    def numpy(self):
        return self.value

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

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


def constant(value, dtype=None):
    return value if isinstance(value, Array) else Array(value, dtype=dtype)


class Tape:
    """Records ops executed inside ``with Tape() as tape:``.

    Tapes are thread-local; two threads may each run their own tape.
    """

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc):
        _state.stack.pop()
        return False

    def gradient(self, loss, sources):
        return backward(self, loss, sources)


def _make(value, op, parents, backward_fn):
    """Wrap an op result, check it is finite, and record it if needed."""
    if not np.all(np.isfinite(value)):
        if all(np.all(np.isfinite(p.value)) for p in parents):
            raise NumericalError(
                f"{op}: non-finite output from finite inputs "
                f"(input shapes {[p.shape for p in parents]})"
            )
    out = Array(value)
    out.op = op
    tape = _active_tape()
    if tape is not None and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward_fn
        tape.nodes.append(out)
    return out


def _accumulate(node, g):
    if not node.requires_grad:
        return
    if node.grad is None:
        node.grad = np.array(g, dtype=node.value.dtype, copy=True)
    else:
        node.grad += g


def backward(tape, loss, sources=None):
    """Backpropagate from a scalar ``loss``.

    Returns the gradient for each array in ``sources`` (zeros when the loss
    does not depend on it). Gradients on intermediate nodes are cleared
    afterwards so the tape can be discarded cheaply.
    """
    if loss.value.size != 1:
        raise ShapeError("backward", loss.shape, detail="loss must be a scalar")
    for node in tape.nodes:
        node.grad = None
    if sources is not None:
        for s in sources:
            s.grad = None
    if not loss.requires_grad:
        return [np.zeros_like(s.value) for s in (sources or [])]
    loss.grad = np.ones_like(loss.value)
    for node in reversed(tape.nodes):
        if node.grad is None:
            continue
        node._backward(node.grad)
    grads = None
    if sources is not None:
        grads = [s.grad if s.grad is not None else np.zeros_like(s.value) for s in sources]
    for node in tape.nodes:
        node.grad = None
    return grads


# ---------------------------------------------------------------- elementwise


def _binary_operands(a, b):
    a = constant(a)
    b = constant(b)
    return a, b


def _bias_axes(op, big, small):
    """Axes that ``small`` is broadcast over when added to ``big``."""
    if big.shape == small.shape:
        return None
    if small.ndim < big.ndim and big.shape[big.ndim - small.ndim:] == small.shape:
        return tuple(range(big.ndim - small.ndim))
    if small.ndim == 0:
        return tuple(range(big.ndim))
    raise ShapeError(op, big.shape, small.shape)


def add(a, b):
    a, b = _binary_operands(a, b)
    if a.ndim >= b.ndim:
        axes_b, axes_a = _bias_axes("add", a, b), None
    else:
        axes_a, axes_b = _bias_axes("add", b, a), None

    def _back(g):
        _accumulate(a, g if axes_a is None else g.sum(axis=axes_a))
        _accumulate(b, g if axes_b is None else g.sum(axis=axes_b))

    return _make(a.value + b.value, "add", (a, b), _back)


def neg(a):
    a = constant(a)
    return _make(-a.value, "neg", (a,), lambda g: _accumulate(a, -g))


def sub(a, b):
    return add(a, neg(b))


def scale(a, c):
    """Multiply by a python scalar (not differentiated)."""
    a = constant(a)
    c = float(c)
    return _make(a.value * c, "scale", (a,), lambda g: _accumulate(a, g * c))


def mul(a, b):
    if np.isscalar(b):
        return scale(a, b)
    if np.isscalar(a):
        return scale(b, a)
    a, b = _binary_operands(a, b)
    if a.shape != b.shape:
        raise ShapeError("mul", a.shape, b.shape)

    def _back(g):
        _accumulate(a, g * b.value)
        _accumulate(b, g * a.value)

    return _make(a.value * b.value, "mul", (a, b), _back)


def relu(a):
    a = constant(a)
    mask = a.value > 0  # relu'(0) = 0
    return _make(a.value * mask, "relu", (a,),
                 lambda g: _accumulate(a, g * mask))


def softplus(a):
    a = constant(a)
    v = a.value
    out = np.logaddexp(0.0, v).astype(v.dtype)

    def _back(g):
        _accumulate(a, g * (0.5 * (1.0 + np.tanh(0.5 * v))))

    return _make(out, "softplus", (a,), _back)


def exp(a):
    a = constant(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.value)
    return _make(out, "exp", (a,), lambda g: _accumulate(a, g * out))


def log(a):
    a = constant(a)
    if np.any(a.value <= 0):
        raise NumericalError("log: non-positive input")
    return _make(np.log(a.value), "log", (a,), lambda g: _accumulate(a, g / a.value))


def softmax(a, axis=-1):
    a = constant(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def _back(g):
        _accumulate(a, out * (g - (g * out).sum(axis=axis, keepdims=True)))

    return _make(out, "softmax", (a,), _back)


def log_softmax(a, axis=-1):
    a = constant(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    out = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

    def _back(g):
        p = np.exp(out)
        _accumulate(a, g - p * g.sum(axis=axis, keepdims=True))

    return _make(out, "log_softmax", (a,), _back)


# ----------------------------------------------------------------- reductions


def sum(a, axis=None):  # noqa: A001 - mirrors numpy naming
    a = constant(a)
    out = np.sum(a.value, axis=axis)

    def _back(g):
        if axis is not None:
            g = np.expand_dims(g, axis)
        _accumulate(a, np.broadcast_to(g, a.shape))

    return _make(np.asarray(out), "sum", (a,), _back)


def mean(a, axis=None):
    a = constant(a)
    n = a.value.size if axis is None else a.shape[axis]
    return scale(sum(a, axis=axis), 1.0 / n)


# ------------------------------------------------------------------ structure


def reshape(a, shape):
    a = constant(a)
    try:
        out = a.value.reshape(shape)
    except ValueError:
        raise ShapeError("reshape", a.shape, tuple(shape)) from None
    return _make(out, "reshape", (a,), lambda g: _accumulate(a, g.reshape(a.shape)))


def concat(arrays, axis=-1):
    arrays = [constant(x) for x in arrays]
    ref = arrays[0].shape
    ax = axis % len(ref)
    for x in arrays[1:]:
        if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError("concat", ref, x.shape)
    out = np.concatenate([x.value for x in arrays], axis=ax)
    bounds = np.cumsum([0] + [x.shape[ax] for x in arrays])

    def _back(g):
        for x, lo, hi in zip(arrays, bounds[:-1], bounds[1:]):
            idx = [slice(None)] * g.ndim
            idx[ax] = slice(lo, hi)
            _accumulate(x, g[tuple(idx)])

    return _make(out, "concat", tuple(arrays), _back)


def take(a, indices, axis=0):
    """Gather along ``axis``; repeated indices accumulate in the gradient."""
    a = constant(a)
    indices = np.asarray(indices, dtype=np.intp)
    out = np.take(a.value, indices, axis=axis)

    def _back(g):
        if not a.requires_grad:
            return
        full = np.zeros_like(a.value)
        moved = np.moveaxis(full, axis, 0)
        np.add.at(moved, indices, np.moveaxis(g, axis, 0))
        _accumulate(a, full)

    return _make(out, "take", (a,), _back)


# ------------------------------------------------------------ linear algebra


def matmul(a, b):
    a, b = _binary_operands(a, b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError("matmul", a.shape, b.shape)

    def _back(g):
        if a.requires_grad:
            _accumulate(a, g @ b.value.T)
        if b.requires_grad:
            _accumulate(b, a.value.T @ g)

    return _make(a.value @ b.value, "matmul", (a, b), _back)


def conv1d_output_length(length, kernel_size, stride=1, padding=0):
    return (length + 2 * padding - kernel_size) // stride + 1


def conv_transpose1d_output_length(length, kernel_size, stride=1, padding=0, output_padding=0):
    return (length - 1) * stride - 2 * padding + kernel_size + output_padding


def conv1d(x, weight, bias=None, stride=1, padding=0):
    """Cross-correlation of ``x`` (batch, in_ch, L) with ``weight`` (out_ch, in_ch, K)."""
    x, weight = constant(x), constant(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[1]:
        raise ShapeError("conv1d", x.shape, weight.shape)
    n, _, length = x.shape
    out_ch, _, k = weight.shape
    out_len = conv1d_output_length(length, k, stride, padding)
    if out_len < 1:
        raise ShapeError("conv1d", x.shape, weight.shape, detail="kernel longer than padded input")
    xp = np.pad(x.value, ((0, 0), (0, 0), (padding, padding)))
    span = stride * (out_len - 1) + 1
    w = weight.value
    out = np.zeros((n, out_ch, out_len), dtype=np.result_type(x.value, w))
    for j in range(k):
        out += np.matmul(w[:, :, j], xp[:, :, j:j + span:stride])
    parents = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (out_ch,):
            raise ShapeError("conv1d", weight.shape, bias.shape, detail="bias")
        out += bias.value[None, :, None]
        parents = (x, weight, bias)

    def _back(g):
        if x.requires_grad:
            gxp = np.zeros_like(xp)
            for j in range(k):
                gxp[:, :, j:j + span:stride] += np.matmul(w[:, :, j].T, g)
            _accumulate(x, gxp[:, :, padding:padding + length])
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, :, j] = np.einsum("nol,nil->oi", g, xp[:, :, j:j + span:stride], optimize=True)
            _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2)))

    return _make(out, "conv1d", parents, _back)


def conv_transpose1d(x, weight, bias=None, stride=1, padding=0, output_padding=0):
    """Transposed convolution; ``weight`` is (in_ch, out_ch, K).

    This is the adjoint of :func:`conv1d` with the same stride/padding, so a
    stride-2 conv followed by its transpose (with ``output_padding`` chosen for
    the original parity) restores the input length.
    """
    x, weight = constant(x), constant(weight)
    if x.ndim != 3 or weight.ndim != 3 or x.shape[1] != weight.shape[0]:
        raise ShapeError("conv_transpose1d", x.shape, weight.shape)
    if not 0 <= output_padding < stride:
        raise ShapeError("conv_transpose1d", x.shape, weight.shape, detail="output_padding >= stride")
    n, _, length = x.shape
    _, out_ch, k = weight.shape
    out_len = conv_transpose1d_output_length(length, k, stride, padding, output_padding)
    if out_len < 1:
        raise ShapeError("conv_transpose1d", x.shape, weight.shape)
    span = stride * (length - 1) + 1
    full_len = max(span + k - 1, padding + out_len)
    w = weight.value
    full = np.zeros((n, out_ch, full_len), dtype=np.result_type(x.value, w))
    for j in range(k):
        full[:, :, j:j + span:stride] += np.matmul(w[:, :, j].T, x.value)
    out = full[:, :, padding:padding + out_len].copy()
    parents = (x, weight)
    if bias is not None:
        bias = constant(bias)
        if bias.shape != (out_ch,):
            raise ShapeError("conv_transpose1d", weight.shape, bias.shape, detail="bias")
        out += bias.value[None, :, None]
        parents = (x, weight, bias)

    def _back(g):
        gfull = np.zeros((n, out_ch, full_len), dtype=g.dtype)
        gfull[:, :, padding:padding + out_len] = g
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            for j in range(k):
                gx += np.matmul(w[:, :, j], gfull[:, :, j:j + span:stride])
            _accumulate(x, gx)
        if weight.requires_grad:
            gw = np.empty_like(w)
            for j in range(k):
                gw[:, :, j] = np.einsum("nil,nol->io", x.value, gfull[:, :, j:j + span:stride], optimize=True)
            _accumulate(weight, gw)
        if bias is not None:
            _accumulate(bias, g.sum(axis=(0, 2)))

    return _make(out, "conv_transpose1d", parents, _back)
