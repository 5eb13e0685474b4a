"""Reverse-mode automatic differentiation over numpy arrays.

Every loss in this package is a scalar built from a small fixed set of array
operations. Each forward pass links `DiffValue` nodes into an explicit
computation record; `DiffValue.backward()` walks it once in reverse and
accumulates gradients into every node that requires them.

A computation record and its nodes must stay on one thread per
forward/backward pass; independent passes may run concurrently because there
is no global tape.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

Array = np.ndarray


def _as_array(value) -> Array:
    arr = np.asarray(value, dtype=np.float64)
    return arr


class DiffValue:
    """A value plus a gradient accumulator and a link into the record.

    `provenance` is `(op_name, parent_nodes)` for derived nodes and None for
    leaves; it is what `backward` traverses.
    """

    __slots__ = ("value", "gradient", "requires_grad", "_op", "_parents", "_backward_fn")

    def __init__(self, value, requires_grad: bool = False, *,
                 _op: str | None = None,
                 _parents: tuple["DiffValue", ...] = (),
                 _backward_fn: Callable[[Array], None] | None = None):
        self.value = _as_array(value)
        self.gradient: Array | None = None
        self.requires_grad = bool(requires_grad)
        self._op = _op
        self._parents = _parents
        self._backward_fn = _backward_fn

    @property
    def provenance(self):
        return None if self._op is None else (self._op, self._parents)

    @property
    def shape(self):
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    def _accumulate(self, grad: Array) -> None:
        if self.gradient is None:
            self.gradient = np.array(np.broadcast_to(grad, self.value.shape))
        else:
            self.gradient += grad

    def zero_gradient(self) -> None:
        self.gradient = None

    def backward(self) -> None:
        """Reverse pass from a scalar node; accumulates into `.gradient`."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar loss node")
        order: list[DiffValue] = []
        seen: set[int] = set()
        stack: list[tuple[DiffValue, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in seen:
                    stack.append((parent, False))
        self._accumulate(np.ones_like(self.value))
        for node in reversed(order):
            if node._backward_fn is not None and node.gradient is not None:
                node._backward_fn(node.gradient)

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        flag = "param" if self.requires_grad and self._op is None else (self._op or "const")
        return f"DiffValue({flag}, shape={self.value.shape})"


def constant(value) -> DiffValue:
    return DiffValue(value, requires_grad=False)


def parameter(value) -> DiffValue:
    return DiffValue(value, requires_grad=True)


def coerce(x) -> DiffValue:
    return x if isinstance(x, DiffValue) else constant(x)


def stop_gradient(x) -> DiffValue:
    """Detach: same value, no path back into the record."""
    x = coerce(x)
    return constant(x.value)


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape` (inverse of numpy broadcasting)."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _node(value: Array, op: str, parents: Sequence[DiffValue],
          backward_fn: Callable[[Array], None]) -> DiffValue:
    needs = any(p.requires_grad for p in parents)
    if not needs:
        return DiffValue(value)
    return DiffValue(value, requires_grad=True, _op=op,
                     _parents=tuple(parents), _backward_fn=backward_fn)


# -- arithmetic ---------------------------------------------------------

def add(a, b) -> DiffValue:
    a, b = coerce(a), coerce(b)
    out_value = a.value + b.value

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.value.shape))

    return _node(out_value, "add", (a, b), backward)


def mul(a, b) -> DiffValue:
    a, b = coerce(a), coerce(b)
    with np.errstate(invalid="ignore"):
        out_value = a.value * b.value

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.value, b.value.shape))

    return _node(out_value, "mul", (a, b), backward)


def div(a, b) -> DiffValue:
    a, b = coerce(a), coerce(b)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_value = a.value / b.value

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.value, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.value / (b.value * b.value), b.value.shape))

    return _node(out_value, "div", (a, b), backward)


def matmul(a, b) -> DiffValue:
    a, b = coerce(a), coerce(b)
    out_value = a.value @ b.value

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(g @ b.value.T)
        if b.requires_grad:
            b._accumulate(a.value.T @ g)

    return _node(out_value, "matmul", (a, b), backward)


# -- elementwise nonlinearities -----------------------------------------

def exp(x) -> DiffValue:
    x = coerce(x)
    with np.errstate(over="ignore"):
        out_value = np.exp(x.value)

    def backward(g: Array) -> None:
        x._accumulate(g * out_value)

    return _node(out_value, "exp", (x,), backward)


def log(x) -> DiffValue:
    x = coerce(x)
    with np.errstate(divide="ignore", invalid="ignore"):
        out_value = np.log(x.value)

    def backward(g: Array) -> None:
        x._accumulate(g / x.value)

    return _node(out_value, "log", (x,), backward)


def sqrt(x) -> DiffValue:
    x = coerce(x)
    out_value = np.sqrt(x.value)

    def backward(g: Array) -> None:
        x._accumulate(g * 0.5 / out_value)

    return _node(out_value, "sqrt", (x,), backward)


def tanh(x) -> DiffValue:
    x = coerce(x)
    out_value = np.tanh(x.value)

    def backward(g: Array) -> None:
        x._accumulate(g * (1.0 - out_value * out_value))

    return _node(out_value, "tanh", (x,), backward)


def power(x, exponent: float) -> DiffValue:
    x = coerce(x)
    out_value = np.power(x.value, exponent)

    def backward(g: Array) -> None:
        x._accumulate(g * exponent * np.power(x.value, exponent - 1.0))

    return _node(out_value, "power", (x,), backward)


def absolute(x) -> DiffValue:
    # subgradient 0 at the kink
    x = coerce(x)
    out_value = np.abs(x.value)

    def backward(g: Array) -> None:
        x._accumulate(g * np.sign(x.value))

    return _node(out_value, "abs", (x,), backward)


def maximum(a, b) -> DiffValue:
    """Elementwise max; ties send the gradient to `a`."""
    a, b = coerce(a), coerce(b)
    take_a = a.value >= b.value
    out_value = np.where(take_a, a.value, b.value)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.value.shape))

    return _node(out_value, "maximum", (a, b), backward)


def minimum(a, b) -> DiffValue:
    a, b = coerce(a), coerce(b)
    take_a = a.value <= b.value
    out_value = np.where(take_a, a.value, b.value)

    def backward(g: Array) -> None:
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * take_a, a.value.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * ~take_a, b.value.shape))

    return _node(out_value, "minimum", (a, b), backward)


def relu(x) -> DiffValue:
    return maximum(x, 0.0)


# -- reductions and shape ops -------------------------------------------

def vsum(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = coerce(x)
    out_value = np.sum(x.value, axis=axis, keepdims=keepdims)

    def backward(g: Array) -> None:
        if axis is None:
            x._accumulate(np.broadcast_to(g, x.value.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        x._accumulate(np.broadcast_to(g, x.value.shape).copy())

    return _node(out_value, "sum", (x,), backward)


def vmean(x, axis=None, keepdims: bool = False) -> DiffValue:
    x = coerce(x)
    count = x.value.size if axis is None else np.prod(
        [x.value.shape[a] for a in (axis if isinstance(axis, tuple) else (axis,))])
    return mul(vsum(x, axis=axis, keepdims=keepdims), 1.0 / float(count))


def reshape(x, shape) -> DiffValue:
    x = coerce(x)
    out_value = x.value.reshape(shape)

    def backward(g: Array) -> None:
        x._accumulate(g.reshape(x.value.shape))

    return _node(out_value, "reshape", (x,), backward)


def transpose_last2(x) -> DiffValue:
    x = coerce(x)
    out_value = np.swapaxes(x.value, -1, -2)

    def backward(g: Array) -> None:
        x._accumulate(np.swapaxes(g, -1, -2))

    return _node(out_value, "transpose", (x,), backward)


def concat(parts: Sequence, axis: int = 0) -> DiffValue:
    nodes = [coerce(p) for p in parts]
    out_value = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    offsets = np.cumsum([0] + sizes)

    def backward(g: Array) -> None:
        for node, start, stop in zip(nodes, offsets[:-1], offsets[1:]):
            if node.requires_grad:
                index = [slice(None)] * g.ndim
                index[axis] = slice(start, stop)
                node._accumulate(g[tuple(index)])

    return _node(out_value, "concat", tuple(nodes), backward)


def take_rows(x, indices) -> DiffValue:
    """Select rows of a 2-D array; duplicates allowed (gradients add)."""
    x = coerce(x)
    idx = np.asarray(indices, dtype=np.intp)
    out_value = x.value[idx]

    def backward(g: Array) -> None:
        acc = np.zeros_like(x.value)
        np.add.at(acc, idx, g)
        x._accumulate(acc)

    return _node(out_value, "take_rows", (x,), backward)


def pad_hw(x, pad: int) -> DiffValue:
    """Zero-pad the first two axes of an (H, W, C) array."""
    x = coerce(x)
    widths = ((pad, pad), (pad, pad)) + ((0, 0),) * (x.value.ndim - 2)
    out_value = np.pad(x.value, widths)

    def backward(g: Array) -> None:
        sl = (slice(pad, g.shape[0] - pad), slice(pad, g.shape[1] - pad))
        x._accumulate(g[sl])

    return _node(out_value, "pad_hw", (x,), backward)


def conv3x3(x, weight, bias) -> DiffValue:
    """Same-padding 3x3 convolution over an (H, W, C_in) array.

    `weight` is (9 * C_in, C_out) with the kernel window flattened
    row-major; fused into one node so the input gradient is nine shifted
    slice accumulations instead of a generic scatter.
    """
    x, weight, bias = coerce(x), coerce(weight), coerce(bias)
    h, w, c_in = x.value.shape
    c_out = weight.value.shape[1]
    padded = np.pad(x.value, ((1, 1), (1, 1), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(padded, (3, 3), axis=(0, 1))
    # -> (H, W, C_in, 3, 3); reorder so the flattened layout is (dr, dc, c_in)
    patches = windows.transpose(0, 1, 3, 4, 2).reshape(h * w, 9 * c_in)
    out_value = (patches @ weight.value + bias.value).reshape(h, w, c_out)

    def backward(g: Array) -> None:
        g2 = g.reshape(h * w, c_out)
        if weight.requires_grad:
            weight._accumulate(patches.T @ g2)
        if bias.requires_grad:
            bias._accumulate(g2.sum(axis=0))
        if x.requires_grad:
            gp = (g2 @ weight.value.T).reshape(h, w, 3, 3, c_in)
            gx = np.zeros((h + 2, w + 2, c_in))
            for dr in range(3):
                for dc in range(3):
                    gx[dr:dr + h, dc:dc + w] += gp[:, :, dr, dc, :]
            x._accumulate(gx[1:-1, 1:-1])

    return _node(out_value, "conv3x3", (x, weight, bias), backward)


# -- fused numerical ops ------------------------------------------------

def softmax(x, axis: int = -1) -> DiffValue:
    x = coerce(x)
    shifted = x.value - np.max(x.value, axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_value = e / np.sum(e, axis=axis, keepdims=True)

    def backward(g: Array) -> None:
        inner = np.sum(g * out_value, axis=axis, keepdims=True)
        x._accumulate(out_value * (g - inner))

    return _node(out_value, "softmax", (x,), backward)


def l2norm(x, axis: int = -1, keepdims: bool = False) -> DiffValue:
    """Euclidean norm along `axis`; gradient guarded at exactly-zero vectors."""
    x = coerce(x)
    out_value = np.sqrt(np.sum(x.value * x.value, axis=axis, keepdims=keepdims))

    def backward(g: Array) -> None:
        norms = out_value if keepdims else np.expand_dims(out_value, axis)
        safe = np.where(norms > 0.0, norms, 1.0)
        gg = g if keepdims else np.expand_dims(g, axis)
        x._accumulate(gg * x.value / safe)

    return _node(out_value, "l2norm", (x,), backward)
