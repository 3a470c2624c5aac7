"""Dense float64 tensors with reverse-mode automatic differentiation.

Every value is stored as a row-major numpy float64 array.  Operations on
tensors that require gradients record their parents and a backward closure;
``backward()`` on a scalar root replays the tape in reverse topological
order (creation order) and accumulates gradients into every reachable leaf.

Gradients accumulate additively across backward calls.  Callers zero them
explicitly with ``zero_grad``, which is what gradient accumulation over
micro-batches relies on.
"""

from __future__ import annotations

import contextlib

import numpy as np

# Finite stand-in for -inf in masked logits and log-space lattices.  Keeps
# every forward value finite while still underflowing to exactly 0 in exp.
NEG_FILL = -1.0e30

_grad_enabled = True


@contextlib.contextmanager
def no_grad():
    """Disable tape construction inside the block (inference, finite diffs)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


class Tensor:
    """A node in the computation tape.

    Leaves (no backward closure) are parameters or inputs; interior nodes
    remember their parents and how to push gradients back to them.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = ()
        self._backward = None

    # -- construction -----------------------------------------------------

    @staticmethod
    def _result(data, parents, backward):
        out = Tensor.__new__(Tensor)
        out.data = data
        out.grad = None
        if _grad_enabled and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = parents
            out._backward = backward
        else:
            out.requires_grad = False
            out._parents = ()
            out._backward = None
        return out

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- elementwise arithmetic -------------------------------------------

    def __add__(self, other):
        if isinstance(other, Tensor):
            out_data = self.data + other.data
            a, b = self, other

            def bw(out):
                if a.requires_grad:
                    _accum(a, _unbroadcast(out.grad, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(out.grad, b.data.shape))

            return Tensor._result(out_data, (a, b), bw)
        # constant operand: no gradient path through it
        const = np.asarray(other, dtype=np.float64)
        a = self

        def bwc(out):
            _accum(a, _unbroadcast(out.grad, a.data.shape))

        return Tensor._result(a.data + const, (a,), bwc)

    __radd__ = __add__

    def __neg__(self):
        a = self

        def bw(out):
            _accum(a, -out.grad)

        return Tensor._result(-a.data, (a,), bw)

    def __sub__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def bw(out):
                if a.requires_grad:
                    _accum(a, _unbroadcast(out.grad, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(-out.grad, b.data.shape))

            return Tensor._result(a.data - b.data, (a, b), bw)
        return self + (-np.asarray(other, dtype=np.float64))

    def __rsub__(self, other):
        return (-self) + other

    def __mul__(self, other):
        if isinstance(other, Tensor):
            a, b = self, other

            def bw(out):
                if a.requires_grad:
                    _accum(a, _unbroadcast(out.grad * b.data, a.data.shape))
                if b.requires_grad:
                    _accum(b, _unbroadcast(out.grad * a.data, b.data.shape))

            return Tensor._result(a.data * b.data, (a, b), bw)
        # scale by constant scalar or fixed array (dropout masks etc.)
        const = np.asarray(other, dtype=np.float64)
        a = self

        def bwc(out):
            _accum(a, _unbroadcast(out.grad * const, a.data.shape))

        return Tensor._result(a.data * const, (a,), bwc)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            return self * other ** -1.0
        return self * (1.0 / np.asarray(other, dtype=np.float64))

    def __rtruediv__(self, other):
        return self ** -1.0 * other

    def __pow__(self, exponent: float):
        p = float(exponent)
        a = self

        def bw(out):
            _accum(a, out.grad * p * a.data ** (p - 1.0))

        return Tensor._result(a.data ** p, (a,), bw)

    # -- matrix product ---------------------------------------------------

    def __matmul__(self, other):
        a, b = self, other
        if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else 0]:
            raise ShapeError(
                f"matmul inner dimensions disagree: {a.data.shape} x {b.data.shape}"
            )
        out_data = np.matmul(a.data, b.data)

        def bw(out):
            g = out.grad
            if a.requires_grad:
                ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
                _accum(a, _unbroadcast(ga, a.data.shape))
            if b.requires_grad:
                gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
                _accum(b, _unbroadcast(gb, b.data.shape))

        return Tensor._result(out_data, (a, b), bw)

    # -- reductions -------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.sum(axis=axis, keepdims=keepdims)

        def bw(out):
            _accum(a, _expand_reduced(out.grad, a.data.shape, axis, keepdims))

        return Tensor._result(out_data, (a,), bw)

    def mean(self, axis=None, keepdims: bool = False):
        count = self.data.size if axis is None else _axis_count(self.data.shape, axis)
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / count)

    def max(self, axis=None, keepdims: bool = False):
        a = self
        out_data = a.data.max(axis=axis, keepdims=keepdims)

        def bw(out):
            expanded = _expand_reduced(out.grad, a.data.shape, axis, keepdims)
            maxed = _expand_reduced(out_data if keepdims or axis is None
                                    else a.data.max(axis=axis, keepdims=True),
                                    a.data.shape, axis, True)
            mask = (a.data == maxed)
            counts = mask.sum(axis=axis, keepdims=True) if axis is not None else mask.sum()
            _accum(a, expanded * mask / counts)

        return Tensor._result(out_data, (a,), bw)

    # -- nonlinearities ---------------------------------------------------

    def relu(self):
        a = self
        # derivative at exactly 0 is 0 (deterministic tie-break)
        mask = a.data > 0.0

        def bw(out):
            _accum(a, out.grad * mask)

        return Tensor._result(a.data * mask, (a,), bw)

    def sigmoid(self):
        a = self
        s = _sigmoid(a.data)

        def bw(out):
            _accum(a, out.grad * s * (1.0 - s))

        return Tensor._result(s, (a,), bw)

    def swish(self):
        a = self
        s = _sigmoid(a.data)
        out_data = a.data * s

        def bw(out):
            _accum(a, out.grad * (s + out_data * (1.0 - s)))

        return Tensor._result(out_data, (a,), bw)

    def tanh(self):
        a = self
        t = np.tanh(a.data)

        def bw(out):
            _accum(a, out.grad * (1.0 - t * t))

        return Tensor._result(t, (a,), bw)

    def exp(self):
        a = self
        e = np.exp(a.data)

        def bw(out):
            _accum(a, out.grad * e)

        return Tensor._result(e, (a,), bw)

    def log(self):
        a = self

        def bw(out):
            _accum(a, out.grad / a.data)

        return Tensor._result(np.log(a.data), (a,), bw)

    def softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        y = e / e.sum(axis=axis, keepdims=True)

        def bw(out):
            g = out.grad
            _accum(a, y * (g - (g * y).sum(axis=axis, keepdims=True)))

        return Tensor._result(y, (a,), bw)

    def log_softmax(self, axis: int = -1):
        a = self
        shifted = a.data - a.data.max(axis=axis, keepdims=True)
        ls = shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))

        def bw(out):
            g = out.grad
            _accum(a, g - np.exp(ls) * g.sum(axis=axis, keepdims=True))

        return Tensor._result(ls, (a,), bw)

    # -- shape manipulation -----------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        a = self
        old_shape = a.data.shape

        def bw(out):
            _accum(a, out.grad.reshape(old_shape))

        return Tensor._result(a.data.reshape(shape), (a,), bw)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        a = self
        inverse = tuple(np.argsort(axes))

        def bw(out):
            _accum(a, out.grad.transpose(inverse))

        return Tensor._result(a.data.transpose(axes), (a,), bw)

    def __getitem__(self, key):
        a = self
        out_data = a.data[key]
        basic = _is_basic_index(key)

        def bw(out):
            g = np.zeros_like(a.data)
            if basic:
                g[key] += out.grad
            else:
                np.add.at(g, key, out.grad)
            _accum(a, g)

        return Tensor._result(np.ascontiguousarray(out_data), (a,), bw)

    # -- backward ---------------------------------------------------------

    def backward(self):
        """Reverse-mode sweep from a scalar root.

        Populates ``grad`` on every reachable leaf that requires grad.
        Interior-node grads are scratch state reset on each call; leaf grads
        accumulate until explicitly zeroed.
        """
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar root, got shape {self.data.shape}")
        if not self.requires_grad:
            return

        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if parent.requires_grad and id(parent) not in visited:
                    stack.append((parent, False))

        # interior grads are per-call scratch; leaves keep accumulating
        for node in topo:
            if node._backward is not None:
                node.grad = None
        _accum(self, np.ones_like(self.data))
        for node in reversed(topo):
            if node._backward is not None and node.grad is not None:
                node._backward(node)

    def grad_or_zeros(self) -> np.ndarray:
        """Gradient as an array; a leaf no backward pass ever reached reads as zeros."""
        if self.grad is None:
            return np.zeros_like(self.data)
        return self.grad


# -- free functions -------------------------------------------------------


def make_node(data, parents, backward) -> Tensor:
    """Build an interior tape node from a hand-written backward rule.

    The extension point for primitives defined outside this module (the
    convolution kernels).  ``backward`` receives the finished node and must
    push gradients into each parent via ``accumulate_grad``.
    """
    return Tensor._result(np.asarray(data, dtype=np.float64), tuple(parents), backward)


def accumulate_grad(t: Tensor, g) -> None:
    """Add ``g`` into ``t.grad`` (for custom backward rules)."""
    _accum(t, np.asarray(g, dtype=np.float64))


def maximum(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise max of two tensors; ties route the gradient to ``a``."""
    mask = a.data >= b.data

    def bw(out):
        if a.requires_grad:
            _accum(a, _unbroadcast(out.grad * mask, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(out.grad * ~mask, b.data.shape))

    return Tensor._result(np.where(mask, a.data, b.data), (a, b), bw)


def concat(tensors, axis: int = 0) -> Tensor:
    """Concatenate tensors along an axis."""
    ts = list(tensors)
    if not ts:
        raise ValueError("concat of an empty sequence")
    out_data = np.concatenate([t.data for t in ts], axis=axis)
    sizes = [t.data.shape[axis] for t in ts]
    offsets = np.cumsum([0] + sizes)

    def bw(out):
        for t, lo, hi in zip(ts, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                index = [slice(None)] * out_data.ndim
                index[axis] = slice(lo, hi)
                _accum(t, out.grad[tuple(index)])

    return Tensor._result(out_data, tuple(ts), bw)


def pad(t: Tensor, pad_width) -> Tensor:
    """Zero-pad; ``pad_width`` follows the numpy (before, after) per-axis form."""
    a = t
    out_data = np.pad(a.data, pad_width)
    index = tuple(slice(before, before + dim)
                  for (before, _after), dim in zip(pad_width, a.data.shape))

    def bw(out):
        _accum(a, out.grad[index])

    return Tensor._result(out_data, (a,), bw)


def logaddexp(a: Tensor, b: Tensor) -> Tensor:
    """Stable log(exp(a) + exp(b)) built from primitive ops."""
    m = maximum(a, b)
    return m + ((a - m).exp() + (b - m).exp()).log()


def gather_rows(table: Tensor, ids) -> Tensor:
    """Row gather ``table[ids]``; gradients accumulate per repeated id."""
    ids = np.asarray(ids, dtype=np.int64)
    a = table
    if ids.size and (ids.min() < 0 or ids.max() >= a.data.shape[0]):
        raise IndexError(
            f"gather id out of range [0, {a.data.shape[0]}): {ids.min()}..{ids.max()}"
        )

    def bw(out):
        g = np.zeros_like(a.data)
        np.add.at(g, ids, out.grad)
        _accum(a, g)

    return Tensor._result(a.data[ids].copy(), (a,), bw)


def finite_diff_gradient(f, x: Tensor, h: float = 1e-5) -> Tensor:
    """Central-difference gradient estimate of a scalar function, per element.

    The oracle used to validate every analytic backward rule.  Evaluates
    ``f`` with the tape disabled, so ``f`` must be deterministic.
    """
    if h <= 0:
        raise ValueError("h must be positive")
    grad = np.zeros_like(x.data)
    with no_grad():
        for i in range(x.data.size):
            orig = x.data.flat[i]
            x.data.flat[i] = orig + h
            f_plus = float(f(x).data)
            x.data.flat[i] = orig - h
            f_minus = float(f(x).data)
            x.data.flat[i] = orig
            grad.flat[i] = (f_plus - f_minus) / (2.0 * h)
    return Tensor(grad)


def max_rel_err(analytic, numeric, floor: float = 1e-3) -> float:
    """Worst-case elementwise relative error with a denominator floor.

    The floor keeps finite-difference roundoff on near-zero gradients from
    registering as spurious relative error.
    """
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - n) / denom))


def zero_grad(params) -> None:
    for p in params:
        p.grad = None


# -- internals ------------------------------------------------------------


def _sigmoid(x: np.ndarray) -> np.ndarray:
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def _accum(t: Tensor, g: np.ndarray) -> None:
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to the shape the operand had before broadcasting."""
    if g.shape == tuple(shape):
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    axes = tuple(i for i, (gd, sd) in enumerate(zip(g.shape, shape)) if sd == 1 and gd != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def _axis_count(shape, axis) -> int:
    if isinstance(axis, int):
        return shape[axis]
    count = 1
    for ax in axis:
        count *= shape[ax]
    return count


def _expand_reduced(g: np.ndarray, shape, axis, keepdims: bool) -> np.ndarray:
    """Broadcast a reduced gradient back over the reduced axes."""
    if axis is None:
        return np.broadcast_to(g.reshape((1,) * len(shape)) if not keepdims else g, shape)
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(ax % len(shape) for ax in axes)
    if not keepdims:
        expanded_shape = tuple(1 if i in axes else d for i, d in enumerate(shape))
        g = g.reshape(expanded_shape)
    return np.broadcast_to(g, shape)


def _is_basic_index(key) -> bool:
    items = key if isinstance(key, tuple) else (key,)
    return all(isinstance(k, (int, np.integer, slice)) or k is None or k is Ellipsis
               for k in items)
