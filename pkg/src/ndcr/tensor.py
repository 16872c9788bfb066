"""Dense tensors with reverse-mode gradients on top of numpy.

Only the operations the NDCR head needs are provided. Every op checks its
inputs' shapes and refuses to produce non-finite values, so numeric faults
surface at the op that caused them instead of as a NaN loss much later.
"""

from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import NonFiniteError, ShapeError

__all__ = [
    "Tensor",
    "as_tensor",
    "concat",
    "dropout",
    "layer_norm",
    "no_grad",
    "grad_enabled",
]

_state = threading.local()


def grad_enabled() -> bool:
    return getattr(_state, "enabled", True)


@contextlib.contextmanager
def trace_relu():
    """Collect the active/inactive pattern of every ReLU evaluated inside the block.

    Finite-difference checks use this to detect stencils that straddle a kink.
    """
    trace: list = []
    prev = getattr(_state, "relu_trace", None)
    _state.relu_trace = trace
    try:
        yield trace
    finally:
        _state.relu_trace = prev


@contextlib.contextmanager
def no_grad():
    """Evaluate without recording the graph (thread-local)."""
    prev = grad_enabled()
    _state.enabled = False
    try:
        yield
    finally:
        _state.enabled = prev


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def _broadcast_shape(op: str, a: tuple, b: tuple) -> tuple:
    try:
        return np.broadcast_shapes(a, b)
    except ValueError:
        raise ShapeError(op, a, b) from None


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.op = "leaf"
        self._parents = ()
        self._backward = None

    # -- construction -------------------------------------------------------

    @classmethod
    def _make(cls, data: np.ndarray, op: str, parents, backward):
        if not np.isfinite(data).all():
            raise NonFiniteError(op)
        out = cls.__new__(cls)
        out.data = data
        out.grad = None
        out.op = op
        needs = grad_enabled() and any(p.requires_grad for p in parents)
        out.requires_grad = needs
        out._parents = tuple(parents) if needs else ()
        out._backward = backward if needs else None
        return out

    def _lift(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return other
        return Tensor(np.asarray(other, dtype=self.data.dtype))

    # -- introspection -------------------------------------------------------

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self.op})"

    def __len__(self):
        return len(self.data)

    # -- autodiff -----------------------------------------------------------

    def backward(self, grad=None) -> None:
        """Accumulate d(self)/d(leaf) into ``.grad`` of every leaf that requires it."""
        if grad is None:
            if self.data.size != 1:
                raise ShapeError("backward", self.shape, ())
            grad = np.ones_like(self.data)
        order = []
        seen = set()
        stack = [(self, False)]
        while stack:
            node, done = stack.pop()
            if done:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))
        grads = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                grads[key] = pg if key not in grads else grads[key] + pg

    # -- elementwise binary ---------------------------------------------------

    def __add__(self, other):
        other = self._lift(other)
        _broadcast_shape("add", self.shape, other.shape)
        a, b = self, other
        return Tensor._make(
            a.data + b.data, "add", (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
        )

    __radd__ = __add__

    def __sub__(self, other):
        other = self._lift(other)
        _broadcast_shape("sub", self.shape, other.shape)
        a, b = self, other
        return Tensor._make(
            a.data - b.data, "sub", (a, b),
            lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
        )

    def __rsub__(self, other):
        return self._lift(other) - self

    def __mul__(self, other):
        other = self._lift(other)
        _broadcast_shape("mul", self.shape, other.shape)
        a, b = self, other
        return Tensor._make(
            a.data * b.data, "mul", (a, b),
            lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = self._lift(other)
        _broadcast_shape("div", self.shape, other.shape)
        a, b = self, other
        out = a.data / b.data

        def back(g):
            return (
                _unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * out / b.data, b.shape),
            )

        return Tensor._make(out, "div", (a, b), back)

    def __rtruediv__(self, other):
        return self._lift(other) / self

    def __neg__(self):
        return Tensor._make(-self.data, "neg", (self,), lambda g: (-g,))

    def __matmul__(self, other):
        other = self._lift(other)
        a, b = self, other
        if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
            raise ShapeError("matmul", a.shape, b.shape)
        if a.ndim > 2 and b.ndim > 2:
            _broadcast_shape("matmul", a.shape[:-2], b.shape[:-2])

        if b.ndim == 2:
            # weight-style product: fold leading axes into one GEMM
            k, n = b.shape
            a2 = a.data.reshape(-1, k)
            out = (a2 @ b.data).reshape(*a.shape[:-1], n)

            def back2(g):
                g2 = g.reshape(-1, n)
                ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
                gb = a2.T @ g2 if b.requires_grad else None
                return ga, gb

            return Tensor._make(out, "matmul", (a, b), back2)

        def back(g):
            ga = g @ np.swapaxes(b.data, -1, -2)
            gb = np.swapaxes(a.data, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return Tensor._make(a.data @ b.data, "matmul", (a, b), back)

    # -- elementwise unary ---------------------------------------------------

    def relu(self):
        mask = self.data > 0
        trace = getattr(_state, "relu_trace", None)
        if trace is not None:
            trace.append(mask)
        return Tensor._make(self.data * mask, "relu", (self,), lambda g: (g * mask,))

    def sigmoid(self):
        x = self.data
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        return Tensor._make(out, "sigmoid", (self,), lambda g: (g * out * (1.0 - out),))

    def tanh(self):
        out = np.tanh(self.data)
        return Tensor._make(out, "tanh", (self,), lambda g: (g * (1.0 - out * out),))

    def exp(self):
        out = np.exp(self.data)
        return Tensor._make(out, "exp", (self,), lambda g: (g * out,))

    def log(self):
        x = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(x)
        return Tensor._make(out, "log", (self,), lambda g: (g / x,))

    def sqrt(self):
        with np.errstate(invalid="ignore"):
            out = np.sqrt(self.data)
        return Tensor._make(out, "sqrt", (self,), lambda g: (g * 0.5 / out,))

    # -- reductions ----------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape
        out = self.data.sum(axis=axis, keepdims=keepdims)

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Tensor._make(np.asarray(out), "sum", (self,), back)

    def mean(self, axis=None, keepdims: bool = False):
        if axis is None:
            n = self.data.size
        else:
            axes = (axis,) if isinstance(axis, int) else axis
            n = int(np.prod([self.shape[a] for a in axes]))
        return self.sum(axis=axis, keepdims=keepdims) * (1.0 / n)

    def softmax(self, axis: int = -1):
        x = self.data
        e = np.exp(x - x.max(axis=axis, keepdims=True))
        out = e / e.sum(axis=axis, keepdims=True)

        def back(g):
            return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

        return Tensor._make(out, "softmax", (self,), back)

    def log_softmax(self, axis: int = -1):
        x = self.data
        shifted = x - x.max(axis=axis, keepdims=True)
        lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
        out = shifted - lse

        def back(g):
            return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

        return Tensor._make(out, "log_softmax", (self,), back)

    # -- shape manipulation ----------------------------------------------------

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        try:
            out = self.data.reshape(shape)
        except ValueError:
            raise ShapeError("reshape", src, shape) from None
        return Tensor._make(out, "reshape", (self,), lambda g: (g.reshape(src),))

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        inv = tuple(np.argsort(axes))
        return Tensor._make(
            self.data.transpose(axes), "transpose", (self,), lambda g: (g.transpose(inv),)
        )

    def swapaxes(self, a: int, b: int):
        return Tensor._make(
            np.swapaxes(self.data, a, b), "swapaxes", (self,), lambda g: (np.swapaxes(g, a, b),)
        )

    def broadcast_to(self, shape):
        src = self.shape
        try:
            out = np.broadcast_to(self.data, shape)
        except ValueError:
            raise ShapeError("broadcast_to", src, tuple(shape)) from None
        return Tensor._make(out, "broadcast_to", (self,), lambda g: (_unbroadcast(g, src),))

    def __getitem__(self, idx):
        src = self.shape
        dtype = self.dtype

        def back(g):
            full = np.zeros(src, dtype=dtype)
            np.add.at(full, idx, g)
            return (full,)

        return Tensor._make(np.asarray(self.data[idx]), "getitem", (self,), back)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x, dtype=dtype)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = list(tensors)
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or t.shape[:ax] + t.shape[ax + 1:] != ref[:ax] + ref[ax + 1:]:
            raise ShapeError("concat", ref, t.shape)
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, bounds, axis=ax))

    out = np.concatenate([t.data for t in tensors], axis=ax)
    return Tensor._make(out, "concat", tensors, back)


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply an elementwise affine map."""
    d = x.shape[-1]
    if gain.shape != (d,) or bias.shape != (d,):
        raise ShapeError("layer_norm", x.shape, gain.shape)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gain.data + bias.data

    def back(g):
        gx_hat = g * gain.data
        gx = inv * (
            gx_hat
            - gx_hat.mean(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).mean(axis=-1, keepdims=True)
        )
        gg = _unbroadcast(g * xhat, gain.shape)
        gb = _unbroadcast(g, bias.shape)
        return gx, gg, gb

    return Tensor._make(out, "layer_norm", (x, gain, bias), back)


def dropout(x: Tensor, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout. Identity when not training or when ``rate == 0``."""
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("dropout in training mode needs an explicit rng")
    keep = (rng.random(x.shape) >= rate).astype(x.dtype) / (1.0 - rate)
    return Tensor._make(x.data * keep, "dropout", (x,), lambda g: (g * keep,))
