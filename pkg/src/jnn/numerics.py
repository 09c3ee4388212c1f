"""Small reverse-mode tensor engine covering the layers the joint networks need.

Every op takes and returns :class:`Tensor` objects.  When any input requires a
gradient the output records a backward closure; :meth:`Tensor.backward` walks
the graph in reverse topological order and accumulates into ``.grad``.
"""
from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class DimensionError(ValueError):
    """Raised when tensor shapes are incompatible with an op."""


class NumericalError(FloatingPointError):
    """Raised when an op or an optimizer step meets NaN/Inf."""


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if arr.dtype.kind != "f":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[np.ndarray], None] | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad})"

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def zero_grad(self) -> None:
        self.grad = None

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Backpropagate from this tensor; a scalar defaults to a seed of 1."""
        if grad is None:
            if self.data.size != 1:
                raise DimensionError("backward() without a seed needs a scalar tensor")
            grad = np.ones_like(self.data)
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if id(p) not in seen and p.requires_grad:
                    stack.append((p, False))
        grads: dict[int, np.ndarray] = {id(self): np.asarray(grad, dtype=self.data.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node._accumulate(g)
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                # keep each gradient in its tensor's precision: a float64 loss
                # head must not silently promote a float32 network's backward
                if pg.dtype != parent.data.dtype:
                    pg = pg.astype(parent.data.dtype)
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg


class Parameter(Tensor):
    """Trainable leaf tensor with a momentum buffer for SGD."""

    __slots__ = ("momentum_buf",)

    def __init__(self, data, name: str | None = None):
        super().__init__(data, requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)
        self.momentum_buf = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)

    def astype(self, dtype) -> None:
        self.data = self.data.astype(dtype)
        self.grad = self.grad.astype(dtype)
        self.momentum_buf = self.momentum_buf.astype(dtype)


def record(data: np.ndarray, parents: Sequence[Tensor], backward, op: str) -> Tensor:
    """Wrap an op result, attaching ``backward`` when any parent needs a gradient."""
    if not np.all(np.isfinite(data)):
        raise NumericalError(f"{op} produced non-finite values")
    needs = any(p.requires_grad for p in parents)
    out = Tensor(data, requires_grad=needs)
    if needs:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


# --------------------------------------------------------------------------
# layers
# --------------------------------------------------------------------------

def conv_output_size(size: int, kernel: int, stride: int, padding: int) -> int:
    return (size + 2 * padding - kernel) // stride + 1


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """Cross-correlation of ``x`` (B,C,H,W) with ``weight`` (O,C,k,k)."""
    if x.data.ndim != 4 or weight.data.ndim != 4:
        raise DimensionError(f"conv2d expects 4-D input and weight, got {x.shape} and {weight.shape}")
    B, C, H, W = x.shape
    O, Cw, kh, kw = weight.shape
    if C != Cw:
        raise DimensionError(f"conv2d: input has {C} channels but weight expects {Cw}")
    if stride < 1:
        raise DimensionError("conv2d: stride must be >= 1")
    Ho = conv_output_size(H, kh, stride, padding)
    Wo = conv_output_size(W, kw, stride, padding)
    if Ho < 1 or Wo < 1:
        raise DimensionError(f"conv2d: kernel {kh}x{kw} does not fit input {H}x{W} with padding {padding}")

    xp = x.data
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    w2 = weight.data.reshape(O, -1)
    # columns are (C*kh*kw, B*Ho*Wo) so the gather copies contiguous rows
    if kh == 1 and kw == 1:
        cols = xp[:, :, : stride * (Ho - 1) + 1 : stride, : stride * (Wo - 1) + 1 : stride]
        cols = cols.transpose(1, 0, 2, 3).reshape(C, B * Ho * Wo)
    else:
        win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
        cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(C * kh * kw, B * Ho * Wo)
    out = w2 @ cols
    if bias is not None:
        out += bias.data[:, None]
    out = np.ascontiguousarray(out.reshape(O, B, Ho, Wo).transpose(1, 0, 2, 3))

    def backward(g: np.ndarray):
        g2 = g.transpose(1, 0, 2, 3).reshape(O, B * Ho * Wo)
        gw = (g2 @ cols.T).reshape(weight.shape) if weight.requires_grad else None
        gb = g2.sum(axis=1) if bias is not None and bias.requires_grad else None
        gx = None
        if x.requires_grad:
            gcols = (w2.T @ g2).reshape(C, kh, kw, B, Ho, Wo)
            if kh == 1 and kw == 1 and stride == 1:
                gxp = gcols[:, 0, 0]
            else:
                gxp = np.zeros((C, B) + xp.shape[2:], dtype=g.dtype)
                for i in range(kh):
                    for j in range(kw):
                        gxp[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += gcols[:, i, j]
            gx = gxp.transpose(1, 0, 2, 3)
            if padding:
                gx = gx[:, :, padding : padding + H, padding : padding + W]
            gx = np.ascontiguousarray(gx)
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "conv2d")


def maxpool2d(x: Tensor, kernel: int, stride: int | None = None) -> Tensor:
    """Windowed max; ties resolve to the first element in row-major order."""
    stride = kernel if stride is None else stride
    if x.data.ndim != 4:
        raise DimensionError(f"maxpool2d expects 4-D input, got {x.shape}")
    B, C, H, W = x.shape
    if kernel > H or kernel > W:
        raise DimensionError(f"maxpool2d: kernel {kernel} larger than input {H}x{W}")
    Ho = (H - kernel) // stride + 1
    Wo = (W - kernel) // stride + 1
    win = sliding_window_view(x.data, (kernel, kernel), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :Ho, :Wo]
    flat = win.reshape(B, C, Ho, Wo, kernel * kernel)
    arg = flat.argmax(axis=-1)
    out = np.take_along_axis(flat, arg[..., None], axis=-1)[..., 0]

    def backward(g: np.ndarray):
        gx = np.zeros(x.shape, dtype=g.dtype)
        for i in range(kernel):
            for j in range(kernel):
                hit = arg == i * kernel + j
                gx[:, :, i : i + stride * Ho : stride, j : j + stride * Wo : stride] += g * hit
        return (gx,)

    return record(np.ascontiguousarray(out), (x,), backward, "maxpool2d")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """Affine map ``x @ weight.T + bias`` with ``weight`` shaped (out, in)."""
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise DimensionError(f"linear expects 2-D input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[1]:
        raise DimensionError(f"linear: {x.shape[1]} input features but weight expects {weight.shape[1]}")
    out = x.data @ weight.data.T
    if bias is not None:
        out = out + bias.data

    def backward(g: np.ndarray):
        gx = g @ weight.data if x.requires_grad else None
        gw = g.T @ x.data if weight.requires_grad else None
        gb = g.sum(axis=0) if bias is not None and bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return record(out, parents, backward, "linear")


def leaky_relu(x: Tensor, slope: float = 0.1) -> Tensor:
    pos = x.data > 0
    out = np.where(pos, x.data, slope * x.data)

    def backward(g: np.ndarray):
        return (np.where(pos, g, slope * g),)

    return record(out, (x,), backward, "leaky_relu")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    s = _sigmoid(x.data)

    def backward(g: np.ndarray):
        return (g * s * (1.0 - s),)

    return record(s, (x,), backward, "sigmoid")


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    """Join two (B,C,H,W) maps along the channel axis, ``a`` first."""
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise DimensionError("concat_channels expects 4-D tensors")
    if a.shape[0] != b.shape[0] or a.shape[2:] != b.shape[2:]:
        raise DimensionError(f"concat_channels: cannot join {a.shape} and {b.shape}")
    c1 = a.shape[1]
    out = np.concatenate([a.data, b.data], axis=1)

    def backward(g: np.ndarray):
        return g[:, :c1], g[:, c1:]

    return record(out, (a, b), backward, "concat_channels")


def repeat_batch(x: Tensor, n: int) -> Tensor:
    """Tile a batch-of-one tensor ``n`` times along the batch axis; the
    backward pass sums the ``n`` gradient slices."""
    if x.shape[0] != 1:
        raise DimensionError(f"repeat_batch expects a batch of one, got {x.shape}")

    def backward(g: np.ndarray):
        return (g.sum(axis=0, keepdims=True),)

    return record(np.repeat(x.data, n, axis=0), (x,), backward, "repeat_batch")


def flatten(x: Tensor) -> Tensor:
    shape = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(shape),)

    return record(x.data.reshape(shape[0], -1), (x,), backward, "flatten")


def reshape(x: Tensor, shape: tuple[int, ...]) -> Tensor:
    orig = x.shape

    def backward(g: np.ndarray):
        return (g.reshape(orig),)

    return record(x.data.reshape(shape), (x,), backward, "reshape")


def select_channels(x: Tensor, index) -> Tensor:
    """Gather channels ``index`` (slice or integer array) along axis 1."""
    shape = x.shape

    def backward(g: np.ndarray):
        gx = np.zeros(shape, dtype=g.dtype)
        if isinstance(index, slice):
            gx[:, index] = g
        else:
            np.add.at(gx, (slice(None), index), g)
        return (gx,)

    return record(np.ascontiguousarray(x.data[:, index]), (x,), backward, "select_channels")


def slice_channels(x: Tensor, start: int, stop: int) -> Tensor:
    return select_channels(x, slice(start, stop))


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add: shapes {a.shape} and {b.shape} differ")

    def backward(g: np.ndarray):
        return g, g

    return record(a.data + b.data, (a, b), backward, "add")


def scale(x: Tensor, factor: float) -> Tensor:
    def backward(g: np.ndarray):
        return (g * factor,)

    return record(x.data * factor, (x,), backward, "scale")


def total(x: Tensor) -> Tensor:
    """Sum of all elements as a scalar tensor."""
    shape = x.shape

    def backward(g: np.ndarray):
        return (np.broadcast_to(g, shape).copy(),)

    return record(np.asarray(x.data.sum()), (x,), backward, "sum")


# --------------------------------------------------------------------------
# initialization and optimization
# --------------------------------------------------------------------------

def kaiming(shape: tuple[int, ...], fan_in: int, rng: np.random.Generator,
            dtype=np.float64) -> np.ndarray:
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def zero_grads(params: Iterable[Parameter]) -> None:
    for p in params:
        p.zero_grad()


def sgd_step(params: Iterable[Parameter], lr: float, momentum: float = 0.0) -> None:
    """Momentum SGD: ``buf = momentum*buf + grad; value -= lr*buf``; grads are zeroed."""
    params = list(params)
    for p in params:
        if not np.all(np.isfinite(p.grad)):
            raise NumericalError(f"non-finite gradient in parameter {p.name or id(p)}")
    for p in params:
        p.momentum_buf *= momentum
        p.momentum_buf += p.grad
        p.data -= lr * p.momentum_buf
        p.zero_grad()


def grad_check(fn: Callable[[], Tensor], wrt: Sequence[Tensor], eps: float = 1e-5,
               n_points: int | None = None, rng: np.random.Generator | None = None,
               rel_floor: float = 1e-3) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``fn`` rebuilds the scalar loss from the current values of ``wrt``.  With
    ``n_points`` set only that many randomly chosen coordinates per tensor are
    probed.  Relative error is ``|a-n| / max(|a|+|n|, floor)`` where ``floor``
    is ``rel_floor`` times the tensor's largest analytic gradient (at least
    1e-8): coordinates far below the tensor's gradient scale are dominated by
    finite-difference roundoff and are judged against that scale instead.
    """
    for t in wrt:
        if t.data.dtype != np.float64:
            raise TypeError("grad_check needs float64 tensors")
        t.requires_grad = True
        t.grad = None if not isinstance(t, Parameter) else np.zeros_like(t.data)
    loss = fn()
    loss.backward()
    analytic = [np.zeros_like(t.data) if t.grad is None else t.grad.copy() for t in wrt]
    rng = rng or np.random.default_rng(0)
    worst = 0.0
    for t, ga in zip(wrt, analytic):
        flat = t.data.reshape(-1)
        floor = max(1e-8, rel_floor * float(np.max(np.abs(ga), initial=0.0)))
        if n_points is None or n_points >= flat.size:
            idx = np.arange(flat.size)
        else:
            idx = rng.choice(flat.size, size=n_points, replace=False)
        for i in idx:
            orig = flat[i]
            flat[i] = orig + eps
            fp = float(fn().data)
            flat[i] = orig - eps
            fm = float(fn().data)
            flat[i] = orig
            num = (fp - fm) / (2 * eps)
            a = ga.reshape(-1)[i]
            worst = max(worst, abs(a - num) / max(abs(a) + abs(num), floor))
    for t in wrt:
        t.zero_grad()
    return worst
