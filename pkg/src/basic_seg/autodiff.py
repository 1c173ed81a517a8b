"""Dense float64 tensors with tape-based reverse-mode differentiation.

Only the handful of ops the segmentation network and its losses need are
provided. Every op records a node on the active :class:`Tape` when at least
one input participates in differentiation; outside a tape (or when no input
requires a gradient) ops are plain numpy computations.
"""

from __future__ import annotations

import contextlib
import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "Tape",
    "ShapeError",
    "TapeError",
    "RunningStats",
    "tensor",
    "conv2d",
    "upsample2x",
    "batchnorm2d",
    "relu",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "square",
    "log_clamped",
    "sum",
    "mean",
    "concat_channels",
    "softmax_channel",
    "channel_matmul",
    "slice_batch",
    "backward",
    "grad_check",
]


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""

    def __init__(self, op: str, dim: str, expected, got):
        self.op, self.dim, self.expected, self.got = op, dim, expected, got
        super().__init__(f"{op}: {dim} mismatch (expected {expected}, got {got})")


class TapeError(RuntimeError):
    pass


_state = threading.local()


def _active_tape() -> "Tape | None":
    stack = getattr(_state, "stack", None)
    return stack[-1] if stack else None


class Tensor:
    """An n-d float64 array with an optional handle into a gradient tape."""

    __slots__ = ("data", "requires_grad", "grad", "node", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self.node: _Node | None = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def tape_id(self) -> int | None:
        return None if self.node is None else self.node.index

    @property
    def tracked(self) -> bool:
        return self.requires_grad or self.node is not None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return self.data.item()

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self) -> dict["Tensor", np.ndarray]:
        return backward(self)

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    __hash__ = object.__hash__

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


@dataclass
class _Node:
    index: int
    output: Tensor
    parents: tuple[Tensor, ...]
    backward_fn: Callable[[np.ndarray], Sequence[np.ndarray | None]]


@dataclass
class Tape:
    """Append-only record of differentiable ops for one forward pass.

    Use as a context manager; ops executed inside are recorded. A tape can be
    differentiated exactly once.
    """

    nodes: list[_Node] = field(default_factory=list)
    consumed: bool = False

    def __enter__(self) -> "Tape":
        if not hasattr(_state, "stack"):
            _state.stack = []
        _state.stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _state.stack.remove(self)

    @contextlib.contextmanager
    def paused(self):
        """Temporarily stop recording (used for teacher passes)."""
        stack = getattr(_state, "stack", [])
        saved = list(stack)
        stack.clear()
        try:
            yield
        finally:
            stack.extend(saved)

    def record(self, output: Tensor, parents: Sequence[Tensor], backward_fn) -> Tensor:
        if self.consumed:
            raise TapeError("cannot record on a tape that was already differentiated")
        node = _Node(len(self.nodes), output, tuple(parents), backward_fn)
        self.nodes.append(node)
        output.node = node
        return output

    def backward(self, loss: Tensor) -> dict[Tensor, np.ndarray]:
        if self.consumed:
            raise TapeError("backward already called on this tape")
        if loss.data.size != 1:
            raise TapeError(f"loss must be scalar, got shape {loss.shape}")
        if loss.node is None or loss.node.index >= len(self.nodes) or self.nodes[loss.node.index] is not loss.node:
            raise TapeError("loss is detached from this tape")
        grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[Tensor, np.ndarray] = {}
        for node in reversed(self.nodes[: loss.node.index + 1]):
            g = grads.pop(id(node.output), None)
            if g is None:
                continue
            parent_grads = node.backward_fn(g)
            for parent, pg in zip(node.parents, parent_grads):
                if pg is None or not parent.tracked:
                    continue
                if parent.node is not None:
                    key = id(parent)
                    grads[key] = grads[key] + pg if key in grads else pg
                else:
                    leaves[parent] = leaves[parent] + pg if parent in leaves else pg
        for leaf, g in leaves.items():
            leaf.grad = g
        self.consumed = True
        for node in self.nodes:
            node.output.node = None
        self.nodes.clear()
        return leaves


def backward(loss: Tensor) -> dict[Tensor, np.ndarray]:
    """Differentiate a scalar ``loss`` on the active tape.

    Returns a map from every reachable ``requires_grad`` leaf to its gradient
    (also stored on ``leaf.grad``).
    """
    tape = _active_tape()
    if tape is None:
        if getattr(loss, "node", None) is None:
            raise TapeError("loss is detached (no gradient tape)")
        raise TapeError("backward must be called while the recording tape is active")
    return tape.backward(loss)


def _record(out_data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    out = Tensor(out_data)
    tape = _active_tape()
    if tape is not None and any(p.tracked for p in parents):
        tape.record(out, parents, backward_fn)
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)),
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    return _record(
        a.data * b.data,
        (a, b),
        lambda g: (_unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)),
    )


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    out = a.data / b.data

    def bw(g):
        ga = g / b.data
        return _unbroadcast(ga, a.shape), _unbroadcast(-ga * out, b.shape)

    return _record(out, (a, b), bw)


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _record(-a.data, (a,), lambda g: (-g,))


def square(a) -> Tensor:
    a = _as_tensor(a)
    return _record(a.data * a.data, (a,), lambda g: (2.0 * a.data * g,))


def relu(a) -> Tensor:
    a = _as_tensor(a)
    mask = a.data > 0
    return _record(np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def log_clamped(a, floor: float = 1e-12) -> Tensor:
    """``log(max(a, floor))``; zero gradient where the clamp is active."""
    a = _as_tensor(a)
    live = a.data > floor
    safe = np.where(live, a.data, floor)
    return _record(np.log(safe), (a,), lambda g: (np.where(live, g / safe, 0.0),))


# ---------------------------------------------------------------- reductions


def sum(a, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    a = _as_tensor(a)
    out = a.data.sum(axis=axis, keepdims=keepdims)

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _record(np.asarray(out), (a,), bw)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return mul(sum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------- structural


def concat_channels(tensors: Sequence[Tensor]) -> Tensor:
    tensors = [_as_tensor(t) for t in tensors]
    ref = tensors[0].shape
    for t in tensors[1:]:
        if t.ndim != 4:
            raise ShapeError("concat_channels", "rank", 4, t.ndim)
        for dim, name in ((0, "batch"), (2, "height"), (3, "width")):
            if t.shape[dim] != ref[dim]:
                raise ShapeError("concat_channels", name, ref[dim], t.shape[dim])
    bounds = np.cumsum([0] + [t.shape[1] for t in tensors])
    out = np.concatenate([t.data for t in tensors], axis=1)

    def bw(g):
        return tuple(g[:, bounds[i] : bounds[i + 1]] for i in range(len(tensors)))

    return _record(out, tensors, bw)


def slice_batch(a: Tensor, start: int, stop: int) -> Tensor:
    """Rows ``start:stop`` along the leading (batch) axis."""
    a = _as_tensor(a)

    def bw(g):
        full = np.zeros_like(a.data)
        full[start:stop] = g
        return (full,)

    return _record(a.data[start:stop].copy(), (a,), bw)


def softmax_channel(a: Tensor) -> Tensor:
    """Softmax over axis 1 of an NCHW tensor."""
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def bw(g):
        return (p * (g - (g * p).sum(axis=1, keepdims=True)),)

    return _record(p, (a,), bw)


def channel_matmul(a: Tensor, matrix) -> Tensor:
    """Mix channels: ``out[n, j] = sum_i a[n, i] * matrix[i, j]``.

    ``matrix`` is treated as a constant.
    """
    a = _as_tensor(a)
    m = np.asarray(matrix, dtype=np.float64)
    if m.shape[0] != a.shape[1]:
        raise ShapeError("channel_matmul", "channels", m.shape[0], a.shape[1])
    out = np.einsum("nihw,ij->njhw", a.data, m)
    return _record(out, (a,), lambda g: (np.einsum("njhw,ij->nihw", g, m),))


# ---------------------------------------------------------------- network ops


def _im2col(xp: np.ndarray, k: int, stride: int, ho: int, wo: int) -> np.ndarray:
    """Patches as an (N, C*K*K, Ho*Wo) stack."""
    n, c = xp.shape[:2]
    cols = np.empty((n, c, k, k, ho, wo))
    for a in range(k):
        for b in range(k):
            cols[:, :, a, b] = xp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride]
    return cols.reshape(n, c * k * k, ho * wo)


def conv2d(x: Tensor, kernel: Tensor, bias: Tensor | None = None, stride: int = 1, padding: int = 0) -> Tensor:
    """2-d cross-correlation over NCHW input with an (O, I, K, K) kernel."""
    x, kernel = _as_tensor(x), _as_tensor(kernel)
    if x.ndim != 4:
        raise ShapeError("conv2d", "input rank", 4, x.ndim)
    if kernel.ndim != 4 or kernel.shape[2] != kernel.shape[3]:
        raise ShapeError("conv2d", "kernel shape", "(O, I, K, K)", kernel.shape)
    o, i, k, _ = kernel.shape
    if k % 2 == 0:
        raise ShapeError("conv2d", "kernel size parity", "odd", k)
    if x.shape[1] != i:
        raise ShapeError("conv2d", "input channels", i, x.shape[1])
    if bias is not None:
        bias = _as_tensor(bias)
        if bias.shape != (o,):
            raise ShapeError("conv2d", "bias length", o, bias.shape)
    if stride < 1 or padding < 0:
        raise ValueError("conv2d: stride must be positive and padding non-negative")
    n, _, h, w = x.shape
    ho = (h + 2 * padding - k) // stride + 1
    wo = (w + 2 * padding - k) // stride + 1
    if ho < 1 or wo < 1:
        raise ShapeError("conv2d", "spatial extent", f">= {k}", (h + 2 * padding, w + 2 * padding))
    xp = np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else x.data
    cols = _im2col(xp, k, stride, ho, wo)
    w2 = kernel.data.reshape(o, -1)
    out = np.matmul(w2, cols).reshape(n, o, ho, wo)
    if bias is not None:
        out += bias.data[None, :, None, None]

    def bw(g):
        g3 = g.reshape(n, o, ho * wo)
        gk = np.matmul(g3, cols.transpose(0, 2, 1)).sum(axis=0).reshape(kernel.shape) if kernel.tracked else None
        gx = None
        if x.tracked:
            dcols = np.matmul(w2.T, g3).reshape(n, i, k, k, ho, wo)
            gxp = np.zeros_like(xp)
            for a in range(k):
                for b in range(k):
                    gxp[:, :, a : a + stride * ho : stride, b : b + stride * wo : stride] += dcols[:, :, a, b]
            gx = gxp[:, :, padding : padding + h, padding : padding + w] if padding else gxp
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return (gx, gk) if bias is None else (gx, gk, gb)

    parents = (x, kernel) if bias is None else (x, kernel, bias)
    return _record(out, parents, bw)


def upsample2x(x: Tensor) -> Tensor:
    """Nearest-neighbour 2x spatial upsampling of an NCHW tensor."""
    x = _as_tensor(x)
    if x.ndim != 4:
        raise ShapeError("upsample2x", "input rank", 4, x.ndim)
    out = x.data.repeat(2, axis=2).repeat(2, axis=3)
    n, c, h, w = x.shape
    return _record(out, (x,), lambda g: (g.reshape(n, c, h, 2, w, 2).sum(axis=(3, 5)),))


@dataclass
class RunningStats:
    """Per-channel running mean/variance of a normalization layer."""

    mean: np.ndarray
    var: np.ndarray
    initialized: bool = False

    @classmethod
    def empty(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), initialized=False)

    @classmethod
    def identity(cls, channels: int) -> "RunningStats":
        return cls(np.zeros(channels), np.ones(channels), initialized=True)

    def copy(self) -> "RunningStats":
        return RunningStats(self.mean.copy(), self.var.copy(), self.initialized)


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running: RunningStats,
    mode: str = "train",
    momentum: float = 0.9,
    eps: float = 1e-5,
) -> Tensor:
    """Batch normalization over N, H, W of an NCHW tensor.

    In ``train`` mode the batch statistics are used and ``running`` is updated
    in place as ``running = momentum * running + (1 - momentum) * batch``
    (unbiased batch variance for the running estimate). In ``eval`` mode the
    running statistics are used.
    """
    if eps <= 0:
        raise ValueError("batchnorm2d: eps must be positive")
    x, gamma, beta = _as_tensor(x), _as_tensor(gamma), _as_tensor(beta)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError("batchnorm2d", "affine length", c, (gamma.shape, beta.shape))
    shape = (1, c, 1, 1)
    if mode == "eval":
        if not running.initialized:
            raise RuntimeError("uninitialized running statistics")
        inv = 1.0 / np.sqrt(running.var + eps)
        xhat = (x.data - running.mean.reshape(shape)) * inv.reshape(shape)
        out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

        def bw_eval(g):
            return (
                g * (gamma.data * inv).reshape(shape),
                (g * xhat).sum(axis=(0, 2, 3)),
                g.sum(axis=(0, 2, 3)),
            )

        return _record(out, (x, gamma, beta), bw_eval)
    if mode != "train":
        raise ValueError(f"batchnorm2d: unknown mode {mode!r}")

    m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
    mu = x.data.mean(axis=(0, 2, 3))
    centered = x.data - mu.reshape(shape)
    var = (centered * centered).mean(axis=(0, 2, 3))
    inv = 1.0 / np.sqrt(var + eps)
    xhat = centered * inv.reshape(shape)
    out = gamma.data.reshape(shape) * xhat + beta.data.reshape(shape)

    unbiased = var * m / max(m - 1, 1)
    if running.initialized:
        running.mean = momentum * running.mean + (1.0 - momentum) * mu
        running.var = momentum * running.var + (1.0 - momentum) * unbiased
    else:
        running.mean, running.var, running.initialized = mu.copy(), unbiased.copy(), True

    def bw(g):
        gg = g * gamma.data.reshape(shape)
        gx = (
            inv.reshape(shape)
            * (gg - gg.mean(axis=(0, 2, 3), keepdims=True) - xhat * (gg * xhat).mean(axis=(0, 2, 3), keepdims=True))
        )
        return gx, (g * xhat).sum(axis=(0, 2, 3)), g.sum(axis=(0, 2, 3))

    return _record(out, (x, gamma, beta), bw)


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x, step: float = 1e-5) -> float:
    """Compare the taped gradient of scalar ``f`` at ``x`` to central differences.

    Returns ``max |analytic - numeric| / max(1, |analytic|)`` over elements.
    """
    x0 = np.array(_as_tensor(x).data, dtype=np.float64)
    leaf = Tensor(x0.copy(), requires_grad=True)
    with Tape() as tape:
        out = f(leaf)
        if out.node is None:
            analytic = np.zeros_like(x0)
        else:
            grads = tape.backward(out)
            analytic = grads.get(leaf, np.zeros_like(x0))
    numeric = np.zeros_like(x0)
    flat = x0.reshape(-1)
    for idx in range(flat.size):
        orig = flat[idx]
        flat[idx] = orig + step
        fp = f(Tensor(x0)).data.item()
        flat[idx] = orig - step
        fm = f(Tensor(x0)).data.item()
        flat[idx] = orig
        numeric.reshape(-1)[idx] = (fp - fm) / (2.0 * step)
    return float(np.max(np.abs(analytic - numeric) / np.maximum(1.0, np.abs(analytic))))
