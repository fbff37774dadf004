"""Dense float64 arrays with reverse-mode gradients.

A ``Tensor`` records the primitive that produced it together with a backward
closure. ``Tensor.backward`` walks the graph in reverse topological order and
accumulates gradients into every node that requires them.

Broadcasting is deliberately limited to tensor-tensor ops on identical shapes
and tensor-scalar ops; bias addition has dedicated primitives.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

LOG_FLOOR = 1e-30


class DimensionError(ValueError):
    pass


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(self, data, requires_grad: bool = False, _parents: tuple = (), op: str = ""):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor axes must all be >= 1, got shape {arr.shape}")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in _parents)
        self._parents = _parents
        self._backward: Callable[[np.ndarray], None] | None = None
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def __repr__(self):
        return f"Tensor(shape={self.shape}, op={self.op or 'leaf'!r})"

    def _accumulate(self, g: np.ndarray) -> None:
        if not self.requires_grad:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def backward(self, grad: np.ndarray | None = None) -> None:
        """Propagate ``grad`` (default: ones, i.e. d self / d self) to all ancestors."""
        if grad is None:
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != self.shape:
            raise DimensionError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

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
                if p.requires_grad and id(p) not in seen:
                    stack.append((p, False))

        self._accumulate(grad)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)
                # interior gradients are not needed once propagated
                if node._parents:
                    node.grad = None

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __sub__(self, other):
        return add(self, -other if isinstance(other, Tensor) else -float(other))

    def __matmul__(self, other):
        return matmul(self, other)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _node(data, parents: Sequence[Tensor], op: str, backward) -> Tensor:
    out = Tensor(data, _parents=tuple(parents), op=op)
    if out.requires_grad:
        out._backward = backward
    return out


def _check_same(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise DimensionError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {a.shape} by {b.shape}")

    def backward(g):
        a._accumulate(g @ b.data.T)
        b._accumulate(a.data.T @ g)

    return _node(a.data @ b.data, (a, b), "matmul", backward)


def transpose(a: Tensor) -> Tensor:
    if a.data.ndim != 2:
        raise DimensionError(f"transpose expects a matrix, got {a.shape}")
    return _node(a.data.T, (a,), "transpose", lambda g: a._accumulate(g.T))


def add(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        a = _as_tensor(a)
        c = float(b)
        return _node(a.data + c, (a,), "add_scalar", lambda g: a._accumulate(g))
    if not isinstance(a, Tensor):
        return add(b, a)
    _check_same(a, b, "add")

    def backward(g):
        a._accumulate(g)
        b._accumulate(g)

    return _node(a.data + b.data, (a, b), "add", backward)


def mul(a, b) -> Tensor:
    if not isinstance(b, Tensor):
        return scale(a, float(b))
    if not isinstance(a, Tensor):
        return scale(b, float(a))
    _check_same(a, b, "mul")

    def backward(g):
        a._accumulate(g * b.data)
        b._accumulate(g * a.data)

    return _node(a.data * b.data, (a, b), "mul", backward)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _node(a.data * c, (a,), "scale", lambda g: a._accumulate(g * c))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return _node(a.data * mask, (a,), "relu", lambda g: a._accumulate(g * mask))


def exp(a: Tensor) -> Tensor:
    out_data = np.exp(a.data)
    return _node(out_data, (a,), "exp", lambda g: a._accumulate(g * out_data))


def log(a: Tensor, floor: float = LOG_FLOOR) -> Tensor:
    clamped = np.maximum(a.data, floor)
    # clamped entries are constant w.r.t. the input
    live = a.data > floor

    def backward(g):
        a._accumulate(np.where(live, g / clamped, 0.0))

    return _node(np.log(clamped), (a,), "log", backward)


def sum(a: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return _node(a.data.sum(), (a,), "sum", lambda g: a._accumulate(np.full(a.shape, float(g))))


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    return _node(a.data.mean(), (a,), "mean", lambda g: a._accumulate(np.full(a.shape, float(g) / n)))


def reshape(a: Tensor, shape: Sequence[int]) -> Tensor:
    shape = tuple(shape)
    if int(np.prod(shape)) != a.data.size:
        raise DimensionError(f"reshape: cannot view {a.shape} as {shape}")
    return _node(a.data.reshape(shape), (a,), "reshape", lambda g: a._accumulate(g.reshape(a.shape)))


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Add a per-column (``[N, D]``) or per-channel (``[N, C, H, W]``) bias."""
    if b.data.ndim != 1 or x.data.ndim not in (2, 4) or x.shape[1] != b.shape[0]:
        raise DimensionError(f"add_bias: bias {b.shape} does not match input {x.shape}")
    if x.data.ndim == 2:
        data = x.data + b.data
        axes: tuple[int, ...] = (0,)
    else:
        data = x.data + b.data[None, :, None, None]
        axes = (0, 2, 3)

    def backward(g):
        x._accumulate(g)
        b._accumulate(g.sum(axis=axes))

    return _node(data, (x, b), "add_bias", backward)


def channel_scale(x: Tensor, s: Tensor) -> Tensor:
    """Multiply each channel of ``[N, C, H, W]`` by a learned scalar."""
    if s.data.ndim != 1 or x.data.ndim != 4 or x.shape[1] != s.shape[0]:
        raise DimensionError(f"channel_scale: scale {s.shape} does not match input {x.shape}")
    sv = s.data[None, :, None, None]

    def backward(g):
        x._accumulate(g * sv)
        s._accumulate((g * x.data).sum(axis=(0, 2, 3)))

    return _node(x.data * sv, (x, s), "channel_scale", backward)


def conv_output_size(size: int, kernel: int, stride: int, pad: int) -> int:
    return (size + 2 * pad - kernel) // stride + 1


def conv2d(x: Tensor, k: Tensor, stride: int = 1, pad: int = 0) -> Tensor:
    """Cross-correlation of ``[N, C, H, W]`` input with ``[F, C, kh, kw]`` kernels."""
    if stride < 1 or pad < 0:
        raise ValueError(f"conv2d: stride must be >= 1 and pad >= 0, got {stride}, {pad}")
    if x.data.ndim != 4 or k.data.ndim != 4 or x.shape[1] != k.shape[1]:
        raise DimensionError(f"conv2d: input {x.shape} incompatible with kernel {k.shape}")
    n, c, h, w = x.shape
    f, _, kh, kw = k.shape
    if kh > h + 2 * pad or kw > w + 2 * pad:
        raise DimensionError(
            f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * pad}x{w + 2 * pad}"
        )
    ho = conv_output_size(h, kh, stride, pad)
    wo = conv_output_size(w, kw, stride, pad)

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :ho, :wo]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(n * ho * wo, c * kh * kw)
    kmat = k.data.reshape(f, c * kh * kw)
    out = (cols @ kmat.T).reshape(n, ho, wo, f).transpose(0, 3, 1, 2)

    def backward(g):
        gmat = g.transpose(0, 2, 3, 1).reshape(n * ho * wo, f)
        if k.requires_grad:
            k._accumulate((gmat.T @ cols).reshape(k.shape))
        if x.requires_grad:
            dcols = (gmat @ kmat).reshape(n, ho, wo, c, kh, kw)
            dxp = np.zeros(xp.shape)
            for i in range(kh):
                for j in range(kw):
                    dxp[:, :, i : i + stride * ho : stride, j : j + stride * wo : stride] += (
                        dcols[:, :, :, :, i, j].transpose(0, 3, 1, 2)
                    )
            x._accumulate(dxp[:, :, pad : pad + h, pad : pad + w] if pad else dxp)

    return _node(np.ascontiguousarray(out), (x, k), "conv2d", backward)


def l2_normalize_rows(x: Tensor, eps: float = 1e-12) -> Tensor:
    """Row-wise ``x / ||x||``; raises on rows whose norm is <= ``eps``."""
    if x.data.ndim != 2:
        raise DimensionError(f"l2_normalize_rows expects a matrix, got {x.shape}")
    norms = np.sqrt(np.einsum("ij,ij->i", x.data, x.data))
    bad = np.flatnonzero(norms <= eps)
    if bad.size:
        raise DegenerateInputError(
            f"rows {bad[:8].tolist()} have norm <= {eps}; the network produced a zero "
            "embedding (dead initialization?), re-initialize the weights"
        )
    v = x.data / norms[:, None]

    def backward(g):
        # (I - v v^T) g / ||x||, row by row
        proj = g - v * np.einsum("ij,ij->i", v, g)[:, None]
        x._accumulate(proj / norms[:, None])

    return _node(v, (x,), "l2_normalize", backward)


class DegenerateInputError(ArithmeticError):
    pass
