"""Minimal dense n-d array engine with reverse-mode automatic differentiation.

Tensors wrap contiguous numpy arrays (float32 for training, float64 for
gradient verification).  Every operation that participates in autodiff
creates a non-leaf Tensor holding references to its parents and a backward
rule; ``backward`` replays the recorded rules in reverse topological order.
"""

from __future__ import annotations

import itertools
from typing import Callable, Optional, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "ComputationTape",
    "ShapeMismatchError",
    "add",
    "add_scalar",
    "subtract",
    "multiply",
    "scale",
    "square",
    "sqrt",
    "absolute",
    "relu",
    "reduce_sum",
    "reduce_mean",
    "reshape",
    "narrow",
    "pad_replicate",
    "concat_channels",
    "conv3d",
    "conv1x1",
    "backward",
]

from dynmri._convkernels import corr3d, corr3d_grad_w, corr3d_grad_x

# Guard for the reciprocal in the sqrt backward rule: TV losses take sqrt of
# sums of squares that are exactly 0 on flat regions.
SQRT_GRAD_CLAMP = 1e-12


class ShapeMismatchError(ValueError):
    """Raised when operand shapes are incompatible for an operation."""


def _require_same_shape(opname: str, a: "Tensor", b: "Tensor") -> None:
    if a.shape != b.shape:
        raise ShapeMismatchError(
            f"{opname}: operand shapes differ: {a.shape} vs {b.shape}"
        )


class Tensor:
    """Dense n-dimensional real array, optionally tracked for autodiff."""

    __slots__ = ("data", "requires_grad", "grad", "op", "_parents", "_backward_rule")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = np.ascontiguousarray(arr)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.op = "leaf"
        self._parents: tuple = ()
        self._backward_rule: Optional[Callable] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def backward(self) -> None:
        backward(self)

    def __repr__(self) -> str:
        return f"Tensor(op={self.op!r}, shape={self.shape}, dtype={self.data.dtype})"

    # Small operator sugar; the functional forms below are the primary API.
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return subtract(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return multiply(self, other)
        return scale(self, other)

    __rmul__ = __mul__


def _from_op(data: np.ndarray, parents: Sequence[Tensor], rule: Callable, op: str) -> Tensor:
    out = Tensor(data)
    out.op = op
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward_rule = rule
    return out


class ComputationTape:
    """Ordered record of the operations reachable from a root tensor.

    The creation order of tensors is a topological order of the recorded
    graph; replaying the backward rules in reverse order yields exact
    reverse-mode derivatives.
    """

    def __init__(self, root: Tensor):
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(root, False)]
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
                if id(p) not in seen:
                    stack.append((p, False))
        self.operations = order  # topological: parents precede consumers

    def backprop(self, root: Tensor) -> None:
        grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
        for node in reversed(self.operations):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward_rule is None:
                if node.requires_grad:
                    node.grad = g if node.grad is None else node.grad + g
                continue
            parent_grads = node._backward_rule(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = pg


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(ancestor) into every requires_grad ancestor."""
    if loss.size != 1:
        raise ShapeMismatchError(
            f"backward: loss must be scalar, got shape {loss.shape}"
        )
    ComputationTape(loss).backprop(loss)


# ---------------------------------------------------------------------------
# Elementwise and reduction operations
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("add", a, b)
    return _from_op(a.data + b.data, (a, b), lambda g: (g, g), "add")


def subtract(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("subtract", a, b)
    return _from_op(a.data - b.data, (a, b), lambda g: (g, -g), "subtract")


def multiply(a: Tensor, b: Tensor) -> Tensor:
    _require_same_shape("multiply", a, b)
    return _from_op(
        a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data), "multiply"
    )


def scale(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(a.data * s, (a,), lambda g: (g * s,), "scale")


def add_scalar(a: Tensor, s: float) -> Tensor:
    s = float(s)
    return _from_op(a.data + s, (a,), lambda g: (g,), "add_scalar")


def square(a: Tensor) -> Tensor:
    return _from_op(a.data * a.data, (a,), lambda g: (g * (2.0 * a.data),), "square")


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)

    def rule(g):
        safe = np.sqrt(np.maximum(a.data, SQRT_GRAD_CLAMP))
        return (g * (0.5 / safe),)

    return _from_op(out, (a,), rule, "sqrt")


def absolute(a: Tensor) -> Tensor:
    return _from_op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),), "abs")


def relu(a: Tensor) -> Tensor:
    # Subgradient 0 at exactly 0.
    mask = a.data > 0
    return _from_op(
        np.where(mask, a.data, 0), (a,), lambda g: (np.where(mask, g, 0),), "relu"
    )


def reduce_sum(a: Tensor) -> Tensor:
    return _from_op(
        np.asarray(a.data.sum()), (a,), lambda g: (np.broadcast_to(g, a.shape),),
        "reduce_sum",
    )


def reduce_mean(a: Tensor) -> Tensor:
    n = a.size
    return _from_op(
        np.asarray(a.data.mean()),
        (a,),
        lambda g: (np.broadcast_to(g / n, a.shape),),
        "reduce_mean",
    )


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    return _from_op(
        a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape"
    )


def narrow(a: Tensor, axis: int, start: int, length: int) -> Tensor:
    n = a.shape[axis]
    if start < 0 or length < 0 or start + length > n:
        raise ShapeMismatchError(
            f"narrow: [{start}, {start + length}) out of range for axis {axis} "
            f"of shape {a.shape}"
        )
    idx = tuple(
        slice(start, start + length) if ax == axis else slice(None)
        for ax in range(a.data.ndim)
    )

    def rule(g):
        full = np.zeros_like(a.data)
        full[idx] = g
        return (full,)

    return _from_op(a.data[idx], (a,), rule, "narrow")


def pad_replicate(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    out = np.pad(a.data, widths, mode="edge")
    n = a.shape[axis]

    def rule(g):
        sl = [slice(None)] * g.ndim
        sl[axis] = slice(before, before + n)
        core = g[tuple(sl)].copy()
        # Replicated border cells feed back into the edge elements.
        if before:
            sl_b = list(sl)
            sl_b[axis] = slice(0, before)
            edge = [slice(None)] * g.ndim
            edge[axis] = slice(0, 1)
            core[tuple(edge)] += g[tuple(sl_b)].sum(axis=axis, keepdims=True)
        if after:
            sl_a = list(sl)
            sl_a[axis] = slice(before + n, before + n + after)
            edge = [slice(None)] * g.ndim
            edge[axis] = slice(n - 1, n)
            core[tuple(edge)] += g[tuple(sl_a)].sum(axis=axis, keepdims=True)
        return (core,)

    return _from_op(out, (a,), rule, "pad_replicate")


def concat_channels(inputs: Sequence[Tensor]) -> Tensor:
    inputs = tuple(inputs)
    if not inputs:
        raise ShapeMismatchError("concat_channels: empty input list")
    ref = inputs[0]
    for t in inputs[1:]:
        if t.shape[:1] + t.shape[2:] != ref.shape[:1] + ref.shape[2:]:
            raise ShapeMismatchError(
                f"concat_channels: non-channel extents differ: {ref.shape} vs {t.shape}"
            )
    sizes = [t.shape[1] for t in inputs]
    offsets = np.cumsum([0] + sizes)

    def rule(g):
        return tuple(
            g[:, offsets[i]:offsets[i + 1]] for i in range(len(inputs))
        )

    return _from_op(
        np.concatenate([t.data for t in inputs], axis=1), tuple(inputs), rule,
        "concat_channels",
    )


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------

def conv3d(x: Tensor, kernel: Tensor, bias: Tensor, padding=None) -> Tensor:
    """3D cross-correlation over (T, H, W) with zero padding, stride 1.

    ``padding`` is a per-axis (pt, ph, pw) tuple; the default gives "same"
    output extents for odd kernels.
    """
    if x.data.ndim != 5 or kernel.data.ndim != 5:
        raise ShapeMismatchError(
            f"conv3d: expected 5-d input and kernel, got {x.shape} and {kernel.shape}"
        )
    f, cker, kt, kh, kw = kernel.shape
    if x.shape[1] != cker:
        raise ShapeMismatchError(
            f"conv3d: input channels {x.shape} do not match kernel {kernel.shape}"
        )
    if bias.shape != (f,):
        raise ShapeMismatchError(
            f"conv3d: bias shape {bias.shape} does not match kernel {kernel.shape}"
        )
    if padding is None:
        padding = ((kt - 1) // 2, (kh - 1) // 2, (kw - 1) // 2)
    pt, ph, pw = padding
    if pt > kt - 1 or ph > kh - 1 or pw > kw - 1:
        raise ShapeMismatchError(
            f"conv3d: padding {padding} exceeds kernel extents {kernel.shape}"
        )

    dt = np.result_type(x.dtype, kernel.dtype, bias.dtype)
    xd = x.data.astype(dt, copy=False)
    wd = kernel.data.astype(dt, copy=False)
    bd = bias.data.astype(dt, copy=False)
    out = corr3d(xd, wd, bd, padding)

    def rule(g):
        g = np.ascontiguousarray(g, dtype=dt)
        gx = corr3d_grad_x(g, wd, padding) if x.requires_grad else None
        gk = (
            corr3d_grad_w(xd, g, kernel.shape, padding)
            if kernel.requires_grad
            else None
        )
        gb = g.sum(axis=(0, 2, 3, 4)) if bias.requires_grad else None
        return (gx, gk, gb)

    return _from_op(out, (x, kernel, bias), rule, "conv3d")


def conv1x1(x: Tensor, kernel: Tensor, bias: Tensor) -> Tensor:
    """Channel-mixing convolution with unit kernel extents."""
    if kernel.data.ndim != 5 or kernel.shape[2:] != (1, 1, 1):
        raise ShapeMismatchError(
            f"conv1x1: kernel extents must be 1x1x1, got {kernel.shape}"
        )
    return conv3d(x, kernel, bias, padding=(0, 0, 0))


def conv3d_reference(x: np.ndarray, w: np.ndarray, b: np.ndarray, pad: tuple) -> np.ndarray:
    """Direct nested-loop convolution oracle (independent of the fast path)."""
    n, c, t, h, wd = x.shape
    f, _, kt, kh, kw = w.shape
    pt, ph, pw = pad
    to, ho, wo = t + 2 * pt - kt + 1, h + 2 * ph - kh + 1, wd + 2 * pw - kw + 1
    out = np.zeros((n, f, to, ho, wo), dtype=np.float64)
    for ni, fi, ti, hi, wi in itertools.product(
        range(n), range(f), range(to), range(ho), range(wo)
    ):
        acc = 0.0
        for ci in range(c):
            for a in range(kt):
                for bb in range(kh):
                    for d in range(kw):
                        tt, hh, ww = ti + a - pt, hi + bb - ph, wi + d - pw
                        if 0 <= tt < t and 0 <= hh < h and 0 <= ww < wd:
                            acc += float(x[ni, ci, tt, hh, ww]) * float(
                                w[fi, ci, a, bb, d]
                            )
        out[ni, fi, ti, hi, wi] = acc + float(b[fi])
    return out
