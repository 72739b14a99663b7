"""Dense tensors with reverse-mode automatic differentiation.

Everything is numpy float64 under the hood. Differentiable operations are
plain functions that take an optional ``Tape``; when a tape is supplied the
operation records a backward rule on it, and ``backward(loss, tape)`` replays
the tape in reverse to populate ``.grad`` on every leaf tensor that has
``requires_grad`` set. Without a tape the same functions are cheap forward-only
kernels.
"""

from __future__ import annotations

from typing import Callable, Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


class ShapeError(ValueError):
    """Operand shapes are incompatible with the requested operation."""


class TapeError(RuntimeError):
    """Backward was invoked on a tensor the tape knows nothing about."""


class Tensor:
    """A dense n-d array plus an optional gradient buffer.

    ``data`` is always float64 and row-major. ``grad``, once populated, has the
    same shape as ``data``. Gradients accumulate across ``backward`` calls;
    callers zero them between optimization steps.
    """

    __slots__ = ("data", "requires_grad", "grad")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.asarray(data, dtype=np.float64))
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def zero_grad(self) -> None:
        self.grad = None

    def accumulate_grad(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


class _Node:
    __slots__ = ("output", "inputs", "backward_fn")

    def __init__(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable):
        self.output = output
        self.inputs = tuple(inputs)
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of operations for one differentiable computation.

    Nodes are appended in execution order, so the list is already a topological
    order of the graph; replaying it in reverse is reverse-mode autodiff.
    """

    def __init__(self):
        self.nodes: list[_Node] = []

    def record(self, output: Tensor, inputs: Sequence[Tensor], backward_fn: Callable) -> None:
        """Append one operation. ``backward_fn(out_grad)`` must return one
        gradient array (or None) per input, in order."""
        self.nodes.append(_Node(output, inputs, backward_fn))

    def __len__(self) -> int:
        return len(self.nodes)


def backward(loss: Tensor, tape: Tape) -> None:
    """Populate ``.grad`` on every requires_grad tensor reachable from ``loss``.

    Repeated calls accumulate into existing gradients.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    produced = {id(n.output) for n in tape.nodes}
    if id(loss) not in produced:
        raise TapeError("loss tensor was not produced by an operation on this tape")

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    tensors: dict[int, Tensor] = {id(loss): loss}
    for node in reversed(tape.nodes):
        g = grads.get(id(node.output))
        if g is None:
            continue
        input_grads = node.backward_fn(g)
        for t, gi in zip(node.inputs, input_grads):
            if gi is None:
                continue
            tid = id(t)
            tensors[tid] = t
            if tid in grads:
                grads[tid] = grads[tid] + gi
            else:
                grads[tid] = gi
    for tid, t in tensors.items():
        if t.requires_grad:
            t.accumulate_grad(grads[tid])


# ---------------------------------------------------------------------------
# elementwise / reduction primitives


def _check_same_shape(op: str, a: Tensor, b: Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{op}: shapes {a.shape} and {b.shape} differ")


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _check_same_shape("add", a, b)
    out = Tensor(a.data + b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, g))
    return out


def sub(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    _check_same_shape("sub", a, b)
    out = Tensor(a.data - b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g, -g))
    return out


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Elementwise product; shapes must match or ``b`` must broadcast to ``a``."""
    try:
        out_data = a.data * b.data
    except ValueError as exc:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} do not broadcast") from exc
    if out_data.shape != a.data.shape:
        raise ShapeError(f"mul: broadcast result {out_data.shape} exceeds {a.shape}")
    out = Tensor(out_data)
    if tape is not None:
        def bw(g):
            ga = g * b.data
            gb = g * a.data
            if gb.shape != b.data.shape:
                axes = tuple(i for i, (db, dg) in enumerate(zip(b.data.shape, gb.shape)) if db != dg)
                gb = gb.sum(axis=axes, keepdims=True)
            return ga, gb
        tape.record(out, (a, b), bw)
    return out


def scale(a: Tensor, c: float, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor(a.data * c)
    if tape is not None:
        tape.record(out, (a,), lambda g: (g * c,))
    return out


def sum_all(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor(a.data.sum())
    if tape is not None:
        tape.record(out, (a,), lambda g: (np.broadcast_to(g, a.shape).copy() if a.shape else g,))
    return out


def reshape(a: Tensor, shape: Sequence[int], tape: Optional[Tape] = None) -> Tensor:
    out = Tensor(a.data.reshape(shape))
    if tape is not None:
        tape.record(out, (a,), lambda g: (g.reshape(a.shape),))
    return out


def matmul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: shapes {a.shape} and {b.shape} are not conformable")
    out = Tensor(a.data @ b.data)
    if tape is not None:
        tape.record(out, (a, b), lambda g: (g @ b.data.T, a.data.T @ g))
    return out


# ---------------------------------------------------------------------------
# network layers


def conv2d(x: Tensor, w: Tensor, stride: int = 1, pad: int = 0,
           bias: Optional[Tensor] = None, tape: Optional[Tape] = None) -> Tensor:
    """2-d cross-correlation of a [B,C,H,W] input with an [M,C,kh,kw] kernel."""
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be 4-d [B,C,H,W], got {x.shape}")
    if w.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be 4-d [M,C,kh,kw], got {w.shape}")
    bsz, cin, h, wd = x.shape
    m, cker, kh, kw = w.shape
    if cin != cker:
        raise ShapeError(f"conv2d: input has {cin} channels but kernel expects {cker}")
    if stride < 1:
        raise ShapeError(f"conv2d: stride must be >= 1, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv2d: pad must be >= 0, got {pad}")
    if bias is not None and bias.shape != (m,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({m},)")
    span_h, span_w = h + 2 * pad - kh, wd + 2 * pad - kw
    if span_h < 0 or span_w < 0 or span_h % stride or span_w % stride:
        raise ShapeError(
            f"conv2d: non-integral output size for input {h}x{wd}, "
            f"kernel {kh}x{kw}, stride {stride}, pad {pad}")
    ho, wo = span_h // stride + 1, span_w // stride + 1

    xp = np.pad(x.data, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x.data
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, ::stride, ::stride]
    out_data = np.einsum("bchwij,mcij->bmhw", win, w.data, optimize=True)
    if bias is not None:
        out_data = out_data + bias.data.reshape(1, m, 1, 1)
    out = Tensor(out_data)

    if tape is not None:
        def bw(g):
            gw = np.einsum("bchwij,bmhw->mcij", win, g, optimize=True)
            gcols = np.einsum("mcij,bmhw->bchwij", w.data, g, optimize=True)
            gxp = np.zeros_like(xp)
            for i in range(kh):
                for j in range(kw):
                    gxp[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += gcols[:, :, :, :, i, j]
            gx = gxp[:, :, pad:pad + h, pad:pad + wd] if pad else gxp
            if bias is None:
                return gx, gw
            return gx, gw, g.sum(axis=(0, 2, 3))
        inputs = (x, w) if bias is None else (x, w, bias)
        tape.record(out, inputs, bw)
    return out


def relu(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    out = Tensor(np.maximum(x.data, 0.0))
    if tape is not None:
        mask = x.data > 0
        tape.record(out, (x,), lambda g: (g * mask,))
    return out


def max_pool2d(x: Tensor, k: int, stride: int, tape: Optional[Tape] = None) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"max_pool2d: input must be 4-d, got {x.shape}")
    bsz, c, h, wd = x.shape
    if k < 1 or stride < 1:
        raise ShapeError(f"max_pool2d: kernel {k} and stride {stride} must be >= 1")
    if (h - k) < 0 or (wd - k) < 0 or (h - k) % stride or (wd - k) % stride:
        raise ShapeError(
            f"max_pool2d: non-integral output size for input {h}x{wd}, window {k}, stride {stride}")
    ho, wo = (h - k) // stride + 1, (wd - k) // stride + 1
    win = sliding_window_view(x.data, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    flat = win.reshape(bsz, c, ho, wo, k * k)
    idx = flat.argmax(axis=-1)
    out = Tensor(np.take_along_axis(flat, idx[..., None], axis=-1)[..., 0])
    if tape is not None:
        def bw(g):
            gx = np.zeros_like(x.data)
            for p in range(k * k):
                i, j = divmod(p, k)
                sel = (idx == p) * g
                gx[:, :, i:i + stride * ho:stride, j:j + stride * wo:stride] += sel
            return (gx,)
        tape.record(out, (x,), bw)
    return out


def flatten(x: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Collapse every non-batch dimension, row-major."""
    if x.data.ndim < 2:
        raise ShapeError(f"flatten: input must have a batch dimension, got {x.shape}")
    return reshape(x, (x.shape[0], -1), tape)


def dense(x: Tensor, w: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"dense: input must be 2-d [B,in], got {x.shape}")
    if w.data.ndim != 2 or x.shape[1] != w.shape[0]:
        raise ShapeError(f"dense: input {x.shape} and weights {w.shape} are not conformable")
    if b.shape != (w.shape[1],):
        raise ShapeError(f"dense: bias shape {b.shape} != ({w.shape[1]},)")
    out = Tensor(x.data @ w.data + b.data)
    if tape is not None:
        tape.record(out, (x, w, b),
                    lambda g: (g @ w.data.T, x.data.T @ g, g.sum(axis=0)))
    return out


def softmax_cross_entropy(logits: Tensor, labels: np.ndarray,
                          tape: Optional[Tape] = None) -> Tensor:
    """Mean softmax cross-entropy over the batch. ``labels`` are int class ids."""
    if logits.data.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be 2-d, got {logits.shape}")
    labels = np.asarray(labels)
    bsz, ncls = logits.shape
    if labels.shape != (bsz,):
        raise ShapeError(f"softmax_cross_entropy: labels shape {labels.shape} != ({bsz},)")
    if labels.min() < 0 or labels.max() >= ncls:
        raise ValueError(
            f"softmax_cross_entropy: label out of range [0, {ncls}): "
            f"min {labels.min()}, max {labels.max()}")
    z = logits.data - logits.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=1, keepdims=True))
    logp = z - lse
    out = Tensor(-logp[np.arange(bsz), labels].mean())
    if tape is not None:
        def bw(g):
            p = np.exp(logp)
            p[np.arange(bsz), labels] -= 1.0
            return (g * p / bsz,)
        tape.record(out, (logits,), bw)
    return out


# ---------------------------------------------------------------------------
# Gram matrices over a channels-by-positions view of one feature map


def gram_feature(f: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Channel-by-channel inner products: for f of shape [M,N], returns f @ f.T."""
    if f.data.ndim != 2:
        raise ShapeError(f"gram_feature: input must be 2-d [M,N], got {f.shape}")
    out = Tensor(f.data @ f.data.T)
    if tape is not None:
        tape.record(out, (f,), lambda g: ((g + g.T) @ f.data,))
    return out


def gram_spatial(f: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """Position-by-position inner products across channels: f.T @ f."""
    if f.data.ndim != 2:
        raise ShapeError(f"gram_spatial: input must be 2-d [M,N], got {f.shape}")
    out = Tensor(f.data.T @ f.data)
    if tape is not None:
        tape.record(out, (f,), lambda g: (f.data @ (g + g.T),))
    return out
