"""Tensors with tape-based reverse-mode differentiation.

Every layer primitive the classifiers need lives here: dilated / strided /
depthwise convolution, 2x2 max pooling, stride-2 transposed convolution,
ReLU, dense, softmax, channel concatenation and global average pooling.

Operations record themselves on the innermost active :class:`Tape`::

    with Tape() as tape:
        loss = conv2d(x, w, b).sum()
    backward(loss, tape)

Outside a tape nothing is recorded, which is what inference uses.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Raised when operand shapes do not conform."""


class Tensor:
    """An n-d float array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        arr = np.asarray(data)
        if not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(np.float64)
        self.data: np.ndarray = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, requires_grad={self.requires_grad}{tag})"

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def sum(self) -> "Tensor":
        return tsum(self)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


@dataclass
class _Record:
    op: str
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tape:
    """Ordered log of executed operations, replayed in reverse by :func:`backward`."""

    _stack: list["Tape"] = []

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        Tape._stack.append(self)
        return self

    def __exit__(self, *exc) -> None:
        Tape._stack.remove(self)

    def __len__(self) -> int:
        return len(self.records)

    @classmethod
    def active(cls) -> Optional["Tape"]:
        return cls._stack[-1] if cls._stack else None

    def backward(self, loss: Tensor) -> list[str]:
        return backward(loss, self)


def _emit(op: str, inputs: tuple[Tensor, ...], out_data: np.ndarray, grad_fn) -> Tensor:
    """Wrap ``out_data`` and record the op when a tape is listening."""
    needs = any(t.requires_grad for t in inputs)
    tape = Tape.active()
    out = Tensor(out_data, requires_grad=needs and tape is not None)
    if out.requires_grad:
        tape.records.append(_Record(op, inputs, out, grad_fn))
    return out


def backward(loss: Tensor, tape: Tape) -> list[str]:
    """Populate ``.grad`` on every grad-requiring tensor reachable from ``loss``.

    Gradients are assigned, not accumulated, so repeating the call gives the
    same result.  Returns the op names in the order they were visited.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    visited = []
    for rec in reversed(tape.records):
        g = grads.pop(id(rec.output), None)
        if g is None:
            continue
        rec.output.grad = g
        visited.append(rec.op)
        for inp, gi in zip(rec.inputs, rec.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
    # whatever remains belongs to leaves (parameters, inputs)
    for rec in tape.records:
        for inp in rec.inputs:
            if inp.requires_grad and id(inp) in grads:
                inp.grad = grads.pop(id(inp))
    if loss.requires_grad and loss.grad is None:
        loss.grad = np.ones_like(loss.data)
    return visited


# -- elementwise and reductions ------------------------------------------------


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"add: shapes {a.shape} and {b.shape} differ")

    def grad_fn(g):
        gb = g if b.shape == a.shape else np.sum(g).reshape(b.shape)
        return g, gb

    return _emit("add", (a, b), a.data + b.data, grad_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape and b.size != 1:
        raise ShapeError(f"mul: shapes {a.shape} and {b.shape} differ")

    def grad_fn(g):
        ga = g * b.data
        gb = g * a.data
        if b.shape != a.shape:
            gb = np.sum(gb).reshape(b.shape)
        return ga, gb

    return _emit("mul", (a, b), a.data * b.data, grad_fn)


def tsum(a: Tensor) -> Tensor:
    return _emit("sum", (a,), np.sum(a.data).reshape(()), lambda g: (np.full_like(a.data, g),))


def reshape(a: Tensor, shape: tuple[int, ...]) -> Tensor:
    return _emit("reshape", (a,), a.data.reshape(shape), lambda g: (g.reshape(a.shape),))


def flatten(a: Tensor) -> Tensor:
    return reshape(a, (a.shape[0], int(np.prod(a.shape[1:], dtype=np.int64))))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    # subgradient at exactly 0 is 0
    return _emit("relu", (a,), np.where(mask, a.data, 0).astype(a.dtype, copy=False),
                 lambda g: (g * mask,))


# -- convolution ----------------------------------------------------------------


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    return (size + 2 * padding - dilation * (kernel - 1) - 1) // stride + 1


def _im2col(xp, kh, kw, stride, dilation, ho, wo):
    """(B,C,Hp,Wp) -> (C,kh,kw,B,ho,wo) gathered taps."""
    B, C = xp.shape[:2]
    cols = np.empty((C, kh, kw, B, ho, wo), dtype=xp.dtype)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            patch = xp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride]
            cols[:, i, j] = patch.transpose(1, 0, 2, 3)
    return cols


def _col2im(dcols, xp_shape, stride, dilation, dtype):
    C, kh, kw, B, ho, wo = dcols.shape
    dxp = np.zeros(xp_shape, dtype=dtype)
    for i in range(kh):
        hs = i * dilation
        for j in range(kw):
            ws = j * dilation
            dxp[:, :, hs:hs + stride * (ho - 1) + 1:stride, ws:ws + stride * (wo - 1) + 1:stride] += \
                dcols[:, i, j].transpose(1, 0, 2, 3)
    return dxp


def conv2d(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None, stride: int = 1,
           padding: int = 0, dilation: int = 1, groups: int = 1) -> Tensor:
    """2-D cross-correlation over a B x C x H x W batch.

    ``groups`` may be 1 (dense) or equal to the input channel count
    (depthwise, one filter per channel, kernel shaped C x 1 x kh x kw).
    """
    if x.data.ndim != 4:
        raise ShapeError(f"conv2d: input must be rank 4 (B,C,H,W), got shape {x.shape}")
    if kernel.data.ndim != 4:
        raise ShapeError(f"conv2d: kernel must be rank 4, got shape {kernel.shape}")
    if stride < 1 or dilation < 1 or padding < 0:
        raise ValueError(f"conv2d: bad stride={stride} padding={padding} dilation={dilation}")
    B, C, H, W = x.shape
    cout, cin_k, kh, kw = kernel.shape
    depthwise = groups != 1
    if depthwise:
        if groups != C or cin_k != 1 or cout != C:
            raise ShapeError(
                f"conv2d: depthwise needs groups == channels == kernel dim 0 and kernel dim 1 == 1; "
                f"got groups={groups}, input channels={C}, kernel {kernel.shape}")
    elif cin_k != C:
        raise ShapeError(f"conv2d: input channels (dim 1) = {C} but kernel expects {cin_k}")
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"conv2d: bias shape {bias.shape} != ({cout},) output channels")
    for label, size, k in (("height", H, kh), ("width", W, kw)):
        if size + 2 * padding < dilation * (k - 1) + 1:
            raise ShapeError(f"conv2d: padded input {label} {size + 2 * padding} smaller than "
                             f"effective kernel extent {dilation * (k - 1) + 1}")
    ho = conv_output_size(H, kh, stride, padding, dilation)
    wo = conv_output_size(W, kw, stride, padding, dilation)
    xd = x.data
    xp = np.pad(xd, ((0, 0), (0, 0), (padding, padding), (padding, padding))) if padding else xd
    cols = _im2col(xp, kh, kw, stride, dilation, ho, wo)
    if depthwise:
        cols3 = cols.reshape(C, kh * kw, B * ho * wo)
        w2 = kernel.data.reshape(C, kh * kw)
        out = np.einsum("ck,ckn->cn", w2, cols3)
    else:
        cols2 = cols.reshape(C * kh * kw, B * ho * wo)
        w2 = kernel.data.reshape(cout, -1)
        out = w2 @ cols2
    out = out.reshape(cout, B, ho, wo).transpose(1, 0, 2, 3)
    if bias is not None:
        out = out + bias.data.reshape(1, cout, 1, 1)
    out = np.ascontiguousarray(out, dtype=xd.dtype)

    def grad_fn(g):
        gm = g.transpose(1, 0, 2, 3).reshape(cout, -1)
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        if depthwise:
            gw = np.einsum("cn,ckn->ck", gm, cols3).reshape(kernel.shape)
            dcols = (w2[:, :, None] * gm[:, None, :]) if x.requires_grad else None
        else:
            gw = (gm @ cols2.T).reshape(kernel.shape)
            dcols = (w2.T @ gm) if x.requires_grad else None
        gx = None
        if dcols is not None:
            dxp = _col2im(dcols.reshape(C, kh, kw, B, ho, wo), xp.shape, stride, dilation, xd.dtype)
            gx = dxp[:, :, padding:padding + H, padding:padding + W] if padding else dxp
        return gx, gw, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("conv2d", inputs, out, grad_fn)


def upconv2x(x: Tensor, kernel: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    """Transposed convolution, 2x2 kernel, stride 2, no padding.

    Kernel layout is (C_in, C_out, 2, 2); spatial extents double exactly.
    """
    if x.data.ndim != 4:
        raise ShapeError(f"upconv2x: input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    if kernel.data.ndim != 4 or kernel.shape[0] != C or kernel.shape[2:] != (2, 2):
        raise ShapeError(f"upconv2x: kernel must be ({C}, Cout, 2, 2) for {C} input channels, "
                         f"got {kernel.shape}")
    cout = kernel.shape[1]
    if bias is not None and bias.shape != (cout,):
        raise ShapeError(f"upconv2x: bias shape {bias.shape} != ({cout},)")
    xm = x.data.transpose(0, 2, 3, 1).reshape(-1, C)
    km = kernel.data.reshape(C, cout * 4)
    y = (xm @ km).reshape(B, H, W, cout, 2, 2).transpose(0, 3, 1, 4, 2, 5).reshape(B, cout, 2 * H, 2 * W)
    if bias is not None:
        y = y + bias.data.reshape(1, cout, 1, 1)
    y = np.ascontiguousarray(y, dtype=x.dtype)

    def grad_fn(g):
        gm = g.reshape(B, cout, H, 2, W, 2).transpose(0, 2, 4, 1, 3, 5).reshape(-1, cout * 4)
        gk = (xm.T @ gm).reshape(kernel.shape)
        gx = (gm @ km.T).reshape(B, H, W, C).transpose(0, 3, 1, 2) if x.requires_grad else None
        gb = g.sum(axis=(0, 2, 3)) if bias is not None else None
        return gx, gk, gb

    inputs = (x, kernel) if bias is None else (x, kernel, bias)
    return _emit("upconv2x", inputs, y, grad_fn)


def maxpool2d(x: Tensor) -> Tensor:
    """2x2 window, stride 2.  Ties go to the first position in row-major scan."""
    if x.data.ndim != 4:
        raise ShapeError(f"maxpool2d: input must be rank 4, got shape {x.shape}")
    B, C, H, W = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"maxpool2d: spatial extents must be even, got height {H}, width {W}")
    win = x.data.reshape(B, C, H // 2, 2, W // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H // 2, W // 2, 4)
    idx = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, idx[..., None], axis=-1)[..., 0]

    def grad_fn(g):
        onehot = np.zeros(win.shape, dtype=g.dtype)
        np.put_along_axis(onehot, idx[..., None], g[..., None], axis=-1)
        gx = onehot.reshape(B, C, H // 2, W // 2, 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(B, C, H, W)
        return (gx,)

    return _emit("maxpool2d", (x,), out, grad_fn)


# -- heads ------------------------------------------------------------------------


def dense(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None) -> Tensor:
    if x.data.ndim != 2 or weight.data.ndim != 2:
        raise ShapeError(f"dense: expected rank-2 input and weight, got {x.shape} and {weight.shape}")
    if x.shape[1] != weight.shape[0]:
        raise ShapeError(f"dense: input features (dim 1) = {x.shape[1]} but weight rows = {weight.shape[0]}")
    if bias is not None and bias.shape != (weight.shape[1],):
        raise ShapeError(f"dense: bias shape {bias.shape} != ({weight.shape[1]},)")
    out = x.data @ weight.data
    if bias is not None:
        out = out + bias.data

    def grad_fn(g):
        gx = g @ weight.data.T if x.requires_grad else None
        gw = x.data.T @ g
        gb = g.sum(axis=0) if bias is not None else None
        return gx, gw, gb

    inputs = (x, weight) if bias is None else (x, weight, bias)
    return _emit("dense", inputs, out, grad_fn)


def softmax(x: Tensor) -> Tensor:
    if x.data.ndim != 2:
        raise ShapeError(f"softmax: expected (B, n), got {x.shape}")
    z = x.data - x.data.max(axis=1, keepdims=True) if x.shape[0] else x.data
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)

    def grad_fn(g):
        return (p * (g - np.sum(g * p, axis=1, keepdims=True)),)

    return _emit("softmax", (x,), p, grad_fn)


def concat_channels(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 4 or b.data.ndim != 4:
        raise ShapeError(f"concat_channels: expected rank-4 inputs, got {a.shape} and {b.shape}")
    for dim, label in ((0, "batch"), (2, "height"), (3, "width")):
        if a.shape[dim] != b.shape[dim]:
            raise ShapeError(f"concat_channels: {label} (dim {dim}) differs: {a.shape[dim]} vs {b.shape[dim]}")
    ca = a.shape[1]
    return _emit("concat_channels", (a, b), np.concatenate([a.data, b.data], axis=1),
                 lambda g: (g[:, :ca], g[:, ca:]))


def global_avg_pool(x: Tensor) -> Tensor:
    if x.data.ndim != 4:
        raise ShapeError(f"global_avg_pool: expected rank 4, got {x.shape}")
    B, C, H, W = x.shape
    scale = 1.0 / (H * W)

    def grad_fn(g):
        return (np.broadcast_to((g * scale)[:, :, None, None], x.shape).astype(x.dtype),)

    return _emit("global_avg_pool", (x,), x.data.mean(axis=(2, 3)), grad_fn)


def cross_entropy(probs: Tensor, labels) -> Tensor:
    """Mean of -log p[label], probabilities clamped below at 1e-12."""
    labels = np.asarray(labels, dtype=np.int64)
    if probs.data.ndim != 2:
        raise ShapeError(f"cross_entropy: expected (B, n) probabilities, got {probs.shape}")
    B, n = probs.shape
    if labels.shape != (B,):
        raise ShapeError(f"cross_entropy: {labels.shape[0] if labels.ndim else 0} labels for batch of {B}")
    if B and (labels.min() < 0 or labels.max() >= n):
        raise ValueError(f"cross_entropy: labels must lie in [0, {n}), got range "
                         f"[{labels.min()}, {labels.max()}]")
    rows = np.arange(B)
    picked = probs.data[rows, labels]
    clamped = np.maximum(picked, 1e-12)
    loss = -np.log(clamped).mean() if B else np.float64(0.0)

    def grad_fn(g):
        gp = np.zeros_like(probs.data)
        live = picked >= 1e-12
        gp[rows, labels] = np.where(live, -1.0 / (B * clamped), 0.0) * g
        return (gp,)

    return _emit("cross_entropy", (probs,), np.asarray(loss, dtype=probs.dtype).reshape(()), grad_fn)
