"""
Network Operations
Convolutions, activations and dropout on NCHW tensors.

Convolutions gather patches explicitly (im2col) and reduce them with one
batched matrix product per group; the transposed convolution scatters the
same patches back (col2im), which makes it the exact adjoint of `conv2d`.
"""

import logging
from typing import Optional, Tuple, Union

import numpy as np

from rdcnet.errors import ShapeError, UsageError
from rdcnet.tensor import Function, Tensor

logger = logging.getLogger(__name__)

IntPair = Union[int, Tuple[int, int]]


def _pair(value: IntPair, name: str) -> Tuple[int, int]:
    if isinstance(value, (int, np.integer)):
        pair = (int(value), int(value))
    else:
        pair = tuple(int(v) for v in value)
    if len(pair) != 2:
        raise ShapeError(f"expected an int or a pair, got {value!r}", field=name)
    return pair


def conv_output_size(size: int, kernel: int, stride: int, padding: int, dilation: int) -> int:
    """floor((size + 2*pad - ((k-1)*dil + 1)) / stride) + 1"""
    return (size + 2 * padding - ((kernel - 1) * dilation + 1)) // stride + 1


# ============== Patch Gather / Scatter ==============

def im2col(xp: np.ndarray, kh: int, kw: int, stride: Tuple[int, int], dilation: Tuple[int, int],
           out_h: int, out_w: int) -> np.ndarray:
    """Gather kh x kw dilated patches of an already padded input into (N, C, kh, kw, out_h, out_w)."""
    n, c = xp.shape[:2]
    sh, sw = stride
    dh, dw = dilation
    cols = np.empty((n, c, kh, kw, out_h, out_w), dtype=xp.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            cols[:, :, i, j] = xp[:, :, r0:r0 + sh * (out_h - 1) + 1:sh, c0:c0 + sw * (out_w - 1) + 1:sw]
    return cols


def col2im(cols: np.ndarray, padded_shape: Tuple[int, int, int, int], stride: Tuple[int, int],
           dilation: Tuple[int, int]) -> np.ndarray:
    """Scatter-add patches of shape (N, C, kh, kw, out_h, out_w) into a zero array of `padded_shape`."""
    _, _, kh, kw, out_h, out_w = cols.shape
    sh, sw = stride
    dh, dw = dilation
    xp = np.zeros(padded_shape, dtype=cols.dtype)
    for i in range(kh):
        r0 = i * dh
        for j in range(kw):
            c0 = j * dw
            xp[:, :, r0:r0 + sh * (out_h - 1) + 1:sh, c0:c0 + sw * (out_w - 1) + 1:sw] += cols[:, :, i, j]
    return xp


# ============== Convolution ==============

class Conv2d(Function):
    def forward(self, x, w, b=None, *, stride, dilation, groups, padding):
        n, c, h, width = x.shape
        out_c, group_c, kh, kw = w.shape
        ph, pw = padding
        out_h = conv_output_size(h, kh, stride[0], ph, dilation[0])
        out_w = conv_output_size(width, kw, stride[1], pw, dilation[1])

        if kh == kw == 1 and stride == (1, 1) and padding == (0, 0):
            cols = x.reshape(n, groups, group_c, h * width)
        else:
            xp = np.pad(x, ((0, 0), (0, 0), (ph, ph), (pw, pw))) if ph or pw else x
            cols = im2col(xp, kh, kw, stride, dilation, out_h, out_w)
            cols = cols.reshape(n, groups, group_c * kh * kw, out_h * out_w)
        wmat = w.reshape(groups, out_c // groups, group_c * kh * kw)

        out = np.matmul(wmat, cols).reshape(n, out_c, out_h, out_w)
        if b is not None:
            out = out + b.reshape(1, out_c, 1, 1)

        self.cols, self.wmat = cols, wmat
        self.x_shape, self.w_shape = x.shape, w.shape
        self.stride, self.dilation, self.padding, self.groups = stride, dilation, padding, groups
        self.out_hw = (out_h, out_w)
        return out

    def backward(self, grad):
        n, c, h, width = self.x_shape
        out_c, group_c, kh, kw = self.w_shape
        out_h, out_w = self.out_hw
        ph, pw = self.padding
        g = grad.reshape(n, self.groups, out_c // self.groups, out_h * out_w)

        dw = np.matmul(g, self.cols.transpose(0, 1, 3, 2)).sum(axis=0).reshape(self.w_shape)
        dcols = np.matmul(self.wmat.transpose(0, 2, 1), g)
        if kh == kw == 1 and self.stride == (1, 1) and self.padding == (0, 0):
            dx = dcols.reshape(self.x_shape)
        else:
            dcols = dcols.reshape(n, c, kh, kw, out_h, out_w)
            dxp = col2im(dcols, (n, c, h + 2 * ph, width + 2 * pw), self.stride, self.dilation)
            dx = dxp[:, :, ph:ph + h, pw:pw + width]
        db = grad.sum(axis=(0, 2, 3))
        return dx, dw, db


def conv2d(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: IntPair = 1, dilation: IntPair = 1,
           groups: int = 1, padding: IntPair = 0) -> Tensor:
    """
    Grouped, dilated 2D convolution (cross-correlation) on NCHW input.
    Weights are [out, in/groups, kh, kw]; padding is explicit zero padding.
    """
    stride, dilation, padding = _pair(stride, 'stride'), _pair(dilation, 'dilation'), _pair(padding, 'padding')
    if x.ndim != 4:
        raise ShapeError(f"input must be NCHW, got shape {x.shape}", field='input')
    if w.ndim != 4:
        raise ShapeError(f"weights must be [out, in/groups, kh, kw], got shape {w.shape}", field='weight')
    if groups < 1:
        raise ShapeError(f"groups must be positive, got {groups}", field='groups')
    if min(stride) < 1 or min(dilation) < 1 or min(padding) < 0:
        raise ShapeError(f"invalid stride {stride}, dilation {dilation} or padding {padding}", field='stride')
    n, c, h, width = x.shape
    out_c, group_c, kh, kw = w.shape
    if c % groups:
        raise ShapeError(f"in-channels {c} not divisible by groups {groups}", field='in_channels')
    if out_c % groups:
        raise ShapeError(f"out-channels {out_c} not divisible by groups {groups}", field='out_channels')
    if group_c != c // groups:
        raise ShapeError(f"weight expects {group_c} channels per group, input has {c // groups}",
                         field='in_channels')
    if b is not None and b.shape != (out_c,):
        raise ShapeError(f"bias shape {b.shape} does not match {out_c} out-channels", field='bias')
    for axis, size, k, p, d in (('height', h, kh, padding[0], dilation[0]),
                                ('width', width, kw, padding[1], dilation[1])):
        extent = (k - 1) * d + 1
        if size + 2 * p < extent:
            raise ShapeError(f"padded {axis} {size + 2 * p} smaller than effective kernel extent {extent}",
                             field=axis)
    inputs = (x, w) if b is None else (x, w, b)
    return Conv2d.apply(*inputs, stride=stride, dilation=dilation, groups=groups, padding=padding)


class ConvTranspose2d(Function):
    def forward(self, x, w, b=None, *, stride, padding):
        n, in_c, h, width = x.shape
        _, out_c, kh, kw = w.shape
        ph, pw = padding
        full_h, full_w = (h - 1) * stride[0] + kh, (width - 1) * stride[1] + kw

        wmat = w.reshape(in_c, out_c * kh * kw)
        cols = np.matmul(wmat.T, x.reshape(n, in_c, h * width)).reshape(n, out_c, kh, kw, h, width)
        full = col2im(cols, (n, out_c, full_h, full_w), stride, (1, 1))
        out = full[:, :, ph:full_h - ph, pw:full_w - pw]
        if b is not None:
            out = out + b.reshape(1, out_c, 1, 1)

        self.x, self.wmat = x, wmat
        self.w_shape, self.stride, self.padding = w.shape, stride, padding
        self.full_hw = (full_h, full_w)
        return np.ascontiguousarray(out)

    def backward(self, grad):
        n, in_c, h, width = self.x.shape
        _, out_c, kh, kw = self.w_shape
        ph, pw = self.padding
        full_h, full_w = self.full_hw

        gfull = np.zeros((n, out_c, full_h, full_w), dtype=grad.dtype)
        gfull[:, :, ph:full_h - ph, pw:full_w - pw] = grad
        dcols = im2col(gfull, kh, kw, self.stride, (1, 1), h, width).reshape(n, out_c * kh * kw, h * width)

        dx = np.matmul(self.wmat, dcols).reshape(self.x.shape)
        dw = np.matmul(self.x.reshape(n, in_c, h * width), dcols.transpose(0, 2, 1)).sum(axis=0)
        db = grad.sum(axis=(0, 2, 3))
        return dx, dw.reshape(self.w_shape), db


def conv2d_transpose(x: Tensor, w: Tensor, b: Optional[Tensor] = None, stride: IntPair = 1,
                     padding: IntPair = 0) -> Tensor:
    """
    Transposed convolution, the adjoint of `conv2d` with the same weights.
    Weights are [in, out, kh, kw]; output size is (H-1)*stride - 2*pad + kh.
    """
    stride, padding = _pair(stride, 'stride'), _pair(padding, 'padding')
    if x.ndim != 4 or w.ndim != 4:
        raise ShapeError(f"expected NCHW input and 4D weights, got {x.shape} and {w.shape}", field='input')
    n, in_c, h, width = x.shape
    w_in, out_c, kh, kw = w.shape
    if in_c != w_in:
        raise ShapeError(f"input has {in_c} channels, weights expect {w_in}", field='in_channels')
    if b is not None and b.shape != (out_c,):
        raise ShapeError(f"bias shape {b.shape} does not match {out_c} out-channels", field='bias')
    if min(stride) < 1 or min(padding) < 0:
        raise ShapeError(f"invalid stride {stride} or padding {padding}", field='stride')
    for axis, size, k, s, p in (('height', h, kh, stride[0], padding[0]),
                                ('width', width, kw, stride[1], padding[1])):
        if (size - 1) * s - 2 * p + k <= 0:
            raise ShapeError(f"transposed convolution produces an empty {axis}", field=axis)
    inputs = (x, w) if b is None else (x, w, b)
    return ConvTranspose2d.apply(*inputs, stride=stride, padding=padding)


# ============== Activations ==============

class LeakyReLU(Function):
    def forward(self, x, slope):
        self.positive, self.slope = x > 0, slope
        return np.where(self.positive, x, slope * x)

    def backward(self, grad):
        return (np.where(self.positive, grad, self.slope * grad),)


def leaky_relu(x: Tensor, slope: float = 0.01) -> Tensor:
    """max(x, slope * x)."""
    if not 0.0 < slope < 1.0:
        raise UsageError(f"leaky slope must lie in (0, 1), got {slope}")
    return LeakyReLU.apply(x, slope=slope)


class Softmax(Function):
    def forward(self, x, axis):
        shifted = x - x.max(axis=axis, keepdims=True)
        e = np.exp(shifted)
        self.out, self.axis = e / e.sum(axis=axis, keepdims=True), axis
        return self.out

    def backward(self, grad):
        s = self.out
        return (s * (grad - (grad * s).sum(axis=self.axis, keepdims=True)),)


def softmax(x: Tensor, axis: int = 1) -> Tensor:
    if not -x.ndim <= axis < x.ndim:
        raise UsageError(f"axis {axis} out of range for shape {x.shape}")
    return Softmax.apply(x, axis=axis)


def spatial_dropout(x: Tensor, p: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """
    Zero whole (sample, channel) planes with probability p and rescale the
    survivors by 1/(1-p). Identity outside training or for p = 0.
    """
    if not 0.0 <= p < 1.0:
        raise UsageError(f"dropout probability must lie in [0, 1), got {p}")
    if not training or p == 0.0:
        return x
    if rng is None:
        raise UsageError("spatial_dropout in training mode needs an explicit generator")
    n, c = x.shape[:2]
    keep = rng.random((n, c)) >= p
    scale = (keep / (1.0 - p)).reshape((n, c) + (1,) * (x.ndim - 2))
    return x * Tensor(scale)
