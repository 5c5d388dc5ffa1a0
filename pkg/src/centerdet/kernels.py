"""Dense 4-D tensors and the convolution / activation kernels built on them.

Feature maps are numpy arrays of shape (batch, channels, height, width).
Every kernel is a pure function: forward passes take explicit parameter
arrays, backward passes take the same inputs plus the upstream gradient
and return one gradient per argument.  There is no autodiff graph; the
network modules chain these primitives by hand.

Convolutions use the cross-correlation convention (no kernel flip) and are
realized as an unrolled patch matrix times a reshaped weight matrix, which
keeps every reduction in a fixed order so results are bit-deterministic.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class ShapeError(ValueError):
    """A tensor or parameter dimension does not match its contract."""


def check_tensor(x: np.ndarray, name: str = "tensor") -> None:
    if not isinstance(x, np.ndarray) or x.ndim != 4:
        raise ShapeError(f"{name} must be a 4-d array (n, c, h, w), got "
                         f"{getattr(x, 'shape', type(x).__name__)}")


@dataclass(frozen=True)
class ConvSpec:
    """Static description of one convolution layer.

    Regular convolutions expect weights of shape (out, in, k, k); transposed
    convolutions expect (in, out, k, k).  Transposed convolutions support
    dilation 1 only.
    """

    in_channels: int
    out_channels: int
    kernel: int
    stride: int = 1
    padding: int = 0
    dilation: int = 1
    transposed: bool = False

    def __post_init__(self) -> None:
        for field in ("in_channels", "out_channels", "kernel", "stride", "dilation"):
            if getattr(self, field) < 1:
                raise ShapeError(f"ConvSpec.{field} must be positive, got {getattr(self, field)}")
        if self.padding < 0:
            raise ShapeError(f"ConvSpec.padding must be non-negative, got {self.padding}")
        if self.transposed and self.dilation != 1:
            raise ShapeError("transposed convolution supports dilation 1 only")

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        if self.transposed:
            return (self.in_channels, self.out_channels, self.kernel, self.kernel)
        return (self.out_channels, self.in_channels, self.kernel, self.kernel)

    def out_size(self, in_size: int) -> int:
        """Output spatial size for one axis; raises if it would be < 1."""
        if self.transposed:
            out = (in_size - 1) * self.stride - 2 * self.padding + self.kernel
        else:
            span = in_size + 2 * self.padding - self.dilation * (self.kernel - 1) - 1
            out = span // self.stride + 1 if span >= 0 else 0
        if out < 1:
            raise ShapeError(
                f"computed output size {out} for input size {in_size} with {self}")
        return out


def _check_conv_args(x: np.ndarray, w: np.ndarray, b: np.ndarray | None,
                     spec: ConvSpec) -> None:
    check_tensor(x, "conv input")
    if x.shape[1] != spec.in_channels:
        raise ShapeError(f"conv input has {x.shape[1]} channels, spec expects "
                         f"{spec.in_channels}")
    if tuple(w.shape) != spec.weight_shape:
        raise ShapeError(f"conv weights have shape {tuple(w.shape)}, spec expects "
                         f"{spec.weight_shape}")
    if b is not None and b.shape != (spec.out_channels,):
        raise ShapeError(f"conv bias has shape {tuple(b.shape)}, spec expects "
                         f"({spec.out_channels},)")


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))


def _im2col(xp: np.ndarray, k: int, stride: int, dilation: int,
            oh: int, ow: int) -> np.ndarray:
    """Unroll k*k sliding patches of a padded input into (n, c*k*k, oh*ow)."""
    n, c = xp.shape[:2]
    col = np.empty((n, c, k, k, oh, ow), xp.dtype)
    for ky in range(k):
        y0 = ky * dilation
        for kx in range(k):
            x0 = kx * dilation
            col[:, :, ky, kx] = xp[:, :, y0:y0 + (oh - 1) * stride + 1:stride,
                                   x0:x0 + (ow - 1) * stride + 1:stride]
    return col.reshape(n, c * k * k, oh * ow)


def _col2im(col: np.ndarray, shape: tuple[int, ...], k: int, stride: int,
            padding: int, dilation: int, oh: int, ow: int) -> np.ndarray:
    """Scatter-add the inverse of _im2col back onto an input-shaped grid."""
    n, c, h, w = shape
    acc = np.zeros((n, c, h + 2 * padding, w + 2 * padding), col.dtype)
    colr = col.reshape(n, c, k, k, oh, ow)
    for ky in range(k):
        y0 = ky * dilation
        for kx in range(k):
            x0 = kx * dilation
            acc[:, :, y0:y0 + (oh - 1) * stride + 1:stride,
                x0:x0 + (ow - 1) * stride + 1:stride] += colr[:, :, ky, kx]
    if padding == 0:
        return acc
    return acc[:, :, padding:padding + h, padding:padding + w]


def _conv_core(x: np.ndarray, w2d: np.ndarray, spec: ConvSpec,
               oh: int, ow: int) -> np.ndarray:
    xp = _pad(x, spec.padding)
    col = _im2col(xp, spec.kernel, spec.stride, spec.dilation, oh, ow)
    return np.matmul(w2d, col)


def conv_forward(x: np.ndarray, w: np.ndarray, b: np.ndarray,
                 spec: ConvSpec) -> np.ndarray:
    """Apply a (possibly dilated or transposed) convolution plus bias."""
    _check_conv_args(x, w, b, spec)
    n, _, h, wd = x.shape
    oh, ow = spec.out_size(h), spec.out_size(wd)
    co = spec.out_channels
    if spec.transposed:
        # A transposed convolution is the adjoint of a stride-s convolution
        # mapping the (oh, ow) grid down to (h, wd); scatter through w.
        colg = np.matmul(w.reshape(spec.in_channels, -1).T, x.reshape(n, -1, h * wd))
        y = _col2im(colg.reshape(n, co * spec.kernel * spec.kernel, h * wd),
                    (n, co, oh, ow), spec.kernel, spec.stride, spec.padding, 1, h, wd)
    else:
        y = _conv_core(x, w.reshape(co, -1), spec, oh, ow).reshape(n, co, oh, ow)
    return y + b.reshape(1, co, 1, 1)


def conv_backward(x: np.ndarray, w: np.ndarray, spec: ConvSpec,
                  grad_out: np.ndarray
                  ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gradients of sum(grad_out * conv_forward(x, w, b)) w.r.t. x, w, b."""
    _check_conv_args(x, w, None, spec)
    check_tensor(grad_out, "grad_out")
    n, _, h, wd = x.shape
    oh, ow = spec.out_size(h), spec.out_size(wd)
    if grad_out.shape != (n, spec.out_channels, oh, ow):
        raise ShapeError(f"grad_out has shape {tuple(grad_out.shape)}, expected "
                         f"{(n, spec.out_channels, oh, ow)}")
    k = spec.kernel
    if spec.transposed:
        gyp = _pad(grad_out, spec.padding)
        col = _im2col(gyp, k, spec.stride, 1, h, wd)        # (n, co*k*k, h*wd)
        gx = np.matmul(w.reshape(spec.in_channels, -1), col).reshape(x.shape)
        gw = np.matmul(x.reshape(n, spec.in_channels, -1),
                       col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
    else:
        xp = _pad(x, spec.padding)
        col = _im2col(xp, k, spec.stride, spec.dilation, oh, ow)
        gyf = grad_out.reshape(n, spec.out_channels, oh * ow)
        gw = np.matmul(gyf, col.transpose(0, 2, 1)).sum(axis=0).reshape(w.shape)
        colg = np.matmul(w.reshape(spec.out_channels, -1).T, gyf)
        gx = _col2im(colg, x.shape, k, spec.stride, spec.padding, spec.dilation,
                     oh, ow)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gw, gb


def relu_forward(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_backward(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    # Subgradient 0 at exactly 0.
    return np.where(x > 0, grad_out, 0)


def split_channels(x: np.ndarray, parts: int) -> list[np.ndarray]:
    check_tensor(x, "split input")
    c = x.shape[1]
    if parts < 1 or c % parts != 0:
        raise ShapeError(f"cannot split {c} channels into {parts} equal parts")
    step = c // parts
    return [x[:, i * step:(i + 1) * step] for i in range(parts)]


def concat_channels(parts: list[np.ndarray]) -> np.ndarray:
    if not parts:
        raise ShapeError("concat_channels needs at least one tensor")
    for p in parts:
        check_tensor(p, "concat input")
    return np.concatenate(parts, axis=1)


def add_elementwise(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"elementwise add of shapes {tuple(a.shape)} and "
                         f"{tuple(b.shape)}")
    return a + b
