"""Differentiable tensor kernels on ``(batch, channels, height, width)`` arrays.

Each forward has a matching backward that returns gradients for its inputs
and parameters. Convolutions are cross-correlations (no kernel flip) with
zero padding. Arithmetic follows the dtype of the inputs, so passing float64
arrays gives a double-precision path for gradient checking.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


@dataclass
class ConvParams:
    """Weights ``(out_ch, in_ch, k, k)`` and bias ``(out_ch,)`` of a conv layer.

    For transposed convolutions the weight layout is ``(in_ch, out_ch, k, k)``.
    """

    weight: np.ndarray
    bias: np.ndarray
    stride: int = 1
    padding: int = 0

    @property
    def kernel_size(self) -> int:
        return self.weight.shape[-1]

    @property
    def param_count(self) -> int:
        return int(self.weight.size + self.bias.size)


def _check4(x, name="x"):
    if x.ndim != 4:
        raise ValueError(f"{name} must be 4-D (batch, channels, height, width), got {x.shape}")


def conv_output_size(n: int, k: int, stride: int, padding: int) -> int:
    span = n + 2 * padding - k
    if span < 0 or span % stride:
        raise ValueError(f"input {n} with kernel {k}, stride {stride}, padding {padding} "
                         "does not give an integer output size")
    return span // stride + 1


def _im2col(x, k, stride, padding):
    """Strided view ``(B, Ho, Wo, C, k, k)`` over the zero-padded input."""
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    cols = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    return cols.transpose(0, 2, 3, 1, 4, 5)


def _col2im(dcols, shape, k, stride, padding):
    """Scatter-add ``(B, Ho, Wo, C, k, k)`` columns back onto a ``shape`` input."""
    b, c, h, w = shape
    _, ho, wo = dcols.shape[:3]
    out = np.zeros((b, c, h + 2 * padding, w + 2 * padding), dtype=dcols.dtype)
    src = dcols.transpose(0, 3, 4, 5, 1, 2)
    for i in range(k):
        for j in range(k):
            out[:, :, i : i + stride * (ho - 1) + 1 : stride, j : j + stride * (wo - 1) + 1 : stride] += src[:, :, i, j]
    if padding:
        out = out[:, :, padding:-padding, padding:-padding]
    return out


def _cols_matrix(x, k, stride, padding):
    """Contiguous ``(C*k*k, B*Ho*Wo)`` patch matrix.

    This layout copies whole image rows at a time, which is several times
    faster than the ``(B*Ho*Wo, C*k*k)`` ordering.
    """
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    view = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride]
    b, _, ho, wo = view.shape[:4]
    cols = np.ascontiguousarray(view.transpose(1, 4, 5, 0, 2, 3))
    return cols.reshape(-1, b * ho * wo), (b, ho, wo)


def _weight_grad(inp, grad_out, k, stride, padding, cols=None):
    if cols is None:
        cols, _ = _cols_matrix(inp, k, stride, padding)
    o = grad_out.shape[1]
    g = grad_out.transpose(1, 0, 2, 3).reshape(o, -1)
    return (g @ cols.T).reshape(o, inp.shape[1], k, k)


# ---------------------------------------------------------------------------
# Convolution
# ---------------------------------------------------------------------------


def conv2d_fwd(x: np.ndarray, p: ConvParams, return_cols: bool = False):
    """Cross-correlation with zero padding.

    With ``return_cols`` the patch matrix is returned as well so that
    :func:`conv2d_bwd` can reuse it.
    """
    _check4(x)
    out_ch, in_ch, k, _ = p.weight.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"conv expects {in_ch} input channels, got {x.shape[1]}")
    conv_output_size(x.shape[2], k, p.stride, p.padding)
    conv_output_size(x.shape[3], k, p.stride, p.padding)
    cols, (b, ho, wo) = _cols_matrix(x, k, p.stride, p.padding)
    y = p.weight.reshape(out_ch, -1) @ cols
    y += p.bias[:, None]
    y = np.ascontiguousarray(y.reshape(out_ch, b, ho, wo).transpose(1, 0, 2, 3))
    return (y, cols) if return_cols else y


def conv2d_bwd(x: np.ndarray, p: ConvParams, grad_out: np.ndarray, cols=None, need_grad_x: bool = True):
    """Returns ``(grad_x, grad_w, grad_b)``; ``grad_x`` is None if not needed."""
    _check4(grad_out, "grad_out")
    k = p.kernel_size
    ho = conv_output_size(x.shape[2], k, p.stride, p.padding)
    wo = conv_output_size(x.shape[3], k, p.stride, p.padding)
    if grad_out.shape != (x.shape[0], p.weight.shape[0], ho, wo):
        raise ValueError(f"grad_out shape {grad_out.shape} inconsistent with forward")
    grad_w = _weight_grad(x, grad_out, k, p.stride, p.padding, cols)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    grad_x = None
    if need_grad_x:
        if p.stride == 1 and p.padding <= k - 1:
            # full correlation with the flipped, channel-transposed kernel
            flipped = np.ascontiguousarray(p.weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
            zero = np.zeros(flipped.shape[0], dtype=grad_out.dtype)
            grad_x = conv2d_fwd(grad_out, ConvParams(flipped, zero, 1, k - 1 - p.padding))
        else:
            dcols = np.tensordot(grad_out.transpose(0, 2, 3, 1), p.weight, axes=([3], [0]))
            grad_x = _col2im(dcols, x.shape, k, p.stride, p.padding)
    return grad_x, grad_w, grad_b


def conv2d_transpose_fwd(x: np.ndarray, p: ConvParams) -> np.ndarray:
    """Fractionally strided convolution; the adjoint of :func:`conv2d_fwd`.

    Output size is ``(n - 1) * stride - 2 * padding + k``.
    """
    _check4(x)
    in_ch, out_ch, k, _ = p.weight.shape
    if x.shape[1] != in_ch:
        raise ValueError(f"transpose conv expects {in_ch} input channels, got {x.shape[1]}")
    b, _, h, w = x.shape
    ho = (h - 1) * p.stride - 2 * p.padding + k
    wo = (w - 1) * p.stride - 2 * p.padding + k
    if ho < 1 or wo < 1:
        raise ValueError("transpose conv output would be empty")
    dcols = np.tensordot(x, p.weight, axes=([1], [0]))  # (B, H, W, Cout, k, k)
    y = _col2im(dcols, (b, out_ch, ho, wo), k, p.stride, p.padding)
    y += p.bias[:, None, None]
    return y


def conv2d_transpose_bwd(x: np.ndarray, p: ConvParams, grad_out: np.ndarray):
    """Returns ``(grad_x, grad_w, grad_b)`` for :func:`conv2d_transpose_fwd`."""
    _check4(grad_out, "grad_out")
    k = p.kernel_size
    expect = (x.shape[0], p.weight.shape[1],
              (x.shape[2] - 1) * p.stride - 2 * p.padding + k,
              (x.shape[3] - 1) * p.stride - 2 * p.padding + k)
    if grad_out.shape != expect:
        raise ValueError(f"grad_out shape {grad_out.shape} inconsistent with forward {expect}")
    zero_bias = np.zeros(p.weight.shape[0], dtype=grad_out.dtype)
    grad_x = conv2d_fwd(grad_out, ConvParams(p.weight, zero_bias, p.stride, p.padding))
    # layout (in_ch, out_ch, k, k): in_ch pairs with x, out_ch with grad_out
    grad_w = _weight_grad(grad_out, x, k, p.stride, p.padding)
    grad_b = grad_out.sum(axis=(0, 2, 3))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# Sub-pixel rearrangement
# ---------------------------------------------------------------------------


def pixel_shuffle_fwd(x: np.ndarray, r: int) -> np.ndarray:
    """``(B, C*r*r, H, W) -> (B, C, H*r, W*r)``."""
    _check4(x)
    b, c, h, w = x.shape
    if c % (r * r):
        raise ValueError(f"{c} channels not divisible by r^2 = {r * r}")
    c //= r * r
    y = x.reshape(b, c, r, r, h, w).transpose(0, 1, 4, 2, 5, 3)
    return np.ascontiguousarray(y.reshape(b, c, h * r, w * r))


def pixel_unshuffle(x: np.ndarray, r: int) -> np.ndarray:
    """Exact inverse of :func:`pixel_shuffle_fwd`."""
    _check4(x)
    b, c, h, w = x.shape
    if h % r or w % r:
        raise ValueError(f"spatial size {h}x{w} not divisible by {r}")
    y = x.reshape(b, c, h // r, r, w // r, r).transpose(0, 1, 3, 5, 2, 4)
    return np.ascontiguousarray(y.reshape(b, c * r * r, h // r, w // r))


def pixel_shuffle_bwd(grad_out: np.ndarray, r: int) -> np.ndarray:
    return pixel_unshuffle(grad_out, r)


# ---------------------------------------------------------------------------
# Pointwise ops
# ---------------------------------------------------------------------------


def relu_fwd(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0)


def relu_bwd(x: np.ndarray, grad_out: np.ndarray) -> np.ndarray:
    return np.where(x > 0, grad_out, 0).astype(grad_out.dtype, copy=False)


def dropout_fwd(x: np.ndarray, rate: float, rng_seed, training: bool = True):
    """Inverted dropout. Returns ``(y, mask)``; ``mask`` is None at inference.

    ``rng_seed`` may be an int or a ``numpy.random.Generator``.
    """
    if not 0 <= rate < 1:
        raise ValueError(f"dropout rate must lie in [0, 1), got {rate}")
    if not training or rate == 0:
        return x, None
    rng = rng_seed if isinstance(rng_seed, np.random.Generator) else np.random.default_rng(rng_seed)
    mask = (rng.random(x.shape) >= rate).astype(x.dtype) / x.dtype.type(1 - rate)
    return x * mask, mask


def dropout_bwd(grad_out: np.ndarray, mask) -> np.ndarray:
    return grad_out if mask is None else grad_out * mask


def concat_channels(xs) -> np.ndarray:
    for x in xs:
        _check4(x)
    ref = xs[0].shape
    for x in xs[1:]:
        if x.shape[0] != ref[0] or x.shape[2:] != ref[2:]:
            raise ValueError(f"cannot concatenate {x.shape} with {ref}")
    return np.concatenate(xs, axis=1)


def split_channels(grad_out: np.ndarray, sizes) -> list:
    """Backward of :func:`concat_channels`: slice the gradient per input."""
    if sum(sizes) != grad_out.shape[1]:
        raise ValueError(f"sizes {sizes} do not cover {grad_out.shape[1]} channels")
    return np.split(grad_out, np.cumsum(sizes)[:-1], axis=1)


def add(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a + b


def add_bwd(grad_out: np.ndarray):
    return grad_out, grad_out
