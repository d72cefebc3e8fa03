"""
Image ops for the U-Net: convolution, 2×2 max-pool, 2× nearest upsampling.

All inputs are [B, C, H, W]. Convolution is cross-correlation (no kernel
flip), same as every deep learning framework.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from engine.autograd.tensor import Tensor
from engine.errors import ShapeError


def conv2d(inp: Tensor, kernel: Tensor, bias: Tensor | None = None,
           stride: int = 1, padding: int = 0) -> Tensor:
    """
    inp [B,C,H,W] ⋆ kernel [F,C,k,k] (+ bias [F]) → [B,F,Ho,Wo]

    Ho = (H + 2·padding − k) // stride + 1. k must be odd.
    """
    if inp.ndim != 4 or kernel.ndim != 4:
        raise ShapeError(f"conv2d needs 4-D input/kernel, got {list(inp.shape)} / {list(kernel.shape)}")
    batch, channels, height, width = inp.shape
    filters, kernel_channels, k, k2 = kernel.shape
    if kernel_channels != channels:
        raise ShapeError(f"conv2d: input has {channels} channels, kernel expects {kernel_channels}")
    if k != k2 or k % 2 == 0:
        raise ShapeError(f"conv2d: kernel must be square with odd size, got {k}×{k2}")
    if bias is not None and bias.shape != (filters,):
        raise ShapeError(f"conv2d: bias shape {list(bias.shape)} != [{filters}]")
    if stride < 1 or padding < 0:
        raise ShapeError("conv2d: stride must be ≥ 1 and padding ≥ 0")
    out_h = (height + 2 * padding - k) // stride + 1
    out_w = (width + 2 * padding - k) // stride + 1
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"conv2d: {k}×{k} kernel doesn't fit a {height}×{width} map")

    x = inp.data
    if padding:
        x = np.pad(x, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    # [B, C, Ho, Wo, k, k]
    windows = sliding_window_view(x, (k, k), axis=(2, 3))[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    out = np.tensordot(windows, kernel.data, axes=([1, 4, 5], [1, 2, 3])).transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]

    def _backward(g):
        grad_kernel = np.tensordot(g, windows, axes=([0, 2, 3], [0, 2, 3]))
        grad_padded = np.zeros(x.shape)
        for i in range(k):
            for j in range(k):
                rows = slice(i, i + stride * (out_h - 1) + 1, stride)
                cols = slice(j, j + stride * (out_w - 1) + 1, stride)
                grad_padded[:, :, rows, cols] += np.einsum("bfhw,fc->bchw", g, kernel.data[:, :, i, j])
        grad_inp = grad_padded[:, :, padding:padding + height, padding:padding + width]
        grads = [grad_inp, grad_kernel]
        if bias is not None:
            grads.append(g.sum(axis=(0, 2, 3)))
        return grads

    parents = (inp, kernel) if bias is None else (inp, kernel, bias)
    return Tensor._from_op(out, parents, "conv2d", _backward)


def max_pool2d(inp: Tensor) -> Tensor:
    """2×2 max-pool, stride 2. Remembers the winning cell (first one on ties)."""
    if inp.ndim != 4:
        raise ShapeError(f"max_pool2d needs [B,C,H,W], got {list(inp.shape)}")
    batch, channels, height, width = inp.shape
    if height % 2 or width % 2:
        raise ShapeError(f"max_pool2d: odd spatial dims {height}×{width}")
    h, w = height // 2, width // 2
    cells = (inp.data.reshape(batch, channels, h, 2, w, 2)
             .transpose(0, 1, 2, 4, 3, 5)
             .reshape(batch, channels, h, w, 4))
    winner = cells.argmax(axis=-1)
    out = np.take_along_axis(cells, winner[..., None], axis=-1)[..., 0]

    def _backward(g):
        spread = np.zeros((batch, channels, h, w, 4))
        np.put_along_axis(spread, winner[..., None], g[..., None], axis=-1)
        return (spread.reshape(batch, channels, h, w, 2, 2)
                .transpose(0, 1, 2, 4, 3, 5)
                .reshape(batch, channels, height, width),)

    return Tensor._from_op(out, (inp,), "max_pool2d", _backward)


def upsample2d(inp: Tensor) -> Tensor:
    """2× nearest-neighbour upsampling; the gradient sums each 2×2 block."""
    if inp.ndim != 4:
        raise ShapeError(f"upsample2d needs [B,C,H,W], got {list(inp.shape)}")
    batch, channels, h, w = inp.shape
    out = inp.data.repeat(2, axis=2).repeat(2, axis=3)
    return Tensor._from_op(
        out, (inp,), "upsample2d",
        lambda g: (g.reshape(batch, channels, h, 2, w, 2).sum(axis=(3, 5)),),
    )
