"""Correlation and resampling primitives on float64 arrays.

Arrays are plain ``numpy.ndarray`` in row-major order; feature maps use the
``[M, N_s, H, W]`` channel-major layout. "Convolution" here is correlation:
``out[h, w] = sum x[h + i, w + j] * k[i, j]``.
"""
from dataclasses import dataclass

import numpy as np

from . import kernels
from .errors import ConfigurationError, DimensionError


@dataclass
class FlopCounter:
    """Running count of floating point operations."""

    count: int = 0

    def add(self, n):
        n = int(n)
        if n < 0:
            raise ValueError("flop increments must be non-negative")
        self.count += n

    def reset(self):
        self.count = 0


def _add(counter, n):
    if counter is not None:
        counter.add(n)


def conv2d_valid(x, kernel, counter=None):
    """Multi-channel valid correlation ``[C, H, W] x [C, L, L] -> [H-L+1, W-L+1]``."""
    x = np.asarray(x, dtype=np.float64)
    kernel = np.asarray(kernel, dtype=np.float64)
    if x.ndim != 3:
        raise DimensionError(f"input must be [C, H, W], got ndim={x.ndim}")
    if kernel.ndim != 3:
        raise DimensionError(f"kernel must be [C, L, L], got ndim={kernel.ndim}")
    C, H, W = x.shape
    if kernel.shape[0] != C:
        raise DimensionError(f"channel axis: kernel has {kernel.shape[0]}, input has {C}")
    L = kernel.shape[1]
    if kernel.shape[2] != L:
        raise DimensionError(f"kernel axis 2: expected square {L}x{L}, got {kernel.shape[1:]}")
    if L > H:
        raise DimensionError(f"height axis: kernel {L} exceeds input {H}")
    if L > W:
        raise DimensionError(f"width axis: kernel {L} exceeds input {W}")
    out = kernels.corr2d_valid(x, kernel)
    _add(counter, 2 * C * L * L * out.shape[0] * out.shape[1])
    return out


SPATIAL_PADDINGS = ("zero", "edge")


def pad_spatial(x, p, mode="zero"):
    """Pad the last two axes by ``p`` on every side with zeros or edge copies."""
    if mode not in SPATIAL_PADDINGS:
        raise ConfigurationError(f"spatial padding must be one of {SPATIAL_PADDINGS}, got {mode!r}")
    width = [(0, 0)] * (x.ndim - 2) + [(p, p), (p, p)]
    return np.pad(x, width, mode="constant" if mode == "zero" else "edge")


def unpad_spatial_grad(g, p, mode="zero"):
    """Adjoint of :func:`pad_spatial`: fold the border gradient back onto the image."""
    if p == 0:
        return g
    if mode == "edge":
        g = g.copy()
        g[..., p, :] += g[..., :p, :].sum(axis=-2)
        g[..., -p - 1, :] += g[..., -p:, :].sum(axis=-2)
        g[..., :, p] += g[..., :, :p].sum(axis=-1)
        g[..., :, -p - 1] += g[..., :, -p:].sum(axis=-1)
    return g[..., p:-p, p:-p]


def conv2d_same(x, kernel, counter=None):
    """:func:`conv2d_valid` on the input zero-padded by ``(L-1)/2``; keeps ``H x W``."""
    kernel = np.asarray(kernel, dtype=np.float64)
    L = kernel.shape[-1]
    if L % 2 == 0:
        raise ConfigurationError(f"same-padding needs an odd kernel size, got L={L}")
    x = np.asarray(x, dtype=np.float64)
    return conv2d_valid(pad_spatial(x, (L - 1) // 2), kernel, counter)


def correlate_batch(x, w, pad=0, pad_mode="zero"):
    """Batched multi-channel correlation via im2col.

    ``x[N, C, H, W]`` with weights ``w[O, C, L, L]`` gives ``[N, O, Ho, Wo]``.
    Returns ``(out, cols)`` so callers can keep the patch matrix for backward.
    """
    N, C, H, W = x.shape
    O, Cw, L, _ = w.shape
    if Cw != C:
        raise DimensionError(f"channel axis: weights have {Cw}, input has {C}")
    if pad:
        x = pad_spatial(x, pad, pad_mode)
    cols = kernels.im2col(x, L)
    Ho, Wo = cols.shape[1], cols.shape[2]
    out = cols.reshape(N * Ho * Wo, C * L * L) @ w.reshape(O, C * L * L).T
    return out.reshape(N, Ho, Wo, O).transpose(0, 3, 1, 2), cols


def correlate_batch_backward(grad_out, cols, w, input_hw, pad=0, pad_mode="zero"):
    """Gradients of :func:`correlate_batch` w.r.t. weights and input."""
    N, O, Ho, Wo = grad_out.shape
    _, C, L, _ = w.shape
    g = grad_out.transpose(0, 2, 3, 1).reshape(N * Ho * Wo, O)
    gw = (g.T @ cols.reshape(N * Ho * Wo, C * L * L)).reshape(w.shape)
    gcols = (g @ w.reshape(O, C * L * L)).reshape(N, Ho, Wo, C, L, L)
    H, W = input_hw
    gx = kernels.col2im(gcols, H + 2 * pad, W + 2 * pad)
    return gw, unpad_spatial_grad(gx, pad, pad_mode)


def identity_map(H, W):
    rows, cols = np.meshgrid(np.arange(H, dtype=np.float64), np.arange(W, dtype=np.float64),
                             indexing="ij")
    return rows, cols


def resample_bilinear(img, rows, cols=None):
    """Bilinear interpolation of ``img[C, H, W]`` (or ``[H, W]``) at a coordinate field.

    ``rows``/``cols`` are arrays of the output grid shape holding the source
    coordinates ``rho(p)`` in pixels. Passing a single ``[2, H, W]`` array as
    ``rows`` is also accepted. Reads outside the image are zero.
    """
    if cols is None:
        rows, cols = rows[0], rows[1]
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    lead = img.shape[:-2]
    flat = img.reshape((-1,) + img.shape[-2:])
    out = kernels.bilinear_sample(flat, rows, cols)
    out = out.reshape(lead + out.shape[-2:])
    return out[0] if squeeze else out
