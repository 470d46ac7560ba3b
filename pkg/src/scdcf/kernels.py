"""Hot loops: direct correlation, im2col/col2im and bilinear sampling.

Each kernel has a numba body and a numpy body with the same contract. The
public wrappers dispatch on :data:`scdcf._jit.USE_NUMBA`; both paths are
deterministic (fixed summation order), but they are not guaranteed to agree
bit-for-bit with each other.
"""
import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from . import _jit
from ._jit import njit


# -- direct multi-channel correlation ------------------------------------------------

@njit
def _corr2d_valid_nb(x, k):
    C, H, W = x.shape
    L1, L2 = k.shape[1], k.shape[2]
    Ho, Wo = H - L1 + 1, W - L2 + 1
    out = np.zeros((Ho, Wo))
    for h in range(Ho):
        for w in range(Wo):
            acc = 0.0
            for c in range(C):
                for i in range(L1):
                    for j in range(L2):
                        acc += x[c, h + i, w + j] * k[c, i, j]
            out[h, w] = acc
    return out


def _corr2d_valid_np(x, k):
    win = sliding_window_view(x, k.shape[1:], axis=(1, 2))  # [C, Ho, Wo, L, L]
    return np.einsum("chwij,cij->hw", win, k)


def corr2d_valid(x, k):
    x = np.ascontiguousarray(x, dtype=np.float64)
    k = np.ascontiguousarray(k, dtype=np.float64)
    if _jit.USE_NUMBA:
        return _corr2d_valid_nb(x, k)
    return _corr2d_valid_np(x, k)


# -- im2col / col2im -----------------------------------------------------------------

@njit
def _im2col_nb(x, L):
    N, C, H, W = x.shape
    Ho, Wo = H - L + 1, W - L + 1
    out = np.empty((N, Ho, Wo, C, L, L))
    for n in range(N):
        for h in range(Ho):
            for w in range(Wo):
                for c in range(C):
                    for i in range(L):
                        for j in range(L):
                            out[n, h, w, c, i, j] = x[n, c, h + i, w + j]
    return out


def _im2col_np(x, L):
    win = sliding_window_view(x, (L, L), axis=(2, 3))  # [N, C, Ho, Wo, L, L]
    return np.ascontiguousarray(win.transpose(0, 2, 3, 1, 4, 5))


def im2col(x, L):
    """Patches of a padded batch ``x[N, C, H, W]`` as ``[N, Ho, Wo, C, L, L]``."""
    x = np.ascontiguousarray(x, dtype=np.float64)
    if _jit.USE_NUMBA:
        return _im2col_nb(x, L)
    return _im2col_np(x, L)


@njit
def _col2im_nb(cols, H, W):
    N, Ho, Wo, C, L, _ = cols.shape
    out = np.zeros((N, C, H, W))
    for n in range(N):
        for c in range(C):
            for i in range(L):
                for j in range(L):
                    for h in range(Ho):
                        for w in range(Wo):
                            out[n, c, h + i, w + j] += cols[n, h, w, c, i, j]
    return out


def _col2im_np(cols, H, W):
    N, Ho, Wo, C, L, _ = cols.shape
    out = np.zeros((N, C, H, W))
    src = cols.transpose(0, 3, 4, 5, 1, 2)  # [N, C, L, L, Ho, Wo]
    for i in range(L):
        for j in range(L):
            out[:, :, i:i + Ho, j:j + Wo] += src[:, :, i, j]
    return out


def col2im(cols, H, W):
    """Adjoint of :func:`im2col`: scatter-add patches back onto ``[N, C, H, W]``."""
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if _jit.USE_NUMBA:
        return _col2im_nb(cols, H, W)
    return _col2im_np(cols, H, W)


# -- bilinear sampling ----------------------------------------------------------------

@njit
def _bilinear_nb(img, rows, cols):
    C, H, W = img.shape
    Ho, Wo = rows.shape
    out = np.zeros((C, Ho, Wo))
    for p in range(Ho):
        for q in range(Wo):
            r = rows[p, q]
            s = cols[p, q]
            r0 = int(np.floor(r))
            s0 = int(np.floor(s))
            fr = r - r0
            fs = s - s0
            for dr in range(2):
                rr = r0 + dr
                if rr < 0 or rr >= H:
                    continue
                wr = fr if dr == 1 else 1.0 - fr
                if wr == 0.0:
                    continue
                for ds in range(2):
                    ss = s0 + ds
                    if ss < 0 or ss >= W:
                        continue
                    ws = fs if ds == 1 else 1.0 - fs
                    if ws == 0.0:
                        continue
                    wgt = wr * ws
                    for c in range(C):
                        out[c, p, q] += wgt * img[c, rr, ss]
    return out


def _bilinear_np(img, rows, cols):
    C, H, W = img.shape
    r0 = np.floor(rows).astype(np.int64)
    s0 = np.floor(cols).astype(np.int64)
    fr = rows - r0
    fs = cols - s0
    out = np.zeros((C,) + rows.shape)
    for dr in (0, 1):
        rr = r0 + dr
        wr = fr if dr else 1.0 - fr
        for ds in (0, 1):
            ss = s0 + ds
            ws = fs if ds else 1.0 - fs
            ok = (rr >= 0) & (rr < H) & (ss >= 0) & (ss < W) & (wr != 0.0) & (ws != 0.0)
            wgt = np.where(ok, wr * ws, 0.0)
            vals = img[:, np.clip(rr, 0, H - 1), np.clip(ss, 0, W - 1)]
            out += wgt * vals
    return out


def bilinear_sample(img, rows, cols):
    """Sample ``img[C, H, W]`` at fractional ``(rows, cols)``; outside reads 0."""
    img = np.ascontiguousarray(img, dtype=np.float64)
    rows = np.ascontiguousarray(rows, dtype=np.float64)
    cols = np.ascontiguousarray(cols, dtype=np.float64)
    if _jit.USE_NUMBA:
        return _bilinear_nb(img, rows, cols)
    return _bilinear_np(img, rows, cols)
