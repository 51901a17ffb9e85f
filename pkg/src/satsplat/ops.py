"""Shared dense tensor operations with hand-written adjoints.

Everything here is plain numpy on float64. The convolution adjoints are exact
(including border handling), so gradient checks against finite differences
pass to tight tolerances.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def sigmoid(x):
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def softplus(x):
    return np.logaddexp(0.0, x)


def relu(x):
    return np.maximum(x, 0.0)


def upsample_bilinear(img: np.ndarray, out_shape) -> np.ndarray:
    """Resample to ``out_shape`` with the block-center mapping
    src = (dst + 0.5) * (src_size/dst_size) - 0.5, matching the stage-grid
    convention of :meth:`satsplat.rpc.RpcModel.scaled`."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, hs, ws = img.shape
    hd, wd = out_shape
    ys = np.clip((np.arange(hd) + 0.5) * (hs / hd) - 0.5, 0.0, hs - 1.0)
    xs = np.clip((np.arange(wd) + 0.5) * (ws / wd) - 0.5, 0.0, ws - 1.0)
    y0 = np.clip(np.floor(ys).astype(np.int64), 0, max(hs - 2, 0))
    x0 = np.clip(np.floor(xs).astype(np.int64), 0, max(ws - 2, 0))
    fy = np.clip(ys - y0, 0.0, 1.0)
    fx = np.clip(xs - x0, 0.0, 1.0)
    y1 = np.minimum(y0 + 1, hs - 1)
    x1 = np.minimum(x0 + 1, ws - 1)
    top = img[:, y0[:, None], x0[None, :]] * (1 - fx)[None, None, :] + img[
        :, y0[:, None], x1[None, :]
    ] * fx[None, None, :]
    bot = img[:, y1[:, None], x0[None, :]] * (1 - fx)[None, None, :] + img[
        :, y1[:, None], x1[None, :]
    ] * fx[None, None, :]
    out = top * (1 - fy)[None, :, None] + bot * fy[None, :, None]
    return out[0] if squeeze else out


# ---------------------------------------------------------------------------
# zero-padded 'same' 2D convolution (cross-correlation) with exact backward
# ---------------------------------------------------------------------------


def conv2d(x: np.ndarray, w: np.ndarray, b: np.ndarray | None = None) -> np.ndarray:
    """x (Ci,H,W), w (Co,Ci,kh,kw) odd kernel, zero 'same' padding."""
    ci, h, wd = x.shape
    co, ci2, kh, kw = w.shape
    assert ci == ci2, "channel mismatch"
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    out = np.einsum("oikl,ihwkl->ohw", w, win, optimize=True)
    if b is not None:
        out += b[:, None, None]
    return out


def conv2d_backward(x: np.ndarray, w: np.ndarray, grad_out: np.ndarray):
    """Returns (grad_x, grad_w, grad_b) for :func:`conv2d`."""
    ci, h, wd = x.shape
    co, _, kh, kw = w.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    grad_w = np.einsum("ohw,ihwkl->oikl", grad_out, win, optimize=True)
    grad_b = grad_out.sum(axis=(1, 2))
    w_t = np.flip(w, axis=(-2, -1)).transpose(1, 0, 2, 3)
    grad_x = conv2d(grad_out, np.ascontiguousarray(w_t))
    return grad_x, grad_w, grad_b


# ---------------------------------------------------------------------------
# symmetric-padded window correlation (for SSIM) with exact adjoint
# ---------------------------------------------------------------------------


def gaussian_window(size: int = 11, sigma: float = 1.5) -> np.ndarray:
    r = np.arange(size) - (size - 1) / 2.0
    k = np.exp(-0.5 * (r / sigma) ** 2)
    k2 = np.outer(k, k)
    return k2 / k2.sum()


def win_corr(x: np.ndarray, k2d: np.ndarray) -> np.ndarray:
    """Correlate (H,W) with a window under edge-mirrored (symmetric) padding."""
    r = k2d.shape[0] // 2
    xp = np.pad(x, r, mode="symmetric")
    win = sliding_window_view(xp, k2d.shape)
    return np.einsum("hwkl,kl->hw", win, k2d, optimize=True)


def win_corr_adjoint(g: np.ndarray, k2d: np.ndarray) -> np.ndarray:
    """Exact adjoint of :func:`win_corr` (border mirror contributions folded)."""
    r = k2d.shape[0] // 2
    h, w = g.shape
    gp = np.pad(g, 2 * r)
    win = sliding_window_view(gp, k2d.shape)
    kf = np.ascontiguousarray(np.flip(k2d))
    gxp = np.einsum("hwkl,kl->hw", win, kf, optimize=True)  # (h+2r, w+2r)
    idx_h = np.pad(np.arange(h), r, mode="symmetric")
    idx_w = np.pad(np.arange(w), r, mode="symmetric")
    out = np.zeros((h, w))
    np.add.at(out, (idx_h[:, None], idx_w[None, :]), gxp)
    return out


def block_mean(img: np.ndarray, factor: int) -> np.ndarray:
    """Area-averaged downsampling by an integer factor (anti-aliased pyramid
    level aligned with the block-center convention)."""
    img = np.asarray(img, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[None]
    c, h, w = img.shape
    if h % factor or w % factor:
        raise ValueError("image size must be divisible by the downsample factor")
    out = img.reshape(c, h // factor, factor, w // factor, factor).mean(axis=(2, 4))
    return out[0] if squeeze else out
