"""Hot numeric kernels: numba-jitted loops with pure-numpy fallbacks.

Every kernel exists in two numerically equivalent forms: a ``*_np`` pure-numpy
implementation and a numba ``@njit`` loop implementation. The active backend is
chosen at import time from the ``SATSPLAT_NUMBA`` environment variable
("0"/"false"/"off"/"no" selects the numpy path) and can be switched at runtime
with :func:`set_backend`. ``benchmarks/bench_kernels.py`` times both paths.

Floating point note: within one backend all reductions run in a fixed
documented order, so results are bit-stable run to run. Across backends the
same operation sequence is used, but vectorized libm (exp) may differ from
scalar libm in the last ulp.
"""

from __future__ import annotations

import math
import os

import numpy as np

try:
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    HAVE_NUMBA = False

    def njit(*args, **kwargs):  # type: ignore[misc]
        def wrap(fn):
            return fn

        if args and callable(args[0]):
            return args[0]
        return wrap


def _env_wants_numba() -> bool:
    flag = os.environ.get("SATSPLAT_NUMBA", "1").strip().lower()
    return flag not in ("0", "false", "off", "no")


_backend = "numba" if (HAVE_NUMBA and _env_wants_numba()) else "numpy"


def set_backend(name: str) -> None:
    """Select 'numba' or 'numpy' for all subsequent kernel calls."""
    global _backend
    if name not in ("numba", "numpy"):
        raise ValueError("backend must be 'numba' or 'numpy'")
    if name == "numba" and not HAVE_NUMBA:
        raise RuntimeError("numba is not importable in this environment")
    _backend = name


def active_backend() -> str:
    return _backend


# ---------------------------------------------------------------------------
# RPC cubic polynomial batch evaluation
#
# Term order (RPC00B, L=lon_n, P=lat_n, H=hei_n):
#   1, L, P, H, LP, LH, PH, L2, P2, H2,
#   LPH, L3, LP2, LH2, L2P, P3, PH2, L2H, P2H, H3
# Both paths accumulate the 20 terms in exactly this order.
# ---------------------------------------------------------------------------


def poly20_batch_np(coefs: np.ndarray, L: np.ndarray, P: np.ndarray, H: np.ndarray) -> np.ndarray:
    LP = L * P
    LH = L * H
    PH = P * H
    L2 = L * L
    P2 = P * P
    H2 = H * H
    out = np.empty((coefs.shape[0], L.shape[0]))
    for m in range(coefs.shape[0]):
        c = coefs[m]
        acc = c[0] + c[1] * L
        acc = acc + c[2] * P
        acc = acc + c[3] * H
        acc = acc + c[4] * LP
        acc = acc + c[5] * LH
        acc = acc + c[6] * PH
        acc = acc + c[7] * L2
        acc = acc + c[8] * P2
        acc = acc + c[9] * H2
        acc = acc + c[10] * LP * H
        acc = acc + c[11] * L2 * L
        acc = acc + c[12] * L * P2
        acc = acc + c[13] * L * H2
        acc = acc + c[14] * L2 * P
        acc = acc + c[15] * P2 * P
        acc = acc + c[16] * P * H2
        acc = acc + c[17] * L2 * H
        acc = acc + c[18] * P2 * H
        acc = acc + c[19] * H2 * H
        out[m] = acc
    return out


@njit(cache=True)
def poly20_batch_nb(coefs, L, P, H):  # pragma: no cover - exercised via dispatch
    n = L.shape[0]
    m = coefs.shape[0]
    out = np.empty((m, n))
    for j in range(m):
        c = coefs[j]
        for i in range(n):
            l = L[i]
            p = P[i]
            h = H[i]
            lp = l * p
            lh = l * h
            ph = p * h
            l2 = l * l
            p2 = p * p
            h2 = h * h
            acc = c[0] + c[1] * l
            acc = acc + c[2] * p
            acc = acc + c[3] * h
            acc = acc + c[4] * lp
            acc = acc + c[5] * lh
            acc = acc + c[6] * ph
            acc = acc + c[7] * l2
            acc = acc + c[8] * p2
            acc = acc + c[9] * h2
            acc = acc + c[10] * lp * h
            acc = acc + c[11] * l2 * l
            acc = acc + c[12] * l * p2
            acc = acc + c[13] * l * h2
            acc = acc + c[14] * l2 * p
            acc = acc + c[15] * p2 * p
            acc = acc + c[16] * p * h2
            acc = acc + c[17] * l2 * h
            acc = acc + c[18] * p2 * h
            acc = acc + c[19] * h2 * h
            out[j, i] = acc
    return out


def poly20_batch(coefs, L, P, H):
    coefs = np.ascontiguousarray(coefs, dtype=np.float64)
    L = np.ascontiguousarray(L, dtype=np.float64)
    P = np.ascontiguousarray(P, dtype=np.float64)
    H = np.ascontiguousarray(H, dtype=np.float64)
    if _backend == "numba":
        return poly20_batch_nb(coefs, L, P, H)
    return poly20_batch_np(coefs, L, P, H)


# ---------------------------------------------------------------------------
# Bilinear gather with zero fill and validity mask. Coordinates within
# EDGE_EPS of the array border count as in bounds (solver round-off).
# ---------------------------------------------------------------------------

EDGE_EPS = 1e-6


def bilinear_gather_np(src: np.ndarray, u: np.ndarray, v: np.ndarray):
    c, h, w = src.shape
    valid = (u >= -EDGE_EPS) & (u <= w - 1.0 + EDGE_EPS) \
        & (v >= -EDGE_EPS) & (v <= h - 1.0 + EDGE_EPS)
    valid &= np.isfinite(u) & np.isfinite(v)
    uc = np.clip(u, 0.0, w - 1.0)
    vc = np.clip(v, 0.0, h - 1.0)
    x0 = np.minimum(np.floor(uc).astype(np.int64), w - 2) if w > 1 else np.zeros(u.shape, np.int64)
    y0 = np.minimum(np.floor(vc).astype(np.int64), h - 2) if h > 1 else np.zeros(v.shape, np.int64)
    x0 = np.maximum(x0, 0)
    y0 = np.maximum(y0, 0)
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = uc - x0
    fy = vc - y0
    w00 = (1 - fx) * (1 - fy)
    w01 = fx * (1 - fy)
    w10 = (1 - fx) * fy
    w11 = fx * fy
    out = (
        src[:, y0, x0] * w00
        + src[:, y0, x1] * w01
        + src[:, y1, x0] * w10
        + src[:, y1, x1] * w11
    )
    out = out * valid
    return out, valid


@njit(cache=True)
def bilinear_gather_nb(src, u, v):  # pragma: no cover - exercised via dispatch
    c, h, w = src.shape
    n = u.shape[0]
    out = np.zeros((c, n))
    valid = np.zeros(n, np.bool_)
    for i in range(n):
        ui = u[i]
        vi = v[i]
        if not (math.isfinite(ui) and math.isfinite(vi)):
            continue
        if ui < -1e-6 or ui > w - 1.0 + 1e-6 or vi < -1e-6 or vi > h - 1.0 + 1e-6:
            continue
        ui = min(max(ui, 0.0), w - 1.0)
        vi = min(max(vi, 0.0), h - 1.0)
        valid[i] = True
        x0 = int(math.floor(ui))
        y0 = int(math.floor(vi))
        if x0 > w - 2:
            x0 = w - 2
        if x0 < 0:
            x0 = 0
        if y0 > h - 2:
            y0 = h - 2
        if y0 < 0:
            y0 = 0
        x1 = min(x0 + 1, w - 1)
        y1 = min(y0 + 1, h - 1)
        fx = ui - x0
        fy = vi - y0
        w00 = (1 - fx) * (1 - fy)
        w01 = fx * (1 - fy)
        w10 = (1 - fx) * fy
        w11 = fx * fy
        for ch in range(c):
            out[ch, i] = (
                src[ch, y0, x0] * w00
                + src[ch, y0, x1] * w01
                + src[ch, y1, x0] * w10
                + src[ch, y1, x1] * w11
            )
    return out, valid


def bilinear_gather(src, u, v):
    src = np.ascontiguousarray(src, dtype=np.float64)
    u = np.ascontiguousarray(u, dtype=np.float64)
    v = np.ascontiguousarray(v, dtype=np.float64)
    if _backend == "numba":
        return bilinear_gather_nb(src, u, v)
    return bilinear_gather_np(src, u, v)


# ---------------------------------------------------------------------------
# Separable 3-tap smoothing over a (K, H, W) volume, edge-clamped padding
# ---------------------------------------------------------------------------


def smooth3_np(vol: np.ndarray, taps: np.ndarray) -> np.ndarray:
    out = vol
    for axis in range(3):
        p = np.moveaxis(out, axis, 0)
        lo = p[:1]
        hi = p[-1:]
        padded = np.concatenate([lo, p, hi], axis=0)
        p = taps[0] * padded[:-2] + taps[1] * padded[1:-1] + taps[2] * padded[2:]
        out = np.moveaxis(p, 0, axis)
    return out


@njit(cache=True)
def smooth3_nb(vol, taps):  # pragma: no cover - exercised via dispatch
    k, h, w = vol.shape
    a = np.empty_like(vol)
    b = np.empty_like(vol)
    for y in range(h):
        for x in range(w):
            for z in range(k):
                zm = z - 1 if z > 0 else 0
                zp = z + 1 if z < k - 1 else k - 1
                a[z, y, x] = taps[0] * vol[zm, y, x] + taps[1] * vol[z, y, x] + taps[2] * vol[zp, y, x]
    for z in range(k):
        for x in range(w):
            for y in range(h):
                ym = y - 1 if y > 0 else 0
                yp = y + 1 if y < h - 1 else h - 1
                b[z, y, x] = taps[0] * a[z, ym, x] + taps[1] * a[z, y, x] + taps[2] * a[z, yp, x]
    for z in range(k):
        for y in range(h):
            for x in range(w):
                xm = x - 1 if x > 0 else 0
                xp = x + 1 if x < w - 1 else w - 1
                a[z, y, x] = taps[0] * b[z, y, xm] + taps[1] * b[z, y, x] + taps[2] * b[z, y, xp]
    return a


def smooth3(vol, taps=(0.25, 0.5, 0.25)):
    vol = np.ascontiguousarray(vol, dtype=np.float64)
    taps = np.asarray(taps, dtype=np.float64)
    if _backend == "numba":
        return smooth3_nb(vol, taps)
    return smooth3_np(vol, taps)


# ---------------------------------------------------------------------------
# Front-to-back alpha compositing of oriented elliptical splats.
#
# Per splat: footprint coordinates s = minv @ (pixel - uv0), Gaussian weight
# exp(-d^2/2) with d^2 = |s|^2 truncated at d2max (default 18, where the
# weight falls below 1.2e-4), intersection height z = zc[0] + zc[1]*s_u +
# zc[2]*s_v. `order` lists splat ids front-to-back; ties were already broken
# on splat index by the caller's stable sort.
# ---------------------------------------------------------------------------


def composite_forward_np(order, uv0, minv, zc, color, alpha, radius, h, w, tile=16, d2max=18.0):
    rgb = np.zeros((h, w, 3))
    hraw = np.zeros((h, w))
    acc = np.zeros((h, w))
    trans = np.ones((h, w))
    for oi in range(order.shape[0]):
        i = order[oi]
        u0 = uv0[i, 0]
        v0 = uv0[i, 1]
        r = radius[i]
        x0 = max(0, int(math.ceil(u0 - r)))
        x1 = min(w - 1, int(math.floor(u0 + r)))
        y0 = max(0, int(math.ceil(v0 - r)))
        y1 = min(h - 1, int(math.floor(v0 + r)))
        if x1 < x0 or y1 < y0:
            continue
        du = np.arange(x0, x1 + 1)[None, :] - u0
        dv = np.arange(y0, y1 + 1)[:, None] - v0
        su = minv[i, 0, 0] * du + minv[i, 0, 1] * dv
        sv = minv[i, 1, 0] * du + minv[i, 1, 1] * dv
        d2 = su * su + sv * sv
        inside = d2 <= d2max
        if not inside.any():
            continue
        g = np.where(inside, np.exp(-0.5 * d2), 0.0)
        a = alpha[i] * g
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        tw = trans[win]
        contrib = tw * a
        z = zc[i, 0] + zc[i, 1] * su + zc[i, 2] * sv
        rgb[win] += contrib[:, :, None] * color[i][None, None, :]
        hraw[win] += contrib * z
        acc[win] += contrib
        trans[win] = tw * (1.0 - a)
    return rgb, hraw, acc


def composite_backward_np(order, uv0, minv, zc, color, alpha, radius, h, w,
                          grad_rgb, grad_hraw, grad_acc, tile=16, d2max=18.0):
    n = order.shape[0]
    nsplat = uv0.shape[0]
    g_uv0 = np.zeros((nsplat, 2))
    g_minv = np.zeros((nsplat, 2, 2))
    g_zc = np.zeros((nsplat, 3))
    g_color = np.zeros((nsplat, 3))
    g_alpha = np.zeros(nsplat)

    # sweep A: forward, caching the pre-composite transmittance of each window
    trans = np.ones((h, w))
    cache = []
    for oi in range(n):
        i = order[oi]
        u0 = uv0[i, 0]
        v0 = uv0[i, 1]
        r = radius[i]
        x0 = max(0, int(math.ceil(u0 - r)))
        x1 = min(w - 1, int(math.floor(u0 + r)))
        y0 = max(0, int(math.ceil(v0 - r)))
        y1 = min(h - 1, int(math.floor(v0 + r)))
        if x1 < x0 or y1 < y0:
            cache.append(None)
            continue
        du = np.arange(x0, x1 + 1)[None, :] - u0
        dv = np.arange(y0, y1 + 1)[:, None] - v0
        su = minv[i, 0, 0] * du + minv[i, 0, 1] * dv
        sv = minv[i, 1, 0] * du + minv[i, 1, 1] * dv
        d2 = su * su + sv * sv
        inside = d2 <= d2max
        g = np.where(inside, np.exp(-0.5 * d2), 0.0)
        a = alpha[i] * g
        win = (slice(y0, y1 + 1), slice(x0, x1 + 1))
        tw = trans[win].copy()
        cache.append((win, du, dv, su, sv, g, a, tw))
        trans[win] = tw * (1.0 - a)

    # sweep B: back-to-front with division-free suffix accumulators
    s_rgb = np.zeros((h, w, 3))
    s_h = np.zeros((h, w))
    s_acc = np.zeros((h, w))
    for oi in range(n - 1, -1, -1):
        entry = cache[oi]
        if entry is None:
            continue
        i = order[oi]
        win, du, dv, su, sv, g, a, tw = entry
        z = zc[i, 0] + zc[i, 1] * su + zc[i, 2] * sv
        gr = grad_rgb[win]
        gh = grad_hraw[win]
        ga = grad_acc[win]
        w_ta = tw * a
        da = (gr * (color[i][None, None, :] - s_rgb[win])).sum(axis=2)
        da += gh * (z - s_h[win])
        da += ga * (1.0 - s_acc[win])
        da *= tw
        g_color[i] += (gr * w_ta[:, :, None]).sum(axis=(0, 1))
        dz = gh * w_ta
        g_zc[i, 0] += dz.sum()
        g_zc[i, 1] += (dz * su).sum()
        g_zc[i, 2] += (dz * sv).sum()
        g_alpha[i] += (da * g).sum()
        dg = da * alpha[i]
        dd2 = -0.5 * g * dg
        dsu = 2.0 * su * dd2 + dz * zc[i, 1]
        dsv = 2.0 * sv * dd2 + dz * zc[i, 2]
        g_minv[i, 0, 0] += (dsu * du).sum()
        g_minv[i, 0, 1] += (dsu * dv).sum()
        g_minv[i, 1, 0] += (dsv * du).sum()
        g_minv[i, 1, 1] += (dsv * dv).sum()
        ddu = minv[i, 0, 0] * dsu + minv[i, 1, 0] * dsv
        ddv = minv[i, 0, 1] * dsu + minv[i, 1, 1] * dsv
        g_uv0[i, 0] -= ddu.sum()
        g_uv0[i, 1] -= ddv.sum()
        s_rgb[win] = a[:, :, None] * color[i][None, None, :] + (1.0 - a)[:, :, None] * s_rgb[win]
        s_h[win] = a * z + (1.0 - a) * s_h[win]
        s_acc[win] = a + (1.0 - a) * s_acc[win]
    return g_uv0, g_minv, g_zc, g_color, g_alpha


@njit(cache=True)
def _bin_tiles(order, uv0, radius, h, w, tile):  # pragma: no cover - via dispatch
    ntx = (w + tile - 1) // tile
    nty = (h + tile - 1) // tile
    ntiles = ntx * nty
    counts = np.zeros(ntiles + 1, np.int64)
    n = order.shape[0]
    for oi in range(n):
        i = order[oi]
        u0 = uv0[i, 0]
        v0 = uv0[i, 1]
        r = radius[i]
        tx0 = int(math.floor((u0 - r) / tile))
        tx1 = int(math.floor((u0 + r) / tile))
        ty0 = int(math.floor((v0 - r) / tile))
        ty1 = int(math.floor((v0 + r) / tile))
        if tx1 < 0 or ty1 < 0 or tx0 >= ntx or ty0 >= nty:
            continue
        tx0 = max(tx0, 0)
        ty0 = max(ty0, 0)
        tx1 = min(tx1, ntx - 1)
        ty1 = min(ty1, nty - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                counts[ty * ntx + tx + 1] += 1
    offsets = np.cumsum(counts)
    lists = np.empty(offsets[ntiles], np.int64)
    fill = offsets[:ntiles].copy()
    for oi in range(n):
        i = order[oi]
        u0 = uv0[i, 0]
        v0 = uv0[i, 1]
        r = radius[i]
        tx0 = int(math.floor((u0 - r) / tile))
        tx1 = int(math.floor((u0 + r) / tile))
        ty0 = int(math.floor((v0 - r) / tile))
        ty1 = int(math.floor((v0 + r) / tile))
        if tx1 < 0 or ty1 < 0 or tx0 >= ntx or ty0 >= nty:
            continue
        tx0 = max(tx0, 0)
        ty0 = max(ty0, 0)
        tx1 = min(tx1, ntx - 1)
        ty1 = min(ty1, nty - 1)
        for ty in range(ty0, ty1 + 1):
            for tx in range(tx0, tx1 + 1):
                t = ty * ntx + tx
                lists[fill[t]] = oi
                fill[t] += 1
    return ntx, nty, offsets, lists


@njit(cache=True)
def composite_forward_nb(order, uv0, minv, zc, color, alpha, radius, h, w, tile, d2max):  # pragma: no cover
    ntx, nty, offsets, lists = _bin_tiles(order, uv0, radius, h, w, tile)
    rgb = np.zeros((h, w, 3))
    hraw = np.zeros((h, w))
    acc = np.zeros((h, w))
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo = offsets[t]
            hi = offsets[t + 1]
            if hi == lo:
                continue
            py1 = min((ty + 1) * tile, h)
            px1 = min((tx + 1) * tile, w)
            for py in range(ty * tile, py1):
                for px in range(tx * tile, px1):
                    trans = 1.0
                    r0 = 0.0
                    r1 = 0.0
                    r2 = 0.0
                    hh = 0.0
                    ac = 0.0
                    for li in range(lo, hi):
                        i = order[lists[li]]
                        du = px - uv0[i, 0]
                        dv = py - uv0[i, 1]
                        su = minv[i, 0, 0] * du + minv[i, 0, 1] * dv
                        sv = minv[i, 1, 0] * du + minv[i, 1, 1] * dv
                        d2 = su * su + sv * sv
                        if d2 > d2max:
                            continue
                        g = math.exp(-0.5 * d2)
                        a = alpha[i] * g
                        wgt = trans * a
                        r0 += wgt * color[i, 0]
                        r1 += wgt * color[i, 1]
                        r2 += wgt * color[i, 2]
                        hh += wgt * (zc[i, 0] + zc[i, 1] * su + zc[i, 2] * sv)
                        ac += wgt
                        trans *= 1.0 - a
                    rgb[py, px, 0] = r0
                    rgb[py, px, 1] = r1
                    rgb[py, px, 2] = r2
                    hraw[py, px] = hh
                    acc[py, px] = ac
    return rgb, hraw, acc


@njit(cache=True)
def composite_backward_nb(order, uv0, minv, zc, color, alpha, radius, h, w,
                          grad_rgb, grad_hraw, grad_acc, tile, d2max):  # pragma: no cover
    ntx, nty, offsets, lists = _bin_tiles(order, uv0, radius, h, w, tile)
    nsplat = uv0.shape[0]
    g_uv0 = np.zeros((nsplat, 2))
    g_minv = np.zeros((nsplat, 2, 2))
    g_zc = np.zeros((nsplat, 3))
    g_color = np.zeros((nsplat, 3))
    g_alpha = np.zeros(nsplat)
    for ty in range(nty):
        for tx in range(ntx):
            t = ty * ntx + tx
            lo = offsets[t]
            hi = offsets[t + 1]
            cnt = hi - lo
            if cnt == 0:
                continue
            scr_id = np.empty(cnt, np.int64)
            scr_su = np.empty(cnt)
            scr_sv = np.empty(cnt)
            scr_g = np.empty(cnt)
            scr_a = np.empty(cnt)
            scr_t = np.empty(cnt)
            py1 = min((ty + 1) * tile, h)
            px1 = min((tx + 1) * tile, w)
            for py in range(ty * tile, py1):
                for px in range(tx * tile, px1):
                    m = 0
                    trans = 1.0
                    for li in range(lo, hi):
                        i = order[lists[li]]
                        du = px - uv0[i, 0]
                        dv = py - uv0[i, 1]
                        su = minv[i, 0, 0] * du + minv[i, 0, 1] * dv
                        sv = minv[i, 1, 0] * du + minv[i, 1, 1] * dv
                        d2 = su * su + sv * sv
                        if d2 > d2max:
                            continue
                        g = math.exp(-0.5 * d2)
                        a = alpha[i] * g
                        scr_id[m] = i
                        scr_su[m] = su
                        scr_sv[m] = sv
                        scr_g[m] = g
                        scr_a[m] = a
                        scr_t[m] = trans
                        trans *= 1.0 - a
                        m += 1
                    if m == 0:
                        continue
                    gr0 = grad_rgb[py, px, 0]
                    gr1 = grad_rgb[py, px, 1]
                    gr2 = grad_rgb[py, px, 2]
                    gh = grad_hraw[py, px]
                    ga = grad_acc[py, px]
                    s0 = 0.0
                    s1 = 0.0
                    s2 = 0.0
                    sh = 0.0
                    sa = 0.0
                    for j in range(m - 1, -1, -1):
                        i = scr_id[j]
                        su = scr_su[j]
                        sv = scr_sv[j]
                        g = scr_g[j]
                        a = scr_a[j]
                        tj = scr_t[j]
                        z = zc[i, 0] + zc[i, 1] * su + zc[i, 2] * sv
                        wgt = tj * a
                        da = gr0 * (color[i, 0] - s0)
                        da += gr1 * (color[i, 1] - s1)
                        da += gr2 * (color[i, 2] - s2)
                        da += gh * (z - sh)
                        da += ga * (1.0 - sa)
                        da *= tj
                        g_color[i, 0] += gr0 * wgt
                        g_color[i, 1] += gr1 * wgt
                        g_color[i, 2] += gr2 * wgt
                        dz = gh * wgt
                        g_zc[i, 0] += dz
                        g_zc[i, 1] += dz * su
                        g_zc[i, 2] += dz * sv
                        g_alpha[i] += da * g
                        dg = da * alpha[i]
                        dd2 = -0.5 * g * dg
                        dsu = 2.0 * su * dd2 + dz * zc[i, 1]
                        dsv = 2.0 * sv * dd2 + dz * zc[i, 2]
                        du = px - uv0[i, 0]
                        dv = py - uv0[i, 1]
                        g_minv[i, 0, 0] += dsu * du
                        g_minv[i, 0, 1] += dsu * dv
                        g_minv[i, 1, 0] += dsv * du
                        g_minv[i, 1, 1] += dsv * dv
                        ddu = minv[i, 0, 0] * dsu + minv[i, 1, 0] * dsv
                        ddv = minv[i, 0, 1] * dsu + minv[i, 1, 1] * dsv
                        g_uv0[i, 0] -= ddu
                        g_uv0[i, 1] -= ddv
                        s0 = a * color[i, 0] + (1.0 - a) * s0
                        s1 = a * color[i, 1] + (1.0 - a) * s1
                        s2 = a * color[i, 2] + (1.0 - a) * s2
                        sh = a * z + (1.0 - a) * sh
                        sa = a + (1.0 - a) * sa
    return g_uv0, g_minv, g_zc, g_color, g_alpha


def _prep_composite_args(order, uv0, minv, zc, color, alpha, radius):
    return (
        np.ascontiguousarray(order, dtype=np.int64),
        np.ascontiguousarray(uv0, dtype=np.float64),
        np.ascontiguousarray(minv, dtype=np.float64),
        np.ascontiguousarray(zc, dtype=np.float64),
        np.ascontiguousarray(color, dtype=np.float64),
        np.ascontiguousarray(alpha, dtype=np.float64),
        np.ascontiguousarray(radius, dtype=np.float64),
    )


def composite_forward(order, uv0, minv, zc, color, alpha, radius, h, w, tile=16,
                      d2max=18.0):
    args = _prep_composite_args(order, uv0, minv, zc, color, alpha, radius)
    if _backend == "numba":
        return composite_forward_nb(*args, h, w, tile, d2max)
    return composite_forward_np(*args, h, w, tile, d2max)


def composite_backward(order, uv0, minv, zc, color, alpha, radius, h, w,
                       grad_rgb, grad_hraw, grad_acc, tile=16, d2max=18.0):
    args = _prep_composite_args(order, uv0, minv, zc, color, alpha, radius)
    grads = (
        np.ascontiguousarray(grad_rgb, dtype=np.float64),
        np.ascontiguousarray(grad_hraw, dtype=np.float64),
        np.ascontiguousarray(grad_acc, dtype=np.float64),
    )
    if _backend == "numba":
        return composite_backward_nb(*args, h, w, *grads, tile, d2max)
    return composite_backward_np(*args, h, w, *grads, tile, d2max)


#: kernel pairs exposed for the benchmark and the backend parity tests
KERNEL_PAIRS = {
    "poly20_batch": (poly20_batch_np, poly20_batch_nb),
    "bilinear_gather": (bilinear_gather_np, bilinear_gather_nb),
    "smooth3": (smooth3_np, smooth3_nb),
    "composite_forward": (composite_forward_np, composite_forward_nb),
    "composite_backward": (composite_backward_np, composite_backward_nb),
}
