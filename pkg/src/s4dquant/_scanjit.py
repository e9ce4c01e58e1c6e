"""Numba-compiled kernels for the recurrent scan hot loop.

Importing this module is optional; model.ssm_scan falls back to the numpy
reference implementation when numba is unavailable or the configuration
needs a feature only the reference path provides (per-step dynamic
calibration). The jitted kernels replicate the reference semantics exactly:
same operation order, half-away-from-zero rounding, inclusive clip masks.

The time-outer loop order keeps history writes streaming; parallel variants
were slower on small core counts, so the kernels stay serial.
"""

from __future__ import annotations

import numpy as np
from numba import njit

__all__ = ["scan_fwd", "scan_fwd_quant", "scan_bwd"]


@njit(cache=True)
def scan_fwd(ar, ai, br, bi, cr, ci, d, u, lo, hi, f, store, xs_r, xs_i, mask_r, mask_i):
    B, L, H = u.shape
    N = ar.shape[1]
    y = np.empty((B, L, H))
    xr = np.zeros((B, H, N))
    xi = np.zeros((B, H, N))
    for t in range(L):
        for b in range(B):
            for h in range(H):
                ut = u[b, t, h]
                acc = 0.0
                for n in range(N):
                    sr = ar[h, n] * xr[b, h, n] - ai[h, n] * xi[b, h, n] + br[h, n] * ut
                    si = ar[h, n] * xi[b, h, n] + ai[h, n] * xr[b, h, n] + bi[h, n] * ut
                    inr = (sr >= lo) and (sr <= hi)
                    ini = (si >= lo) and (si <= hi)
                    vr = sr if inr else (lo if sr < lo else hi)
                    vi = si if ini else (lo if si < lo else hi)
                    xr[b, h, n] = vr
                    xi[b, h, n] = vi
                    if store:
                        xs_r[t, b, h, n] = vr
                        xs_i[t, b, h, n] = vi
                        mask_r[t, b, h, n] = inr
                        mask_i[t, b, h, n] = ini
                    acc += cr[h, n] * vr - ci[h, n] * vi
                y[b, t, h] = f * acc + d[h] * ut
    return y


@njit(cache=True, inline="always")
def _fq(v, scale, zp, qmin, qmax):
    t = v / scale + zp
    inside = (t >= qmin) and (t <= qmax)
    a = abs(t)
    q = np.floor(a + 0.5)
    if t < 0.0:
        q = -q
    if q < qmin:
        q = qmin
    elif q > qmax:
        q = qmax
    return (q - zp) * scale, inside


@njit(cache=True)
def scan_fwd_quant(
    ar, ai, br, bi, cr, ci, d, u, lo, hi, f,
    scale, zp, qmin, qmax,
    store, xs_r, xs_i, mask_r, mask_i,
):
    B, L, H = u.shape
    N = ar.shape[1]
    y = np.empty((B, L, H))
    xr = np.zeros((B, H, N))
    xi = np.zeros((B, H, N))
    for t in range(L):
        for b in range(B):
            for h in range(H):
                ut = u[b, t, h]
                sc = scale[h]
                z = zp[h]
                acc = 0.0
                for n in range(N):
                    sr = ar[h, n] * xr[b, h, n] - ai[h, n] * xi[b, h, n] + br[h, n] * ut
                    si = ar[h, n] * xi[b, h, n] + ai[h, n] * xr[b, h, n] + bi[h, n] * ut
                    inr = (sr >= lo) and (sr <= hi)
                    ini = (si >= lo) and (si <= hi)
                    vr = sr if inr else (lo if sr < lo else hi)
                    vi = si if ini else (lo if si < lo else hi)
                    vr, qr = _fq(vr, sc, z, qmin, qmax)
                    vi, qi = _fq(vi, sc, z, qmin, qmax)
                    xr[b, h, n] = vr
                    xi[b, h, n] = vi
                    if store:
                        xs_r[t, b, h, n] = vr
                        xs_i[t, b, h, n] = vi
                        mask_r[t, b, h, n] = inr and qr
                        mask_i[t, b, h, n] = ini and qi
                    acc += cr[h, n] * vr - ci[h, n] * vi
                y[b, t, h] = f * acc + d[h] * ut
    return y


@njit(cache=True)
def scan_bwd(ar, ai, br, bi, cr, ci, d, u, gy, xs_r, xs_i, mask_r, mask_i, f):
    B, L, H = u.shape
    N = ar.shape[1]
    da_r = np.zeros((H, N))
    da_i = np.zeros((H, N))
    db_r = np.zeros((H, N))
    db_i = np.zeros((H, N))
    dc_r = np.zeros((H, N))
    dc_i = np.zeros((H, N))
    dd = np.zeros(H)
    gu = np.empty((B, L, H))
    gxr = np.zeros((B, H, N))
    gxi = np.zeros((B, H, N))
    for t in range(L - 1, -1, -1):
        for b in range(B):
            for h in range(H):
                g = gy[b, t, h]
                ut = u[b, t, h]
                dd[h] += g * ut
                acc = g * d[h]
                for n in range(N):
                    xr_t = xs_r[t, b, h, n]
                    xi_t = xs_i[t, b, h, n]
                    dc_r[h, n] += f * g * xr_t
                    dc_i[h, n] -= f * g * xi_t
                    pr = gxr[b, h, n] + f * g * cr[h, n]
                    pi = gxi[b, h, n] - f * g * ci[h, n]
                    hr = pr if mask_r[t, b, h, n] else 0.0
                    hi = pi if mask_i[t, b, h, n] else 0.0
                    if t > 0:
                        xpr = xs_r[t - 1, b, h, n]
                        xpi = xs_i[t - 1, b, h, n]
                        da_r[h, n] += hr * xpr + hi * xpi
                        da_i[h, n] += hi * xpr - hr * xpi
                    db_r[h, n] += hr * ut
                    db_i[h, n] += hi * ut
                    acc += hr * br[h, n] + hi * bi[h, n]
                    gxr[b, h, n] = ar[h, n] * hr + ai[h, n] * hi
                    gxi[b, h, n] = ar[h, n] * hi - ai[h, n] * hr
                gu[b, t, h] = acc
    return gu, da_r, da_i, db_r, db_i, dc_r, dc_i, dd
