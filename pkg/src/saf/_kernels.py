"""Fused kernels for the memory-bound operators.

Arrays are channel-first. Channel reductions work on tiles of positions small
enough to stay in cache and accumulate in a fixed order, so results depend on
nothing but the inputs. Inner loops run over 1-D row views in the array dtype
so LLVM can vectorize them.
"""

import numba
import numpy as np

_jit = numba.njit(cache=True, nogil=True)

TILE = 512


@_jit
def prelu_forward(x, slope, out):
    for c in range(x.shape[0]):
        a = slope[c]
        xr = x[c]
        orow = out[c]
        for n in range(xr.shape[0]):
            v = xr[n]
            orow[n] = v if v > 0 else a * v


@_jit
def prelu_backward(x, slope, g, dx, dslope):
    for c in range(x.shape[0]):
        a = slope[c]
        xr = x[c]
        gr = g[c]
        dr = dx[c]
        acc = gr.dtype.type(0)
        for n in range(xr.shape[0]):
            v = xr[n]
            gv = gr[n]
            pos = v > 0
            dr[n] = gv if pos else a * gv
            acc += 0 if pos else v * gv
        dslope[c] = acc


@_jit
def channel_norm_forward(x, gamma, beta, eps, mu, inv, out):
    c_n, n_n = x.shape
    scale = x.dtype.type(1.0 / c_n)
    one = x.dtype.type(1.0)
    for lo in range(0, n_n, TILE):
        hi = min(n_n, lo + TILE)
        w = hi - lo
        m = mu[lo:hi]
        iv = inv[lo:hi]
        m[:] = 0
        iv[:] = 0
        for c in range(c_n):
            xr = x[c, lo:hi]
            for n in range(w):
                m[n] += xr[n]
        for n in range(w):
            m[n] *= scale
        for c in range(c_n):
            xr = x[c, lo:hi]
            for n in range(w):
                d = xr[n] - m[n]
                iv[n] += d * d
        for n in range(w):
            iv[n] = one / np.sqrt(iv[n] * scale + eps)
        for c in range(c_n):
            xr = x[c, lo:hi]
            orow = out[c, lo:hi]
            gc = gamma[c]
            bc = beta[c]
            for n in range(w):
                orow[n] = (xr[n] - m[n]) * iv[n] * gc + bc


@_jit
def channel_norm_backward(x, mu, inv, gamma, g, dx, dgamma, dbeta):
    c_n, n_n = x.shape
    scale = x.dtype.type(1.0 / c_n)
    m1 = np.zeros(TILE, dtype=g.dtype)
    m2 = np.zeros(TILE, dtype=g.dtype)
    sg = np.zeros(c_n, dtype=np.float64)
    sgh = np.zeros(c_n, dtype=np.float64)
    for lo in range(0, n_n, TILE):
        hi = min(n_n, lo + TILE)
        w = hi - lo
        m = mu[lo:hi]
        iv = inv[lo:hi]
        m1[:] = 0
        m2[:] = 0
        for c in range(c_n):
            xr = x[c, lo:hi]
            gr = g[c, lo:hi]
            gc = gamma[c]
            a = gr.dtype.type(0)
            b = gr.dtype.type(0)
            for n in range(w):
                gv = gr[n]
                h = (xr[n] - m[n]) * iv[n]
                d = gv * gc
                m1[n] += d
                m2[n] += d * h
                a += gv
                b += gv * h
            sg[c] += a
            sgh[c] += b
        for n in range(w):
            m1[n] *= scale
            m2[n] *= scale
        for c in range(c_n):
            xr = x[c, lo:hi]
            gr = g[c, lo:hi]
            dr = dx[c, lo:hi]
            gc = gamma[c]
            for n in range(w):
                h = (xr[n] - m[n]) * iv[n]
                dr[n] = iv[n] * (gr[n] * gc - m1[n] - h * m2[n])
    for c in range(c_n):
        dbeta[c] = sg[c]
        dgamma[c] = sgh[c]


@_jit
def depthwise_forward(x, w, b, dt, df, out):
    c_n, t_n, f_n = x.shape
    _, kt, kf = w.shape
    pt = (kt - 1) * dt // 2
    pf = (kf - 1) * df // 2
    for c in range(c_n):
        for t in range(t_n):
            row = out[c, t]
            row[:] = b[c]
            for i in range(kt):
                ts = t + i * dt - pt
                if ts < 0 or ts >= t_n:
                    continue
                for j in range(kf):
                    wv = w[c, i, j]
                    of = j * df - pf
                    f_lo = max(0, -of)
                    f_hi = min(f_n, f_n - of)
                    dst = row[f_lo:f_hi]
                    src = x[c, ts, f_lo + of : f_hi + of]
                    for f in range(f_hi - f_lo):
                        dst[f] += wv * src[f]


@_jit
def depthwise_backward_input(g, w, dt, df, dx):
    c_n, t_n, f_n = g.shape
    _, kt, kf = w.shape
    pt = (kt - 1) * dt // 2
    pf = (kf - 1) * df // 2
    for c in range(c_n):
        for ts in range(t_n):
            row = dx[c, ts]
            row[:] = 0
            for i in range(kt):
                t = ts - i * dt + pt
                if t < 0 or t >= t_n:
                    continue
                for j in range(kf):
                    wv = w[c, i, j]
                    of = j * df - pf
                    f_lo = max(0, -of)
                    f_hi = min(f_n, f_n - of)
                    dst = row[f_lo + of : f_hi + of]
                    src = g[c, t, f_lo:f_hi]
                    for f in range(f_hi - f_lo):
                        dst[f] += wv * src[f]


@_jit
def depthwise_backward_weight(g, x, dt, df, dw, db):
    c_n, t_n, f_n = g.shape
    _, kt, kf = dw.shape
    pt = (kt - 1) * dt // 2
    pf = (kf - 1) * df // 2
    acc = np.zeros((kt, kf, f_n), dtype=g.dtype)
    bacc = np.zeros(f_n, dtype=g.dtype)
    for c in range(c_n):
        acc[:] = 0
        bacc[:] = 0
        for t in range(t_n):
            grow = g[c, t]
            for f in range(f_n):
                bacc[f] += grow[f]
            for i in range(kt):
                ts = t + i * dt - pt
                if ts < 0 or ts >= t_n:
                    continue
                for j in range(kf):
                    of = j * df - pf
                    f_lo = max(0, -of)
                    f_hi = min(f_n, f_n - of)
                    a = acc[i, j, f_lo:f_hi]
                    gs = grow[f_lo:f_hi]
                    src = x[c, ts, f_lo + of : f_hi + of]
                    for f in range(f_hi - f_lo):
                        a[f] += gs[f] * src[f]
        db[c] = bacc.astype(np.float64).sum()
        for i in range(kt):
            for j in range(kf):
                dw[c, i, j] = acc[i, j].astype(np.float64).sum()
