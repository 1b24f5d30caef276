"""Compiled sequential selective scan (forward and reverse pass).

The numpy path materialises several (batch, L, d_inner, N) temporaries per
call; these loops only keep the decay factors and the hidden sequence.
"""

from __future__ import annotations

import math

import numba
import numpy as np

# below this |delta * A| use expm1 rather than exp(delta * A) - 1
_SMALL = 1e-2


@numba.njit(cache=True, inline="always")
def _em1(ab, da):
    return math.expm1(da) if da > -_SMALL else ab - 1.0


@numba.njit(cache=True)
def scan_fwd(a_bar, delta, a, b, c, x, d):
    bs, length, dim = x.shape
    n = a.shape[1]
    y = np.empty_like(x)
    hs = np.empty_like(a_bar)
    inv_a = 1.0 / a
    for i in range(bs):
        h = np.zeros((dim, n), dtype=x.dtype)
        for t in range(length):
            for j in range(dim):
                xv = x[i, t, j]
                acc = d[j] * xv
                for s in range(n):
                    ab = a_bar[i, t, j, s]
                    em1 = _em1(ab, delta[i, t, j] * a[j, s])
                    hv = ab * h[j, s] + em1 * inv_a[j, s] * xv * b[i, t, s]
                    h[j, s] = hv
                    hs[i, t, j, s] = hv
                    acc += hv * c[i, t, s]
                y[i, t, j] = acc
    return y, hs


@numba.njit(cache=True)
def scan_bwd(gy, a_bar, delta, a, b, c, x, d, hs):
    bs, length, dim = x.shape
    n = a.shape[1]
    inv_a = 1.0 / a
    g_delta = np.zeros_like(delta)
    g_a = np.zeros_like(a)
    g_b = np.zeros_like(b)
    g_c = np.zeros_like(c)
    g_x = np.zeros_like(x)
    g_d = np.zeros_like(d)
    carry = np.zeros((dim, n), dtype=x.dtype)  # a_{t+1} * G_{t+1}
    for i in range(bs):
        carry[:] = 0.0
        for t in range(length - 1, -1, -1):
            for j in range(dim):
                dt = delta[i, t, j]
                xv = x[i, t, j]
                gyv = gy[i, t, j]
                g_d[j] += gyv * xv
                gdel = 0.0
                gx = gyv * d[j]
                for s in range(n):
                    av = a[j, s]
                    ab = a_bar[i, t, j, s]
                    xb = xv * b[i, t, s]
                    g_c[i, t, s] += gyv * hs[i, t, j, s]
                    G = gyv * c[i, t, s] + carry[j, s]
                    hp = hs[i, t - 1, j, s] if t > 0 else 0.0
                    gda = G * ab * (hp + xb * inv_a[j, s])
                    gxb = G * _em1(ab, dt * av) * inv_a[j, s]
                    gdel += gda * av
                    g_a[j, s] += gda * dt - gxb * xb * inv_a[j, s]
                    gx += gxb * b[i, t, s]
                    g_b[i, t, s] += gxb * xv
                    carry[j, s] = G * ab
                g_delta[i, t, j] = gdel
                g_x[i, t, j] = gx
    return g_delta, g_a, g_b, g_c, g_x, g_d
