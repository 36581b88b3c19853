"""Compiled TV-L1 solver for one pyramid level.

Pixel-loop transcription of ``modality._tvl1_level``; the numpy version stays
as the reference the tests compare against.
"""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True)
def _bilin(img, x, y):
    H, W = img.shape
    if x < 0.0:
        x = 0.0
    elif x > W - 1:
        x = W - 1.0
    if y < 0.0:
        y = 0.0
    elif y > H - 1:
        y = H - 1.0
    x0 = min(int(np.floor(x)), W - 2)
    y0 = min(int(np.floor(y)), H - 2)
    fx = x - x0
    fy = y - y0
    top = img[y0, x0] * (1 - fx) + img[y0, x0 + 1] * fx
    bot = img[y0 + 1, x0] * (1 - fx) + img[y0 + 1, x0 + 1] * fx
    return top * (1 - fy) + bot * fy


@njit(cache=True)
def _div_at(px, py, y, x):
    H, W = px.shape
    if x == 0:
        d = px[y, 0]
    elif x == W - 1:
        d = -px[y, W - 2]
    else:
        d = px[y, x] - px[y, x - 1]
    if y == 0:
        d += py[0, x]
    elif y == H - 1:
        d -= py[H - 2, x]
    else:
        d += py[y, x] - py[y - 1, x]
    return d


@njit(cache=True)
def tvl1_level(I0, I1, u1, u2, p11, p12, p21, p22, lam, theta, tau, warps, iterations):
    """In-place update of ``u1, u2, p..`` (all (B, H, W) float64)."""
    B, H, W = I0.shape
    l_t = lam * theta
    tt = tau / theta
    gx = np.zeros((H, W))
    gy = np.zeros((H, W))
    I1w = np.empty((H, W))
    I1wx = np.empty((H, W))
    I1wy = np.empty((H, W))
    grad2 = np.empty((H, W))
    rho_c = np.empty((H, W))
    V1 = np.empty((H, W))
    V2 = np.empty((H, W))
    for b in range(B):
        img = I1[b]
        gx[:, :] = 0.0
        gy[:, :] = 0.0
        for y in range(H):
            for x in range(1, W - 1):
                gx[y, x] = 0.5 * (img[y, x + 1] - img[y, x - 1])
        for y in range(1, H - 1):
            for x in range(W):
                gy[y, x] = 0.5 * (img[y + 1, x] - img[y - 1, x])
        U1, U2 = u1[b], u2[b]
        P11, P12, P21, P22 = p11[b], p12[b], p21[b], p22[b]
        for _ in range(warps):
            for y in range(H):
                for x in range(W):
                    wx = x + U1[y, x]
                    wy = y + U2[y, x]
                    a = _bilin(img, wx, wy)
                    ax = _bilin(gx, wx, wy)
                    ay = _bilin(gy, wx, wy)
                    I1w[y, x] = a
                    I1wx[y, x] = ax
                    I1wy[y, x] = ay
                    grad2[y, x] = ax * ax + ay * ay
                    rho_c[y, x] = a - ax * U1[y, x] - ay * U2[y, x] - I0[b, y, x]
            for _ in range(iterations):
                # thresholding + primal update needs the old duals everywhere
                for y in range(H):
                    for x in range(W):
                        g2 = grad2[y, x]
                        rho = rho_c[y, x] + I1wx[y, x] * U1[y, x] + I1wy[y, x] * U2[y, x]
                        if rho < -l_t * g2:
                            step = l_t
                        elif rho > l_t * g2:
                            step = -l_t
                        elif g2 > 1e-10:
                            step = -rho / g2
                        else:
                            step = 0.0
                        V1[y, x] = U1[y, x] + step * I1wx[y, x] + theta * _div_at(P11, P12, y, x)
                        V2[y, x] = U2[y, x] + step * I1wy[y, x] + theta * _div_at(P21, P22, y, x)
                U1[:, :] = V1
                U2[:, :] = V2
                for y in range(H):
                    for x in range(W):
                        u1x = U1[y, x + 1] - U1[y, x] if x < W - 1 else 0.0
                        u1y = U1[y + 1, x] - U1[y, x] if y < H - 1 else 0.0
                        u2x = U2[y, x + 1] - U2[y, x] if x < W - 1 else 0.0
                        u2y = U2[y + 1, x] - U2[y, x] if y < H - 1 else 0.0
                        ng1 = 1.0 + tt * np.sqrt(u1x * u1x + u1y * u1y)
                        ng2 = 1.0 + tt * np.sqrt(u2x * u2x + u2y * u2y)
                        P11[y, x] = (P11[y, x] + tt * u1x) / ng1
                        P12[y, x] = (P12[y, x] + tt * u1y) / ng1
                        P21[y, x] = (P21[y, x] + tt * u2x) / ng2
                        P22[y, x] = (P22[y, x] + tt * u2y) / ng2
