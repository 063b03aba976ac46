"""Numba-jitted hot kernels. Semantics match kernels_numpy exactly;
see that module for the array encodings.

Parallelism is only over independent output elements (batch items, pixels),
so results are bit-stable regardless of thread count.
"""
import math

import numpy as np
from numba import njit, prange

T_EPS = 1e-7
SHADOW_EPS = 1e-4
ROUGHNESS_FLOOR = 0.04
F0_DIELECTRIC = 0.04


@njit(cache=True)
def _im2col_core(xp, k, stride, out):
    # out: (C*k*k, B*OH*OW); single-threaded on purpose (runs interleaved
    # with multithreaded BLAS; a second thread pool just causes thrashing)
    B, C, Hp, Wp = xp.shape
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    L = OH * OW
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    col0 = b * L
                    for oh in range(OH):
                        ih = oh * stride + ki
                        base = col0 + oh * OW
                        for ow in range(OW):
                            out[row, base + ow] = xp[b, c, ih, ow * stride + kj]


def im2col(x, k, stride, pad):
    B, C, H, W = x.shape
    if pad:
        xp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=x.dtype)
        xp[:, :, pad:pad + H, pad:pad + W] = x
    else:
        xp = np.ascontiguousarray(x)
    Hp, Wp = xp.shape[2], xp.shape[3]
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    out = np.empty((C * k * k, B * OH * OW), dtype=x.dtype)
    _im2col_core(xp, k, stride, out)
    return out


@njit(cache=True)
def _col2im_core(cols, k, stride, dxp):
    B, C, Hp, Wp = dxp.shape
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    L = OH * OW
    for c in range(C):
        for ki in range(k):
            for kj in range(k):
                row = (c * k + ki) * k + kj
                for b in range(B):
                    col0 = b * L
                    for oh in range(OH):
                        ih = oh * stride + ki
                        base = col0 + oh * OW
                        for ow in range(OW):
                            dxp[b, c, ih, ow * stride + kj] += cols[row, base + ow]


def col2im(cols, x_shape, k, stride, pad):
    B, C, H, W = x_shape
    dxp = np.zeros((B, C, H + 2 * pad, W + 2 * pad), dtype=cols.dtype)
    _col2im_core(np.ascontiguousarray(cols), k, stride, dxp)
    if pad:
        return np.ascontiguousarray(dxp[:, :, pad:pad + H, pad:pad + W])
    return dxp


@njit(cache=True)
def _trace_one(ox, oy, oz, dx, dy, dz, kinds, data):
    """Nearest hit for a single ray. Returns (t, idx)."""
    best_t = np.inf
    best_i = -1
    for i in range(kinds.shape[0]):
        kind = kinds[i]
        t = np.inf
        if kind == 0:  # sphere
            ocx = ox - data[i, 0]
            ocy = oy - data[i, 1]
            ocz = oz - data[i, 2]
            b = ocx * dx + ocy * dy + ocz * dz
            cc = ocx * ocx + ocy * ocy + ocz * ocz - data[i, 3] * data[i, 3]
            disc = b * b - cc
            if disc > 0.0:
                sq = math.sqrt(disc)
                t0 = -b - sq
                t1 = -b + sq
                t = t0 if t0 > T_EPS else t1
                if t <= T_EPS:
                    t = np.inf
        elif kind == 1:  # axis-aligned box
            t_near = -np.inf
            t_far = np.inf
            ok = True
            for ax in range(3):
                o = ox if ax == 0 else (oy if ax == 1 else oz)
                d = dx if ax == 0 else (dy if ax == 1 else dz)
                lo = data[i, ax]
                hi = data[i, 3 + ax]
                if d == 0.0:
                    if o < lo or o > hi:
                        ok = False
                        break
                else:
                    ta = (lo - o) / d
                    tb = (hi - o) / d
                    if ta > tb:
                        ta, tb = tb, ta
                    if ta > t_near:
                        t_near = ta
                    if tb < t_far:
                        t_far = tb
            if ok and t_near <= t_far and t_far > T_EPS:
                t = t_near if t_near > T_EPS else t_far
                if t <= T_EPS:
                    t = np.inf
        else:  # plane
            denom = data[i, 3] * dx + data[i, 4] * dy + data[i, 5] * dz
            if abs(denom) > 1e-12:
                t = ((data[i, 0] - ox) * data[i, 3]
                     + (data[i, 1] - oy) * data[i, 4]
                     + (data[i, 2] - oz) * data[i, 5]) / denom
                if t <= T_EPS:
                    t = np.inf
        if t < best_t:
            best_t = t
            best_i = i
    return best_t, best_i


@njit(cache=True, parallel=True)
def _trace_core(orig, dirs, kinds, data, t_out, idx_out):
    for p in prange(orig.shape[0]):
        t, i = _trace_one(orig[p, 0], orig[p, 1], orig[p, 2],
                          dirs[p, 0], dirs[p, 1], dirs[p, 2], kinds, data)
        t_out[p] = t
        idx_out[p] = i


def trace_rays(orig, dirs, kinds, data):
    P = orig.shape[0]
    t = np.empty(P)
    idx = np.empty(P, dtype=np.int32)
    _trace_core(np.ascontiguousarray(orig), np.ascontiguousarray(dirs),
                kinds, data, t, idx)
    return t, idx


@njit(cache=True, parallel=True)
def _shade_core(pos, nrm, view, mats, lkinds, lvec, lrgb, kinds, data,
                shadows, irr, diff, spec):
    P = pos.shape[0]
    M = lkinds.shape[0]
    for p in prange(P):
        nx, ny, nz = nrm[p, 0], nrm[p, 1], nrm[p, 2]
        vx, vy, vz = view[p, 0], view[p, 1], view[p, 2]
        rough = mats[p, 3]
        if rough < ROUGHNESS_FLOOR:
            rough = ROUGHNESS_FLOOR
        metal = mats[p, 4]
        alpha = rough * rough
        a2 = alpha * alpha
        ndotv = nx * vx + ny * vy + nz * vz
        if ndotv < 1e-9:
            ndotv = 1e-9
        lam_v = 0.5 * (-1.0 + math.sqrt(1.0 + a2 * (1.0 - ndotv * ndotv) / (ndotv * ndotv)))
        for j in range(M):
            if lkinds[j] == 0:
                lx, ly, lz = lvec[j, 0], lvec[j, 1], lvec[j, 2]
                li_r, li_g, li_b = lrgb[j, 0], lrgb[j, 1], lrgb[j, 2]
                maxt = np.inf
            else:
                wx = lvec[j, 0] - pos[p, 0]
                wy = lvec[j, 1] - pos[p, 1]
                wz = lvec[j, 2] - pos[p, 2]
                dist = math.sqrt(wx * wx + wy * wy + wz * wz)
                if dist < 1e-12:
                    dist = 1e-12
                lx, ly, lz = wx / dist, wy / dist, wz / dist
                inv2 = 1.0 / (dist * dist)
                li_r = lrgb[j, 0] * inv2
                li_g = lrgb[j, 1] * inv2
                li_b = lrgb[j, 2] * inv2
                maxt = dist * (1.0 - 1e-6)
            ndotl = nx * lx + ny * ly + nz * lz
            if ndotl <= 0.0:
                continue
            if shadows:
                sx = pos[p, 0] + nx * SHADOW_EPS
                sy = pos[p, 1] + ny * SHADOW_EPS
                sz = pos[p, 2] + nz * SHADOW_EPS
                ts, _ = _trace_one(sx, sy, sz, lx, ly, lz, kinds, data)
                if ts < maxt:
                    continue
            e_r = li_r * ndotl
            e_g = li_g * ndotl
            e_b = li_b * ndotl
            irr[p, 0] += e_r
            irr[p, 1] += e_g
            irr[p, 2] += e_b
            kd = (1.0 - metal) / np.pi
            diff[p, 0] += kd * mats[p, 0] * e_r
            diff[p, 1] += kd * mats[p, 1] * e_g
            diff[p, 2] += kd * mats[p, 2] * e_b
            hx, hy, hz = lx + vx, ly + vy, lz + vz
            hn = math.sqrt(hx * hx + hy * hy + hz * hz)
            if hn < 1e-12:
                hn = 1e-12
            hx, hy, hz = hx / hn, hy / hn, hz / hn
            ndoth = nx * hx + ny * hy + nz * hz
            if ndoth < 0.0:
                ndoth = 0.0
            hdotv = hx * vx + hy * vy + hz * vz
            if hdotv < 0.0:
                hdotv = 0.0
            elif hdotv > 1.0:
                hdotv = 1.0
            dn = ndoth * ndoth * (a2 - 1.0) + 1.0
            d_ndf = a2 / (np.pi * dn * dn) if ndoth > 0.0 else 0.0
            lam_l = 0.5 * (-1.0 + math.sqrt(1.0 + a2 * (1.0 - ndotl * ndotl) / (ndotl * ndotl)))
            g = 1.0 / (1.0 + lam_v + lam_l)
            one_m = (1.0 - hdotv) ** 5
            scale = d_ndf * g / (4.0 * ndotl * ndotv)
            f0r = F0_DIELECTRIC + (mats[p, 0] - F0_DIELECTRIC) * metal
            f0g = F0_DIELECTRIC + (mats[p, 1] - F0_DIELECTRIC) * metal
            f0b = F0_DIELECTRIC + (mats[p, 2] - F0_DIELECTRIC) * metal
            spec[p, 0] += (f0r + (1.0 - f0r) * one_m) * scale * e_r
            spec[p, 1] += (f0g + (1.0 - f0g) * one_m) * scale * e_g
            spec[p, 2] += (f0b + (1.0 - f0b) * one_m) * scale * e_b


def shade_hits(pos, nrm, view, mats, lkinds, lvec, lrgb, kinds, data, shadows=True):
    P = pos.shape[0]
    irr = np.zeros((P, 3))
    diff = np.zeros((P, 3))
    spec = np.zeros((P, 3))
    _shade_core(np.ascontiguousarray(pos), np.ascontiguousarray(nrm),
                np.ascontiguousarray(view), np.ascontiguousarray(mats),
                lkinds, np.ascontiguousarray(lvec), np.ascontiguousarray(lrgb),
                kinds, data, shadows, irr, diff, spec)
    return irr, diff, spec
