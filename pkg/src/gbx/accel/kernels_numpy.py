"""Pure-numpy reference implementations of the hot kernels.

These are the semantic ground truth: the numba backend must agree with these
within float tolerance. Conventions shared by both backends:

- im2col/col2im: NCHW layout, column row order is (c, ki, kj) flattened.
- Primitive encoding: kinds[i] in {0: sphere, 1: axis-aligned box, 2: plane},
  data[i] packs sphere (cx, cy, cz, r, -, -), box (minxyz, maxxyz),
  plane (point xyz, unit normal xyz).
- Light encoding: lkinds[j] in {0: directional, 1: point}; lvec[j] is the
  unit direction from surface toward a directional light, or the position of
  a point light; lrgb[j] is radiance (directional) or intensity (point,
  inverse-square falloff).
"""
import numpy as np

T_EPS = 1e-7          # minimum ray parameter accepted as a hit
SHADOW_EPS = 1e-4     # origin offset along the normal for shadow rays
ROUGHNESS_FLOOR = 0.04
F0_DIELECTRIC = 0.04


def im2col(x, k, stride, pad):
    """(B,C,H,W) -> (C*k*k, B*OH*OW) patch matrix (batch folded into columns
    so conv forward/backward each run as one large GEMM)."""
    B, C, H, W = x.shape
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    Hp, Wp = x.shape[2], x.shape[3]
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    s0, s1, s2, s3 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (C, k, k, B, OH, OW), (s1, s2, s3, s0, s2 * stride, s3 * stride),
        writeable=False)
    return np.ascontiguousarray(win).reshape(C * k * k, B * OH * OW)


def col2im(cols, x_shape, k, stride, pad):
    """Scatter-add adjoint of im2col. cols: (C*k*k, B*OH*OW) -> (B,C,H,W)."""
    B, C, H, W = x_shape
    Hp, Wp = H + 2 * pad, W + 2 * pad
    OH = (Hp - k) // stride + 1
    OW = (Wp - k) // stride + 1
    dxp = np.zeros((C, B, Hp, Wp), dtype=cols.dtype)
    c6 = cols.reshape(C, k, k, B, OH, OW)
    for ki in range(k):
        for kj in range(k):
            dxp[:, :, ki:ki + stride * OH:stride, kj:kj + stride * OW:stride] += c6[:, ki, kj]
    dxp = dxp.swapaxes(0, 1)
    if pad:
        dxp = dxp[:, :, pad:pad + H, pad:pad + W]
    return np.ascontiguousarray(dxp)


def _intersect_all(orig, dirs, kinds, data):
    """Per-primitive ray intersection, vectorized over rays.

    Returns t values (P, N) with inf where missed.
    """
    P = orig.shape[0]
    N = kinds.shape[0]
    tvals = np.full((P, N), np.inf)
    for i in range(N):
        kind = kinds[i]
        if kind == 0:  # sphere
            c = data[i, 0:3]
            r = data[i, 3]
            oc = orig - c
            b = np.sum(oc * dirs, axis=1)
            cc = np.sum(oc * oc, axis=1) - r * r
            disc = b * b - cc
            ok = disc > 0.0
            sq = np.sqrt(np.where(ok, disc, 0.0))
            t0 = -b - sq
            t1 = -b + sq
            t = np.where(t0 > T_EPS, t0, t1)
            tvals[:, i] = np.where(ok & (t > T_EPS), t, np.inf)
        elif kind == 1:  # axis-aligned box
            lo = data[i, 0:3]
            hi = data[i, 3:6]
            with np.errstate(divide="ignore", invalid="ignore"):
                inv = 1.0 / dirs
                ta = (lo - orig) * inv
                tb = (hi - orig) * inv
            tmin = np.minimum(ta, tb)
            tmax = np.maximum(ta, tb)
            # rays parallel to a slab axis: inside iff origin within the slab
            par = dirs == 0.0
            inside = (orig >= lo) & (orig <= hi)
            tmin = np.where(par, np.where(inside, -np.inf, np.inf), tmin)
            tmax = np.where(par, np.where(inside, np.inf, -np.inf), tmax)
            t_near = np.max(tmin, axis=1)
            t_far = np.min(tmax, axis=1)
            hit = (t_near <= t_far) & (t_far > T_EPS)
            t = np.where(t_near > T_EPS, t_near, t_far)
            tvals[:, i] = np.where(hit & (t > T_EPS), t, np.inf)
        else:  # plane
            p0 = data[i, 0:3]
            n = data[i, 3:6]
            denom = dirs @ n
            with np.errstate(divide="ignore", invalid="ignore"):
                t = ((p0 - orig) @ n) / denom
            ok = (np.abs(denom) > 1e-12) & (t > T_EPS)
            tvals[:, i] = np.where(ok, t, np.inf)
    return tvals


def trace_rays(orig, dirs, kinds, data):
    """Nearest-hit trace. Returns (t (P,), idx (P,) int32); inf / -1 on miss."""
    tvals = _intersect_all(orig, dirs, kinds, data)
    idx = np.argmin(tvals, axis=1).astype(np.int32)
    t = tvals[np.arange(tvals.shape[0]), idx]
    idx = np.where(np.isfinite(t), idx, np.int32(-1))
    return t, idx


def _occluded(orig, dirs, maxt, kinds, data):
    tvals = _intersect_all(orig, dirs, kinds, data)
    tmin = np.min(tvals, axis=1)
    return tmin < maxt


def shade_hits(pos, nrm, view, mats, lkinds, lvec, lrgb, kinds, data, shadows=True):
    """Direct lighting at shaded points.

    pos/nrm/view: (P,3); view is the unit direction toward the camera.
    mats: (P,5) = albedo rgb, roughness, metallic.
    Returns (irradiance, diffuse, specular), each (P,3). diffuse+specular is
    outgoing radiance toward the camera.
    """
    P = pos.shape[0]
    irr = np.zeros((P, 3))
    diff = np.zeros((P, 3))
    spec = np.zeros((P, 3))
    albedo = mats[:, 0:3]
    rough = np.clip(mats[:, 3], ROUGHNESS_FLOOR, 1.0)
    metal = mats[:, 4]
    alpha = rough * rough
    f0 = F0_DIELECTRIC + (albedo - F0_DIELECTRIC) * metal[:, None]
    ndotv = np.maximum(np.sum(nrm * view, axis=1), 1e-9)
    kd = (1.0 - metal)[:, None] * albedo / np.pi

    for j in range(lkinds.shape[0]):
        if lkinds[j] == 0:
            ldir = np.broadcast_to(lvec[j], (P, 3))
            li = np.broadcast_to(lrgb[j], (P, 3))
            maxt = np.full(P, np.inf)
        else:
            wvec = lvec[j] - pos
            dist = np.linalg.norm(wvec, axis=1)
            ldir = wvec / np.maximum(dist, 1e-12)[:, None]
            li = lrgb[j] / np.maximum(dist * dist, 1e-12)[:, None]
            maxt = dist * (1.0 - 1e-6)
        ndotl = np.sum(nrm * ldir, axis=1)
        lit = ndotl > 0.0
        if shadows and np.any(lit):
            sorig = pos + nrm * SHADOW_EPS
            blocked = _occluded(sorig, ldir, maxt, kinds, data)
            lit = lit & ~blocked
        w = np.where(lit, ndotl, 0.0)[:, None]
        e = li * w
        irr += e
        diff += kd * e
        # microfacet specular
        h = ldir + view
        hn = np.linalg.norm(h, axis=1)
        h = h / np.maximum(hn, 1e-12)[:, None]
        ndoth = np.maximum(np.sum(nrm * h, axis=1), 0.0)
        hdotv = np.clip(np.sum(h * view, axis=1), 0.0, 1.0)
        a2 = alpha * alpha
        denom = ndoth * ndoth * (a2 - 1.0) + 1.0
        d_ndf = np.where(ndoth > 0.0, a2 / (np.pi * denom * denom), 0.0)
        ndotl_c = np.maximum(ndotl, 1e-9)
        lam_v = 0.5 * (-1.0 + np.sqrt(1.0 + a2 * (1.0 - ndotv ** 2) / ndotv ** 2))
        lam_l = 0.5 * (-1.0 + np.sqrt(1.0 + a2 * (1.0 - ndotl_c ** 2) / ndotl_c ** 2))
        g = 1.0 / (1.0 + lam_v + lam_l)
        fr = f0 + (1.0 - f0) * ((1.0 - hdotv) ** 5)[:, None]
        fs = fr * (d_ndf * g / (4.0 * ndotl_c * ndotv))[:, None]
        spec += fs * e
    return irr, diff, spec
