"""Analytic single-bounce renderer: primary rays fill the G-buffer, discrete
lights with exact shadow rays produce irradiance and outgoing radiance.
Deterministic (no stochastic sampling); float64 internally.
"""
from dataclasses import dataclass

import numpy as np

from .. import accel
from ..errors import ValidationError
from ..gbuffer import (GBuffer, NormalizationMeta, encode_normal,
                       normalize_depth, normalize_shading)
from .brdf import fibonacci_hemisphere
from .scene import Light, Scene, scene_arrays


@dataclass(frozen=True)
class RenderResult:
    image: np.ndarray        # (3,H,W) float64 outgoing radiance
    gbuffer: GBuffer
    irradiance: np.ndarray   # (3,H,W) float64, pre-normalization shading
    diffuse: np.ndarray      # (3,H,W) diffuse component of image
    specular: np.ndarray     # (3,H,W) specular component of image
    hit: np.ndarray          # (H,W) bool


def camera_rays(camera, height, width):
    """Pixel-center primary rays; returns (origins (P,3), dirs (P,3))."""
    pos, right, up, fwd = camera.basis()
    tan_half = np.tan(np.deg2rad(camera.fov_deg) / 2.0)
    ys = (0.5 - (np.arange(height) + 0.5) / height) * 2.0 * tan_half
    xs = ((np.arange(width) + 0.5) / width - 0.5) * 2.0 * tan_half
    gx, gy = np.meshgrid(xs, ys)
    dirs = fwd + gx[..., None] * right + gy[..., None] * up
    dirs = dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)
    origins = np.broadcast_to(pos, dirs.shape)
    return (np.ascontiguousarray(origins.reshape(-1, 3)),
            np.ascontiguousarray(dirs.reshape(-1, 3)))


def _surface_normals(pos, idx, kinds, data):
    """Geometric outward normals at hit points (per primitive type)."""
    n = np.zeros_like(pos)
    for i in range(kinds.shape[0]):
        sel = idx == i
        if not np.any(sel):
            continue
        if kinds[i] == 0:
            v = pos[sel] - data[i, 0:3]
            n[sel] = v / np.linalg.norm(v, axis=1, keepdims=True)
        elif kinds[i] == 1:
            lo, hi = data[i, 0:3], data[i, 3:6]
            p = pos[sel]
            d_lo = np.abs(p - lo)
            d_hi = np.abs(p - hi)
            both = np.concatenate([d_lo, d_hi], axis=1)        # faces -x-y-z+x+y+z
            face = np.argmin(both, axis=1)
            nn = np.zeros_like(p)
            ax = face % 3
            sign = np.where(face < 3, -1.0, 1.0)
            nn[np.arange(len(p)), ax] = sign
            n[sel] = nn
        else:
            n[sel] = data[i, 3:6]
    return n


def render(scene, height=64, width=64, depth_max=None, shadows=True):
    """Render a scene; returns a RenderResult with the image and G-buffer.

    image = sum over lights of V * f_r * L_i * max(n.l, 0);
    the G-buffer shading channel is the irradiance (pre-normalization).
    """
    if depth_max is None:
        depth_max = NormalizationMeta().depth_max
    H, W = height, width
    P = H * W
    orig, dirs = camera_rays(scene.camera, H, W)

    albedo = np.zeros((P, 3))
    normal = np.zeros((P, 3))
    rough = np.zeros(P)
    metal = np.zeros(P)
    irr = np.zeros((P, 3))
    diff = np.zeros((P, 3))
    spec = np.zeros((P, 3))
    depth = np.full(P, np.inf)

    if scene.primitives:
        kinds, data, mats, lkinds, lvec, lrgb = scene_arrays(scene)
        t, idx = accel.trace_rays(orig, dirs, kinds, data)
        hit = idx >= 0
        if np.any(hit):
            hi = np.where(hit)[0]
            pos = orig[hi] + dirs[hi] * t[hi][:, None]
            nrm = _surface_normals(pos, idx[hi], kinds, data)
            view = -dirs[hi]
            flip = np.sum(nrm * view, axis=1) < 0.0
            nrm[flip] = -nrm[flip]
            pmats = mats[idx[hi]]
            e, d, s = accel.shade_hits(pos, nrm, view, pmats, lkinds, lvec, lrgb,
                                       kinds, data, shadows)
            depth[hi] = t[hi]
            albedo[hi] = pmats[:, 0:3]
            normal[hi] = nrm
            rough[hi] = pmats[:, 3]
            metal[hi] = pmats[:, 4]
            irr[hi] = e
            diff[hi] = d
            spec[hi] = s
    else:
        hit = np.zeros(P, dtype=bool)

    hit = depth < np.inf
    image = diff + spec

    depth_n = np.ones(P)
    depth_n[hit] = normalize_depth(depth[hit], depth_max)
    normal_enc = np.full((P, 3), 0.5)
    if np.any(hit):
        normal_enc[hit] = encode_normal(normal[hit])

    irr_grid = np.ascontiguousarray(irr.T.reshape(3, H, W))
    shading_norm, scale, degenerate = normalize_shading(irr_grid, hit.reshape(H, W))
    meta = NormalizationMeta(shading_scale=scale, depth_max=depth_max,
                             degenerate_shading=degenerate)
    g = GBuffer(
        albedo=albedo.T.reshape(3, H, W),
        normal_enc=normal_enc.T.reshape(3, H, W),
        depth_norm=depth_n.reshape(1, H, W),
        roughness=rough.reshape(1, H, W),
        metallic=metal.reshape(1, H, W),
        shading_norm=shading_norm,
        mask=np.ones((1, H, W), dtype=np.float32),
        meta=meta,
    )
    return RenderResult(
        image=np.ascontiguousarray(image.T.reshape(3, H, W)),
        gbuffer=g,
        irradiance=irr_grid,
        diffuse=np.ascontiguousarray(diff.T.reshape(3, H, W)),
        specular=np.ascontiguousarray(spec.T.reshape(3, H, W)),
        hit=hit.reshape(H, W),
    )


def irradiance_at(position, normal, lights, scene=None, shadows=True):
    """Irradiance at a single surface point from discrete lights.

    Visibility uses the scene's primitives when given, else no occlusion.
    """
    normal = np.asarray(normal, dtype=np.float64)
    if abs(np.linalg.norm(normal) - 1.0) > 1e-6:
        raise ValidationError("normal must be unit length")
    if scene is not None and scene.primitives:
        kinds, data, _, _, _, _ = scene_arrays(scene)
    else:
        kinds = np.zeros(0, dtype=np.int32)
        data = np.zeros((0, 6), dtype=np.float64)
        shadows = False
    lkinds = np.asarray([0 if l.kind == "directional" else 1 for l in lights], dtype=np.int32)
    lvec = np.asarray([l.vec for l in lights], dtype=np.float64).reshape(-1, 3)
    lrgb = np.asarray([l.rgb for l in lights], dtype=np.float64).reshape(-1, 3)
    pos = np.asarray(position, dtype=np.float64).reshape(1, 3)
    nrm = normal.reshape(1, 3)
    irr, _, _ = accel.shade_hits(pos, nrm, nrm.copy(), np.array([[0.5, 0.5, 0.5, 1.0, 0.0]]),
                                 lkinds, lvec, lrgb, kinds, data, shadows)
    return irr[0]


def furnace_environment(normal, n_dirs=4096):
    """Uniform unit-radiance environment approximated by directional lights.

    Each Fibonacci direction carries radiance 2*pi/n (its quadrature weight),
    so the irradiance quadrature approximates integral(cos) = pi.
    """
    dirs = fibonacci_hemisphere(n_dirs, axis=normal)
    w = 2.0 * np.pi / n_dirs
    return [Light.directional(tuple(d), (w, w, w)) for d in dirs]


def furnace_response(albedo_rgb=(1.0, 1.0, 1.0), n_dirs=4096):
    """Outgoing diffuse radiance of a Lambertian surface with the given albedo
    under the uniform unit environment. Exactly 1 for albedo 1 (up to
    quadrature error): the classic white-furnace closure.
    """
    n = np.array([0.0, 0.0, 1.0])
    dirs = fibonacci_hemisphere(n_dirs)
    w = 2.0 * np.pi / n_dirs
    e = np.sum(np.maximum(dirs[:, 2], 0.0)) * w
    return np.asarray(albedo_rgb, dtype=np.float64) / np.pi * e
