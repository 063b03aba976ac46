"""Single-point microfacet BRDF: GGX distribution, height-correlated Smith
masking, Schlick Fresnel, plus the Lambertian lobe for dielectrics.

These are the scalar/ vectorized reference forms; the per-pixel kernels in
gbx.accel implement the same math. Shared conventions: alpha = roughness^2
with a 0.04 roughness floor, F0 = lerp(0.04, albedo, metallic).
"""
from dataclasses import dataclass

import numpy as np

from ..errors import ValidationError

ROUGHNESS_FLOOR = 0.04
F0_DIELECTRIC = 0.04


@dataclass(frozen=True)
class MaterialParams:
    albedo: tuple          # rgb in [0,1]
    roughness: float       # in [ROUGHNESS_FLOOR, 1]
    metallic: float        # in [0,1]

    def __post_init__(self):
        a = np.asarray(self.albedo, dtype=np.float64)
        if a.shape != (3,) or a.min() < 0 or a.max() > 1:
            raise ValidationError(f"albedo must be rgb in [0,1], got {self.albedo}")
        object.__setattr__(self, "albedo", tuple(float(v) for v in a))
        if not (ROUGHNESS_FLOOR <= self.roughness <= 1.0):
            raise ValidationError(f"roughness must be in [{ROUGHNESS_FLOOR}, 1], got {self.roughness}")
        if not (0.0 <= self.metallic <= 1.0):
            raise ValidationError(f"metallic must be in [0,1], got {self.metallic}")

    @property
    def alpha(self):
        return self.roughness * self.roughness

    @property
    def f0(self):
        a = np.asarray(self.albedo)
        return F0_DIELECTRIC + (a - F0_DIELECTRIC) * self.metallic


def ggx_D(ndoth, alpha):
    """GGX normal distribution; zero on the lower hemisphere."""
    if np.any(np.asarray(alpha) <= 0):
        raise ValidationError("alpha must be > 0")
    ndoth = np.asarray(ndoth, dtype=np.float64)
    if np.any(np.abs(ndoth) > 1 + 1e-9):
        raise ValidationError("n.h must be in [-1, 1]")
    a2 = np.float64(alpha) ** 2
    denom = ndoth * ndoth * (a2 - 1.0) + 1.0
    d = a2 / (np.pi * denom * denom)
    return np.where(ndoth > 0.0, d, 0.0)


def _lambda_ggx(cos_theta, alpha):
    c2 = cos_theta * cos_theta
    return 0.5 * (-1.0 + np.sqrt(1.0 + alpha * alpha * (1.0 - c2) / c2))


def smith_G(ndotl, ndotv, alpha):
    """Height-correlated Smith-GGX masking-shadowing, G = 1/(1+L_i+L_o)."""
    ndotl = np.asarray(ndotl, dtype=np.float64)
    ndotv = np.asarray(ndotv, dtype=np.float64)
    if np.any(ndotl <= 0) or np.any(ndotv <= 0):
        raise ValidationError("smith_G requires positive cosines (cull back-facing first)")
    return 1.0 / (1.0 + _lambda_ggx(ndotl, alpha) + _lambda_ggx(ndotv, alpha))


def schlick_F(hdotv, f0):
    """Schlick Fresnel, F = F0 + (1-F0)(1-h.v)^5."""
    hdotv = np.asarray(hdotv, dtype=np.float64)
    if np.any(hdotv < 0) or np.any(hdotv > 1 + 1e-9):
        raise ValidationError("h.v must be in [0, 1]")
    f0 = np.asarray(f0, dtype=np.float64)
    return f0 + (1.0 - f0) * (1.0 - hdotv) ** 5


def _unit(v, name):
    v = np.asarray(v, dtype=np.float64)
    if abs(np.linalg.norm(v) - 1.0) > 1e-6:
        raise ValidationError(f"{name} must be unit length")
    return v


def brdf_components(mat, n, wi, wo):
    """(diffuse rgb, specular rgb) per steradian for one direction pair."""
    n = _unit(n, "n")
    wi = _unit(wi, "wi")
    wo = _unit(wo, "wo")
    ndotl = float(n @ wi)
    ndotv = float(n @ wo)
    if ndotl <= 0 or ndotv <= 0:
        raise ValidationError("back-facing directions (n.wi and n.wo must be > 0)")
    albedo = np.asarray(mat.albedo)
    diffuse = (1.0 - mat.metallic) * albedo / np.pi
    h = wi + wo
    h = h / np.linalg.norm(h)
    alpha = max(mat.roughness, ROUGHNESS_FLOOR) ** 2
    d = float(ggx_D(float(n @ h), alpha))
    g = float(smith_G(ndotl, ndotv, alpha))
    f = schlick_F(min(max(float(h @ wo), 0.0), 1.0), mat.f0)
    specular = f * (d * g / (4.0 * ndotl * ndotv))
    return diffuse, specular


def brdf_eval(mat, n, wi, wo):
    """Full BRDF value (rgb per steradian): Lambert dielectric lobe + microfacet."""
    diffuse, specular = brdf_components(mat, n, wi, wo)
    return diffuse + specular


def fibonacci_hemisphere(n, axis=(0.0, 0.0, 1.0)):
    """Equal-area Fibonacci point set on the hemisphere around `axis`.

    Quadrature weight per direction is 2*pi/n.
    """
    i = np.arange(n)
    z = (i + 0.5) / n
    phi = 2.0 * np.pi * i * (1.0 - 1.0 / ((1.0 + np.sqrt(5.0)) / 2.0))
    r = np.sqrt(1.0 - z * z)
    dirs = np.stack([r * np.cos(phi), r * np.sin(phi), z], axis=1)
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    if np.allclose(axis, [0, 0, 1]):
        return dirs
    # rotate +z onto axis
    helper = np.array([1.0, 0.0, 0.0]) if abs(axis[2]) > 0.9 else np.array([0.0, 0.0, 1.0])
    x = np.cross(helper, axis)
    x /= np.linalg.norm(x)
    y = np.cross(axis, x)
    return dirs @ np.stack([x, y, axis])


def ggx_normalization_quadrature(alpha, n_dirs=4096):
    """Hemispherical quadrature of D(h) (n.h) dw; should be ~1 for any alpha."""
    dirs = fibonacci_hemisphere(n_dirs)
    cos_t = dirs[:, 2]
    w = 2.0 * np.pi / n_dirs
    return float(np.sum(ggx_D(cos_t, alpha) * cos_t) * w)
