"""Scene description for the analytic renderer: primitives with materials,
discrete lights, pinhole camera. Right-handed, y-up; the floor plane is y=0.
"""
from dataclasses import dataclass, field

import numpy as np

from ..errors import ValidationError
from .brdf import MaterialParams


@dataclass(frozen=True)
class Light:
    kind: str                      # "directional" | "point"
    vec: tuple                     # toward-light unit direction, or position
    rgb: tuple                     # radiance (directional) or intensity (point)

    def __post_init__(self):
        if self.kind not in ("directional", "point"):
            raise ValidationError(f"unknown light kind {self.kind!r}")
        v = np.asarray(self.vec, dtype=np.float64)
        if v.shape != (3,):
            raise ValidationError("light vec must be a 3-vector")
        if self.kind == "directional":
            n = np.linalg.norm(v)
            if not n > 0:
                raise ValidationError("directional light needs a nonzero direction")
            v = v / n
        object.__setattr__(self, "vec", tuple(float(x) for x in v))
        rgb = np.asarray(self.rgb, dtype=np.float64)
        if rgb.shape != (3,) or np.any(rgb < 0) or not np.all(np.isfinite(rgb)):
            raise ValidationError("light rgb must be finite and >= 0")
        object.__setattr__(self, "rgb", tuple(float(x) for x in rgb))

    @staticmethod
    def directional(toward, rgb):
        return Light("directional", tuple(toward), tuple(rgb))

    @staticmethod
    def point(position, rgb):
        return Light("point", tuple(position), tuple(rgb))


@dataclass(frozen=True)
class Sphere:
    center: tuple
    radius: float
    material: MaterialParams

    def __post_init__(self):
        if not self.radius > 0:
            raise ValidationError("sphere radius must be > 0")


@dataclass(frozen=True)
class Box:
    center: tuple
    half_extents: tuple
    material: MaterialParams

    def __post_init__(self):
        he = np.asarray(self.half_extents, dtype=np.float64)
        if np.any(he <= 0):
            raise ValidationError("box half extents must be > 0")


@dataclass(frozen=True)
class Plane:
    point: tuple
    normal: tuple
    material: MaterialParams

    def __post_init__(self):
        n = np.asarray(self.normal, dtype=np.float64)
        if not np.linalg.norm(n) > 0:
            raise ValidationError("plane normal must be nonzero")
        object.__setattr__(self, "normal", tuple(n / np.linalg.norm(n)))


@dataclass(frozen=True)
class Camera:
    position: tuple
    look_at: tuple
    fov_deg: float = 45.0
    up: tuple = (0.0, 1.0, 0.0)

    def basis(self):
        pos = np.asarray(self.position, dtype=np.float64)
        fwd = np.asarray(self.look_at, dtype=np.float64) - pos
        n = np.linalg.norm(fwd)
        if not n > 0:
            raise ValidationError("camera position and look_at coincide")
        fwd = fwd / n
        up = np.asarray(self.up, dtype=np.float64)
        right = np.cross(fwd, up)
        rn = np.linalg.norm(right)
        if not rn > 1e-9:
            raise ValidationError("camera up is parallel to the view direction")
        right = right / rn
        true_up = np.cross(right, fwd)
        return pos, right, true_up, fwd


@dataclass(frozen=True)
class Scene:
    primitives: tuple
    lights: tuple
    camera: Camera
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "primitives", tuple(self.primitives))
        object.__setattr__(self, "lights", tuple(self.lights))
        if len(self.lights) < 1:
            raise ValidationError("scene needs at least one light")


def scene_arrays(scene):
    """Flatten a scene into the kernel encoding (see accel.kernels_numpy)."""
    kinds = []
    data = []
    mats = []
    for p in scene.primitives:
        if isinstance(p, Sphere):
            kinds.append(0)
            data.append([*p.center, p.radius, 0.0, 0.0])
        elif isinstance(p, Box):
            c = np.asarray(p.center, dtype=np.float64)
            he = np.asarray(p.half_extents, dtype=np.float64)
            kinds.append(1)
            data.append([*(c - he), *(c + he)])
        elif isinstance(p, Plane):
            kinds.append(2)
            data.append([*p.point, *p.normal])
        else:
            raise ValidationError(f"unknown primitive {type(p).__name__}")
        m = p.material
        mats.append([*m.albedo, m.roughness, m.metallic])
    kinds = np.asarray(kinds, dtype=np.int32)
    data = np.asarray(data, dtype=np.float64).reshape(len(kinds), 6)
    mats = np.asarray(mats, dtype=np.float64).reshape(len(kinds), 5)

    lkinds = np.asarray([0 if l.kind == "directional" else 1 for l in scene.lights], dtype=np.int32)
    lvec = np.asarray([l.vec for l in scene.lights], dtype=np.float64)
    lrgb = np.asarray([l.rgb for l in scene.lights], dtype=np.float64)
    return kinds, data, mats, lkinds, lvec, lrgb
