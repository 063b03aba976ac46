"""G-buffer data model: 13 channels, normalization rules, validation, and a
bit-exact on-disk container (manifest.json + raw little-endian float32 planes).

Channel stack order (fixed contract):
    0-2 albedo, 3-5 normal_enc, 6 roughness, 7-9 shading_norm,
    10 metallic, 11 depth_norm, 12 mask
"""
import hashlib
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import ContainerError, ValidationError

CONTAINER_VERSION = 1
DEFAULT_DEPTH_MAX = 20.0

# name -> plane count, in stack order
CHANNEL_LAYOUT = (
    ("albedo", 3),
    ("normal_enc", 3),
    ("roughness", 1),
    ("shading_norm", 3),
    ("metallic", 1),
    ("depth_norm", 1),
    ("mask", 1),
)
STACK_CHANNELS = 13

# stage-1 latent packing: five 3-plane groups fed through the shared VAE
GROUP_NAMES = ("albedo", "normal", "depth3", "rough_metal", "shading")


def _freeze(a):
    a = np.ascontiguousarray(a, dtype=np.float32)
    a.flags.writeable = False
    return a


@dataclass(frozen=True)
class NormalizationMeta:
    shading_scale: float = 1.0
    depth_max: float = DEFAULT_DEPTH_MAX
    colorspace_tag: str = "linear"
    degenerate_shading: bool = False

    def __post_init__(self):
        if not (self.shading_scale > 0):
            raise ValidationError(f"shading_scale must be > 0, got {self.shading_scale}")
        if not (self.depth_max > 0):
            raise ValidationError(f"depth_max must be > 0, got {self.depth_max}")
        if self.colorspace_tag != "linear":
            raise ValidationError(f"unsupported colorspace_tag {self.colorspace_tag!r}")


@dataclass(frozen=True)
class GBuffer:
    albedo: np.ndarray        # (3,H,W) in [0,1]
    normal_enc: np.ndarray    # (3,H,W) encoded unit normals
    depth_norm: np.ndarray    # (1,H,W) log-normalized depth
    roughness: np.ndarray     # (1,H,W)
    metallic: np.ndarray      # (1,H,W)
    shading_norm: np.ndarray  # (3,H,W) percentile-normalized irradiance
    mask: np.ndarray          # (1,H,W) binary; 0 = edited, needs re-shading
    meta: NormalizationMeta = field(default_factory=NormalizationMeta)

    def __post_init__(self):
        for name in self.channel_names():
            object.__setattr__(self, name, _freeze(getattr(self, name)))

    @staticmethod
    def channel_names():
        return [name for name, _ in CHANNEL_LAYOUT]

    @property
    def height(self):
        return self.albedo.shape[1]

    @property
    def width(self):
        return self.albedo.shape[2]

    def channel(self, name):
        if name not in self.channel_names():
            raise ValidationError(f"unknown channel {name!r}")
        return getattr(self, name)

    def with_channels(self, **channels):
        """Copy with some channels replaced (validation deferred to caller)."""
        return replace(self, **channels)

    def content_hash(self):
        h = hashlib.sha256()
        for name, _ in CHANNEL_LAYOUT:
            h.update(getattr(self, name).tobytes())
        h.update(json.dumps(_meta_dict(self.meta), sort_keys=True).encode())
        return h.hexdigest()


def _meta_dict(meta):
    return {
        "shading_scale": float(meta.shading_scale),
        "depth_max": float(meta.depth_max),
        "colorspace_tag": meta.colorspace_tag,
        "degenerate_shading": bool(meta.degenerate_shading),
    }


# ------------------------------------------------------------- channel codecs

def encode_normal(n):
    """Unit normals (..., 3) -> encoded [0,1] via v = (n+1)/2."""
    n = np.asarray(n, dtype=np.float64)
    norms = np.linalg.norm(n, axis=-1)
    if not np.all(np.abs(norms - 1.0) <= 1e-6):
        bad = float(np.abs(norms - 1.0).max())
        raise ValidationError(f"encode_normal requires unit vectors (max |norm-1| = {bad:.2e})")
    return (n + 1.0) / 2.0


def decode_normal(v):
    """Encoded [0,1] (..., 3) -> vectors via n = 2v - 1 (no renormalization)."""
    return 2.0 * np.asarray(v, dtype=np.float64) - 1.0


def normalize_depth(d, depth_max=DEFAULT_DEPTH_MAX):
    """Logarithmic depth normalization: min(1, log(1+d)/log(1+depth_max))."""
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValidationError("depth must be >= 0")
    if not depth_max > 0:
        raise ValidationError("depth_max must be > 0")
    out = np.log1p(d) / np.log1p(depth_max)
    return np.minimum(out, 1.0)


def denormalize_depth(dn, depth_max=DEFAULT_DEPTH_MAX):
    """Inverse of normalize_depth below saturation."""
    dn = np.asarray(dn, dtype=np.float64)
    return np.expm1(dn * np.log1p(depth_max))


def normalize_shading(S, valid_mask):
    """99th-percentile normalization of irradiance, pooled over all 3 channels.

    Returns (shading_norm, shading_scale, degenerate). Degenerate inputs
    (all-zero or no valid pixels) get scale 1.0 and a warning flag instead of
    an error so fully-masked edit buffers stay representable.
    """
    S = np.asarray(S, dtype=np.float64)
    if S.ndim != 3 or S.shape[0] != 3:
        raise ValidationError(f"shading grid must be (3,H,W), got {S.shape}")
    if not np.all(np.isfinite(S)) or np.any(S < 0):
        raise ValidationError("shading must be finite and >= 0")
    valid = np.asarray(valid_mask, dtype=bool).reshape(S.shape[1:])
    pool = S[:, valid].ravel()
    degenerate = pool.size == 0 or not np.any(pool > 0)
    scale = 1.0 if degenerate else float(np.percentile(pool, 99.0))
    if scale <= 0:
        scale, degenerate = 1.0, True
    return np.clip(S / scale, 0.0, 1.0), scale, degenerate


# ------------------------------------------------------------- stack/validate

def validate(g):
    """Raise ValidationError naming the offending channel; return g unchanged."""
    H, W = g.albedo.shape[1], g.albedo.shape[2]
    for name, planes in CHANNEL_LAYOUT:
        arr = getattr(g, name)
        if arr.shape != (planes, H, W):
            raise ValidationError(f"channel {name}: expected shape {(planes, H, W)}, got {arr.shape}")
        if not np.all(np.isfinite(arr)):
            raise ValidationError(f"channel {name}: non-finite values")
        if arr.min() < 0.0 or arr.max() > 1.0:
            raise ValidationError(f"channel {name}: values outside [0,1]")
    m = g.mask
    if not np.all((m == 0.0) | (m == 1.0)):
        raise ValidationError("channel mask: values must be exactly 0.0 or 1.0")
    fg = g.depth_norm[0] < 1.0
    if np.any(fg):
        n = decode_normal(np.moveaxis(g.normal_enc, 0, -1))[fg]
        norms = np.linalg.norm(n, axis=-1)
        if norms.size and (norms.min() < 1.0 - 1e-3 or norms.max() > 1.0 + 1e-3):
            raise ValidationError(
                f"channel normal_enc: foreground normals not unit length "
                f"(range [{norms.min():.5f}, {norms.max():.5f}])")
    return g


def stack(g):
    """Validated G-buffer -> (13,H,W) float32 in the fixed channel order."""
    validate(g)
    return np.concatenate([getattr(g, name) for name, _ in CHANNEL_LAYOUT], axis=0)


def unstack(arr, meta=None):
    """(13,H,W) -> GBuffer (inverse of stack)."""
    arr = np.asarray(arr, dtype=np.float32)
    if arr.ndim != 3 or arr.shape[0] != STACK_CHANNELS:
        raise ValidationError(f"expected (13,H,W), got {arr.shape}")
    channels = {}
    ofs = 0
    for name, planes in CHANNEL_LAYOUT:
        channels[name] = arr[ofs:ofs + planes]
        ofs += planes
    return GBuffer(meta=meta or NormalizationMeta(), **channels)


def all_ones_mask(H, W):
    return np.ones((1, H, W), dtype=np.float32)


# --------------------------------------------------------- stage-1 group pack

def pack_groups(g):
    """G-buffer -> (5,3,H,W) group planes for latent encoding.

    Groups: albedo, normal_enc, depth (replicated x3), (roughness, metallic,
    0.5), shading_norm. The mask is not packed (edit-time input).
    """
    H, W = g.height, g.width
    half = np.full((1, H, W), 0.5, dtype=np.float32)
    planes = np.stack([
        g.albedo,
        g.normal_enc,
        np.repeat(g.depth_norm, 3, axis=0),
        np.concatenate([g.roughness, g.metallic, half], axis=0),
        g.shading_norm,
    ])
    return planes.astype(np.float32)


def unpack_groups(planes, meta=None, renormalize=True):
    """(5,3,H,W) group planes -> GBuffer (mask all ones).

    Depth is collapsed by channel-mean; normals are renormalized to unit
    length (degenerate pixels fall back to the +z facing normal).
    """
    planes = np.asarray(planes, dtype=np.float64)
    if planes.shape[0] != len(GROUP_NAMES) or planes.shape[1] != 3:
        raise ValidationError(f"expected (5,3,H,W) group planes, got {planes.shape}")
    planes = np.clip(planes, 0.0, 1.0)
    H, W = planes.shape[2], planes.shape[3]
    albedo = planes[0]
    normal_enc = planes[1]
    if renormalize:
        n = decode_normal(np.moveaxis(normal_enc, 0, -1))
        norms = np.linalg.norm(n, axis=-1, keepdims=True)
        n = np.where(norms > 1e-6, n / np.maximum(norms, 1e-6), np.array([0.0, 0.0, 1.0]))
        normal_enc = np.moveaxis(encode_normal(n), -1, 0)
    depth = planes[2].mean(axis=0, keepdims=True)
    rough = planes[3][0:1]
    metal = planes[3][1:2]
    shading = planes[4]
    return GBuffer(
        albedo=albedo, normal_enc=normal_enc, depth_norm=depth, roughness=rough,
        metallic=metal, shading_norm=shading, mask=all_ones_mask(H, W),
        meta=meta or NormalizationMeta())


# ------------------------------------------------------------------ container

def save(g, path):
    """Write the container: manifest.json + one .f32 plane file per channel."""
    from pathlib import Path
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = {
        "version": CONTAINER_VERSION,
        "height": g.height,
        "width": g.width,
        "channels": [{"name": name, "planes": planes} for name, planes in CHANNEL_LAYOUT],
        **_meta_dict(g.meta),
    }
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    for name, _ in CHANNEL_LAYOUT:
        arr = getattr(g, name)
        (path / f"{name}.f32").write_bytes(arr.astype("<f4").tobytes())
    return path


def load(path):
    """Read a container; bit-exact inverse of save."""
    from pathlib import Path
    path = Path(path)
    mf = path / "manifest.json"
    if not mf.exists():
        raise ContainerError(f"missing manifest.json in {path}")
    try:
        manifest = json.loads(mf.read_text())
    except json.JSONDecodeError as e:
        raise ContainerError(f"corrupt manifest.json in {path}: {e}") from e
    for key in ("version", "height", "width", "channels", "shading_scale", "depth_max"):
        if key not in manifest:
            raise ContainerError(f"manifest missing key {key!r}")
    if manifest["version"] != CONTAINER_VERSION:
        raise ContainerError(f"unsupported container version {manifest['version']}")
    H, W = int(manifest["height"]), int(manifest["width"])
    declared = [(c["name"], int(c["planes"])) for c in manifest["channels"]]
    if declared != list(CHANNEL_LAYOUT):
        raise ContainerError(f"manifest channels {declared} do not match the 13-channel layout")
    channels = {}
    for name, planes in CHANNEL_LAYOUT:
        f = path / f"{name}.f32"
        if not f.exists():
            raise ContainerError(f"missing channel file {name}.f32")
        raw = np.frombuffer(f.read_bytes(), dtype="<f4")
        if raw.size != planes * H * W:
            raise ContainerError(
                f"channel {name}: file has {raw.size} floats, manifest implies {planes * H * W} "
                f"(height={H}, width={W})")
        channels[name] = raw.reshape(planes, H, W)
    meta = NormalizationMeta(
        shading_scale=float(manifest["shading_scale"]),
        depth_max=float(manifest["depth_max"]),
        colorspace_tag=manifest.get("colorspace_tag", "linear"),
        degenerate_shading=bool(manifest.get("degenerate_shading", False)),
    )
    return GBuffer(meta=meta, **channels)


def write_previews(g, path):
    """Optional 8-bit PNG previews, one per channel (not authoritative)."""
    from pathlib import Path
    from PIL import Image
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    for name, planes in CHANNEL_LAYOUT:
        arr = np.clip(getattr(g, name), 0.0, 1.0)
        u8 = (arr * 255.0 + 0.5).astype(np.uint8)
        img = Image.fromarray(u8[0] if planes == 1 else np.moveaxis(u8, 0, -1))
        img.save(path / f"{name}.png")
    return path
