"""G-buffer editing: regions, serializable edit ops, one-click edge-bounded
selection, and the edit -> re-render pipeline.

Semantics: every edit zeroes shading and mask exactly on its region (the
renderer re-synthesizes lighting there); shading itself is never copied or
set directly. Same-buffer copy-paste (object movement) zeroes the union of
source and destination regions.
"""
import json
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ValidationError
from .gbuffer import GBuffer, decode_normal, encode_normal, validate

EDGE_THRESHOLD = 0.1  # fraction of max gradient magnitude


# -------------------------------------------------------------------- regions

@dataclass(frozen=True)
class Region:
    """Binary pixel set with run-length JSON serialization."""
    mask: np.ndarray  # (H,W) bool

    def __post_init__(self):
        m = np.ascontiguousarray(np.asarray(self.mask, dtype=bool))
        m.flags.writeable = False
        object.__setattr__(self, "mask", m)

    @property
    def size(self):
        return int(self.mask.sum())

    def is_empty(self):
        return not bool(self.mask.any())

    def to_rle(self):
        """Row-major RLE: alternating run lengths starting with a 0-run."""
        flat = self.mask.ravel()
        change = np.nonzero(np.diff(flat))[0] + 1
        bounds = np.concatenate([[0], change, [flat.size]])
        runs = [int(r) for r in np.diff(bounds)]
        if flat.size and flat[0]:
            runs = [0] + runs
        return {"height": self.mask.shape[0], "width": self.mask.shape[1],
                "runs": runs}

    @staticmethod
    def from_rle(doc):
        try:
            H, W, runs = int(doc["height"]), int(doc["width"]), doc["runs"]
        except (KeyError, TypeError) as e:
            raise ValidationError(f"bad RLE region document: {e}") from e
        if sum(runs) != H * W:
            raise ValidationError(f"RLE runs sum to {sum(runs)}, expected {H * W}")
        flat = np.zeros(H * W, dtype=bool)
        pos = 0
        val = False
        for r in runs:
            if r < 0:
                raise ValidationError("negative RLE run")
            if val:
                flat[pos:pos + r] = True
            pos += r
            val = not val
        return Region(flat.reshape(H, W))

    @staticmethod
    def from_bool(mask):
        return Region(np.asarray(mask, dtype=bool))


# ------------------------------------------------------------------- edit ops

COPYABLE_CHANNELS = ("albedo", "normal_enc", "depth_norm", "roughness", "metallic")
SCALAR_CHANNELS = ("roughness", "metallic")


@dataclass(frozen=True)
class CopyPaste:
    src_region: Region
    dst_offset: tuple                      # (dy, dx) applied to the region
    channels: tuple = COPYABLE_CHANNELS    # subset; never shading
    src_gbuffer_id: Optional[str] = None   # None = same buffer (movement)

    def __post_init__(self):
        bad = set(self.channels) - set(COPYABLE_CHANNELS)
        if bad:
            raise ValidationError(f"channels not copyable: {sorted(bad)} "
                                  f"(shading is mask-driven, never copied)")
        object.__setattr__(self, "channels", tuple(self.channels))
        object.__setattr__(self, "dst_offset", (int(self.dst_offset[0]), int(self.dst_offset[1])))


@dataclass(frozen=True)
class SetScalar:
    channel: str
    region: Region
    value: Optional[float] = None
    delta: Optional[float] = None

    def __post_init__(self):
        if self.channel not in SCALAR_CHANNELS:
            raise ValidationError(f"SetScalar channel must be one of {SCALAR_CHANNELS}")
        if (self.value is None) == (self.delta is None):
            raise ValidationError("SetScalar needs exactly one of value/delta")


@dataclass(frozen=True)
class SetAlbedo:
    region: Region
    rgb: Optional[tuple] = None
    pattern: Optional[str] = None          # "checker" is the only built-in

    def __post_init__(self):
        if (self.rgb is None) == (self.pattern is None):
            raise ValidationError("SetAlbedo needs exactly one of rgb/pattern")
        if self.pattern is not None and self.pattern != "checker":
            raise ValidationError(f"unknown pattern {self.pattern!r}")
        if self.rgb is not None:
            rgb = tuple(float(v) for v in self.rgb)
            if len(rgb) != 3 or min(rgb) < 0 or max(rgb) > 1:
                raise ValidationError("albedo rgb must be 3 values in [0,1]")
            object.__setattr__(self, "rgb", rgb)


@dataclass(frozen=True)
class SetShadingMask:
    """Mark a region as needing shading re-synthesis (zero shading + mask)."""
    region: Region


EDIT_VARIANTS = {"copy_paste": CopyPaste, "set_scalar": SetScalar,
                 "set_albedo": SetAlbedo, "set_shading_mask": SetShadingMask}


def op_to_json(op):
    for tag, cls in EDIT_VARIANTS.items():
        if isinstance(op, cls):
            break
    else:
        raise ValidationError(f"unknown edit op {type(op).__name__}")
    doc = {"op": tag}
    for key, val in vars(op).items():
        if isinstance(val, Region):
            doc[key] = val.to_rle()
        elif isinstance(val, tuple):
            doc[key] = list(val)
        else:
            doc[key] = val
    return doc


def op_from_json(doc):
    if not isinstance(doc, dict) or "op" not in doc:
        raise ValidationError("edit op document needs an 'op' tag")
    tag = doc["op"]
    if tag not in EDIT_VARIANTS:
        raise ValidationError(f"unknown edit op tag {tag!r}")
    cls = EDIT_VARIANTS[tag]
    kwargs = {}
    for key, val in doc.items():
        if key == "op":
            continue
        if key in ("region", "src_region"):
            kwargs[key] = Region.from_rle(val)
        elif isinstance(val, list):
            kwargs[key] = tuple(val)
        else:
            kwargs[key] = val
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ValidationError(f"bad fields for {tag}: {e}") from e


def ops_to_json(ops):
    return json.dumps([op_to_json(op) for op in ops], indent=1)


def ops_from_json(text):
    doc = json.loads(text)
    if not isinstance(doc, list):
        raise ValidationError("edit op file must be a JSON list")
    return [op_from_json(d) for d in doc]


# ------------------------------------------------------------ click selection

def _sobel_magnitude(luma):
    lp = np.pad(luma, 1, mode="edge")
    gx = (lp[:-2, 2:] + 2 * lp[1:-1, 2:] + lp[2:, 2:]
          - lp[:-2, :-2] - 2 * lp[1:-1, :-2] - lp[2:, :-2])
    gy = (lp[2:, :-2] + 2 * lp[2:, 1:-1] + lp[2:, 2:]
          - lp[:-2, :-2] - 2 * lp[:-2, 1:-1] - lp[:-2, 2:])
    return np.hypot(gx, gy)


def click_select(albedo, point, edge_threshold=EDGE_THRESHOLD):
    """Edge-bounded flood fill from a click. albedo: (3,H,W); point: (x,y).

    Returns the connected non-edge region containing the point. Clicking on
    an edge pixel moves to the nearest non-edge neighbor; a fully-edged
    neighborhood degrades to a single-pixel region.
    """
    albedo = np.asarray(albedo)
    if albedo.ndim != 3 or albedo.shape[0] != 3:
        raise ValidationError(f"albedo must be (3,H,W), got {albedo.shape}")
    H, W = albedo.shape[1:]
    x, y = int(point[0]), int(point[1])
    if not (0 <= x < W and 0 <= y < H):
        raise ValidationError(f"point {point} outside {W}x{H}")
    luma = 0.299 * albedo[0] + 0.587 * albedo[1] + 0.114 * albedo[2]
    grad = _sobel_magnitude(luma)
    # absolute floor keeps float rounding noise on flat images from reading
    # as edges
    edges = grad > max(edge_threshold * grad.max(), 1e-9)

    if edges[y, x]:
        # smallest enclosing non-edge neighbor (scan by distance, fixed order)
        found = None
        for radius in range(1, max(H, W)):
            ys = slice(max(0, y - radius), min(H, y + radius + 1))
            xs = slice(max(0, x - radius), min(W, x + radius + 1))
            sub = ~edges[ys, xs]
            if sub.any():
                yy, xx = np.nonzero(sub)
                yy = yy + ys.start
                xx = xx + xs.start
                d2 = (yy - y) ** 2 + (xx - x) ** 2
                i = int(np.lexsort((xx, yy, d2))[0])
                found = (yy[i], xx[i])
                break
        if found is None:
            m = np.zeros((H, W), dtype=bool)
            m[y, x] = True
            return Region(m)
        y, x = found

    region = np.zeros((H, W), dtype=bool)
    stack = [(y, x)]
    region[y, x] = True
    while stack:
        cy, cx = stack.pop()
        for ny, nx in ((cy - 1, cx), (cy + 1, cx), (cy, cx - 1), (cy, cx + 1)):
            if 0 <= ny < H and 0 <= nx < W and not region[ny, nx] and not edges[ny, nx]:
                region[ny, nx] = True
                stack.append((ny, nx))
    return Region(region)


# ------------------------------------------------------------------ apply ops

def _zero_shading(channels, region):
    channels["shading_norm"] = np.where(region[None], 0.0, channels["shading_norm"]).astype(np.float32)
    channels["mask"] = np.where(region[None], 0.0, channels["mask"]).astype(np.float32)


def _shift_region(region, offset, H, W):
    dy, dx = offset
    src_y, src_x = np.nonzero(region)
    dst_y, dst_x = src_y + dy, src_x + dx
    if len(dst_y) and (dst_y.min() < 0 or dst_y.max() >= H or dst_x.min() < 0 or dst_x.max() >= W):
        raise ValidationError("copy-paste destination out of bounds")
    return (src_y, src_x), (dst_y, dst_x)


def apply_edit(g, op, sources=None):
    """Apply one EditOp; returns a new validated GBuffer.

    Pixels outside the op's region(s) are bit-identical to the input.
    `sources` maps src_gbuffer_id -> GBuffer for cross-buffer paste.
    """
    H, W = g.height, g.width
    channels = {name: np.array(g.channel(name)) for name in GBuffer.channel_names()}

    if isinstance(op, SetScalar):
        region = op.region.mask
        if op.region.is_empty():
            raise ValidationError("empty region")
        if region.shape != (H, W):
            raise ValidationError("region resolution mismatch")
        ch = channels[op.channel]
        if op.value is not None:
            ch[0][region] = np.float32(np.clip(op.value, 0.0, 1.0))
        else:
            ch[0][region] = np.clip(ch[0][region] + np.float32(op.delta), 0.0, 1.0)
        _zero_shading(channels, region)

    elif isinstance(op, SetAlbedo):
        region = op.region.mask
        if op.region.is_empty():
            raise ValidationError("empty region")
        if region.shape != (H, W):
            raise ValidationError("region resolution mismatch")
        if op.rgb is not None:
            for c in range(3):
                channels["albedo"][c][region] = np.float32(op.rgb[c])
        else:
            yy, xx = np.nonzero(region)
            checker = ((yy // 4 + xx // 4) % 2).astype(np.float32)
            for c in range(3):
                channels["albedo"][c][yy, xx] = 0.15 + 0.7 * checker
        _zero_shading(channels, region)

    elif isinstance(op, SetShadingMask):
        region = op.region.mask
        if op.region.is_empty():
            raise ValidationError("empty region")
        if region.shape != (H, W):
            raise ValidationError("region resolution mismatch")
        _zero_shading(channels, region)

    elif isinstance(op, CopyPaste):
        if op.src_region.is_empty():
            raise ValidationError("empty region")
        src = g if op.src_gbuffer_id is None else (sources or {}).get(op.src_gbuffer_id)
        if src is None:
            raise ValidationError(f"unknown source G-buffer {op.src_gbuffer_id!r}")
        if op.src_region.mask.shape != (src.height, src.width):
            raise ValidationError("source region resolution mismatch")
        (sy, sx), (dy, dx) = _shift_region(op.src_region.mask, op.dst_offset, H, W)
        for name in op.channels:
            channels[name][:, dy, dx] = src.channel(name)[:, sy, sx]
        dst_region = np.zeros((H, W), dtype=bool)
        dst_region[dy, dx] = True
        affected = dst_region
        if op.src_gbuffer_id is None:
            # same-buffer movement: union semantics, source re-shades too
            affected = dst_region | op.src_region.mask
        _zero_shading(channels, affected)
        if "normal_enc" in op.channels:
            # renormalize only pasted pixels (background normals stay as-is)
            n = decode_normal(channels["normal_enc"][:, dy, dx].T)
            norms = np.linalg.norm(n, axis=-1, keepdims=True)
            n = np.where(norms > 1e-6, n / np.maximum(norms, 1e-6),
                         np.array([0.0, 0.0, 1.0]))
            channels["normal_enc"][:, dy, dx] = encode_normal(n).T.astype(np.float32)

    else:
        raise ValidationError(f"unknown edit op {type(op).__name__}")

    return validate(GBuffer(meta=g.meta, **channels))


def apply_edits(g, ops, sources=None):
    """Left fold of apply_edit."""
    for op in ops:
        g = apply_edit(g, op, sources=sources)
    return g


def edit_and_render(bundle, g, ops, desc, seed, steps=None, sources=None):
    """Apply ops then render with stage 2. ops=[] renders g unchanged, byte-
    identical to render_gbuffer (mask-identity invariant)."""
    from .stage2 import render_gbuffer
    edited = apply_edits(g, ops, sources=sources)
    image = render_gbuffer(bundle, edited, desc, seed, steps=steps)
    return edited, image
