"""Raw float32 image files (authoritative) + 8-bit PNG previews."""
import json
from pathlib import Path

import numpy as np

from .errors import ContainerError


def write_image(img, path_stem, png=True):
    """img: (3,H,W) float32 in [0,1] -> <stem>.f32 + <stem>.json (+ .png)."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    stem = Path(path_stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".f32").write_bytes(img.astype("<f4").tobytes())
    stem.with_suffix(".json").write_text(json.dumps(
        {"channels": img.shape[0], "height": img.shape[1], "width": img.shape[2]}))
    if png:
        from PIL import Image
        u8 = (np.clip(img, 0, 1) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(np.moveaxis(u8, 0, -1)).save(stem.with_suffix(".png"))
    return stem.with_suffix(".f32")


def read_image(path_stem):
    stem = Path(path_stem)
    meta_file = stem.with_suffix(".json")
    if not meta_file.exists():
        raise ContainerError(f"missing image sidecar {meta_file}")
    meta = json.loads(meta_file.read_text())
    raw = np.frombuffer(stem.with_suffix(".f32").read_bytes(), dtype="<f4")
    shape = (meta["channels"], meta["height"], meta["width"])
    if raw.size != np.prod(shape):
        raise ContainerError(f"image file size does not match sidecar {shape}")
    return raw.reshape(shape).copy()
