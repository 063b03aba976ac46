"""Procedural toy scenes and dataset synthesis.

Scenes are floor + 1-3 primitives (spheres/cubes) with palette albedos and a
token-directed key light; every scene maps deterministically from a seed, and
the prompt descriptor truthfully describes the generating parameters.
"""
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ContainerError, ValidationError
from .gbuffer import load as load_gbuffer
from .gbuffer import save as save_gbuffer
from .render.brdf import MaterialParams
from .render.raytrace import render
from .render.scene import Box, Camera, Light, Plane, Scene, Sphere

PAD = ""
COUNT_WORDS = ("one", "two", "three")
SHAPE_WORDS = ("sphere", "cube")
COLOR_WORDS = ("red", "orange", "yellow", "green", "cyan", "blue", "purple", "magenta")
MATERIAL_WORDS = ("matte", "glossy", "metallic")
LIGHT_WORDS = ("left", "right", "top", "front")

PALETTE = {
    "red": (0.85, 0.10, 0.10),
    "orange": (0.90, 0.55, 0.10),
    "yellow": (0.90, 0.85, 0.10),
    "green": (0.10, 0.75, 0.15),
    "cyan": (0.10, 0.75, 0.80),
    "blue": (0.12, 0.25, 0.85),
    "purple": (0.55, 0.15, 0.80),
    "magenta": (0.85, 0.15, 0.65),
}
FLOOR_ALBEDO = (0.62, 0.60, 0.58)

VOCAB = (PAD,) + COUNT_WORDS + SHAPE_WORDS + COLOR_WORDS + MATERIAL_WORDS + LIGHT_WORDS
TOKEN_IDS = {w: i for i, w in enumerate(VOCAB)}
SEQ_LEN = 11  # count, light, then (shape, color, material) x 3


@dataclass(frozen=True)
class PromptDescriptor:
    items: tuple          # ((shape, color, material), ...) largest object first
    light: str

    def __post_init__(self):
        if not 1 <= len(self.items) <= 3:
            raise ValidationError("descriptor needs 1-3 items")
        for shape, color, material in self.items:
            if shape not in SHAPE_WORDS or color not in COLOR_WORDS or material not in MATERIAL_WORDS:
                raise ValidationError(f"token outside vocabulary: {(shape, color, material)}")
        if self.light not in LIGHT_WORDS:
            raise ValidationError(f"unknown light token {self.light!r}")

    @property
    def count_word(self):
        return COUNT_WORDS[len(self.items) - 1]

    @property
    def primary_color(self):
        return self.items[0][1]

    def tokens(self):
        """Fixed-length token sequence (PAD-filled)."""
        toks = [self.count_word, self.light]
        for shape, color, material in self.items:
            toks += [shape, color, material]
        toks += [PAD] * (SEQ_LEN - len(toks))
        return tuple(toks)

    def token_ids(self):
        return np.array([TOKEN_IDS[t] for t in self.tokens()], dtype=np.int64)

    def to_prompt(self):
        parts = [f"a {color} {material} {shape}" for shape, color, material in self.items]
        noun = "object" if len(self.items) == 1 else "objects"
        return f"{self.count_word} {noun}: {', '.join(parts)}; light from {self.light}"


def parse_prompt(text):
    """Inverse of PromptDescriptor.to_prompt (canonical strings only)."""
    try:
        head, light_part = text.strip().rsplit("; light from ", 1)
        _, items_part = head.split(": ", 1)
        items = []
        for chunk in items_part.split(", "):
            words = chunk.split()
            if len(words) != 4 or words[0] != "a":
                raise ValueError(chunk)
            items.append((words[3], words[1], words[2]))
    except ValueError as e:
        raise ValidationError(f"not a canonical prompt: {text!r}") from e
    return PromptDescriptor(tuple(items), light_part.strip())


def empty_descriptor_ids():
    return np.zeros(SEQ_LEN, dtype=np.int64)


# ---------------------------------------------------------------- scene build

def _material_for(word, rng):
    if word == "matte":
        return float(rng.uniform(0.55, 0.95)), float(rng.uniform(0.0, 0.1))
    if word == "glossy":
        return float(rng.uniform(0.08, 0.30)), float(rng.uniform(0.0, 0.1))
    return float(rng.uniform(0.15, 0.45)), float(rng.uniform(0.85, 1.0))


def _key_light_dir(word, rng):
    e = rng.uniform(0.7, 1.3)
    s = rng.uniform(-0.25, 0.25)
    if word == "left":
        return (-1.0, e, s)
    if word == "right":
        return (1.0, e, s)
    if word == "top":
        return (s, 1.0, rng.uniform(-0.25, 0.25))
    return (s, 0.6 * e, 1.0)


def _try_sample(rng):
    count = int(rng.choice([1, 2, 3], p=[0.45, 0.35, 0.20]))
    colors = [str(c) for c in rng.choice(COLOR_WORDS, size=count, replace=False)]
    objs = []
    placed = []
    for color in colors:
        shape = str(rng.choice(SHAPE_WORDS))
        mat_word = str(rng.choice(MATERIAL_WORDS))
        rough, metal = _material_for(mat_word, rng)
        size = float(rng.uniform(0.38, 0.75))
        pos = None
        for _ in range(40):
            cand = np.array([rng.uniform(-1.25, 1.25), 0.0, rng.uniform(-0.85, 0.85)])
            if all(np.linalg.norm(cand[[0, 2]] - p[[0, 2]]) > size + s0 + 0.08
                   for p, s0 in placed):
                pos = cand
                break
        if pos is None:
            return None
        placed.append((pos, size))
        material = MaterialParams(PALETTE[color], max(rough, 0.04), metal)
        if shape == "sphere":
            prim = Sphere((pos[0], size, pos[2]), size, material)
        else:
            he = size * rng.uniform(0.75, 1.05, size=3)
            prim = Box((pos[0], he[1], pos[2]), tuple(he), material)
        objs.append({"prim": prim, "shape": shape, "color": color,
                     "material": mat_word, "size": size, "pos": pos})

    light_word = str(rng.choice(LIGHT_WORDS))
    tint = rng.uniform(0.92, 1.05, size=3)
    key = Light.directional(_key_light_dir(light_word, rng),
                            tuple(rng.uniform(2.3, 3.2) * tint))
    lights = [key]
    if rng.random() < 0.5:
        fill_dir = (-key.vec[0] + rng.uniform(-0.3, 0.3), rng.uniform(0.5, 1.0),
                    -key.vec[2] + rng.uniform(-0.3, 0.3))
        lights.append(Light.directional(fill_dir, tuple(rng.uniform(0.25, 0.7) * np.ones(3))))

    az = np.deg2rad(rng.uniform(-25, 25))
    dist = rng.uniform(3.6, 4.6)
    cam = Camera((dist * np.sin(az), rng.uniform(1.9, 2.7), dist * np.cos(az)),
                 (0.0, 0.45, 0.0), fov_deg=45.0)

    floor = Plane((0, 0, 0), (0, 1, 0), MaterialParams(FLOOR_ALBEDO, 0.9, 0.0))
    scene = Scene((floor, *[o["prim"] for o in objs]), tuple(lights), cam)

    # order tokens by actual visible pixel count (largest object first) and
    # reject scenes with an invisible object so prompts stay grounded
    from . import accel
    from .render.raytrace import camera_rays
    from .render.scene import scene_arrays
    kinds, data, _, _, _, _ = scene_arrays(scene)
    orig, dirs = camera_rays(cam, 32, 32)
    _, idx = accel.trace_rays(orig, dirs, kinds, data)
    counts = np.bincount(idx[idx >= 0], minlength=len(scene.primitives))
    for i, o in enumerate(objs):
        o["pixels"] = int(counts[i + 1])  # primitive 0 is the floor
    if any(o["pixels"] < 6 for o in objs):
        return None
    objs.sort(key=lambda o: -o["pixels"])
    desc = PromptDescriptor(tuple((o["shape"], o["color"], o["material"]) for o in objs),
                            light_word)
    return scene, desc


def sample_scene(seed):
    """Deterministic (Scene, PromptDescriptor) for a seed."""
    for attempt in range(16):
        rng = np.random.default_rng(np.random.SeedSequence((int(seed), attempt)))
        out = _try_sample(rng)
        if out is not None:
            scene, desc = out
            return Scene(scene.primitives, scene.lights, scene.camera, seed=int(seed)), desc
    raise ValidationError(f"could not place primitives for seed {seed}")


# ------------------------------------------------------------------- dataset

def _image_scale(image, hit):
    pool = np.moveaxis(image, 0, -1)[hit].ravel()
    if pool.size == 0 or not np.any(pool > 0):
        return 1.0
    s = float(np.percentile(pool, 99.0))
    return s if s > 0 else 1.0


def normalize_image(image, scale):
    return np.clip(np.asarray(image, dtype=np.float32) / np.float32(scale), 0.0, 1.0)


@dataclass(frozen=True)
class DatasetEntry:
    id: int
    seed: int
    split: str
    prompt: str
    dir: str
    image_scale: float


class DatasetIndex:
    def __init__(self, root, meta, entries):
        self.root = Path(root)
        self.meta = meta
        self.entries = entries

    @property
    def resolution(self):
        return int(self.meta["resolution"])

    def split(self, name):
        return [e for e in self.entries if e.split == name]

    @staticmethod
    def load(root):
        root = Path(root)
        f = root / "index.json"
        if not f.exists():
            raise ContainerError(f"missing index.json in {root}")
        doc = json.loads(f.read_text())
        entries = [DatasetEntry(**e) for e in doc["entries"]]
        meta = {k: v for k, v in doc.items() if k != "entries"}
        return DatasetIndex(root, meta, entries)

    def load_entry(self, entry):
        if isinstance(entry, int):
            entry = self.entries[entry]
        d = self.root / entry.dir
        prompt = (d / "prompt.txt").read_text().strip()
        desc = parse_prompt(prompt)
        g = load_gbuffer(d / "gbuffer")
        res = self.resolution
        raw = np.frombuffer((d / "image.f32").read_bytes(), dtype="<f4").reshape(3, res, res)
        return desc, g, raw, normalize_image(raw, entry.image_scale)


def build_dataset(n, seed, out_dir, resolution=64, progress=None):
    """Synthesize n (prompt, G-buffer, image) triples with 90/5/5 splits."""
    if n < 1:
        raise ValidationError("n must be >= 1")
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    from PIL import Image
    entries = []
    for k in range(n):
        entry_seed = int(np.random.SeedSequence((int(seed), k)).generate_state(1)[0])
        try:
            scene, desc = sample_scene(entry_seed)
            r = render(scene, resolution, resolution)
        except Exception as e:
            raise ContainerError(f"entry {k} (seed {entry_seed}) failed: {e}") from e
        scale = _image_scale(r.image, r.hit)
        frac = k / n
        split = "train" if frac < 0.90 else ("val" if frac < 0.95 else "test")
        d = out / f"entry_{k:05d}"
        d.mkdir(exist_ok=True)
        (d / "prompt.txt").write_text(desc.to_prompt() + "\n")
        save_gbuffer(r.gbuffer, d / "gbuffer")
        (d / "image.f32").write_bytes(r.image.astype("<f4").tobytes())
        u8 = (normalize_image(r.image, scale) * 255 + 0.5).astype(np.uint8)
        Image.fromarray(np.moveaxis(u8, 0, -1)).save(d / "image.png")
        entries.append(DatasetEntry(id=k, seed=entry_seed, split=split,
                                    prompt=desc.to_prompt(), dir=d.name,
                                    image_scale=scale))
        if progress and (k + 1) % progress == 0:
            print(f"  dataset: {k + 1}/{n}")
    doc = {
        "version": 1,
        "n": n,
        "seed": int(seed),
        "resolution": resolution,
        "entries": [vars(e) for e in entries],
    }
    (out / "index.json").write_text(json.dumps(doc, indent=1, sort_keys=True))
    return DatasetIndex(out, {k: v for k, v in doc.items() if k != "entries"}, entries)
