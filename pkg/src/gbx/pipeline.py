"""Build-if-missing artifact pipeline: dataset, backbone, stage-1/2 bundles,
all cached on disk keyed by effective config hash. The CLI, the service, and
the acceptance suite all go through these helpers, so a fully-trained desk
setup is produced once and reused everywhere.
"""
import json
from pathlib import Path

import numpy as np

from .backbone import train_backbone
from .bundle import ModelBundle, config_hash
from .config import data_root, effective_hash
from .errors import BundleError
from .stage1 import train_stage1
from .stage2 import train_stage2
from .synth import DatasetIndex, build_dataset


def artifact_root(cfg=None):
    return data_root() / "artifacts"


def _stamp(path, payload):
    (path / "stamp.json").write_text(json.dumps(payload, sort_keys=True))


def _stamp_matches(path, payload):
    f = path / "stamp.json"
    return f.exists() and json.loads(f.read_text()) == payload


def ensure_dataset(cfg, log=None, name="dataset"):
    say = log or (lambda *_: None)
    root = artifact_root(cfg) / name
    stamp = {"n": cfg["dataset"]["n"], "seed": cfg["dataset"]["seed"],
             "resolution": cfg["resolution"]}
    if _stamp_matches(root, stamp):
        return DatasetIndex.load(root)
    say(f"building dataset ({stamp['n']} entries) at {root}")
    ds = build_dataset(stamp["n"], stamp["seed"], root,
                       resolution=stamp["resolution"], progress=500)
    _stamp(root, stamp)
    return ds


def _load_bundle_if(path, want_hash):
    try:
        b = ModelBundle.load(path)
    except BundleError:
        return None
    if b.meta.get("pipeline_key") != want_hash:
        return None
    return b


def ensure_backbone(cfg, dataset, seed=None, log=None):
    say = log or (lambda *_: None)
    seed = cfg["dataset"]["seed"] if seed is None else seed
    key = effective_hash({"backbone": cfg["backbone"], "schedule": cfg["schedule"],
                          "resolution": cfg["resolution"], "seed": seed,
                          "dataset": cfg["dataset"]})
    path = artifact_root(cfg) / "bundles" / "backbone"
    cached = _load_bundle_if(path, key)
    if cached is not None:
        return cached
    say("training backbone (VAE + denoiser)")
    b = train_backbone(dataset, cfg, seed=seed, log=say)
    b.meta["pipeline_key"] = key
    b.save(path)
    return b


def ensure_stage1(cfg, dataset, backbone, mode="latent", seed=0, epochs_total=None,
                  epochs_frozen=None, entries_cap=None, tag="stage1", log=None):
    say = log or (lambda *_: None)
    key = effective_hash({"backbone_key": backbone.meta.get("pipeline_key"),
                          "stage1": cfg["stage1"], "mode": mode, "seed": seed,
                          "epochs_total": epochs_total, "epochs_frozen": epochs_frozen,
                          "entries_cap": entries_cap})
    path = artifact_root(cfg) / "bundles" / tag
    cached = _load_bundle_if(path, key)
    if cached is not None:
        return cached
    say(f"training stage-1 [{mode}] seed={seed} -> {path}")
    b = train_stage1(backbone, dataset, cfg, seed=seed, mode=mode,
                     epochs_total=epochs_total, epochs_frozen=epochs_frozen,
                     entries_cap=entries_cap, log=say)
    b.meta["pipeline_key"] = key
    b.save(path)
    return b


def ensure_stage2(cfg, dataset, backbone, encoder="branch", seed=0, epochs=None,
                  entries_cap=None, tag="stage2", log=None):
    say = log or (lambda *_: None)
    key = effective_hash({"backbone_key": backbone.meta.get("pipeline_key"),
                          "stage2": cfg["stage2"], "encoder": encoder, "seed": seed,
                          "epochs": epochs, "entries_cap": entries_cap})
    path = artifact_root(cfg) / "bundles" / tag
    cached = _load_bundle_if(path, key)
    if cached is not None:
        return cached
    say(f"training stage-2 [{encoder}] seed={seed} -> {path}")
    b = train_stage2(backbone, dataset, cfg, seed=seed, encoder=encoder,
                     epochs=epochs, entries_cap=entries_cap, log=say)
    b.meta["pipeline_key"] = key
    b.save(path)
    return b
