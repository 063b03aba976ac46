"""Versioned parameter bundles: named groups of arrays stored as one binary
blob plus a JSON sidecar (shapes, offsets, config, freeze flags, hashes).
Round trips are bit-exact; group hashes are the freeze-integrity primitive.
"""
import hashlib
import json
from pathlib import Path

import numpy as np

from .errors import BundleError

BUNDLE_VERSION = 1


def config_hash(cfg):
    return hashlib.sha256(json.dumps(cfg, sort_keys=True, default=str).encode()).hexdigest()[:16]


class ModelBundle:
    def __init__(self, config, groups=None, frozen=None, meta=None):
        self.config = dict(config)
        self.groups = {k: dict(v) for k, v in (groups or {}).items()}
        self.frozen = dict(frozen or {})
        self.meta = dict(meta or {})

    @property
    def config_hash(self):
        return config_hash(self.config)

    def set_group(self, name, state, frozen=False):
        self.groups[name] = {k: np.ascontiguousarray(v) for k, v in state.items()}
        self.frozen[name] = bool(frozen)

    def group_hash(self, name):
        if name not in self.groups:
            raise BundleError(f"no parameter group {name!r}")
        h = hashlib.sha256()
        for pname in sorted(self.groups[name]):
            arr = self.groups[name][pname]
            h.update(pname.encode())
            h.update(str(arr.shape).encode())
            h.update(arr.tobytes())
        return h.hexdigest()

    def hashes(self):
        return {name: self.group_hash(name) for name in sorted(self.groups)}

    def save(self, path):
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        blob = bytearray()
        manifest_groups = {}
        for gname in sorted(self.groups):
            entries = []
            for pname in sorted(self.groups[gname]):
                arr = self.groups[gname][pname]
                raw = arr.astype(arr.dtype.newbyteorder("<")).tobytes()
                entries.append({
                    "name": pname,
                    "dtype": arr.dtype.str.replace(">", "<"),
                    "shape": list(arr.shape),
                    "offset": len(blob),
                    "nbytes": len(raw),
                })
                blob.extend(raw)
            manifest_groups[gname] = entries
        sidecar = {
            "version": BUNDLE_VERSION,
            "config": self.config,
            "config_hash": self.config_hash,
            "groups": manifest_groups,
            "frozen": self.frozen,
            "meta": self.meta,
            "hashes": self.hashes(),
        }
        (path / "bundle.bin").write_bytes(bytes(blob))
        (path / "bundle.json").write_text(json.dumps(sidecar, indent=1, sort_keys=True))
        return path

    @staticmethod
    def load(path):
        path = Path(path)
        sidecar_file = path / "bundle.json"
        if not sidecar_file.exists():
            raise BundleError(f"no bundle at {path}")
        sidecar = json.loads(sidecar_file.read_text())
        if sidecar.get("version") != BUNDLE_VERSION:
            raise BundleError(f"unsupported bundle version {sidecar.get('version')}")
        blob = (path / "bundle.bin").read_bytes()
        groups = {}
        for gname, entries in sidecar["groups"].items():
            g = {}
            for e in entries:
                raw = blob[e["offset"]:e["offset"] + e["nbytes"]]
                g[e["name"]] = np.frombuffer(raw, dtype=e["dtype"]).reshape(e["shape"]).copy()
            groups[gname] = g
        b = ModelBundle(sidecar["config"], groups, sidecar["frozen"], sidecar["meta"])
        stored = sidecar.get("hashes", {})
        actual = b.hashes()
        for name, hs in stored.items():
            if actual.get(name) != hs:
                raise BundleError(f"bundle group {name!r} hash mismatch (corrupt blob?)")
        return b
