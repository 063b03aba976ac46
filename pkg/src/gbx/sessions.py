"""Editing sessions: an initial G-buffer plus an append-only edit log.

The current state is always replay(initial, log); undo drops the last op and
replays. State versions increase monotonically and gate mutations
(optimistic concurrency).
"""
import json
import threading
import uuid
from pathlib import Path

import numpy as np

from . import gbuffer as gb
from .edit import apply_edits, op_from_json, op_to_json
from .errors import ValidationError


class Session:
    def __init__(self, root, session_id, initial, prompt, seed):
        self.root = Path(root)
        self.id = session_id
        self.initial = initial
        self.prompt = prompt
        self.seed = seed
        self.ops = []
        self.version = 0
        self.lock = threading.Lock()
        self.current = initial
        self.last_render = None  # (seed, image)

    # persistence -----------------------------------------------------------
    def save(self):
        d = self.root / self.id
        d.mkdir(parents=True, exist_ok=True)
        gb.save(self.initial, d / "initial_gbuffer")
        (d / "log.json").write_text(json.dumps([op_to_json(o) for o in self.ops], indent=1))
        (d / "meta.json").write_text(json.dumps(
            {"id": self.id, "prompt": self.prompt, "seed": self.seed,
             "version": self.version}))

    @staticmethod
    def load(root, session_id):
        d = Path(root) / session_id
        if not (d / "meta.json").exists():
            raise KeyError(session_id)
        meta = json.loads((d / "meta.json").read_text())
        s = Session(root, session_id, gb.load(d / "initial_gbuffer"),
                    meta["prompt"], meta["seed"])
        s.ops = [op_from_json(doc) for doc in json.loads((d / "log.json").read_text())]
        s.version = meta["version"]
        s.current = apply_edits(s.initial, s.ops)
        return s

    # mutations -------------------------------------------------------------
    def apply(self, op, expect_version=None):
        with self.lock:
            if expect_version is not None and expect_version != self.version:
                raise VersionConflict(self.version)
            new = apply_edits(self.current, [op])
            self.ops.append(op)
            self.version += 1
            self.current = new
            self.save()
            return self.version

    def undo(self, expect_version=None):
        with self.lock:
            if expect_version is not None and expect_version != self.version:
                raise VersionConflict(self.version)
            if not self.ops:
                raise ValidationError("nothing to undo")
            self.ops.pop()
            self.current = apply_edits(self.initial, self.ops)
            self.version += 1
            self.save()
            return self.version

    def state_hash(self):
        return self.current.content_hash()

    def history(self):
        return [op_to_json(o) for o in self.ops]


class VersionConflict(Exception):
    def __init__(self, current_version):
        super().__init__(f"state version is {current_version}")
        self.current_version = current_version


class SessionStore:
    def __init__(self, root):
        self.root = Path(root)
        self.sessions = {}
        self.lock = threading.Lock()

    def create(self, initial, prompt, seed):
        sid = uuid.uuid4().hex[:12]
        s = Session(self.root, sid, initial, prompt, seed)
        s.save()
        with self.lock:
            self.sessions[sid] = s
        return s

    def get(self, sid):
        with self.lock:
            if sid in self.sessions:
                return self.sessions[sid]
        s = Session.load(self.root, sid)  # raises KeyError if missing
        with self.lock:
            self.sessions[sid] = s
        return s
