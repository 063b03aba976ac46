"""HTTP service: generate/edit/render sessions over the trained bundles,
plus a FIFO job queue (one long-running job at a time).

Errors: 404 unknown session, 409 stale If-Match version, 422 invalid edit,
503 when no trained bundle is loaded.
"""
import io
import json
import queue
import threading
import traceback
import uuid
from dataclasses import dataclass, field

import numpy as np
from fastapi import FastAPI, Header, HTTPException, Response

from . import gbuffer as gb
from .config import data_root
from .edit import click_select, op_from_json
from .errors import BundleError, ValidationError
from .sessions import SessionStore, VersionConflict
from .stage1 import generate_gbuffer
from .stage2 import render_gbuffer
from .synth import parse_prompt


@dataclass
class JobRecord:
    id: str
    kind: str
    params: dict
    status: str = "queued"        # queued | running | done | failed
    progress: str = ""
    log_tail: list = field(default_factory=list)
    artifacts: list = field(default_factory=list)

    TERMINAL = ("done", "failed")

    def to_json(self):
        return {"id": self.id, "kind": self.kind, "status": self.status,
                "progress": self.progress, "log_tail": self.log_tail[-20:],
                "artifacts": self.artifacts}


class JobRunner:
    """FIFO, single worker: training is resource-bound, so one job at a time."""

    KINDS = ("build_dataset", "train_backbone", "train_stage1", "train_stage2", "ablation")

    def __init__(self, cfg):
        self.cfg = cfg
        self.jobs = {}
        self.q = queue.Queue()
        self.worker = threading.Thread(target=self._run, daemon=True)
        self.worker.start()

    def submit(self, kind, params):
        if kind not in self.KINDS:
            raise ValidationError(f"unknown job kind {kind!r}")
        job = JobRecord(id=uuid.uuid4().hex[:12], kind=kind, params=params)
        self.jobs[job.id] = job
        self.q.put(job)
        return job

    def _log(self, job):
        def say(*parts):
            job.log_tail.append(" ".join(str(p) for p in parts))
            job.progress = job.log_tail[-1]
        return say

    def _run(self):
        from . import pipeline
        while True:
            job = self.q.get()
            job.status = "running"
            try:
                say = self._log(job)
                ds = pipeline.ensure_dataset(self.cfg, log=say)
                if job.kind == "build_dataset":
                    pass
                elif job.kind == "train_backbone":
                    pipeline.ensure_backbone(self.cfg, ds, log=say)
                elif job.kind in ("train_stage1", "train_stage2"):
                    bb = pipeline.ensure_backbone(self.cfg, ds, log=say)
                    if job.kind == "train_stage1":
                        pipeline.ensure_stage1(self.cfg, ds, bb, log=say,
                                               seed=job.params.get("seed", 0))
                    else:
                        pipeline.ensure_stage2(self.cfg, ds, bb, log=say,
                                               seed=job.params.get("seed", 0))
                elif job.kind == "ablation":
                    from . import ablate
                    bb = pipeline.ensure_backbone(self.cfg, ds, log=say)
                    which = job.params.get("which", "branch")
                    fn = (ablate.run_branch_ablation if which == "branch"
                          else ablate.run_controlnet_ablation)
                    fn(self.cfg, ds, bb, log=say)
                job.status = "done"
            except Exception as e:  # job isolation: failures land in the record
                job.status = "failed"
                job.log_tail.append(f"error: {e}")
                job.log_tail.extend(traceback.format_exc().splitlines()[-4:])


def _png_bytes(arr):
    """(C,H,W) [0,1] -> PNG bytes (grayscale for 1 channel)."""
    from PIL import Image
    u8 = (np.clip(arr, 0, 1) * 255 + 0.5).astype(np.uint8)
    img = Image.fromarray(u8[0] if arr.shape[0] == 1 else np.moveaxis(u8, 0, -1))
    buf = io.BytesIO()
    img.save(buf, format="PNG")
    return buf.getvalue()


def create_app(cfg, stage1_bundle=None, stage2_bundle=None, session_root=None,
               enable_jobs=True):
    app = FastAPI(title="gbx", version="0.1.0")
    store = SessionStore(session_root or (data_root() / "artifacts" / "sessions"))
    runner = JobRunner(cfg) if enable_jobs else None
    state = {"stage1": stage1_bundle, "stage2": stage2_bundle}

    def _session(sid):
        try:
            return store.get(sid)
        except KeyError:
            raise HTTPException(404, f"unknown session {sid}")

    def _need(which):
        b = state.get(which)
        if b is None or not b.meta.get("trained"):
            raise HTTPException(503, f"no trained {which} bundle loaded")
        return b

    @app.get("/health")
    def health():
        return {"ok": True,
                "stage1": state["stage1"] is not None,
                "stage2": state["stage2"] is not None}

    @app.post("/sessions", status_code=201)
    def create_session(body: dict):
        seed = int(body.get("seed", 0))
        if "entry" in body:  # bootstrap from a dataset entry's ground truth
            from .pipeline import ensure_dataset
            ds = ensure_dataset(cfg)
            desc, g, _, _ = ds.load_entry(int(body["entry"]))
            prompt = desc.to_prompt()
        else:
            try:
                prompt = body["prompt"]
                desc = parse_prompt(prompt)
            except KeyError:
                raise HTTPException(422, "body needs 'prompt' (canonical) or 'entry'")
            except ValidationError as e:
                raise HTTPException(422, str(e))
            g, _ = generate_gbuffer(_need("stage1"), desc, seed)
        s = store.create(g, prompt, seed)
        return {"session_id": s.id, "version": s.version, "state_hash": s.state_hash()}

    @app.get("/sessions/{sid}")
    def session_state(sid: str):
        s = _session(sid)
        return {"session_id": s.id, "version": s.version, "prompt": s.prompt,
                "seed": s.seed, "edits": len(s.ops), "state_hash": s.state_hash(),
                "height": s.current.height, "width": s.current.width}

    @app.get("/sessions/{sid}/gbuffer/{channel}")
    def channel_view(sid: str, channel: str, format: str = "png"):
        s = _session(sid)
        try:
            arr = s.current.channel(channel)
        except ValidationError as e:
            raise HTTPException(404, str(e))
        if format == "f32":
            return Response(arr.astype("<f4").tobytes(),
                            media_type="application/octet-stream",
                            headers={"X-Shape": json.dumps(list(arr.shape)),
                                     "ETag": str(s.version)})
        return Response(_png_bytes(arr), media_type="image/png",
                        headers={"ETag": str(s.version)})

    @app.post("/sessions/{sid}/select")
    def select(sid: str, body: dict):
        s = _session(sid)
        try:
            region = click_select(s.current.albedo, (int(body["x"]), int(body["y"])),
                                  edge_threshold=cfg["edit"]["edge_threshold"])
        except (KeyError, TypeError):
            raise HTTPException(422, "body needs integer 'x' and 'y'")
        except ValidationError as e:
            raise HTTPException(422, str(e))
        return {"region": region.to_rle(), "size": region.size, "version": s.version}

    @app.post("/sessions/{sid}/edits")
    def apply_edit_endpoint(sid: str, body: dict, if_match: str = Header(default=None)):
        s = _session(sid)
        try:
            op = op_from_json(body)
        except ValidationError as e:
            raise HTTPException(422, str(e))
        expect = int(if_match) if if_match is not None else None
        try:
            version = s.apply(op, expect_version=expect)
        except VersionConflict as e:
            raise HTTPException(409, str(e))
        except ValidationError as e:
            raise HTTPException(422, str(e))
        return {"version": version, "state_hash": s.state_hash()}

    @app.delete("/sessions/{sid}/edits")
    def undo(sid: str, if_match: str = Header(default=None)):
        s = _session(sid)
        expect = int(if_match) if if_match is not None else None
        try:
            version = s.undo(expect_version=expect)
        except VersionConflict as e:
            raise HTTPException(409, str(e))
        except ValidationError as e:
            raise HTTPException(422, str(e))
        return {"version": version, "state_hash": s.state_hash()}

    @app.get("/sessions/{sid}/history")
    def history(sid: str):
        s = _session(sid)
        return {"version": s.version, "ops": s.history()}

    @app.post("/sessions/{sid}/render")
    def render(sid: str, body: dict):
        s = _session(sid)
        bundle = _need("stage2")
        seed = int(body.get("seed", s.seed))
        try:
            desc = parse_prompt(s.prompt)
        except ValidationError as e:
            raise HTTPException(422, f"session prompt unparseable: {e}")
        img = render_gbuffer(bundle, s.current, desc, seed)
        s.last_render = (seed, img)
        fmt = body.get("format", "f32")
        if fmt == "png":
            return Response(_png_bytes(img), media_type="image/png",
                            headers={"X-Render-Seed": str(seed)})
        return Response(img.astype("<f4").tobytes(),
                        media_type="application/octet-stream",
                        headers={"X-Shape": json.dumps(list(img.shape)),
                                 "X-Render-Seed": str(seed),
                                 "ETag": str(s.version)})

    @app.get("/sessions/{sid}/export")
    def export(sid: str):
        """Write the current G-buffer as a container; returns the path."""
        s = _session(sid)
        out = store.root / s.id / "export_gbuffer"
        gb.save(s.current, out)
        return {"path": str(out), "version": s.version, "state_hash": s.state_hash()}

    if runner is not None:
        @app.post("/jobs", status_code=202)
        def submit_job(body: dict):
            try:
                job = runner.submit(body.get("kind", ""), body.get("params", {}))
            except ValidationError as e:
                raise HTTPException(422, str(e))
            return job.to_json()

        @app.get("/jobs/{job_id}")
        def job_state(job_id: str):
            job = runner.jobs.get(job_id)
            if job is None:
                raise HTTPException(404, f"unknown job {job_id}")
            return job.to_json()

    return app
