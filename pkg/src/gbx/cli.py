"""Command-line interface. Exit codes: 0 success, 1 failed invariant or
runtime error (structured JSON diagnostics on stderr), 2 usage errors.
"""
import argparse
import json
import sys
import time
from pathlib import Path

import numpy as np


def _say(*parts):
    print(" ".join(str(p) for p in parts), flush=True)


def _load_cfg(args):
    from .config import load_config
    return load_config(getattr(args, "config", None))


def _prompt_from_args(args):
    from .synth import parse_prompt, sample_scene
    if getattr(args, "prompt", None):
        return parse_prompt(args.prompt)
    if getattr(args, "prompt_file", None):
        text = Path(args.prompt_file).read_text().strip()
        try:
            doc = json.loads(text)
            from .synth import PromptDescriptor
            return PromptDescriptor(tuple(tuple(i) for i in doc["items"]), doc["light"])
        except json.JSONDecodeError:
            return parse_prompt(text)
    if getattr(args, "prompt_seed", None) is not None:
        return sample_scene(args.prompt_seed)[1]
    raise SystemExit("need --prompt, --prompt-file, or --prompt-seed")


def cmd_synth(args):
    from .synth import build_dataset
    cfg = _load_cfg(args)
    n = args.n or cfg["dataset"]["n"]
    seed = args.seed if args.seed is not None else cfg["dataset"]["seed"]
    out = args.out or "dataset"
    ds = build_dataset(n, seed, out, resolution=cfg["resolution"], progress=200)
    _say(f"wrote {len(ds.entries)} entries to {out}")
    return 0


def cmd_train(args):
    from . import pipeline
    cfg = _load_cfg(args)
    seed = args.seed if args.seed is not None else 0
    ds = pipeline.ensure_dataset(cfg, log=_say)
    bb = pipeline.ensure_backbone(cfg, ds, log=_say)
    if args.what == "backbone":
        _say(f"backbone ready (hash {bb.config_hash})")
    elif args.what == "stage1":
        b = pipeline.ensure_stage1(cfg, ds, bb, mode=cfg["stage1"]["baseline_mode"],
                                   seed=seed, log=_say)
        _say(f"stage1 ready (hash {b.config_hash})")
    else:
        b = pipeline.ensure_stage2(cfg, ds, bb, encoder=cfg["stage2"]["encoder"],
                                   seed=seed, log=_say)
        _say(f"stage2 ready (hash {b.config_hash})")
    return 0


def _load_bundle(args, cfg, tag):
    from .bundle import ModelBundle
    from .pipeline import artifact_root
    path = Path(args.bundle) if getattr(args, "bundle", None) else \
        artifact_root(cfg) / "bundles" / tag
    return ModelBundle.load(path)


def cmd_gen(args):
    from . import gbuffer as gb
    from .stage1 import generate_gbuffer
    cfg = _load_cfg(args)
    desc = _prompt_from_args(args)
    bundle = _load_bundle(args, cfg, "stage1")
    g, _ = generate_gbuffer(bundle, desc, args.seed or 0)
    gb.save(g, args.out)
    if args.previews:
        gb.write_previews(g, Path(args.out) / "previews")
    _say(f"gbuffer -> {args.out} (hash {g.content_hash()})")
    return 0


def cmd_render(args):
    from . import gbuffer as gb
    from .imageio import write_image
    from .stage2 import render_gbuffer
    cfg = _load_cfg(args)
    desc = _prompt_from_args(args)
    bundle = _load_bundle(args, cfg, "stage2")
    g = gb.load(args.gbuffer)
    img = render_gbuffer(bundle, g, desc, args.seed or 0)
    write_image(img, args.out)
    _say(f"image -> {args.out}.f32 / .png")
    return 0


def cmd_edit(args):
    from . import gbuffer as gb
    from .edit import apply_edits, ops_from_json
    cfg = _load_cfg(args)
    g = gb.load(args.session)
    ops = ops_from_json(Path(args.ops).read_text()) if args.ops else []
    edited = apply_edits(g, ops)
    out = args.out or args.session
    gb.save(edited, out)
    _say(f"applied {len(ops)} ops -> {out} (hash {edited.content_hash()})")
    if args.render:
        from .imageio import write_image
        from .stage2 import render_gbuffer
        desc = _prompt_from_args(args)
        bundle = _load_bundle(args, cfg, "stage2")
        img = render_gbuffer(bundle, edited, desc, args.seed or 0)
        write_image(img, Path(out) / "render")
        _say(f"render -> {out}/render.f32")
    return 0


def cmd_select(args):
    from . import gbuffer as gb
    from .edit import click_select
    cfg = _load_cfg(args)
    g = gb.load(args.gbuffer)
    region = click_select(g.albedo, (args.x, args.y),
                          edge_threshold=cfg["edit"]["edge_threshold"])
    Path(args.out).write_text(json.dumps(region.to_rle()))
    _say(f"region of {region.size} px -> {args.out}")
    return 0


def cmd_ablate(args):
    from . import ablate, pipeline
    cfg = _load_cfg(args)
    if args.budget == "smoke":
        cfg["dataset"]["n"] = min(cfg["dataset"]["n"], 160)
        cfg["backbone"].update({"vae_epochs": 2, "den_epochs": 3, "vae_entries": 60})
        for k, v in (("ablation_epochs", 2), ("ablation_entries", 64), ("eval_entries", 6),
                     ("eval_steps", 8)):
            cfg["stage1"][k] = v
            cfg["stage2"][k] = v
        cfg["stage1"]["ablation_frozen"] = 1
    seeds = tuple(int(s) for s in args.seeds.split(","))
    ds = pipeline.ensure_dataset(cfg, log=_say)
    bb = pipeline.ensure_backbone(cfg, ds, log=_say)
    fn = ablate.run_branch_ablation if args.which == "branch" else ablate.run_controlnet_ablation
    report = fn(cfg, ds, bb, seeds=seeds, log=_say)
    out = Path(args.out or (pipeline.artifact_root(cfg) / "reports" /
                            f"{report.kind}.json"))
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    _say(ablate.summarize_report(report))
    _say(f"report -> {out}")
    return 0


def cmd_eval(args):
    from .metrics import MetricReport, mse, psnr, ssim
    if args.eval_what == "metrics":
        from .imageio import read_image
        pred, ref = read_image(args.pred), read_image(args.ref)
        out = {"mse": mse(pred, ref), "psnr": psnr(pred, ref), "ssim": ssim(pred, ref)}
        _say(json.dumps(out, indent=1))
    elif args.eval_what == "gbuffer":
        from . import gbuffer as gb
        from .metrics import gbuffer_channel_psnr, gbuffer_channel_ssim
        gen, gt = gb.load(args.pred), gb.load(args.ref)
        out = {"psnr": gbuffer_channel_psnr(gen, gt), "ssim": gbuffer_channel_ssim(gen, gt)}
        _say(json.dumps(out, indent=1))
    else:  # report
        rep = MetricReport.from_json(Path(args.file).read_text())
        rep.verify_aggregates()
        from .ablate import summarize_report
        _say(summarize_report(rep))
        _say("aggregates verified against per-sample rows")
    return 0


def cmd_serve(args):
    import uvicorn
    from .bundle import ModelBundle
    from .errors import BundleError
    from .pipeline import artifact_root
    from .service import create_app
    cfg = _load_cfg(args)

    def try_load(tag, path_arg):
        path = Path(path_arg) if path_arg else artifact_root(cfg) / "bundles" / tag
        try:
            return ModelBundle.load(path)
        except BundleError:
            _say(f"note: no {tag} bundle at {path} (endpoints needing it return 503)")
            return None

    app = create_app(cfg, stage1_bundle=try_load("stage1", args.stage1),
                     stage2_bundle=try_load("stage2", args.stage2))
    host = args.host or cfg["service"]["host"]
    port = args.port or cfg["service"]["port"]
    uvicorn.run(app, host=host, port=port, log_level="warning")
    return 0


def cmd_bench(args):
    from .accel import get_backends
    from .render.brdf import MaterialParams
    from .render.raytrace import render
    from .render.scene import Box, Camera, Light, Plane, Scene, Sphere
    from . import accel
    backends = get_backends()
    rng = np.random.default_rng(0)
    x = rng.standard_normal((16, 64, 16, 16)).astype(np.float32)
    scene = Scene(
        (Plane((0, 0, 0), (0, 1, 0), MaterialParams((0.6, 0.6, 0.6), 0.8, 0.0)),
         Sphere((0, 0.6, 0), 0.6, MaterialParams((0.8, 0.2, 0.2), 0.4, 0.0)),
         Box((1, 0.35, -0.4), (0.35, 0.35, 0.35), MaterialParams((0.2, 0.3, 0.9), 0.2, 1.0))),
        (Light.directional((-1, 1.2, 0.3), (3, 3, 3)),
         Light.point((1.5, 2.5, 1.0), (6, 5, 4))),
        Camera((0, 2.2, 4.0), (0, 0.5, 0)))
    print(f"{'workload':<34}{'backend':<9}{'ms':>9}")
    results = {}
    for name, mod in backends.items():
        cols = mod.im2col(x, 3, 1, 1)
        for label, fn in (("im2col 3x3 (16,64,16,16)", lambda: mod.im2col(x, 3, 1, 1)),
                          ("col2im 3x3 (16,64,16,16)", lambda: mod.col2im(cols, x.shape, 3, 1, 1))):
            fn()
            t0 = time.time()
            for _ in range(30):
                fn()
            dt = (time.time() - t0) / 30 * 1e3
            results[(label, name)] = dt
            print(f"{label:<34}{name:<9}{dt:>9.3f}")
        saved = (accel.trace_rays, accel.shade_hits)
        accel.trace_rays, accel.shade_hits = mod.trace_rays, mod.shade_hits
        try:
            render(scene, 96, 96)
            t0 = time.time()
            for _ in range(5):
                render(scene, 96, 96)
            dt = (time.time() - t0) / 5 * 1e3
            results[("render 96x96 (3 prims, shadows)", name)] = dt
            print(f"{'render 96x96 (3 prims, shadows)':<34}{name:<9}{dt:>9.3f}")
        finally:
            accel.trace_rays, accel.shade_hits = saved
    return 0


def cmd_config(args):
    from .config import dump_default_config
    _say(dump_default_config())
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="gbx",
                                description="prompt -> G-buffer -> image pipeline")
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, seed_default=None):
        sp.add_argument("--config", help="YAML config overlay")
        sp.add_argument("--seed", type=int, default=seed_default)

    sp = sub.add_parser("synth", help="build the synthetic dataset")
    common(sp)
    sp.add_argument("--n", type=int)
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_synth)

    sp = sub.add_parser("train", help="train backbone / stage1 / stage2")
    sp.add_argument("what", choices=["backbone", "stage1", "stage2"])
    common(sp)
    sp.set_defaults(fn=cmd_train)

    sp = sub.add_parser("gen", help="prompt -> G-buffer")
    common(sp, 0)
    sp.add_argument("--prompt")
    sp.add_argument("--prompt-file")
    sp.add_argument("--prompt-seed", type=int)
    sp.add_argument("--bundle")
    sp.add_argument("--out", required=True)
    sp.add_argument("--previews", action="store_true")
    sp.set_defaults(fn=cmd_gen)

    sp = sub.add_parser("render", help="G-buffer -> image")
    common(sp, 0)
    sp.add_argument("--gbuffer", required=True)
    sp.add_argument("--prompt")
    sp.add_argument("--prompt-file")
    sp.add_argument("--prompt-seed", type=int)
    sp.add_argument("--bundle")
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_render)

    sp = sub.add_parser("edit", help="apply an edit-op file to a G-buffer session")
    common(sp, 0)
    sp.add_argument("--session", required=True, help="G-buffer container directory")
    sp.add_argument("--ops", help="JSON edit op list")
    sp.add_argument("--out")
    sp.add_argument("--render", action="store_true")
    sp.add_argument("--prompt")
    sp.add_argument("--prompt-file")
    sp.add_argument("--prompt-seed", type=int)
    sp.add_argument("--bundle")
    sp.set_defaults(fn=cmd_edit)

    sp = sub.add_parser("select", help="one-click region selection")
    common(sp)
    sp.add_argument("--gbuffer", required=True)
    sp.add_argument("--x", type=int, required=True)
    sp.add_argument("--y", type=int, required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(fn=cmd_select)

    sp = sub.add_parser("ablate", help="run an ablation study")
    sp.add_argument("which", choices=["branch", "controlnet"])
    common(sp)
    sp.add_argument("--budget", choices=["smoke", "desk"], default="desk")
    sp.add_argument("--seeds", default="0,1,2")
    sp.add_argument("--out")
    sp.set_defaults(fn=cmd_ablate)

    sp = sub.add_parser("eval", help="metrics and report tools")
    ev = sp.add_subparsers(dest="eval_what", required=True)
    m = ev.add_parser("metrics")
    m.add_argument("--pred", required=True)
    m.add_argument("--ref", required=True)
    common(m)
    m.set_defaults(fn=cmd_eval)
    gbp = ev.add_parser("gbuffer")
    gbp.add_argument("--pred", required=True)
    gbp.add_argument("--ref", required=True)
    common(gbp)
    gbp.set_defaults(fn=cmd_eval)
    rp = ev.add_parser("report")
    rp.add_argument("--file", required=True)
    common(rp)
    rp.set_defaults(fn=cmd_eval)

    sp = sub.add_parser("serve", help="start the HTTP session service")
    common(sp)
    sp.add_argument("--host")
    sp.add_argument("--port", type=int)
    sp.add_argument("--stage1")
    sp.add_argument("--stage2")
    sp.set_defaults(fn=cmd_serve)

    sp = sub.add_parser("bench", help="compare numba vs numpy kernel backends")
    common(sp)
    sp.set_defaults(fn=cmd_bench)

    sp = sub.add_parser("config", help="print the default config document")
    common(sp)
    sp.set_defaults(fn=cmd_config)
    return p


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except SystemExit:
        raise
    except Exception as e:
        diag = {"error": type(e).__name__, "message": str(e)}
        print(json.dumps(diag), file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
