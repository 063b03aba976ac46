"""Stage 1: prompt -> G-buffer generation.

A control branch (copy of the pack denoiser's encoder, zero-init output
projections) consumes the image latent directly and steers a denoiser over
the 20-channel G-buffer group latent. The decode_encode baseline routes the
control signal through the VAE pixel round trip first; everything else is
identical, which is what makes the ablation fair.
"""
import math

import numpy as np

from .backbone import (GROUP_LATENT, IMAGE_LATENT, Denoiser, LatentTensor,
                       NoiseSchedule, backbone_from_bundle, ddim_sample,
                       make_eps_fn)
from .bundle import ModelBundle
from .errors import BundleError, ValidationError
from .gbuffer import GROUP_NAMES, NormalizationMeta, pack_groups, unpack_groups
from .nn import tensor as T
from .nn.modules import Adam, Conv2d, Module, linear_decay
from .nn.tensor import Tensor, no_grad

N_GROUPS = len(GROUP_NAMES)
PACK_CHANNELS = 4 * N_GROUPS  # five 4-channel group latents, denoised jointly

LATENT_MODE = "latent"
DECODE_ENCODE_MODE = "decode_encode"


ADAPTER_PREFIXES = ("conv_in.", "conv_out.", "ctx_pool.")


def pack_core_state(pack_den):
    """Backbone-derived parameters of the pack denoiser, excluding the
    channel adapters (conv_in/conv_out) and the prompt pool head. This is
    the group whose phase-A freeze is hash-verified."""
    return {n: p.data.copy() for n, p in pack_den.named_parameters()
            if not n.startswith(ADAPTER_PREFIXES)}


def pack_param_split(pack_den):
    """(adapter tensors, core tensors) of the pack denoiser."""
    adapters, core = [], []
    for n, p in pack_den.named_parameters():
        (adapters if n.startswith(ADAPTER_PREFIXES) else core).append(p)
    return adapters, core


def adapt_denoiser_to_pack(backbone_den, cfg, seed):
    """Deterministically widen the image denoiser to the 20-channel pack:
    conv_in weights tiled over input channels (scaled 1/5), conv_out tiled
    over output channels. Everything else is copied bit-exact."""
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 41]))
    pack = Denoiser(rng, c_in=PACK_CHANNELS, c_out=PACK_CHANNELS,
                    width=cfg["width"], prompt_dim=cfg["prompt_dim"], heads=cfg["heads"])
    src = backbone_den.state_dict()
    dst = pack.state_dict()
    for name in dst:
        if name == "conv_in.w":
            dst[name] = np.tile(src[name], (1, N_GROUPS, 1, 1)) / N_GROUPS
        elif name == "conv_out.w":
            dst[name] = np.tile(src[name], (N_GROUPS, 1, 1, 1))
        elif name == "conv_out.b":
            dst[name] = np.tile(src[name], N_GROUPS)
        else:
            dst[name] = src[name]
    pack.load_state_dict(dst)
    return pack


class ControlBranch(Module):
    """Copy of the denoiser encoder+mid with zero-init residual projections.

    hint_channels > 0 adds a hint encoder (for raw latent control signals);
    hint_channels == 0 expects a width-sized feature grid added directly
    (stage-2 feeds branch-encoder features).
    """

    def __init__(self, rng, c_in, width, prompt_dim, heads, hint_channels=4,
                 dtype=np.float32):
        w, w2 = width, 2 * width
        from .nn.modules import CrossAttnBlock, GroupNorm, ResBlock
        tdim = 2 * width
        self.hint_channels = hint_channels
        self.conv_in = Conv2d(rng, c_in, w, 3, dtype=dtype)
        self.rb_d0 = ResBlock(rng, w, w, tdim, dtype=dtype)
        self.down = Conv2d(rng, w, w2, 3, stride=2, dtype=dtype)
        self.rb_d1 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        self.mid_rb1 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        self.mid_attn = CrossAttnBlock(rng, w2, prompt_dim, heads, dtype=dtype)
        self.mid_rb2 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        if hint_channels:
            self.hint_a = Conv2d(rng, hint_channels, w, 3, dtype=dtype)
            self.hint_b = Conv2d(rng, w, w, 3, zero=True, dtype=dtype)
        self.zc0 = Conv2d(rng, w, w, 1, pad=0, zero=True, dtype=dtype)
        self.zc1 = Conv2d(rng, w2, w2, 1, pad=0, zero=True, dtype=dtype)
        self.zcm = Conv2d(rng, w2, w2, 1, pad=0, zero=True, dtype=dtype)

    ENCODER_PARAMS = ("conv_in", "rb_d0", "down", "rb_d1",
                      "mid_rb1", "mid_attn", "mid_rb2")

    def copy_encoder_from(self, den):
        src = den.state_dict()
        own = dict(self.named_parameters())
        for name, p in own.items():
            if name.split(".")[0] in self.ENCODER_PARAMS:
                p.data = np.array(src[name], dtype=p.data.dtype)

    def __call__(self, z_t, temb, ctx, hint):
        h = self.conv_in(z_t)
        if self.hint_channels:
            h = T.add(h, self.hint_b(T.silu(self.hint_a(hint))))
        else:
            h = T.add(h, hint)
        s0 = self.rb_d0(h, temb)
        s1 = self.rb_d1(self.down(s0), temb)
        m = self.mid_rb1(s1, temb)
        B, C, hh, ww = m.shape
        toks = T.transpose(T.reshape(m, (B, C, hh * ww)), (0, 2, 1))
        toks = self.mid_attn(toks, ctx)
        m = T.reshape(T.transpose(toks, (0, 2, 1)), (B, C, hh, ww))
        m = self.mid_rb2(m, temb)
        return self.zc0(s0), self.zc1(s1), self.zcm(m)


def build_control_branch(cfg, seed):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 42]))
    return ControlBranch(rng, c_in=PACK_CHANNELS, width=cfg["width"],
                         prompt_dim=cfg["prompt_dim"], heads=cfg["heads"],
                         hint_channels=cfg["z_channels"])


def _require_tag(lat, tag):
    if not isinstance(lat, LatentTensor):
        raise ValidationError(f"control signal must be a LatentTensor, got {type(lat).__name__}")
    if lat.space_tag != tag:
        raise ValidationError(f"control signal space_tag {lat.space_tag!r}, expected {tag!r}")


def control_forward_latent(control, pack_den, z_t, t, ctx_ids, z_c, embedder):
    """Residual features for the latent-mode control path (z_c used as-is)."""
    _require_tag(z_c, IMAGE_LATENT)
    zb = z_t if z_t.ndim == 4 else z_t[None]
    ctx = embedder(np.broadcast_to(ctx_ids, (zb.shape[0], np.asarray(ctx_ids).shape[-1])))
    cond = pack_den.cond_embed(np.full(zb.shape[0], t), ctx)
    hint = Tensor(np.broadcast_to(z_c.data[None], (zb.shape[0],) + z_c.data.shape).copy())
    return control(Tensor(zb), cond, ctx, hint)


def decode_encode_cycle(vae, z_img_normed, latent_scale):
    """The standard-ControlNet pixel round trip: decode to RGB, re-encode."""
    img = vae.decode(z_img_normed * latent_scale)
    return (vae.encode(img) / latent_scale).astype(np.float32)


def control_forward_standard(control, pack_den, z_t, t, ctx_ids, z_c, embedder,
                             vae, latent_scale):
    """Baseline path: control signal goes through the decode-encode cycle."""
    _require_tag(z_c, IMAGE_LATENT)
    z_cycled = decode_encode_cycle(vae, z_c.data, latent_scale)
    z2 = LatentTensor(z_cycled, IMAGE_LATENT, z_c.scale)
    return control_forward_latent(control, pack_den, z_t, t, ctx_ids, z2, embedder)


# ------------------------------------------------------------------- training

def encode_pack_latents(vae, dataset, entries, latent_scale, batch=32):
    """Per entry: (20,h,w) pack latent, (4,h,w) image latent, token ids."""
    packs, zimgs, ids = [], [], []
    for e in entries:
        desc, g, _, img = dataset.load_entry(e)
        planes = np.asarray(pack_groups(g))               # (5,3,H,W)
        z = vae.encode(planes) / latent_scale             # (5,4,h,w)
        packs.append(z.reshape(-1, z.shape[2], z.shape[3]))
        zimgs.append(vae.encode(img) / latent_scale)
        ids.append(desc.token_ids())
    return (np.ascontiguousarray(np.stack(packs), dtype=np.float32),
            np.ascontiguousarray(np.stack(zimgs), dtype=np.float32),
            np.stack(ids))


def train_stage1(backbone_bundle, dataset, cfg, seed, mode=LATENT_MODE,
                 epochs_total=None, epochs_frozen=None, entries_cap=None, log=None):
    """Two-phase stage-1 training. Phase A: only the control branch trains
    (backbone-derived pack denoiser frozen, hash-verified). Phase B: the pack
    denoiser unfreezes. Returns a bundle with before/after freeze hashes."""
    say = log or (lambda *_: None)
    if mode not in (LATENT_MODE, DECODE_ENCODE_MODE):
        raise ValidationError(f"unknown stage-1 mode {mode!r}")
    s1cfg = cfg["stage1"]
    epochs_total = epochs_total or s1cfg["epochs_total"]
    epochs_frozen = s1cfg["epochs_frozen"] if epochs_frozen is None else epochs_frozen
    if not epochs_frozen < epochs_total:
        raise ValidationError("epochs_frozen must be < epochs_total")
    if not backbone_bundle.meta.get("trained"):
        raise BundleError("stage-1 needs a trained backbone bundle")

    vae, emb, den, schedule = backbone_from_bundle(backbone_bundle)
    latent_scale = backbone_bundle.meta["latent_scale"]
    bcfg = backbone_bundle.config["backbone"]
    pack_den = adapt_denoiser_to_pack(den, bcfg, seed)
    control = build_control_branch(bcfg, seed)
    control.copy_encoder_from(pack_den)

    train = dataset.split("train")
    if entries_cap:
        train = train[:entries_cap]
    say(f"stage1[{mode}]: encoding {len(train)} entries")
    packs, zimgs, ids = encode_pack_latents(vae, dataset, train, latent_scale)
    if mode == DECODE_ENCODE_MODE:
        cycled = [decode_encode_cycle(vae, zimgs[i:i + 32], latent_scale)
                  for i in range(0, zimgs.shape[0], 32)]
        ctrl_sig = np.concatenate(cycled)
    else:
        ctrl_sig = zimgs

    def _freeze_state():
        probe = ModelBundle(config={})
        probe.set_group("pack_core", pack_core_state(pack_den))
        probe.set_group("vae", vae.state_dict())
        probe.set_group("embedder", emb.state_dict())
        probe.set_group("denoiser", den.state_dict())
        return probe.hashes()

    hashes_before = _freeze_state()

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 43]))
    batch = s1cfg["batch"]
    lr0 = s1cfg["lr"]
    n = packs.shape[0]
    steps_per_epoch = math.ceil(n / batch)
    total_steps = epochs_total * steps_per_epoch
    # phase A: control branch + channel adapters; the backbone-derived core
    # stays frozen (the tiled conv_out alone cannot produce group-specific
    # predictions, so the adapters must train from the start)
    adapters, core = pack_param_split(pack_den)
    opt = Adam(control.parameters() + adapters, lr=lr0)
    history = []
    step = 0
    hashes_after_phase_a = None
    for epoch in range(epochs_total):
        if epoch == epochs_frozen:
            hashes_after_phase_a = _freeze_state()
            opt = Adam(control.parameters() + adapters + core, lr=lr0)
            say(f"stage1[{mode}]: unfreezing pack denoiser core at epoch {epoch}")
        losses = []
        for idx in _batches(n, batch, rng):
            t = rng.integers(0, schedule.T, idx.size)
            eps = rng.standard_normal(packs[idx].shape).astype(np.float32)
            zt = schedule.add_noise(packs[idx], t, eps)
            ctx = emb(ids[idx])
            cond = pack_den.cond_embed(t, ctx)
            hint = Tensor(ctrl_sig[idx])
            residuals = control(Tensor(zt), cond, ctx, hint)
            pred = pack_den(Tensor(zt), cond, ctx, control=residuals)
            loss = T.mse_loss(pred, eps)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise BundleError(f"NaN loss in stage-1 epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=linear_decay(step, total_steps, lr0))
            losses.append(lv)
            step += 1
        history.append(float(np.mean(losses)))
        say(f"  stage1[{mode}] epoch {epoch}: loss {history[-1]:.5f}")
    if hashes_after_phase_a is None:  # frozen boundary at the very end
        hashes_after_phase_a = _freeze_state()

    bundle = ModelBundle(config=dict(backbone_bundle.config))
    bundle.config["stage1"] = {"mode": mode, "epochs_total": epochs_total,
                               "epochs_frozen": epochs_frozen, "lr": lr0,
                               "batch": batch, "seed": int(seed),
                               "entries": len(train)}
    bundle.set_group("pack_denoiser", pack_den.state_dict())
    bundle.set_group("vae", vae.state_dict(), frozen=True)
    bundle.set_group("embedder", emb.state_dict(), frozen=True)
    bundle.set_group("denoiser", den.state_dict(), frozen=True)
    bundle.set_group("control", control.state_dict())
    bundle.meta.update({
        "latent_scale": latent_scale,
        "trained": True,
        "stage1_mode": mode,
        "history": {"stage1": history},
        "freeze_hashes_before": hashes_before,
        "freeze_hashes_after_phase_a": hashes_after_phase_a,
        "backbone_hash": backbone_bundle.config_hash,
    })
    return bundle


def _batches(n, batch, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


# ----------------------------------------------------------------- generation

def stage1_models(bundle):
    if "control" not in bundle.groups:
        raise BundleError("bundle has no trained stage-1 control branch")
    vae, emb, den, schedule = backbone_from_bundle(bundle)
    bcfg = bundle.config["backbone"]
    seed = bundle.config["stage1"]["seed"]
    pack_den = adapt_denoiser_to_pack(den, bcfg, seed)
    pack_den.load_state_dict(bundle.groups["pack_denoiser"])
    control = build_control_branch(bcfg, seed)
    control.load_state_dict(bundle.groups["control"])
    return vae, emb, den, pack_den, control, schedule


def sample_pack_conditioned(bundle, desc, z_img, seed, steps=None, depth_max=None,
                            models=None):
    """G-buffer group latents conditioned on a given image latent.

    The bundle's trained mode decides whether the control signal is z_img
    itself (latent mode) or its decode-encode round trip (baseline).
    """
    _require_tag(z_img, IMAGE_LATENT)
    vae, emb, den, pack_den, control, schedule = models or stage1_models(bundle)
    mode = bundle.meta.get("stage1_mode", LATENT_MODE)
    latent_scale = bundle.meta["latent_scale"]
    steps = steps or bundle.config.get("sample_steps", 20)
    h = z_img.data.shape[-1]
    ids = desc.token_ids()
    z_ctl = z_img.data if mode == LATENT_MODE else \
        decode_encode_cycle(vae, z_img.data, latent_scale)
    hint_arr = np.ascontiguousarray(z_ctl[None], dtype=np.float32)

    def control_fn(xt, temb, ctx):
        hint = Tensor(np.broadcast_to(hint_arr, (xt.shape[0],) + z_ctl.shape).copy())
        return control(xt, temb, ctx, hint)

    pack = ddim_sample(make_eps_fn(pack_den, emb, ids, control_fn=control_fn),
                       (PACK_CHANNELS, h, h), schedule, steps, seed)
    planes = vae.decode(pack.reshape(N_GROUPS, 4, h, h) * latent_scale)
    meta = NormalizationMeta(shading_scale=1.0,
                             depth_max=depth_max or NormalizationMeta().depth_max)
    return unpack_groups(planes, meta=meta)


def generate_gbuffer(bundle, desc, seed, steps=None, depth_max=None, models=None):
    """Prompt + seed -> (GBuffer, image latent). Deterministic.

    The frozen backbone samples the image latent; the controlled pack
    denoiser samples the G-buffer group latents conditioned on it.
    """
    models = models or stage1_models(bundle)
    vae, emb, den, pack_den, control, schedule = models
    latent_scale = bundle.meta["latent_scale"]
    steps = steps or bundle.config.get("sample_steps", 20)
    res = bundle.config["resolution"]
    h = res // 8
    ids = desc.token_ids()
    root = np.random.SeedSequence([int(seed), 977])
    rng_img, rng_pack = [np.random.default_rng(s) for s in root.spawn(2)]

    z_img = ddim_sample(make_eps_fn(den, emb, ids), (4, h, h), schedule, steps, rng_img)
    lat = LatentTensor(z_img, IMAGE_LATENT, latent_scale)
    g = sample_pack_conditioned(bundle, desc, lat, rng_pack, steps=steps,
                                depth_max=depth_max, models=models)
    return g, lat
