"""Toy latent diffusion stack: deterministic conv autoencoder (8x spatial
reduction to 4-channel latents), closed-vocabulary prompt embedder, a small
UNet denoiser with cross-attention prompt conditioning and ControlNet-style
injection points, DDIM sampling, and the backbone pretraining loop.
"""
import math
from dataclasses import dataclass, field

import numpy as np

from .bundle import ModelBundle
from .errors import BundleError, ValidationError
from .nn import tensor as T
from .nn.modules import (Adam, Conv2d, CrossAttnBlock, Embedding, GroupNorm,
                         Linear, Module, ResBlock, linear_decay,
                         timestep_embedding)
from .nn.tensor import Tensor, no_grad
from .synth import SEQ_LEN, VOCAB

IMAGE_LATENT = "image_latent"
GROUP_LATENT = "gbuffer_group_latent"


@dataclass(frozen=True)
class LatentTensor:
    data: np.ndarray          # (C, h, w) float32
    space_tag: str            # IMAGE_LATENT | GROUP_LATENT
    scale: float              # raw-vae-latent multiplier (data * scale = raw)

    def __post_init__(self):
        if self.space_tag not in (IMAGE_LATENT, GROUP_LATENT):
            raise ValidationError(f"unknown latent space tag {self.space_tag!r}")
        if not np.all(np.isfinite(self.data)):
            raise ValidationError("latent contains non-finite values")


@dataclass(frozen=True)
class NoiseSchedule:
    T: int = 1000
    beta_start: float = 1e-4
    beta_end: float = 0.02
    betas: np.ndarray = field(init=False, repr=False)
    alpha_bar: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        betas = np.linspace(self.beta_start, self.beta_end, self.T, dtype=np.float64)
        if not (np.all(betas > 0) and np.all(betas < 1) and np.all(np.diff(betas) > 0)):
            raise ValidationError("betas must be strictly increasing in (0,1)")
        object.__setattr__(self, "betas", betas)
        object.__setattr__(self, "alpha_bar", np.cumprod(1.0 - betas))

    def ddim_timesteps(self, steps):
        if not 1 <= steps <= self.T:
            raise ValidationError(f"steps must be in [1, {self.T}]")
        ts = np.unique(np.round(np.linspace(0, self.T - 1, steps)).astype(np.int64))[::-1]
        return ts

    def add_noise(self, x0, t, eps):
        ab = self.alpha_bar[t].astype(x0.dtype)
        shape = (-1,) + (1,) * (x0.ndim - 1)
        return (np.sqrt(ab).reshape(shape) * x0
                + np.sqrt(1.0 - ab).reshape(shape) * eps)


# --------------------------------------------------------------------- models

class VAE(Module):
    """Deterministic autoencoder, 8x downsampling, 4-channel latent."""

    def __init__(self, rng, z_channels=4, widths=(48, 96, 128), dtype=np.float32):
        w1, w2, w3 = widths
        self.e1 = Conv2d(rng, 3, w1, 3, stride=2, dtype=dtype)
        self.gn1 = GroupNorm(w1, dtype=dtype)
        self.e2 = Conv2d(rng, w1, w2, 3, stride=2, dtype=dtype)
        self.gn2 = GroupNorm(w2, dtype=dtype)
        self.e3 = Conv2d(rng, w2, w3, 3, stride=2, dtype=dtype)
        self.gn3 = GroupNorm(w3, dtype=dtype)
        self.e4 = Conv2d(rng, w3, z_channels, 3, dtype=dtype)
        self.d0 = Conv2d(rng, z_channels, w3, 3, dtype=dtype)
        self.dgn0 = GroupNorm(w3, dtype=dtype)
        self.dmid = Conv2d(rng, w3, w3, 3, dtype=dtype)
        self.dgnm = GroupNorm(w3, dtype=dtype)
        self.d1 = Conv2d(rng, w3, w2, 3, dtype=dtype)
        self.dgn1 = GroupNorm(w2, dtype=dtype)
        self.d2 = Conv2d(rng, w2, 64, 3, dtype=dtype)
        self.dgn2 = GroupNorm(64, dtype=dtype)
        # subpixel head: predict 2x2 subpixels at 32x32 so no conv ever runs
        # at full resolution (im2col there dominates the step otherwise)
        self.d3 = Conv2d(rng, 64, 12, 3, dtype=dtype)
        self.out = Conv2d(rng, 3, 3, 3, dtype=dtype)

    def encode_t(self, x):
        """x: Tensor (B,3,H,W) in [0,1] -> raw latent Tensor (B,4,H/8,W/8)."""
        h = T.add(T.scale(x, 2.0), Tensor(np.float32(-1.0)))
        h = T.silu(self.gn1(self.e1(h)))
        h = T.silu(self.gn2(self.e2(h)))
        h = T.silu(self.gn3(self.e3(h)))
        return self.e4(h)

    def decode_t(self, z):
        """Raw latent Tensor -> pre-clip image Tensor in [-1,1] space."""
        h = T.silu(self.dgn0(self.d0(z)))
        h = T.silu(self.dgnm(self.dmid(h)))
        h = T.silu(self.dgn1(self.d1(T.upsample_nearest2x(h))))
        h = T.silu(self.dgn2(self.d2(T.upsample_nearest2x(h))))
        h = T.pixel_shuffle2x(self.d3(h))
        return self.out(h)

    def encode(self, x):
        """Numpy convenience: (B,3,H,W) or (3,H,W) -> raw latent array."""
        single = x.ndim == 3
        xb = x[None] if single else x
        with no_grad():
            z = self.encode_t(Tensor(np.ascontiguousarray(xb, dtype=np.float32))).data
        return z[0] if single else z

    def decode(self, z):
        """Raw latent -> image in [0,1] (clipped)."""
        single = z.ndim == 3
        zb = z[None] if single else z
        with no_grad():
            y = self.decode_t(Tensor(np.ascontiguousarray(zb, dtype=np.float32))).data
        img = np.clip((y + 1.0) / 2.0, 0.0, 1.0)
        return img[0] if single else img


class PromptEmbedder(Module):
    def __init__(self, rng, dim=64, dtype=np.float32):
        self.tok = Embedding(rng, len(VOCAB), dim, dtype=dtype)
        self.pos = Tensor((rng.standard_normal((SEQ_LEN, dim)) * 0.02).astype(dtype),
                          requires_grad=True)

    def __call__(self, ids):
        ids = np.asarray(ids)
        if ids.ndim == 1:
            ids = ids[None]
        if ids.shape[1] != SEQ_LEN:
            raise ValidationError(f"token sequence must have length {SEQ_LEN}")
        if ids.min() < 0 or ids.max() >= len(VOCAB):
            raise ValidationError("token id outside vocabulary")
        return T.add(self.tok(ids), self.pos)


class Denoiser(Module):
    """Two-level UNet on latents with prompt cross-attention in the middle.

    Control residuals (ControlNet-style) are added to the two skip features
    and the mid output: `control = (r_skip0, r_skip1, r_mid)`.
    """

    def __init__(self, rng, c_in=4, c_out=4, width=96, prompt_dim=64, heads=4,
                 dtype=np.float32):
        self.c_in, self.c_out, self.width = c_in, c_out, width
        w, w2 = width, 2 * width
        tdim = 2 * width
        self.tdim = tdim
        self.t1 = Linear(rng, 128, tdim, dtype=dtype)
        self.t2 = Linear(rng, tdim, tdim, dtype=dtype)
        # pooled prompt adds global conditioning to every ResBlock (the mid
        # cross-attention alone is too weak a path for prompt fidelity)
        self.ctx_pool = Linear(rng, prompt_dim, tdim, dtype=dtype)
        self.conv_in = Conv2d(rng, c_in, w, 3, dtype=dtype)
        self.rb_d0 = ResBlock(rng, w, w, tdim, dtype=dtype)
        self.down = Conv2d(rng, w, w2, 3, stride=2, dtype=dtype)
        self.rb_d1 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        self.mid_rb1 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        self.mid_attn = CrossAttnBlock(rng, w2, prompt_dim, heads, dtype=dtype)
        self.mid_rb2 = ResBlock(rng, w2, w2, tdim, dtype=dtype)
        self.rb_u1 = ResBlock(rng, 2 * w2, w2, tdim, dtype=dtype)
        self.up = Conv2d(rng, w2, w, 3, dtype=dtype)
        self.rb_u0 = ResBlock(rng, 2 * w, w, tdim, dtype=dtype)
        self.gn_out = GroupNorm(w, dtype=dtype)
        self.conv_out = Conv2d(rng, w, c_out, 3, zero=True, dtype=dtype)

    def time_embed(self, t):
        emb = timestep_embedding(np.atleast_1d(t), 128,
                                 dtype=self.t1.w.data.dtype)
        return self.t2(T.silu(self.t1(Tensor(emb))))

    def cond_embed(self, t, ctx):
        """Combined per-sample conditioning vector: timestep + pooled prompt."""
        pooled = T.mean(ctx, axis=1)
        return T.add(self.time_embed(t), self.ctx_pool(pooled))

    def encoder_features(self, z_t, temb, ctx):
        h = self.conv_in(z_t)
        return self._after_conv_in(h, temb, ctx)

    def _after_conv_in(self, h, temb, ctx):
        s0 = self.rb_d0(h, temb)
        s1 = self.rb_d1(self.down(s0), temb)
        m = self.mid_rb1(s1, temb)
        B, C, hh, ww = m.shape
        toks = T.transpose(T.reshape(m, (B, C, hh * ww)), (0, 2, 1))
        toks = self.mid_attn(toks, ctx)
        m = T.reshape(T.transpose(toks, (0, 2, 1)), (B, C, hh, ww))
        m = self.mid_rb2(m, temb)
        return s0, s1, m

    def __call__(self, z_t, temb, ctx, control=None):
        if z_t.shape[1] != self.c_in:
            raise ValidationError(f"denoiser expects {self.c_in} channels, got {z_t.shape[1]}")
        s0, s1, m = self.encoder_features(z_t, temb, ctx)
        if control is not None:
            r0, r1, rm = control
            s0 = T.add(s0, r0)
            s1 = T.add(s1, r1)
            m = T.add(m, rm)
        h = self.rb_u1(T.concat([m, s1], 1), temb)
        h = self.up(T.upsample_nearest2x(h))
        h = self.rb_u0(T.concat([h, s0], 1), temb)
        return self.conv_out(T.silu(self.gn_out(h)))


# ------------------------------------------------------------------- sampling

def ddim_sample(eps_fn, shape, schedule, steps, seed, dtype=np.float32):
    """Deterministic DDIM (eta=0). eps_fn(x, t) predicts noise; seed may be an
    int or a Generator. Identical inputs give bit-identical outputs."""
    rng = seed if isinstance(seed, np.random.Generator) else \
        np.random.default_rng(np.random.SeedSequence(int(seed)))
    x = rng.standard_normal(shape).astype(dtype)
    ts = schedule.ddim_timesteps(steps)
    for i, t in enumerate(ts):
        ab_t = schedule.alpha_bar[t]
        ab_n = schedule.alpha_bar[ts[i + 1]] if i + 1 < len(ts) else 1.0
        eps = eps_fn(x, int(t))
        x0 = (x - np.float32(math.sqrt(1.0 - ab_t)) * eps) / np.float32(math.sqrt(ab_t))
        x = np.float32(math.sqrt(ab_n)) * x0 + np.float32(math.sqrt(1.0 - ab_n)) * eps
    return x


def make_eps_fn(denoiser, embedder, ids, control_fn=None):
    """eps_fn closure for ddim_sample. control_fn(x, cond, ctx) -> residuals."""
    ids = np.asarray(ids)
    def eps_fn(x, t):
        with no_grad():
            xb = x if x.ndim == 4 else x[None]
            ctx = embedder(np.broadcast_to(ids, (xb.shape[0],) + ids.shape[-1:]))
            cond = denoiser.cond_embed(np.full(xb.shape[0], t), ctx)
            xt = Tensor(xb)
            control = control_fn(xt, cond, ctx) if control_fn is not None else None
            out = denoiser(xt, cond, ctx, control=control).data
        return out if x.ndim == 4 else out[0]
    return eps_fn


# ------------------------------------------------------------------- training

def build_backbone_models(cfg, seed):
    root = np.random.SeedSequence(int(seed))
    k_vae, k_emb, k_den = [np.random.default_rng(s) for s in root.spawn(3)]
    vae = VAE(k_vae, z_channels=cfg["z_channels"], widths=tuple(cfg["vae_widths"]))
    emb = PromptEmbedder(k_emb, dim=cfg["prompt_dim"])
    den = Denoiser(k_den, c_in=cfg["z_channels"], c_out=cfg["z_channels"],
                   width=cfg["width"], prompt_dim=cfg["prompt_dim"], heads=cfg["heads"])
    return vae, emb, den


def backbone_from_bundle(bundle):
    cfg = bundle.config["backbone"]
    vae, emb, den = build_backbone_models(cfg, bundle.config.get("seed", 0))
    vae.load_state_dict(bundle.groups["vae"])
    emb.load_state_dict(bundle.groups["embedder"])
    den.load_state_dict(bundle.groups["denoiser"])
    schedule = NoiseSchedule(**bundle.config["schedule"])
    return vae, emb, den, schedule


def _check_finite(loss, where):
    if not np.isfinite(loss):
        raise BundleError(f"NaN/inf loss during {where}; aborting (lr too high or bad data)")


def _batches(n, batch, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


def gather_planes(dataset, entries):
    """Images + the five G-buffer group planes for each entry -> (M,3,H,W)."""
    from .gbuffer import pack_groups
    planes = []
    for e in entries:
        _, g, _, img = dataset.load_entry(e)
        planes.append(img)
        planes.extend(np.asarray(pack_groups(g)))
    return np.ascontiguousarray(np.stack(planes), dtype=np.float32)


def train_backbone(dataset, cfg, seed, log=None):
    """Pretrain VAE (on images + group planes) then the prompt-conditional
    image-latent denoiser. Returns a ModelBundle; fully seeded."""
    say = log or (lambda *_: None)
    bcfg = cfg["backbone"]
    schedule = NoiseSchedule(**cfg["schedule"])
    vae, emb, den = build_backbone_models(bcfg, seed)
    root = np.random.SeedSequence(int(seed))
    rng_vae, rng_den = [np.random.default_rng(s) for s in root.spawn(5)[3:]]

    train = dataset.split("train")
    vae_entries = train[:bcfg["vae_entries"]] if bcfg.get("vae_entries") else train
    planes = gather_planes(dataset, vae_entries)
    say(f"backbone: VAE training on {planes.shape[0]} planes")
    opt = Adam(vae.parameters(), lr=bcfg["vae_lr"])
    batch = bcfg["batch"]
    vae_hist = []
    total_steps = bcfg["vae_epochs"] * math.ceil(planes.shape[0] / batch)
    step = 0
    for epoch in range(bcfg["vae_epochs"]):
        losses = []
        for idx in _batches(planes.shape[0], batch, rng_vae):
            x = Tensor(planes[idx])
            target = planes[idx] * 2.0 - 1.0
            y = vae.decode_t(vae.encode_t(x))
            loss = T.mse_loss(y, target)
            _check_finite(float(loss.data), f"VAE epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=linear_decay(step, total_steps, bcfg["vae_lr"]))
            losses.append(float(loss.data))
            step += 1
        vae_hist.append(float(np.mean(losses)))
        say(f"  vae epoch {epoch}: loss {vae_hist[-1]:.5f}")

    # latent scale calibration on a sample of planes
    sample = planes[:min(512, planes.shape[0])]
    zs = [vae.encode(sample[i:i + 64]) for i in range(0, sample.shape[0], 64)]
    latent_scale = float(np.concatenate(zs).std())
    if not latent_scale > 0:
        raise BundleError("degenerate latent scale")
    say(f"backbone: latent scale {latent_scale:.4f}")

    # precompute normalized image latents
    z0 = []
    ids = []
    for e in train:
        desc, _, _, img = dataset.load_entry(e)
        z0.append(vae.encode(img) / latent_scale)
        ids.append(desc.token_ids())
    z0 = np.ascontiguousarray(np.stack(z0), dtype=np.float32)
    ids = np.stack(ids)

    say(f"backbone: denoiser training on {z0.shape[0]} latents")
    opt = Adam(den.parameters() + emb.parameters(), lr=bcfg["den_lr"])
    den_hist = []
    total_steps = bcfg["den_epochs"] * math.ceil(z0.shape[0] / batch)
    step = 0
    for epoch in range(bcfg["den_epochs"]):
        losses = []
        for idx in _batches(z0.shape[0], batch, rng_den):
            t = rng_den.integers(0, schedule.T, idx.size)
            eps = rng_den.standard_normal(z0[idx].shape).astype(np.float32)
            zt = schedule.add_noise(z0[idx], t, eps)
            ctx = emb(ids[idx])
            cond = den.cond_embed(t, ctx)
            pred = den(Tensor(zt), cond, ctx)
            loss = T.mse_loss(pred, eps)
            _check_finite(float(loss.data), f"denoiser epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=linear_decay(step, total_steps, bcfg["den_lr"]))
            losses.append(float(loss.data))
            step += 1
        den_hist.append(float(np.mean(losses)))
        say(f"  denoiser epoch {epoch}: loss {den_hist[-1]:.5f}")

    bundle = ModelBundle(config={"backbone": bcfg, "schedule": cfg["schedule"],
                                 "resolution": dataset.resolution, "seed": int(seed)})
    bundle.set_group("vae", vae.state_dict(), frozen=True)
    bundle.set_group("embedder", emb.state_dict(), frozen=True)
    bundle.set_group("denoiser", den.state_dict(), frozen=True)
    bundle.meta.update({
        "latent_scale": latent_scale,
        "history": {"vae": vae_hist, "denoiser": den_hist},
        "trained": True,
    })
    return bundle


def vae_encode_latent(vae, image, latent_scale, tag=IMAGE_LATENT):
    """Image (3,H,W) in [0,1] -> normalized LatentTensor."""
    return LatentTensor(data=(vae.encode(image) / latent_scale).astype(np.float32),
                        space_tag=tag, scale=latent_scale)


def vae_decode_latent(vae, lat):
    return vae.decode(lat.data * lat.scale)


def sample_image_latent(bundle_models, ids, seed, steps):
    """Frozen-backbone DDIM sample of an image latent for a prompt."""
    vae, emb, den, schedule, latent_scale, res = bundle_models
    h = res // 8
    eps_fn = make_eps_fn(den, emb, ids)
    z = ddim_sample(eps_fn, (4, h, h), schedule, steps, seed)
    return LatentTensor(data=z, space_tag=IMAGE_LATENT, scale=latent_scale)
