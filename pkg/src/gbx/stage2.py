"""Stage 2: G-buffer -> image neural rendering.

Three conditioning encoders mirror the shading factorization: geometry
(normal+depth), material (albedo+roughness+metallic), lighting (shading+mask)
run through separate conv stems and transformer blocks, get fused, and steer
the frozen image denoiser through a ControlNet-style branch. The monolithic
baseline is the same machinery with one parameter-matched stem over all 13
channels.
"""
import math

import numpy as np

from .backbone import backbone_from_bundle, ddim_sample, make_eps_fn
from .bundle import ModelBundle
from .errors import BundleError, ValidationError
from .gbuffer import stack as stack_gbuffer
from .nn import tensor as T
from .nn.modules import (Adam, Conv2d, GroupNorm, Linear, Module,
                         TransformerBlock, linear_decay)
from .nn.tensor import Tensor, no_grad
from .stage1 import ControlBranch
from .synth import PALETTE

# stack indices: geometry = normals + depth, material = albedo + rough +
# metal, lighting = shading + mask (4/5/4 channels of the 13-channel stack)
GEOMETRY_IDX = (3, 4, 5, 11)
MATERIAL_IDX = (0, 1, 2, 6, 10)
LIGHTING_IDX = (7, 8, 9, 12)


def split_branch_inputs(stack13):
    """(B,13,H,W) -> geometry (B,4,..), material (B,5,..), lighting (B,4,..)."""
    if stack13.shape[1] != 13:
        raise ValidationError(f"expected 13-channel stack, got {stack13.shape}")
    return (stack13[:, GEOMETRY_IDX], stack13[:, MATERIAL_IDX], stack13[:, LIGHTING_IDX])


class ConvStem(Module):
    """4-layer conv encoder, GroupNorm+SiLU, stride 2 at layers 2 and 3."""

    def __init__(self, rng, c_in, channels, gn_groups=8, dtype=np.float32):
        c1, c2, c3, c4 = channels
        self.conv1 = Conv2d(rng, c_in, c1, 3, dtype=dtype)
        self.gn1 = GroupNorm(c1, gn_groups, dtype=dtype)
        self.conv2 = Conv2d(rng, c1, c2, 3, stride=2, dtype=dtype)
        self.gn2 = GroupNorm(c2, gn_groups, dtype=dtype)
        self.conv3 = Conv2d(rng, c2, c3, 3, stride=2, dtype=dtype)
        self.gn3 = GroupNorm(c3, gn_groups, dtype=dtype)
        self.conv4 = Conv2d(rng, c3, c4, 3, dtype=dtype)
        self.gn4 = GroupNorm(c4, gn_groups, dtype=dtype)

    def __call__(self, x):
        h = T.silu(self.gn1(self.conv1(x)))
        h = T.silu(self.gn2(self.conv2(h)))
        h = T.silu(self.gn3(self.conv3(h)))
        return T.silu(self.gn4(self.conv4(h)))


class BranchEncoder(Module):
    """Conv stem -> patchify -> transformer blocks -> (B, tokens, dim)."""

    def __init__(self, rng, c_in, channels, token_dim, heads, patch=2,
                 blocks=2, mlp_ratio=4, gn_groups=8, n_tokens=64, dtype=np.float32):
        self.stem = ConvStem(rng, c_in, channels, gn_groups, dtype=dtype)
        self.patchify = Conv2d(rng, channels[-1], token_dim, patch, stride=patch,
                               pad=0, dtype=dtype)
        self.pos = Tensor((rng.standard_normal((n_tokens, token_dim)) * 0.02).astype(dtype),
                          requires_grad=True)
        self.blocks = [TransformerBlock(rng, token_dim, heads, mlp_ratio, dtype=dtype)
                       for _ in range(blocks)]

    def __call__(self, x):
        h = self.patchify(self.stem(x))
        B, D, hh, ww = h.shape
        if hh * ww != self.pos.shape[0]:
            raise ValidationError(
                f"encoder produced {hh * ww} tokens, configured for {self.pos.shape[0]}")
        toks = T.add(T.transpose(T.reshape(h, (B, D, hh * ww)), (0, 2, 1)), self.pos)
        for blk in self.blocks:
            toks = blk(toks)
        return toks, (hh, ww)


class ThreeBranchNet(Module):
    """Geometry/material/lighting branches fused into a zero-init control grid."""

    def __init__(self, rng, cfg, hint_channels, resolution=64, dtype=np.float32):
        d = cfg["token_dim"]
        # stem downsamples 4x; patchify divides by patch size
        n_tokens = ((resolution // 4) // cfg["patch"]) ** 2
        kw = dict(channels=cfg["enc_channels"], token_dim=d, heads=cfg["heads"],
                  patch=cfg["patch"], blocks=cfg["blocks"], mlp_ratio=cfg["mlp_ratio"],
                  gn_groups=cfg["gn_groups"], n_tokens=n_tokens, dtype=dtype)
        self.geometry = BranchEncoder(rng, 4, **kw)
        self.material = BranchEncoder(rng, 5, **kw)
        self.lighting = BranchEncoder(rng, 4, **kw)
        self.fuse_proj = Linear(rng, 3 * d, d, dtype=dtype)
        self.fuse_block = TransformerBlock(rng, d, cfg["heads"], cfg["mlp_ratio"], dtype=dtype)
        self.out_proj = Conv2d(rng, d, hint_channels, 1, pad=0, zero=True, dtype=dtype)

    def __call__(self, stack13):
        g_in, m_in, l_in = split_branch_inputs(stack13.data if isinstance(stack13, Tensor)
                                               else stack13)
        tg, grid = self.geometry(Tensor(np.ascontiguousarray(g_in)))
        tm, _ = self.material(Tensor(np.ascontiguousarray(m_in)))
        tl, _ = self.lighting(Tensor(np.ascontiguousarray(l_in)))
        fused = self.fuse_proj(T.concat([tg, tm, tl], axis=2))
        fused = self.fuse_block(fused)
        B, L, D = fused.shape
        hh, ww = grid
        feat = T.reshape(T.transpose(fused, (0, 2, 1)), (B, D, hh, ww))
        return self.out_proj(feat)


class MonolithicNet(Module):
    """Single-stem baseline on the full 13-channel stack; same interface and
    zero-init property, parameters matched to the branch net within 10%."""

    def __init__(self, rng, cfg, mono_cfg, hint_channels, resolution=64, dtype=np.float32):
        d = mono_cfg["token_dim"]
        n_tokens = ((resolution // 4) // cfg["patch"]) ** 2
        self.encoder = BranchEncoder(
            rng, 13, channels=mono_cfg["enc_channels"], token_dim=d,
            heads=mono_cfg["heads"], patch=cfg["patch"], blocks=cfg["blocks"],
            mlp_ratio=cfg["mlp_ratio"], gn_groups=cfg["gn_groups"],
            n_tokens=n_tokens, dtype=dtype)
        self.fuse_proj = Linear(rng, d, d, dtype=dtype)
        self.fuse_block = TransformerBlock(rng, d, mono_cfg["heads"], cfg["mlp_ratio"], dtype=dtype)
        self.out_proj = Conv2d(rng, d, hint_channels, 1, pad=0, zero=True, dtype=dtype)

    def __call__(self, stack13):
        x = stack13.data if isinstance(stack13, Tensor) else stack13
        toks, grid = self.encoder(Tensor(np.ascontiguousarray(x)))
        fused = self.fuse_block(self.fuse_proj(toks))
        B, L, D = fused.shape
        hh, ww = grid
        feat = T.reshape(T.transpose(fused, (0, 2, 1)), (B, D, hh, ww))
        return self.out_proj(feat)


def build_encoder_net(cfg, bcfg, seed, encoder, resolution):
    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 51]))
    if encoder == "branch":
        return ThreeBranchNet(rng, cfg["branch"], hint_channels=bcfg["width"],
                              resolution=resolution)
    if encoder == "monolithic":
        return MonolithicNet(rng, cfg["branch"], cfg["mono"],
                             hint_channels=bcfg["width"], resolution=resolution)
    raise ValidationError(f"unknown stage-2 encoder {encoder!r}")


def parity_report(cfg, bcfg, resolution=64):
    rng = np.random.default_rng(0)
    branch = ThreeBranchNet(rng, cfg["branch"], bcfg["width"], resolution)
    mono = MonolithicNet(rng, cfg["branch"], cfg["mono"], bcfg["width"], resolution)
    nb, nm = branch.param_count(), mono.param_count()
    return {"branch_params": nb, "mono_params": nm,
            "rel_diff": abs(nb - nm) / nb}


# ------------------------------------------------------------- mask curriculum

def _palette_region(albedo, rng, tol=0.06):
    """Silhouette of one palette-colored object, if any is present."""
    colors = list(PALETTE.values())
    rng.shuffle(colors)
    H, W = albedo.shape[1:]
    for c in colors:
        d = np.abs(albedo - np.asarray(c, dtype=np.float32).reshape(3, 1, 1)).max(axis=0)
        region = d < tol
        if 0.02 * H * W <= region.sum() <= 0.5 * H * W:
            return region
    return None


def sample_mask_region(stack13, rng):
    """Training-time edit region: palette silhouette or a 5-30% rectangle."""
    H, W = stack13.shape[1:]
    if rng.random() < 0.5:
        region = _palette_region(stack13[0:3], rng)
        if region is not None:
            return region
    area = rng.uniform(0.05, 0.30) * H * W
    aspect = rng.uniform(0.5, 2.0)
    rh = int(np.clip(np.sqrt(area * aspect), 2, H))
    rw = int(np.clip(area / rh, 2, W))
    y0 = int(rng.integers(0, H - rh + 1))
    x0 = int(rng.integers(0, W - rw + 1))
    region = np.zeros((H, W), dtype=bool)
    region[y0:y0 + rh, x0:x0 + rw] = True
    return region


def apply_mask_curriculum(stack13, region):
    """Zero the mask and shading channels on the region (copy)."""
    out = np.array(stack13)
    out[12][region] = 0.0
    out[7:10][:, region] = 0.0
    return out


# ------------------------------------------------------------------- training

def train_stage2(backbone_bundle, dataset, cfg, seed, encoder=None, epochs=None,
                 entries_cap=None, log=None):
    """Mask-curriculum training of the G-buffer renderer.

    The first ceil(total/3) epochs use all-ones masks; afterwards each sample
    gets a zeroed mask/shading region with probability p_mask while the
    denoising target stays the unedited image latent. The backbone denoiser
    stays frozen until the last `unfreeze_frac` of epochs.
    """
    say = log or (lambda *_: None)
    if not backbone_bundle.meta.get("trained"):
        raise BundleError("stage-2 needs a trained backbone bundle")
    s2cfg = cfg["stage2"]
    encoder = encoder or s2cfg["encoder"]
    epochs = epochs or s2cfg["epochs"]
    vae, emb, den, schedule = backbone_from_bundle(backbone_bundle)
    latent_scale = backbone_bundle.meta["latent_scale"]
    bcfg = backbone_bundle.config["backbone"]
    res = dataset.resolution

    rng_init = np.random.default_rng(np.random.SeedSequence([int(seed), 52]))
    control = ControlBranch(rng_init, c_in=bcfg["z_channels"], width=bcfg["width"],
                            prompt_dim=bcfg["prompt_dim"], heads=bcfg["heads"],
                            hint_channels=0)
    control.copy_encoder_from(den)
    enc_net = build_encoder_net(s2cfg, bcfg, seed, encoder, res)

    train = dataset.split("train")
    if entries_cap:
        train = train[:entries_cap]
    say(f"stage2[{encoder}]: preparing {len(train)} entries")
    stacks, z0, ids = [], [], []
    for e in train:
        desc, g, _, img = dataset.load_entry(e)
        stacks.append(stack_gbuffer(g))
        z0.append(vae.encode(img) / latent_scale)
        ids.append(desc.token_ids())
    stacks = np.ascontiguousarray(np.stack(stacks), dtype=np.float32)
    z0 = np.ascontiguousarray(np.stack(z0), dtype=np.float32)
    ids = np.stack(ids)

    rng = np.random.default_rng(np.random.SeedSequence([int(seed), 53]))
    batch = s2cfg["batch"]
    lr0 = s2cfg["lr"]
    n = stacks.shape[0]
    steps_per_epoch = math.ceil(n / batch)
    total_steps = epochs * steps_per_epoch
    curriculum_start = math.ceil(epochs / 3)
    unfreeze_epoch = max(1, math.floor(epochs * (1.0 - s2cfg["unfreeze_frac"])))
    opt = Adam(control.parameters() + enc_net.parameters(), lr=lr0)
    history = []
    step = 0
    for epoch in range(epochs):
        if epoch == unfreeze_epoch:
            opt = Adam(control.parameters() + enc_net.parameters() + den.parameters(), lr=lr0)
            say(f"stage2[{encoder}]: unfreezing denoiser at epoch {epoch}")
        masked = epoch >= curriculum_start
        losses = []
        for idx in _batches(n, batch, rng):
            xb = stacks[idx]
            if masked:
                xb = np.array(xb)
                for i in range(xb.shape[0]):
                    if rng.random() < s2cfg["p_mask"]:
                        xb[i] = apply_mask_curriculum(xb[i], sample_mask_region(xb[i], rng))
            t = rng.integers(0, schedule.T, idx.size)
            eps = rng.standard_normal(z0[idx].shape).astype(np.float32)
            zt = schedule.add_noise(z0[idx], t, eps)
            ctx = emb(ids[idx])
            cond = den.cond_embed(t, ctx)
            hint = enc_net(xb)
            residuals = control(Tensor(zt), cond, ctx, hint)
            pred = den(Tensor(zt), cond, ctx, control=residuals)
            loss = T.mse_loss(pred, eps)
            lv = float(loss.data)
            if not np.isfinite(lv):
                raise BundleError(f"NaN loss in stage-2 epoch {epoch} step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step(lr=linear_decay(step, total_steps, lr0))
            losses.append(lv)
            step += 1
        history.append(float(np.mean(losses)))
        say(f"  stage2[{encoder}] epoch {epoch}: loss {history[-1]:.5f}"
            + (" (masked)" if masked else ""))

    bundle = ModelBundle(config=dict(backbone_bundle.config))
    bundle.config["stage2"] = {"encoder": encoder, "epochs": epochs,
                               "curriculum_start": curriculum_start,
                               "unfreeze_epoch": unfreeze_epoch, "lr": lr0,
                               "batch": batch, "p_mask": s2cfg["p_mask"],
                               "seed": int(seed), "entries": len(train),
                               "branch": s2cfg["branch"], "mono": s2cfg["mono"]}
    bundle.set_group("vae", vae.state_dict(), frozen=True)
    bundle.set_group("embedder", emb.state_dict(), frozen=True)
    bundle.set_group("denoiser", den.state_dict())
    bundle.set_group("control_s2", control.state_dict())
    bundle.set_group("encoder_net", enc_net.state_dict())
    bundle.meta.update({
        "latent_scale": latent_scale,
        "trained": True,
        "stage2_encoder": encoder,
        "history": {"stage2": history},
        "encoder_params": enc_net.param_count(),
        "backbone_hash": backbone_bundle.config_hash,
    })
    return bundle


def _batches(n, batch, rng):
    perm = rng.permutation(n)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


# ------------------------------------------------------------------ rendering

def stage2_models(bundle):
    if "encoder_net" not in bundle.groups:
        raise BundleError("bundle has no trained stage-2 renderer")
    vae, emb, den, schedule = backbone_from_bundle(bundle)
    s2 = bundle.config["stage2"]
    bcfg = bundle.config["backbone"]
    rng = np.random.default_rng(np.random.SeedSequence([int(s2["seed"]), 52]))
    control = ControlBranch(rng, c_in=bcfg["z_channels"], width=bcfg["width"],
                            prompt_dim=bcfg["prompt_dim"], heads=bcfg["heads"],
                            hint_channels=0)
    control.load_state_dict(bundle.groups["control_s2"])
    enc_net = build_encoder_net(s2, bcfg, s2["seed"], s2["encoder"],
                                bundle.config["resolution"])
    enc_net.load_state_dict(bundle.groups["encoder_net"])
    return vae, emb, den, control, enc_net, schedule


def render_gbuffer(bundle, g, desc, seed, steps=None, models=None):
    """Trained stage-2 bundle + G-buffer + prompt + seed -> image (3,H,W) in
    [0,1]. Deterministic in all inputs."""
    vae, emb, den, control, enc_net, schedule = models or stage2_models(bundle)
    steps = steps or bundle.config.get("sample_steps", 20)
    latent_scale = bundle.meta["latent_scale"]
    res = bundle.config["resolution"]
    if (g.height, g.width) != (res, res):
        raise ValidationError(f"G-buffer is {g.height}x{g.width}, bundle expects {res}x{res}")
    stack13 = stack_gbuffer(g)[None]
    ids = desc.token_ids()
    with no_grad():
        hint = enc_net(stack13)

    def control_fn(xt, temb, ctx):
        return control(xt, temb, ctx, hint)

    h = res // 8
    z = ddim_sample(make_eps_fn(den, emb, ids, control_fn=control_fn),
                    (4, h, h), schedule, steps,
                    np.random.default_rng(np.random.SeedSequence([int(seed), 978])))
    return vae.decode(z * latent_scale).astype(np.float32)
