"""Layers and blocks built on the autograd tape.

Construction order is the determinism contract: every layer draws its init
from the rng it is given, so a fixed seed reproduces parameters bit-exactly.
"""
import numpy as np

from . import tensor as T
from .tensor import Tensor


class Module:
    def named_parameters(self, prefix=""):
        for name, val in vars(self).items():
            if isinstance(val, Tensor):
                if val.requires_grad:
                    yield prefix + name, val
            elif isinstance(val, Module):
                yield from val.named_parameters(f"{prefix}{name}.")
            elif isinstance(val, (list, tuple)):
                for i, item in enumerate(val):
                    if isinstance(item, Module):
                        yield from item.named_parameters(f"{prefix}{name}.{i}.")

    def parameters(self):
        return [p for _, p in self.named_parameters()]

    def param_count(self):
        return sum(p.data.size for p in self.parameters())

    def state_dict(self):
        return {n: p.data.copy() for n, p in self.named_parameters()}

    def load_state_dict(self, sd):
        own = dict(self.named_parameters())
        missing = set(own) - set(sd)
        extra = set(sd) - set(own)
        if missing or extra:
            raise ValueError(f"state dict mismatch: missing={sorted(missing)} extra={sorted(extra)}")
        for n, p in own.items():
            if p.data.shape != sd[n].shape:
                raise ValueError(f"shape mismatch for {n}: {p.data.shape} vs {sd[n].shape}")
            p.data = np.array(sd[n], dtype=p.data.dtype)

    def astype(self, dtype):
        for _, p in self.named_parameters():
            p.data = p.data.astype(dtype)
        return self


class Linear(Module):
    def __init__(self, rng, din, dout, bias=True, zero=False, gain=1.0, dtype=np.float32):
        if zero:
            w = np.zeros((din, dout))
        else:
            w = rng.standard_normal((din, dout)) * (gain / np.sqrt(din))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(dout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.linear(x, self.w, self.b)


class Conv2d(Module):
    def __init__(self, rng, cin, cout, k, stride=1, pad=None, bias=True, zero=False, dtype=np.float32):
        self.stride = stride
        self.pad = k // 2 if pad is None else pad
        if zero:
            w = np.zeros((cout, cin, k, k))
        else:
            w = rng.standard_normal((cout, cin, k, k)) * np.sqrt(2.0 / (cin * k * k))
        self.w = Tensor(w.astype(dtype), requires_grad=True)
        self.b = Tensor(np.zeros(cout, dtype=dtype), requires_grad=True) if bias else None

    def __call__(self, x):
        return T.conv2d(x, self.w, self.b, stride=self.stride, pad=self.pad)


class GroupNorm(Module):
    def __init__(self, channels, groups=8, eps=1e-5, dtype=np.float32):
        if channels % groups:
            raise ValueError(f"channels {channels} not divisible by groups {groups}")
        self.groups = groups
        self.eps = eps
        self.gamma = Tensor(np.ones(channels, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(channels, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.groupnorm(x, self.gamma, self.beta, self.groups, self.eps)


class LayerNorm(Module):
    def __init__(self, dim, eps=1e-5, dtype=np.float32):
        self.eps = eps
        self.gamma = Tensor(np.ones(dim, dtype=dtype), requires_grad=True)
        self.beta = Tensor(np.zeros(dim, dtype=dtype), requires_grad=True)

    def __call__(self, x):
        return T.layernorm(x, self.gamma, self.beta, self.eps)


class Embedding(Module):
    def __init__(self, rng, vocab, dim, dtype=np.float32):
        self.w = Tensor((rng.standard_normal((vocab, dim)) * 0.02).astype(dtype), requires_grad=True)

    def __call__(self, ids):
        return T.embedding(self.w, ids)


def _split_heads(x, heads):
    B, L, D = x.shape
    x = T.reshape(x, (B, L, heads, D // heads))
    return T.transpose(x, (0, 2, 1, 3))


def _merge_heads(x):
    B, H, L, Dh = x.shape
    x = T.transpose(x, (0, 2, 1, 3))
    return T.reshape(x, (B, L, H * Dh))


class SelfAttention(Module):
    def __init__(self, rng, dim, heads, dtype=np.float32):
        if dim % heads:
            raise ValueError("dim must divide heads")
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.qkv = Linear(rng, dim, 3 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)

    def __call__(self, x):
        B, L, D = x.shape
        q, k, v = T.split(self.qkv(x), [D, D, D], axis=2)
        q, k, v = (_split_heads(t, self.heads) for t in (q, k, v))
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale), axis=-1)
        return self.proj(_merge_heads(T.matmul(att, v)))


class CrossAttention(Module):
    def __init__(self, rng, dim, kv_dim, heads, dtype=np.float32):
        self.heads = heads
        self.scale = 1.0 / np.sqrt(dim // heads)
        self.q = Linear(rng, dim, dim, dtype=dtype)
        self.kv = Linear(rng, kv_dim, 2 * dim, dtype=dtype)
        self.proj = Linear(rng, dim, dim, dtype=dtype)

    def __call__(self, x, ctx):
        B, L, D = x.shape
        q = _split_heads(self.q(x), self.heads)
        k, v = T.split(self.kv(ctx), [D, D], axis=2)
        k, v = _split_heads(k, self.heads), _split_heads(v, self.heads)
        att = T.softmax(T.scale(T.matmul(q, T.transpose(k, (0, 1, 3, 2))), self.scale), axis=-1)
        return self.proj(_merge_heads(T.matmul(att, v)))


class Mlp(Module):
    def __init__(self, rng, dim, ratio=4, dtype=np.float32):
        self.fc1 = Linear(rng, dim, dim * ratio, dtype=dtype)
        self.fc2 = Linear(rng, dim * ratio, dim, dtype=dtype)

    def __call__(self, x):
        return self.fc2(T.gelu(self.fc1(x)))


class TransformerBlock(Module):
    """Pre-norm self-attention + MLP(GELU), residual connections."""

    def __init__(self, rng, dim, heads, mlp_ratio=4, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = SelfAttention(rng, dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, mlp_ratio, dtype=dtype)

    def __call__(self, x):
        x = T.add(x, self.attn(self.ln1(x)))
        return T.add(x, self.mlp(self.ln2(x)))


class CrossAttnBlock(Module):
    def __init__(self, rng, dim, kv_dim, heads, mlp_ratio=4, dtype=np.float32):
        self.ln1 = LayerNorm(dim, dtype=dtype)
        self.attn = CrossAttention(rng, dim, kv_dim, heads, dtype=dtype)
        self.ln2 = LayerNorm(dim, dtype=dtype)
        self.mlp = Mlp(rng, dim, mlp_ratio, dtype=dtype)

    def __call__(self, x, ctx):
        x = T.add(x, self.attn(self.ln1(x), ctx))
        return T.add(x, self.mlp(self.ln2(x)))


class ResBlock(Module):
    """GN-SiLU-conv x2 with additive timestep conditioning."""

    def __init__(self, rng, cin, cout, tdim, groups=8, dtype=np.float32):
        self.gn1 = GroupNorm(cin, groups, dtype=dtype)
        self.conv1 = Conv2d(rng, cin, cout, 3, dtype=dtype)
        self.tproj = Linear(rng, tdim, cout, dtype=dtype)
        self.gn2 = GroupNorm(cout, groups, dtype=dtype)
        self.conv2 = Conv2d(rng, cout, cout, 3, dtype=dtype)
        self.skip = Conv2d(rng, cin, cout, 1, pad=0, dtype=dtype) if cin != cout else None

    def __call__(self, x, temb):
        h = self.conv1(T.silu(self.gn1(x)))
        tb = self.tproj(T.silu(temb))
        B, C = tb.shape
        h = T.add(h, T.reshape(tb, (B, C, 1, 1)))
        h = self.conv2(T.silu(self.gn2(h)))
        return T.add(h, self.skip(x) if self.skip is not None else x)


def timestep_embedding(t, dim, max_period=10000.0, dtype=np.float32):
    """Sinusoidal embedding of integer timesteps; t: (B,) -> (B, dim)."""
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    ang = np.asarray(t, dtype=np.float64)[:, None] * freqs[None, :]
    return np.concatenate([np.cos(ang), np.sin(ang)], axis=1).astype(dtype)


class Adam:
    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self, lr=None):
        lr = self.lr if lr is None else lr
        self.t += 1
        bc1 = 1.0 - self.b1 ** self.t
        bc2 = 1.0 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None:
                continue
            g = p.grad
            m *= self.b1
            m += (1.0 - self.b1) * g
            v *= self.b2
            v += (1.0 - self.b2) * (g * g)
            p.data -= (lr / bc1) * m / (np.sqrt(v / bc2) + self.eps)


def linear_decay(step, total_steps, lr0, floor=0.05):
    """Linear decay from lr0 to floor*lr0 over the run."""
    frac = min(step / max(total_steps, 1), 1.0)
    return lr0 * (1.0 - (1.0 - floor) * frac)
