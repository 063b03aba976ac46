"""Central finite-difference checks of every trainable block type at float64.

The analytic gradients come from the hand-written backward passes; the
finite differences are the independent oracle. Max rel err must be <= 1e-4.
"""
import numpy as np
import pytest

from gbx.nn import tensor as T
from gbx.nn.modules import (Adam, Conv2d, CrossAttnBlock, Embedding,
                            GroupNorm, LayerNorm, Linear, Mlp, ResBlock,
                            SelfAttention, TransformerBlock)
from gbx.nn.tensor import Tensor

RTOL = 1e-4
EPS = 1e-5
# entries where both analytic and FD are below this are true zeros compared
# against FD roundoff noise (~1e-10 at loss scale 1); require only |a-fd|<ATOL
ATOL = 1e-6


def rel_err(a, b):
    if max(abs(a), abs(b)) < ATOL:
        return 0.0 if abs(a - b) < ATOL else 1.0
    return abs(a - b) / max(abs(a), abs(b))


def fd_check(loss_fn, tensors, max_idx=48, seed=7):
    """loss_fn() -> scalar Tensor built from `tensors`; compares analytic vs
    central differences on a sample of elements of every tensor."""
    loss = loss_fn()
    assert loss.data.dtype == np.float64
    loss.backward()
    grads = [t.grad.copy() for t in tensors]
    rng = np.random.default_rng(seed)
    worst = 0.0
    for tensor, grad in zip(tensors, grads):
        flat = tensor.data.reshape(-1)
        n = flat.size
        idxs = np.arange(n) if n <= max_idx else rng.choice(n, max_idx, replace=False)
        for i in idxs:
            orig = flat[i]
            flat[i] = orig + EPS
            fp = float(loss_fn().data)
            flat[i] = orig - EPS
            fm = float(loss_fn().data)
            flat[i] = orig
            fd = (fp - fm) / (2 * EPS)
            worst = max(worst, rel_err(fd, grad.reshape(-1)[i]))
    assert worst <= RTOL, f"max rel err {worst:.3e}"
    return worst


def proj_loss(out, seed=3):
    rng = np.random.default_rng(seed)
    w = rng.standard_normal(out.shape)
    return T.sum_(T.mul(out, Tensor(w)))


@pytest.fixture
def rng64():
    return np.random.default_rng(99)


def params_of(mod, extra=()):
    return list(mod.parameters()) + list(extra)


class TestLayerGradients:
    def test_linear(self, rng64):
        lin = Linear(rng64, 5, 7, dtype=np.float64)
        x = Tensor(rng64.standard_normal((3, 5)), requires_grad=True)
        fd_check(lambda: proj_loss(lin(x)), params_of(lin, [x]))

    @pytest.mark.parametrize("k,stride,pad", [(3, 1, 1), (3, 2, 1), (1, 1, 0)])
    def test_conv2d(self, rng64, k, stride, pad):
        conv = Conv2d(rng64, 3, 4, k, stride=stride, pad=pad, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 3, 6, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(conv(x)), params_of(conv, [x]))

    def test_groupnorm(self, rng64):
        gn = GroupNorm(8, groups=4, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 8, 3, 3)), requires_grad=True)
        fd_check(lambda: proj_loss(gn(x)), params_of(gn, [x]))

    def test_layernorm(self, rng64):
        ln = LayerNorm(6, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 4, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(ln(x)), params_of(ln, [x]))

    def test_activations(self, rng64):
        x = Tensor(rng64.standard_normal((4, 5)), requires_grad=True)
        for fn in (T.silu, T.gelu, T.sigmoid):
            x.grad = None
            fd_check(lambda fn=fn: proj_loss(fn(x)), [x])

    def test_softmax(self, rng64):
        x = Tensor(rng64.standard_normal((3, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(T.softmax(x, axis=-1)), [x])

    def test_embedding(self, rng64):
        emb = Embedding(rng64, 9, 4, dtype=np.float64)
        ids = np.array([[0, 3, 3, 8], [1, 2, 4, 0]])
        fd_check(lambda: proj_loss(emb(ids)), params_of(emb))

    def test_upsample(self, rng64):
        x = Tensor(rng64.standard_normal((2, 3, 4, 4)), requires_grad=True)
        fd_check(lambda: proj_loss(T.upsample_nearest2x(x)), [x])

    def test_mse_loss(self, rng64):
        x = Tensor(rng64.standard_normal((3, 4)), requires_grad=True)
        target = rng64.standard_normal((3, 4))
        fd_check(lambda: T.mse_loss(x, target), [x])

    def test_concat_split(self, rng64):
        a = Tensor(rng64.standard_normal((2, 3)), requires_grad=True)
        b = Tensor(rng64.standard_normal((2, 5)), requires_grad=True)

        def loss_fn():
            cat = T.concat([a, b], axis=1)
            p1, p2 = T.split(cat, [4, 4], axis=1)
            return T.add(proj_loss(p1, 1), proj_loss(p2, 2))

        fd_check(loss_fn, [a, b])


class TestBlockGradients:
    def test_self_attention_block(self, rng64):
        blk = TransformerBlock(rng64, 8, heads=2, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 5, 8)), requires_grad=True)
        fd_check(lambda: proj_loss(blk(x)), params_of(blk, [x]))

    def test_cross_attention_block(self, rng64):
        blk = CrossAttnBlock(rng64, 8, kv_dim=6, heads=2, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 4, 8)), requires_grad=True)
        ctx = Tensor(rng64.standard_normal((2, 3, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(blk(x, ctx)), params_of(blk, [x, ctx]))

    def test_resblock(self, rng64):
        rb = ResBlock(rng64, 8, 16, tdim=6, dtype=np.float64)
        x = Tensor(rng64.standard_normal((2, 8, 4, 4)), requires_grad=True)
        temb = Tensor(rng64.standard_normal((2, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(rb(x, temb)), params_of(rb, [x, temb]))

    def test_mlp(self, rng64):
        mlp = Mlp(rng64, 6, ratio=2, dtype=np.float64)
        x = Tensor(rng64.standard_normal((3, 6)), requires_grad=True)
        fd_check(lambda: proj_loss(mlp(x)), params_of(mlp, [x]))

    def test_denoiser_end_to_end_tiny(self, rng64):
        from gbx.backbone import Denoiser
        den = Denoiser(rng64, c_in=2, c_out=2, width=8, prompt_dim=4, heads=2,
                       dtype=np.float64)
        # zero-init output conv would zero most grads; give it values
        den.conv_out.w.data = rng64.standard_normal(den.conv_out.w.shape) * 0.1
        x = Tensor(rng64.standard_normal((1, 2, 4, 4)), requires_grad=True)
        ctx = Tensor(rng64.standard_normal((1, 3, 4)), requires_grad=True)

        def loss_fn():
            cond = den.cond_embed(np.array([3]), ctx)
            return proj_loss(den(x, cond, ctx))

        fd_check(loss_fn, params_of(den, [x, ctx]), max_idx=8)

    def test_vae_end_to_end_tiny(self, rng64):
        # 16x16 input keeps the bottleneck at 2x2: GroupNorm over a single
        # spatial element has ~zero variance and 1/sqrt(eps) amplification,
        # which is numerically hostile to finite differences
        from gbx.backbone import VAE
        vae = VAE(rng64, z_channels=2, widths=(8, 8, 8), dtype=np.float64)
        x = Tensor(rng64.random((1, 3, 16, 16)), requires_grad=True)
        fd_check(lambda: proj_loss(vae.decode_t(vae.encode_t(x))),
                 params_of(vae, [x]), max_idx=6)


class TestOptimizer:
    def test_adam_deterministic(self, rng64):
        def run():
            rng = np.random.default_rng(5)
            w = Tensor(rng.standard_normal((4, 4)).astype(np.float32), requires_grad=True)
            opt = Adam([w], lr=1e-2)
            for _ in range(10):
                loss = T.sum_(T.mul(w, w))
                opt.zero_grad()
                loss.backward()
                opt.step()
            return w.data.copy()

        assert np.array_equal(run(), run())

    def test_adam_descends(self, rng64):
        w = Tensor(rng64.standard_normal((6,)).astype(np.float32), requires_grad=True)
        opt = Adam([w], lr=5e-2)
        first = float(T.sum_(T.mul(w, w)).data)
        for _ in range(100):
            loss = T.sum_(T.mul(w, w))
            opt.zero_grad()
            loss.backward()
            opt.step()
        assert float(T.sum_(T.mul(w, w)).data) < 0.1 * first
