import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbx.errors import ContainerError, ValidationError
from gbx.gbuffer import (GBuffer, NormalizationMeta, decode_normal,
                         denormalize_depth, encode_normal, load,
                         normalize_depth, normalize_shading, pack_groups,
                         save, stack, unpack_groups, unstack, validate)


def random_gbuffer(rng, H=16, W=16):
    n = rng.standard_normal((H, W, 3))
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return GBuffer(
        albedo=rng.random((3, H, W)),
        normal_enc=np.moveaxis(encode_normal(n), -1, 0),
        depth_norm=rng.random((1, H, W)) * 0.9,
        roughness=rng.random((1, H, W)),
        metallic=rng.random((1, H, W)),
        shading_norm=rng.random((3, H, W)),
        mask=(rng.random((1, H, W)) > 0.3).astype(np.float32),
        meta=NormalizationMeta(shading_scale=2.5, depth_max=20.0),
    )


class TestNormalCodec:
    def test_axis_cases(self):
        assert np.allclose(encode_normal([0, 0, 1]), [0.5, 0.5, 1.0])
        assert np.allclose(encode_normal([0, 0, -1]), [0.5, 0.5, 0.0])

    def test_diagonal_closed_form(self):
        v = encode_normal([1 / np.sqrt(2), 1 / np.sqrt(2), 0])
        assert np.allclose(v, [0.85355, 0.85355, 0.5], atol=5e-6)

    def test_non_unit_rejected(self):
        with pytest.raises(ValidationError):
            encode_normal([0, 0, 1.001])

    @given(st.integers(0, 2 ** 32 - 1))
    @settings(max_examples=30, deadline=None)
    def test_roundtrip_random_unit_vectors(self, seed):
        rng = np.random.default_rng(seed)
        n = rng.standard_normal((32, 3))
        n /= np.linalg.norm(n, axis=1, keepdims=True)
        back = decode_normal(encode_normal(n))
        assert np.abs(back - n).max() < 1e-6


class TestDepth:
    def test_endpoints(self):
        assert normalize_depth(0.0, 20.0) == 0.0
        assert normalize_depth(20.0, 20.0) == pytest.approx(1.0)

    def test_closed_form(self):
        # log(4)/log(21)
        assert normalize_depth(3.0, 20.0) == pytest.approx(np.log(4) / np.log(21), abs=1e-9)
        assert normalize_depth(3.0, 20.0) == pytest.approx(0.45535, abs=1e-5)

    def test_negative_rejected(self):
        with pytest.raises(ValidationError):
            normalize_depth(-0.1, 20.0)

    def test_monotone_and_invertible(self):
        d = np.linspace(0, 20.0, 257)
        dn = normalize_depth(d, 20.0)
        assert np.all(np.diff(dn) > 0)
        assert np.abs(denormalize_depth(dn, 20.0) - d).max() < 1e-6

    def test_saturates_above_max(self):
        assert normalize_depth(1e9, 20.0) == 1.0


class TestShadingNormalization:
    def test_constant_field(self):
        S = np.full((3, 8, 8), 2.5)
        norm, scale, degen = normalize_shading(S, np.ones((8, 8), bool))
        assert scale == pytest.approx(2.5)
        assert np.all(norm == 1.0)
        assert not degen

    def test_outliers_clamp(self):
        # 99% of pixels at 1.0, 1% at 10.0 -> scale stays near 1, outliers clamp
        S = np.ones((3, 20, 20))
        flat = S.reshape(3, -1)
        k = int(round(0.01 * flat.shape[1]))
        flat[:, :k] = 10.0
        norm, scale, degen = normalize_shading(S, np.ones((20, 20), bool))
        expected = np.percentile(S.ravel(), 99.0)  # 1.09: boundary interpolation
        assert scale == pytest.approx(expected)
        assert scale < 1.5
        assert norm.max() == 1.0
        assert np.all(norm.reshape(3, -1)[:, :k] == 1.0)

    def test_percentile_matches_numpy_linear_interpolation(self, rng):
        S = rng.random((3, 16, 16)) * 7.0
        valid = rng.random((16, 16)) > 0.4
        _, scale, _ = normalize_shading(S, valid)
        assert scale == pytest.approx(np.percentile(S[:, valid].ravel(), 99.0))

    def test_degenerate_zero_field(self):
        S = np.zeros((3, 8, 8))
        norm, scale, degen = normalize_shading(S, np.ones((8, 8), bool))
        assert scale == 1.0 and degen
        assert np.all(norm == 0.0)

    def test_denormalization_recovers_unclamped(self, rng):
        S = rng.random((3, 16, 16)) * 3.0
        valid = np.ones((16, 16), bool)
        norm, scale, _ = normalize_shading(S, valid)
        unclamped = S / scale <= 1.0
        assert np.abs((norm * scale - S)[unclamped]).max() < 1e-9


class TestStack:
    def test_shape_and_order(self, rng):
        g = random_gbuffer(rng)
        s = stack(g)
        assert s.shape == (13, 16, 16)
        assert np.array_equal(s[0:3], g.albedo)
        assert np.array_equal(s[3:6], g.normal_enc)
        assert np.array_equal(s[6:7], g.roughness)
        assert np.array_equal(s[7:10], g.shading_norm)
        assert np.array_equal(s[10:11], g.metallic)
        assert np.array_equal(s[11:12], g.depth_norm)
        assert np.array_equal(s[12:13], g.mask)

    def test_roundtrip_bit_exact(self, rng):
        g = random_gbuffer(rng)
        g2 = unstack(stack(g), meta=g.meta)
        for name in GBuffer.channel_names():
            assert np.array_equal(g.channel(name), g2.channel(name))

    def test_mask_only_basis(self):
        H = W = 8
        g = GBuffer(
            albedo=np.zeros((3, H, W)), normal_enc=np.full((3, H, W), 0.5),
            depth_norm=np.ones((1, H, W)), roughness=np.zeros((1, H, W)),
            metallic=np.zeros((1, H, W)), shading_norm=np.zeros((3, H, W)),
            mask=np.ones((1, H, W)))
        s = stack(g)
        assert np.all(s[12] == 1.0)
        assert np.all(s[:12][np.arange(12) != 11] >= 0)
        assert np.all(s[0:3] == 0) and np.all(s[6:11] == 0)


class TestValidate:
    def test_rejects_nan(self, rng):
        g = random_gbuffer(rng)
        bad = np.array(g.albedo)
        bad[0, 0, 0] = np.nan
        with pytest.raises(ValidationError, match="albedo"):
            validate(g.with_channels(albedo=bad))

    def test_rejects_non_binary_mask(self, rng):
        g = random_gbuffer(rng)
        bad = np.array(g.mask)
        bad[0, 0, 0] = 0.5
        with pytest.raises(ValidationError, match="mask"):
            validate(g.with_channels(mask=bad))

    def test_rejects_non_unit_foreground_normals(self, rng):
        g = random_gbuffer(rng)
        bad = np.array(g.normal_enc) * 0.6
        with pytest.raises(ValidationError, match="normal"):
            validate(g.with_channels(normal_enc=bad))

    def test_background_normals_unconstrained(self, rng):
        g = random_gbuffer(rng)
        ne = np.full_like(np.array(g.normal_enc), 0.5)  # zero vector everywhere
        g2 = g.with_channels(normal_enc=ne,
                             depth_norm=np.ones_like(np.array(g.depth_norm)))
        validate(g2)

    def test_immutability(self, rng):
        g = random_gbuffer(rng)
        with pytest.raises(ValueError):
            g.albedo[0, 0, 0] = 0.2


class TestContainer:
    def test_roundtrip_bit_exact(self, rng, tmp_path):
        g = random_gbuffer(rng)
        save(g, tmp_path / "g")
        g2 = load(tmp_path / "g")
        for name in GBuffer.channel_names():
            assert np.array_equal(g.channel(name), g2.channel(name)), name
        assert g2.meta == g.meta
        assert g2.content_hash() == g.content_hash()

    def test_meta_full_precision(self, rng, tmp_path):
        scale = 2.5000000123456789
        g = random_gbuffer(rng)
        g = g.with_channels(meta=NormalizationMeta(shading_scale=scale, depth_max=20.0))
        save(g, tmp_path / "g")
        assert load(tmp_path / "g").meta.shading_scale == scale

    def test_manifest_shape_mismatch(self, rng, tmp_path):
        import json
        g = random_gbuffer(rng)
        save(g, tmp_path / "g")
        mf = tmp_path / "g" / "manifest.json"
        m = json.loads(mf.read_text())
        m["height"] = 999
        mf.write_text(json.dumps(m))
        with pytest.raises(ContainerError, match="height"):
            load(tmp_path / "g")

    def test_missing_channel_file(self, rng, tmp_path):
        g = random_gbuffer(rng)
        save(g, tmp_path / "g")
        (tmp_path / "g" / "roughness.f32").unlink()
        with pytest.raises(ContainerError, match="roughness"):
            load(tmp_path / "g")

    def test_previews_written(self, rng, tmp_path):
        from gbx.gbuffer import write_previews
        g = random_gbuffer(rng)
        write_previews(g, tmp_path / "p")
        assert (tmp_path / "p" / "albedo.png").exists()
        assert (tmp_path / "p" / "mask.png").exists()


class TestGroupPack:
    def test_roundtrip(self, rng):
        g = random_gbuffer(rng)
        planes = pack_groups(g)
        assert planes.shape == (5, 3, 16, 16)
        g2 = unpack_groups(planes, meta=g.meta)
        assert np.array_equal(g2.albedo, g.albedo)
        assert np.abs(g2.normal_enc - g.normal_enc).max() < 1e-5
        assert np.abs(g2.depth_norm - g.depth_norm).max() < 1e-6
        assert np.array_equal(g2.roughness, g.roughness)
        assert np.array_equal(g2.metallic, g.metallic)
        assert np.array_equal(g2.shading_norm, g.shading_norm)
        assert np.all(g2.mask == 1.0)

    def test_unpack_renormalizes(self, rng):
        g = random_gbuffer(rng)
        planes = np.array(pack_groups(g))
        planes[1] = np.clip(planes[1] * 0.8 + 0.1, 0, 1)  # denormalize the normals
        g2 = unpack_groups(planes)
        validate(g2)
