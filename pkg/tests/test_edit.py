import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gbx.edit import (CopyPaste, Region, SetAlbedo, SetScalar, SetShadingMask,
                      apply_edit, apply_edits, click_select, op_from_json,
                      op_to_json, ops_from_json, ops_to_json)
from gbx.errors import ValidationError
from gbx.gbuffer import GBuffer, validate

from test_gbuffer import random_gbuffer


def rect_region(H, W, y0, x0, h, w):
    m = np.zeros((H, W), dtype=bool)
    m[y0:y0 + h, x0:x0 + w] = True
    return Region(m)


class TestRegion:
    def test_rle_roundtrip_simple(self):
        r = rect_region(8, 8, 2, 3, 3, 2)
        assert Region.from_rle(r.to_rle()).mask.tolist() == r.mask.tolist()

    @given(st.integers(0, 2 ** 31 - 1))
    @settings(max_examples=40, deadline=None)
    def test_rle_roundtrip_random(self, seed):
        rng = np.random.default_rng(seed)
        m = rng.random((6, 9)) > rng.random()
        r = Region(m)
        assert np.array_equal(Region.from_rle(r.to_rle()).mask, m)

    def test_rle_all_true_and_all_false(self):
        for fill in (True, False):
            m = np.full((4, 4), fill)
            assert np.array_equal(Region.from_rle(Region(m).to_rle()).mask, m)

    def test_bad_rle_rejected(self):
        with pytest.raises(ValidationError):
            Region.from_rle({"height": 4, "width": 4, "runs": [3]})


class TestOpSerialization:
    def test_all_variants_roundtrip(self):
        r = rect_region(8, 8, 1, 1, 3, 3)
        ops = [
            SetScalar("roughness", r, value=1.0),
            SetScalar("metallic", r, delta=-0.25),
            SetAlbedo(r, rgb=(0.1, 0.2, 0.3)),
            SetAlbedo(r, pattern="checker"),
            SetShadingMask(r),
            CopyPaste(r, (2, 1), ("albedo", "normal_enc"), src_gbuffer_id="other"),
        ]
        back = ops_from_json(ops_to_json(ops))
        for a, b in zip(ops, back):
            assert type(a) is type(b)
            assert op_to_json(a) == op_to_json(b)

    def test_shading_never_copyable(self):
        with pytest.raises(ValidationError, match="shading"):
            CopyPaste(rect_region(8, 8, 0, 0, 2, 2), (0, 0), ("shading_norm",))

    def test_scalar_channel_restricted(self):
        with pytest.raises(ValidationError):
            SetScalar("albedo", rect_region(8, 8, 0, 0, 2, 2), value=0.5)

    def test_unknown_tag_rejected(self):
        with pytest.raises(ValidationError):
            op_from_json({"op": "teleport"})


class TestClickSelect:
    def test_uniform_albedo_selects_everything(self):
        albedo = np.full((3, 16, 16), 0.5)
        r = click_select(albedo, (4, 7))
        assert r.size == 16 * 16

    def _disk_fixture(self):
        H = W = 32
        yy, xx = np.mgrid[0:H, 0:W]
        disk = (yy - 16) ** 2 + (xx - 16) ** 2 < 81
        albedo = np.full((3, H, W), 0.2)
        albedo[0][disk] = 0.9
        return albedo, disk

    def test_disk_interior(self):
        albedo, disk = self._disk_fixture()
        r = click_select(albedo, (16, 16))
        # region matches disk interior within a 1px boundary band
        from scipy import ndimage  # only used as test oracle
        inner = ndimage.binary_erosion(disk, iterations=2)
        outer = ndimage.binary_dilation(disk, iterations=2)
        assert np.all(r.mask[inner])
        assert not np.any(r.mask & ~outer)

    def test_background_is_complement(self):
        albedo, disk = self._disk_fixture()
        r = click_select(albedo, (2, 2))
        from scipy import ndimage
        outer = ndimage.binary_dilation(disk, iterations=2)
        assert not np.any(r.mask & ~outer & ~r.mask)  # sanity
        assert np.all(r.mask[~outer])
        assert not np.any(r.mask & ndimage.binary_erosion(disk, iterations=2))

    def test_determinism_and_idempotence(self):
        albedo, _ = self._disk_fixture()
        r1 = click_select(albedo, (16, 16))
        ys, xs = np.nonzero(r1.mask)
        r2 = click_select(albedo, (int(xs[5]), int(ys[5])))
        assert np.array_equal(r1.mask, r2.mask)

    def test_click_on_edge_moves_to_neighbor(self):
        albedo, disk = self._disk_fixture()
        # find an edge pixel: gradient boundary of the disk
        r = click_select(albedo, (16 + 9, 16))  # on/near the rim
        assert r.size >= 1

    def test_out_of_bounds(self):
        with pytest.raises(ValidationError):
            click_select(np.zeros((3, 8, 8)), (9, 0))


class TestApplyEdit:
    def test_set_scalar_semantics(self, rng):
        g = random_gbuffer(rng, 16, 16)
        region = rect_region(16, 16, 4, 5, 4, 3)
        out = apply_edit(g, SetScalar("roughness", region, value=1.0))
        m = region.mask
        assert np.all(out.roughness[0][m] == 1.0)
        assert np.array_equal(out.roughness[0][~m], g.roughness[0][~m])
        assert np.all(out.mask[0][m] == 0.0)
        assert np.all(out.shading_norm[:, m] == 0.0)

    def test_only_region_pixels_touched(self, rng):
        g = random_gbuffer(rng, 16, 16)
        region = rect_region(16, 16, 2, 2, 5, 6)
        out = apply_edit(g, SetAlbedo(region, rgb=(0.9, 0.1, 0.5)))
        m = region.mask
        for name in GBuffer.channel_names():
            a, b = g.channel(name), out.channel(name)
            assert np.array_equal(a[:, ~m], b[:, ~m]), name

    def test_copy_paste_semantics(self, rng):
        g = random_gbuffer(rng, 16, 16)
        src = rect_region(16, 16, 1, 1, 4, 4)
        op = CopyPaste(src, (8, 9))
        out = apply_edit(g, op)
        sy, sx = np.nonzero(src.mask)
        dy, dx = sy + 8, sx + 9
        for name in ("albedo", "depth_norm", "roughness", "metallic"):
            assert np.allclose(out.channel(name)[:, dy, dx], g.channel(name)[:, sy, sx])
        # shading never copied: zeroed at dst AND src (same-buffer movement)
        assert np.all(out.shading_norm[:, dy, dx] == 0.0)
        assert np.all(out.shading_norm[:, sy, sx] == 0.0)
        assert np.all(out.mask[0][dy, dx] == 0.0)
        assert np.all(out.mask[0][sy, sx] == 0.0)
        validate(out)

    def test_cross_buffer_paste_keeps_source_region(self, rng):
        g = random_gbuffer(rng, 16, 16)
        other = random_gbuffer(np.random.default_rng(7), 16, 16)
        src = rect_region(16, 16, 0, 0, 3, 3)
        op = CopyPaste(src, (10, 10), src_gbuffer_id="lib")
        out = apply_edit(g, op, sources={"lib": other})
        # source region of *this* buffer untouched (it came from another buffer)
        sy, sx = np.nonzero(src.mask)
        assert np.array_equal(out.shading_norm[:, sy, sx], g.shading_norm[:, sy, sx])

    def test_out_of_bounds_paste(self, rng):
        g = random_gbuffer(rng, 16, 16)
        with pytest.raises(ValidationError, match="bounds"):
            apply_edit(g, CopyPaste(rect_region(16, 16, 10, 10, 5, 5), (8, 8)))

    def test_empty_region_rejected(self, rng):
        g = random_gbuffer(rng, 16, 16)
        with pytest.raises(ValidationError, match="empty"):
            apply_edit(g, SetShadingMask(Region(np.zeros((16, 16), bool))))

    def test_disjoint_edits_commute(self, rng):
        g = random_gbuffer(rng, 16, 16)
        a = SetScalar("roughness", rect_region(16, 16, 0, 0, 4, 4), value=0.8)
        b = SetAlbedo(rect_region(16, 16, 9, 9, 4, 4), rgb=(0.2, 0.6, 0.9))
        ab = apply_edits(g, [a, b])
        ba = apply_edits(g, [b, a])
        assert ab.content_hash() == ba.content_hash()

    def test_mask_shading_coupling(self, rng):
        g = random_gbuffer(rng, 16, 16)
        g = g.with_channels(mask=np.ones((1, 16, 16), dtype=np.float32))
        ops = [SetShadingMask(rect_region(16, 16, 1, 2, 3, 4)),
               SetScalar("metallic", rect_region(16, 16, 8, 8, 4, 4), value=1.0)]
        out = apply_edits(g, ops)
        edited = out.mask[0] == 0.0
        expected = np.zeros((16, 16), bool)
        expected[1:4, 2:6] = True
        expected[8:12, 8:12] = True
        assert np.array_equal(edited, expected)
        assert np.all(out.shading_norm[:, edited] == 0.0)
