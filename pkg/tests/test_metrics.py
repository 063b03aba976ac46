import numpy as np
import pytest

from gbx.errors import ValidationError
from gbx.metrics import (MetricReport, gaussian_window, gbuffer_channel_psnr,
                         mse, psnr, ssim)

from test_gbuffer import random_gbuffer


def ssim_bruteforce(x, y, k1=0.01, k2=0.03, win=11, sigma=1.5):
    """Direct per-window summation oracle (no vectorized tricks)."""
    w = gaussian_window(win, sigma)
    H, W = x.shape
    vals = []
    for i in range(H - win + 1):
        for j in range(W - win + 1):
            px = x[i:i + win, j:j + win]
            py = y[i:i + win, j:j + win]
            mx = float((w * px).sum())
            my = float((w * py).sum())
            vx = float((w * px * px).sum()) - mx * mx
            vy = float((w * py * py).sum()) - my * my
            cxy = float((w * px * py).sum()) - mx * my
            c1, c2 = k1 ** 2, k2 ** 2
            vals.append(((2 * mx * my + c1) * (2 * cxy + c2))
                        / ((mx * mx + my * my + c1) * (vx + vy + c2)))
    return float(np.mean(vals))


class TestBasicMetrics:
    def test_identical_images(self, rng):
        img = rng.random((3, 16, 16))
        assert mse(img, img) == 0.0
        assert psnr(img, img) == 99.0
        assert ssim(img, img) == pytest.approx(1.0)

    def test_constant_offset_closed_form(self, rng):
        ref = rng.random((3, 16, 16)) * 0.5
        pred = ref + 0.1
        assert mse(pred, ref) == pytest.approx(0.01)
        assert psnr(pred, ref) == pytest.approx(20.0)

    def test_shape_mismatch(self, rng):
        with pytest.raises(ValidationError):
            mse(rng.random((3, 8, 8)), rng.random((3, 8, 9)))

    def test_ssim_against_bruteforce_oracle(self, rng):
        x = rng.random((16, 16))
        y = np.clip(x + rng.normal(0, 0.1, (16, 16)), 0, 1)
        assert ssim(x, y) == pytest.approx(ssim_bruteforce(x, y), abs=1e-12)

    def test_ssim_checkerboard_vs_inverse(self):
        yy, xx = np.mgrid[0:16, 0:16]
        checker = ((yy + xx) % 2).astype(np.float64)
        inverse = 1.0 - checker
        val = ssim(checker, inverse)
        assert val == pytest.approx(ssim_bruteforce(checker, inverse), abs=1e-12)
        assert val < -0.9  # structure-dominant fixture: near -1

    def test_ssim_multichannel_averages(self, rng):
        x = rng.random((3, 16, 16))
        y = rng.random((3, 16, 16))
        per = [ssim(x[c], y[c]) for c in range(3)]
        assert ssim(x, y) == pytest.approx(np.mean(per))

    def test_gbuffer_channel_psnr(self, rng):
        g = random_gbuffer(rng)
        ch = gbuffer_channel_psnr(g, g)
        assert set(ch) == {"albedo", "normal_enc", "depth_norm", "roughness", "metallic"}
        assert all(v == 99.0 for v in ch.values())

    def test_gbuffer_resolution_mismatch(self, rng):
        a = random_gbuffer(rng, 16, 16)
        b = random_gbuffer(rng, 8, 8)
        with pytest.raises(ValidationError):
            gbuffer_channel_psnr(a, b)


class TestMetricReport:
    def test_aggregates_and_roundtrip(self):
        rep = MetricReport(kind="demo", config_hash="abc", seeds=[0, 1])
        for i, v in enumerate([0.1, 0.3, 0.2]):
            rep.add_sample(id=i, mse=v)
        rep.aggregate()
        assert rep.aggregates["mse"]["median"] == pytest.approx(0.2)
        back = MetricReport.from_json(rep.to_json())
        assert back.aggregates == rep.aggregates
        assert back.verify_aggregates()

    def test_tampered_aggregates_detected(self):
        rep = MetricReport(kind="demo", config_hash="abc", seeds=[0])
        rep.add_sample(id=0, mse=0.5)
        rep.aggregate()
        rep.aggregates["mse"]["median"] = 0.123
        with pytest.raises(ValidationError):
            rep.verify_aggregates()
