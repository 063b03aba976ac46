"""Image metrics (MSE, PSNR, SSIM) and metric report plumbing.

SSIM follows the classic formulation: 11x11 Gaussian window sigma=1.5,
K1=0.01, K2=0.03, valid-window averaging, unit data range. Tests validate
against a direct per-window summation oracle.
"""
import json
import time
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError

PSNR_CAP_DB = 99.0


def _check_pair(pred, ref):
    pred = np.asarray(pred, dtype=np.float64)
    ref = np.asarray(ref, dtype=np.float64)
    if pred.shape != ref.shape:
        raise ValidationError(f"shape mismatch {pred.shape} vs {ref.shape}")
    return pred, ref


def mse(pred, ref):
    pred, ref = _check_pair(pred, ref)
    return float(np.mean((pred - ref) ** 2))


def psnr(pred, ref, cap=PSNR_CAP_DB):
    m = mse(pred, ref)
    if m <= 0:
        return cap
    return float(min(10.0 * np.log10(1.0 / m), cap))


def gaussian_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-(r ** 2) / (2 * sigma ** 2))
    w = np.outer(g, g)
    return w / w.sum()


def _window_means(x, w):
    """Valid-mode weighted window means via sliding windows."""
    k = w.shape[0]
    H, W = x.shape
    s0, s1 = x.strides
    win = np.lib.stride_tricks.as_strided(
        x, (H - k + 1, W - k + 1, k, k), (s0, s1, s0, s1), writeable=False)
    return np.tensordot(win, w, axes=([2, 3], [0, 1]))


def ssim(pred, ref, k1=0.01, k2=0.03, win_size=11, sigma=1.5):
    """Mean SSIM over valid windows; multichannel inputs average per channel."""
    pred, ref = _check_pair(pred, ref)
    if pred.ndim == 3:
        return float(np.mean([ssim(pred[c], ref[c], k1, k2, win_size, sigma)
                              for c in range(pred.shape[0])]))
    if pred.ndim != 2:
        raise ValidationError(f"ssim expects (H,W) or (C,H,W), got {pred.shape}")
    if min(pred.shape) < win_size:
        raise ValidationError(f"image smaller than the {win_size}x{win_size} window")
    w = gaussian_window(win_size, sigma)
    c1 = k1 ** 2
    c2 = k2 ** 2
    mu_x = _window_means(pred, w)
    mu_y = _window_means(ref, w)
    xx = _window_means(pred * pred, w) - mu_x ** 2
    yy = _window_means(ref * ref, w) - mu_y ** 2
    xy = _window_means(pred * ref, w) - mu_x * mu_y
    num = (2 * mu_x * mu_y + c1) * (2 * xy + c2)
    den = (mu_x ** 2 + mu_y ** 2 + c1) * (xx + yy + c2)
    return float(np.mean(num / den))


GBUFFER_METRIC_CHANNELS = ("albedo", "normal_enc", "depth_norm", "roughness", "metallic")


def gbuffer_channel_psnr(gen, gt):
    """Per-channel PSNR between a generated and a ground-truth G-buffer."""
    if (gen.height, gen.width) != (gt.height, gt.width):
        raise ValidationError("G-buffer resolution mismatch")
    return {name: psnr(gen.channel(name), gt.channel(name))
            for name in GBUFFER_METRIC_CHANNELS}


def gbuffer_channel_ssim(gen, gt):
    return {name: ssim(gen.channel(name), gt.channel(name))
            for name in GBUFFER_METRIC_CHANNELS}


# -------------------------------------------------------------------- reports

@dataclass
class MetricReport:
    kind: str
    config_hash: str
    seeds: list
    per_sample: list = field(default_factory=list)   # dict rows
    aggregates: dict = field(default_factory=dict)
    extra: dict = field(default_factory=dict)
    runtime_s: float = 0.0

    def add_sample(self, **row):
        self.per_sample.append(row)

    def aggregate(self, keys=None):
        """(Re)compute median/mean per numeric key from the per-sample rows."""
        if not self.per_sample:
            return self.aggregates
        keys = keys or [k for k, v in self.per_sample[0].items()
                        if isinstance(v, (int, float)) and k not in ("id", "seed")]
        agg = {}
        for k in keys:
            vals = np.asarray([row[k] for row in self.per_sample if k in row], dtype=np.float64)
            agg[k] = {"median": float(np.median(vals)), "mean": float(np.mean(vals)),
                      "n": int(vals.size)}
        self.aggregates = agg
        return agg

    def to_json(self):
        return json.dumps({
            "kind": self.kind, "config_hash": self.config_hash, "seeds": self.seeds,
            "aggregates": self.aggregates, "per_sample": self.per_sample,
            "extra": self.extra, "runtime_s": self.runtime_s,
        }, indent=1, sort_keys=True)

    @staticmethod
    def from_json(text):
        doc = json.loads(text)
        return MetricReport(kind=doc["kind"], config_hash=doc["config_hash"],
                            seeds=doc["seeds"], per_sample=doc["per_sample"],
                            aggregates=doc["aggregates"], extra=doc.get("extra", {}),
                            runtime_s=doc.get("runtime_s", 0.0))

    def verify_aggregates(self):
        """Aggregates must equal recomputation from the per-sample rows."""
        stored = dict(self.aggregates)
        recomputed = self.aggregate(keys=list(stored))
        for k, v in stored.items():
            for stat in ("median", "mean"):
                if abs(v[stat] - recomputed[k][stat]) > 1e-12:
                    raise ValidationError(f"aggregate {k}.{stat} does not match per-sample rows")
        return True


class StopWatch:
    def __enter__(self):
        self.t0 = time.time()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.time() - self.t0
        return False
