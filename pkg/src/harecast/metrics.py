"""Forecast-verification metrics for gridded intensity fields.

Fields live in [0, 1] and are mapped to the 0-255 convention at
binarization time.  Contingency counts pool every pixel of a sequence by
default; a per-frame averaging mode exists for diagnostics.  Thresholds at
which neither events nor predictions occur are excluded from multi-
threshold averages rather than scored 0 or 1, so degenerate thresholds
cannot dominate toy-scale scores.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import stdtr

from .errors import ConfigError, ShapeError

__all__ = [
    "ContingencyCounts",
    "TTestResult",
    "SEVIR_THRESHOLDS",
    "METEONET_THRESHOLDS",
    "contingency",
    "csi",
    "csi_m",
    "pooled_csi",
    "hss",
    "ssim",
    "paired_t_test",
    "evaluate_pair",
]

SEVIR_THRESHOLDS = (16, 74, 133, 160, 181, 219)
METEONET_THRESHOLDS = (12, 18, 24, 32)


@dataclass(frozen=True)
class ContingencyCounts:
    hits: int
    false_alarms: int
    misses: int
    correct_negatives: int

    @property
    def total(self) -> int:
        return self.hits + self.false_alarms + self.misses + self.correct_negatives


def _field(x) -> np.ndarray:
    frames = getattr(x, "frames", x)
    return np.asarray(frames, dtype=np.float64)


def contingency(pred, truth, thr: float) -> ContingencyCounts:
    """Pixel counts after binarizing both fields at thr on the 0-255 scale."""
    p = _field(pred)
    t = _field(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    pb = p * 255.0 >= thr
    tb = t * 255.0 >= thr
    return ContingencyCounts(
        hits=int(np.sum(pb & tb)),
        false_alarms=int(np.sum(pb & ~tb)),
        misses=int(np.sum(~pb & tb)),
        correct_negatives=int(np.sum(~pb & ~tb)),
    )


def csi(cc: ContingencyCounts) -> float:
    denom = cc.hits + cc.false_alarms + cc.misses
    return cc.hits / denom if denom else 0.0


def _threshold_active(cc: ContingencyCounts) -> bool:
    return (cc.hits + cc.false_alarms + cc.misses) > 0


def csi_m(pred, truth, thresholds, per_frame: bool = False) -> float:
    """Mean CSI over thresholds, skipping event-free/prediction-free ones.

    Returns nan when every threshold is skipped.  per_frame averages the
    per-frame CSI (over frames where the threshold is active) instead of
    pooling counts over the whole sequence.
    """
    vals = []
    for thr in thresholds:
        if per_frame:
            frames_p, frames_t = _field(pred), _field(truth)
            per = [
                csi(cc)
                for fp, ft in zip(frames_p, frames_t)
                if _threshold_active(cc := contingency(fp, ft, thr))
            ]
            if per:
                vals.append(float(np.mean(per)))
        else:
            cc = contingency(pred, truth, thr)
            if _threshold_active(cc):
                vals.append(csi(cc))
    return float(np.mean(vals)) if vals else math.nan


def _max_pool(frames: np.ndarray, pool: int) -> np.ndarray:
    h, w = frames.shape[-2:]
    if h % pool or w % pool:
        raise ShapeError(f"spatial dims {(h, w)} not divisible by pool {pool}")
    shaped = frames.reshape(*frames.shape[:-2], h // pool, pool, w // pool, pool)
    return shaped.max(axis=(-3, -1))


def pooled_csi(pred, truth, thr: float, pool: int) -> float:
    """CSI after non-overlapping max-pooling of both fields."""
    if pool < 1:
        raise ConfigError(f"pool must be >= 1, got {pool}")
    return csi(contingency(_max_pool(_field(pred), pool), _max_pool(_field(truth), pool), thr))


def hss(cc: ContingencyCounts) -> float:
    """Heidke skill score from the 2x2 contingency table."""
    a, b, c, d = cc.hits, cc.false_alarms, cc.misses, cc.correct_negatives
    denom = (a + c) * (c + d) + (a + b) * (b + d)
    return 2.0 * (a * d - b * c) / denom if denom else 0.0


def ssim(pred, truth, window: int = 7, k1: float = 0.01, k2: float = 0.03, dynamic_range: float = 1.0) -> float:
    """Mean local structural similarity over uniform sliding windows.

    For stacks of frames the per-frame scores are averaged.
    """
    p = _field(pred)
    t = _field(truth)
    if p.shape != t.shape:
        raise ShapeError(f"pred shape {p.shape} != truth shape {t.shape}")
    if p.ndim == 2:
        p, t = p[None], t[None]
    if window > min(p.shape[-2:]):
        raise ShapeError(f"window {window} larger than image {p.shape[-2:]}")
    c1 = (k1 * dynamic_range) ** 2
    c2 = (k2 * dynamic_range) ** 2
    scores = []
    for fp, ft in zip(p, t):
        wp = np.lib.stride_tricks.sliding_window_view(fp, (window, window))
        wt = np.lib.stride_tricks.sliding_window_view(ft, (window, window))
        mu_p = wp.mean(axis=(-2, -1))
        mu_t = wt.mean(axis=(-2, -1))
        var_p = (wp**2).mean(axis=(-2, -1)) - mu_p**2
        var_t = (wt**2).mean(axis=(-2, -1)) - mu_t**2
        cov = (wp * wt).mean(axis=(-2, -1)) - mu_p * mu_t
        s = ((2 * mu_p * mu_t + c1) * (2 * cov + c2)) / (
            (mu_p**2 + mu_t**2 + c1) * (var_p + var_t + c2)
        )
        scores.append(float(s.mean()))
    return float(np.mean(scores))


@dataclass(frozen=True)
class TTestResult:
    t: float
    p: float
    dof: int
    degenerate: bool


def paired_t_test(scores_a, scores_b) -> TTestResult:
    """Two-sided paired t test on equal-length score sequences.

    Zero-variance differences yield a degenerate flag instead of a
    statistic.
    """
    a = np.asarray(scores_a, dtype=np.float64)
    b = np.asarray(scores_b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ShapeError(f"paired sequences disagree: {a.shape} vs {b.shape}")
    n = a.shape[0]
    if n < 2:
        raise ConfigError("paired t test needs length >= 2")
    d = a - b
    sd = float(d.std(ddof=1))
    dof = n - 1
    if sd == 0.0:
        return TTestResult(t=math.nan, p=math.nan, dof=dof, degenerate=True)
    t = float(d.mean() / (sd / math.sqrt(n)))
    p = 2.0 * float(stdtr(dof, -abs(t)))
    return TTestResult(t=t, p=p, dof=dof, degenerate=False)


def evaluate_pair(pred, truth, thresholds, pools=(4, 16)) -> dict:
    """Standard metric bundle for one (prediction, truth) sequence pair."""
    per_threshold = {}
    hss_vals = []
    pooled = {pool: [] for pool in pools}
    for thr in thresholds:
        cc = contingency(pred, truth, thr)
        if _threshold_active(cc):
            per_threshold[thr] = csi(cc)
            hss_vals.append(hss(cc))
            for pool in pools:
                pooled[pool].append(pooled_csi(pred, truth, thr, pool))
    out = {
        "csi_per_threshold": per_threshold,
        "csi_m": float(np.mean(list(per_threshold.values()))) if per_threshold else math.nan,
        "hss": float(np.mean(hss_vals)) if hss_vals else math.nan,
        "ssim": ssim(pred, truth),
    }
    for pool in pools:
        out[f"pooled_csi_{pool}"] = float(np.mean(pooled[pool])) if pooled[pool] else math.nan
    return out
