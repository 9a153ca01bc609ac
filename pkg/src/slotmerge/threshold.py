"""Merge-threshold estimation from the distribution of pairwise Soft-IoU scores.

Per batch: histogram the scores into 100 uniform bins on [0, 1], take
``ln(1 + count)``, and apply the triangle rule. Candidates from several
batches are then aggregated by their mean, or mean minus standard deviation.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CalibrationError, DataError, UsageError

N_BINS = 100
DEFAULT_BATCHES = 11
AGGREGATIONS = ("mean", "mean_minus_std")

# thresholds reported for VOC, COCO, MOVi-C and MOVi-E; reference only
REFERENCE_TAUS = {"voc": 0.036, "coco": 0.04, "movi_c": 0.035, "movi_e": 0.019}


@dataclass
class OverlapHistogram:
    counts: np.ndarray

    @classmethod
    def from_samples(cls, samples, n_bins: int = N_BINS) -> "OverlapHistogram":
        samples = np.asarray(samples, dtype=np.float64)
        if samples.size and (samples.min() < 0.0 or samples.max() > 1.0):
            raise DataError("overlap samples must lie in [0, 1]")
        idx = np.minimum((samples * n_bins).astype(np.int64), n_bins - 1)
        return cls(np.bincount(idx, minlength=n_bins).astype(np.float64))

    @property
    def n_bins(self) -> int:
        return self.counts.shape[0]

    @property
    def transformed(self) -> np.ndarray:
        return np.log1p(self.counts)

    def bin_center(self, k: int) -> float:
        return (k + 0.5) / self.n_bins


@dataclass
class ThresholdEstimate:
    candidates: list
    aggregation: str
    tau: float

    @property
    def std(self) -> float:
        return float(np.std(self.candidates))

    def to_record(self, n_samples: int | None = None) -> dict:
        record = {"candidates": [float(c) for c in self.candidates], "aggregation": self.aggregation,
                  "tau": float(self.tau)}
        if n_samples is not None:
            record["n_samples"] = int(n_samples)
        return record


def triangle_endpoints(hist: OverlapHistogram) -> tuple[int, int]:
    """Peak bin and the farthest nonzero bin on the longer tail."""
    counts = hist.counts
    nonzero = np.flatnonzero(counts > 0)
    if nonzero.size < 2:
        raise CalibrationError("histogram has fewer than two nonzero bins")
    peak = int(np.argmax(hist.transformed))
    left, right = int(nonzero[0]), int(nonzero[-1])
    # ties go to the high-overlap side
    end = right if right - peak >= peak - left else left
    return peak, end


def triangle_threshold(hist: OverlapHistogram) -> float:
    """Bin centre farthest below the peak-to-tail line.

    Coordinates are (bin index, ln(1 + count)). Only bins strictly between
    the peak and the tail end are candidates; "below" means on the side of
    the line facing the zero-count axis, as in the classic triangle method.
    """
    peak, end = triangle_endpoints(hist)
    lo, hi = min(peak, end), max(peak, end)
    if hi - lo < 2:
        raise CalibrationError("no bins between histogram peak and tail end")
    h = hist.transformed
    x0, y0, x1, y1 = float(peak), h[peak], float(end), h[end]
    xs = np.arange(lo + 1, hi, dtype=np.float64)
    ys = h[lo + 1:hi]
    # signed distance of (x, y) beneath the line through the two endpoints
    dx, dy = x1 - x0, y1 - y0
    below = (dx * (y0 - ys) - dy * (x0 - xs)) * np.sign(dx)
    dist = below / np.hypot(dx, dy)
    k = lo + 1 + int(np.argmax(dist))
    return hist.bin_center(k)


def estimate_tau(batches, aggregation: str = "mean", n_bins: int = N_BINS) -> ThresholdEstimate:
    """Aggregate per-batch triangle thresholds; degenerate batches are skipped."""
    if aggregation not in AGGREGATIONS:
        raise UsageError(f"aggregation must be one of {AGGREGATIONS}")
    candidates = []
    for samples in batches:
        try:
            candidates.append(triangle_threshold(OverlapHistogram.from_samples(samples, n_bins)))
        except CalibrationError:
            continue
    if not candidates:
        raise CalibrationError("every batch produced a degenerate overlap histogram")
    return aggregate(candidates, aggregation)


def aggregate(candidates, aggregation: str = "mean") -> ThresholdEstimate:
    if aggregation not in AGGREGATIONS:
        raise UsageError(f"aggregation must be one of {AGGREGATIONS}")
    values = np.asarray(candidates, dtype=np.float64)
    if values.size == 0:
        raise CalibrationError("no threshold candidates")
    tau = float(values.mean())
    if aggregation == "mean_minus_std":
        tau -= float(values.std())
    return ThresholdEstimate(list(values), aggregation, float(np.clip(tau, 0.0, 1.0)))


def pairwise_ious(attn: np.ndarray, active: np.ndarray | None = None) -> np.ndarray:
    """All active-pair Soft-IoUs of one image, in ``(i, j)`` lexicographic order."""
    from .merge import build_overlaps

    state = build_overlaps(attn, active)
    scores = state.iou_matrix()
    return scores[np.isfinite(scores)]


def collect_overlaps(model, data, n_batches: int = DEFAULT_BATCHES, batch_size: int | None = None,
                     seed: int = 0) -> list:
    """Soft-IoU samples from forward passes without merging, one array per batch.

    ``model`` must provide ``attention_maps(images, seed)`` returning a
    ``(B, N, K)`` array, and a ``config.batch_size`` if ``batch_size`` is not
    given.
    """
    if n_batches < 1:
        raise UsageError("need at least one calibration batch")
    n = len(data)
    if n == 0:
        raise DataError("calibration data is empty")
    bs = batch_size or model.config.batch_size
    out = []
    for b in range(n_batches):
        start = (b * bs) % n
        index = np.arange(start, start + bs) % n
        attn = model.attention_maps(data.images[index], seed=list(np.ravel(seed)) + [b])
        out.append(np.concatenate([pairwise_ious(a) for a in attn]))
    if sum(s.size for s in out) == 0:
        raise CalibrationError("no slot pairs to calibrate on (K = 1?)")
    return out
