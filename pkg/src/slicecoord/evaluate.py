"""Inference-side measurement: score curves, calibrated three-zone
classification, ordering metrics, histograms, and anomaly screening.

Scores have an arbitrary training-time scale, so everything here is
either scale-free (correlations, rank metrics) or derived from the
scores themselves (thresholds from calibration volumes, histogram bins
from observed range).
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import stats

from . import network
from .network import ModelParams


class EvaluateError(ValueError):
    """Raised on invalid metric/calibration inputs."""


_BATCH = 64


@dataclass
class ScoreCurve:
    """Per-slice scores of one volume plus its linear-trend summary.

    ``degenerate`` marks zero score variance, where Pearson r is
    reported as 0 instead of erroring: anomaly scans must not abort on
    pathological volumes.
    """

    volume_id: str
    scores: np.ndarray  # (n,) one score per slice, ascending slice index
    pearson_r: float
    slope: float
    intercept: float
    degenerate: bool = False

    def points(self) -> list[tuple[int, float]]:
        return list(enumerate(self.scores.tolist()))


@dataclass(frozen=True)
class Thresholds:
    """Two score cut points: class 0 below t1, class 1 in [t1, t2), class 2 above."""

    t1: float
    t2: float

    def __post_init__(self) -> None:
        if not (np.isfinite(self.t1) and np.isfinite(self.t2)):
            raise EvaluateError(f"thresholds must be finite, got ({self.t1}, {self.t2})")
        if not self.t1 < self.t2:
            raise EvaluateError(f"thresholds must satisfy t1 < t2, got ({self.t1}, {self.t2})")


@dataclass(frozen=True)
class AnomalyReport:
    volume_id: str
    pearson_r: float
    threshold_r: float
    flagged: bool
    direction: int  # sign of the fitted slope
    degenerate: bool = False


@dataclass(frozen=True)
class OrderingMetrics:
    pairwise_order_accuracy: float
    spearman: float
    r_squared: float


@dataclass
class Histogram:
    """Per-class score counts over one shared set of bins."""

    bin_edges: np.ndarray  # (n_bins + 1,)
    counts: dict[int, np.ndarray] = field(default_factory=dict)


def _forward_scores(params: ModelParams, volume: np.ndarray) -> np.ndarray:
    out = []
    for start in range(0, volume.shape[0], _BATCH):
        batch = volume[start:start + _BATCH][:, None, :, :]
        graph = network.build_graph(params, batch)
        out.append(graph.scores.value.reshape(-1))
    return np.concatenate(out)


def _linear_trend(scores: np.ndarray) -> tuple[float, float, float, bool]:
    """(pearson r, slope, intercept, degenerate) of score vs slice index."""
    n = scores.shape[0]
    index = np.arange(n, dtype=float)
    if n < 2 or np.ptp(scores) == 0.0:
        return 0.0, 0.0, float(np.mean(scores)), True
    r = float(np.corrcoef(index, scores)[0, 1])
    slope, intercept = np.polyfit(index, scores, 1)
    return r, float(slope), float(intercept), False


def score_volume(params: ModelParams, volume: np.ndarray, volume_id: str = "") -> ScoreCurve:
    """Score every slice of a (n, H, W) stack; no cross-slice state."""
    volume = np.asarray(volume, dtype=float)
    if volume.ndim != 3:
        raise EvaluateError(f"volume must be (n, H, W), got shape {volume.shape}")
    scores = _forward_scores(params, volume)
    r, slope, intercept, degenerate = _linear_trend(scores)
    return ScoreCurve(volume_id=volume_id, scores=scores, pearson_r=r,
                      slope=slope, intercept=intercept, degenerate=degenerate)


def extract_features(params: ModelParams, volume: np.ndarray) -> np.ndarray:
    """Per-slice pooled feature vectors, shape (n, conv6-channels)."""
    volume = np.asarray(volume, dtype=float)
    if volume.ndim != 3:
        raise EvaluateError(f"volume must be (n, H, W), got shape {volume.shape}")
    out = []
    for start in range(0, volume.shape[0], _BATCH):
        batch = volume[start:start + _BATCH][:, None, :, :]
        graph = network.build_graph(params, batch)
        out.append(graph.pooled.value)
    return np.concatenate(out, axis=0)


def latent_bands(latent: np.ndarray) -> np.ndarray:
    """Three-zone labels from latent thirds: [0,1/3) -> 0, [1/3,2/3) -> 1, rest 2."""
    z = np.asarray(latent, dtype=float)
    return np.where(z < 1.0 / 3.0, 0, np.where(z < 2.0 / 3.0, 1, 2))


def calibrate_thresholds(scores: np.ndarray, labels: np.ndarray) -> Thresholds:
    """Exhaustive midpoint scan maximizing calibration accuracy.

    Candidate cuts are midpoints of adjacent distinct sorted scores.
    Among accuracy ties the pair with the widest combined score gap
    wins, then the lexicographically smallest (t1, t2).
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise EvaluateError(
            f"scores and labels must align, got {scores.shape} and {labels.shape}")
    missing = {0, 1, 2} - set(np.unique(labels).tolist())
    if missing:
        raise EvaluateError(f"calibration slices missing class(es) {sorted(missing)}")

    order = np.argsort(scores, kind="stable")
    s = scores[order]
    y = labels[order]
    step = np.nonzero(np.diff(s) > 0)[0]  # cut after sorted position i
    if step.size < 2:
        raise EvaluateError("need at least 3 distinct score values to place two cuts")
    cuts = (s[step] + s[step + 1]) / 2.0
    gaps = s[step + 1] - s[step]
    boundary = step + 1  # sorted count strictly below each cut

    prefix = np.stack([np.concatenate(([0], np.cumsum(y == c))) for c in range(3)])
    below = prefix[:, boundary]  # (3, n_cuts) per-class counts under each cut
    # correct = #0 below t1 + #1 in [t1, t2) + #2 at/above t2, for all pairs
    correct = (below[0][:, None]
               + (below[1][None, :] - below[1][:, None])
               + (prefix[2, -1] - below[2][None, :]))
    a_idx, b_idx = np.triu_indices(cuts.size, k=1)
    pair_correct = correct[a_idx, b_idx]
    best = pair_correct.max()
    tied = np.nonzero(pair_correct == best)[0]
    tie_gap = gaps[a_idx[tied]] + gaps[b_idx[tied]]
    widest = tied[tie_gap == tie_gap.max()]
    keys = np.stack([cuts[a_idx[widest]], cuts[b_idx[widest]]])
    pick = widest[np.lexsort((keys[1], keys[0]))[0]]
    return Thresholds(t1=float(cuts[a_idx[pick]]), t2=float(cuts[b_idx[pick]]))


def classify_slices(scores: np.ndarray, thresholds: Thresholds) -> np.ndarray:
    """Half-open zones: score < t1 -> 0, [t1, t2) -> 1, >= t2 -> 2."""
    scores = np.asarray(scores, dtype=float)
    return np.where(scores < thresholds.t1, 0,
                    np.where(scores < thresholds.t2, 1, 2))


def accuracy(predicted: np.ndarray, truth: np.ndarray) -> float:
    predicted = np.asarray(predicted).reshape(-1)
    truth = np.asarray(truth).reshape(-1)
    if predicted.shape != truth.shape:
        raise EvaluateError(
            f"label arrays must align, got {predicted.shape} and {truth.shape}")
    if predicted.size == 0:
        raise EvaluateError("cannot compute accuracy of zero slices")
    return float(np.mean(predicted == truth))


def misclassified_near_threshold(scores: np.ndarray, predicted: np.ndarray,
                                 truth: np.ndarray, thresholds: Thresholds,
                                 unit: float = 1.0) -> float:
    """Fraction of misclassified slices within ``unit`` of a threshold.

    Vacuously 1.0 when nothing is misclassified.
    """
    scores = np.asarray(scores, dtype=float).reshape(-1)
    wrong = np.asarray(predicted).reshape(-1) != np.asarray(truth).reshape(-1)
    if not np.any(wrong):
        return 1.0
    near = np.minimum(np.abs(scores - thresholds.t1),
                      np.abs(scores - thresholds.t2)) <= unit
    return float(np.sum(wrong & near) / np.sum(wrong))


def ordering_metrics(scores: np.ndarray, latent: np.ndarray) -> OrderingMetrics:
    """(pairwise order accuracy, Spearman, R^2) of scores against ground truth."""
    scores = np.asarray(scores, dtype=float).reshape(-1)
    latent = np.asarray(latent, dtype=float).reshape(-1)
    if scores.shape != latent.shape:
        raise EvaluateError(
            f"scores and latent must align, got {scores.shape} and {latent.shape}")
    if scores.size < 2:
        raise EvaluateError("ordering metrics need at least 2 slices")
    ds = np.sign(scores[None, :] - scores[:, None])
    dz = np.sign(latent[None, :] - latent[:, None])
    iu = np.triu_indices(scores.size, k=1)
    informative = dz[iu] != 0
    if not np.any(informative):
        raise EvaluateError("latent coordinates are all equal")
    pairwise = float(np.mean(ds[iu][informative] == dz[iu][informative]))
    if np.ptp(scores) == 0.0:
        return OrderingMetrics(pairwise, 0.0, 0.0)
    spearman = float(stats.spearmanr(scores, latent).statistic)
    r_squared = float(np.corrcoef(scores, latent)[0, 1] ** 2)
    return OrderingMetrics(pairwise, spearman, r_squared)


def detect_anomalies(params: ModelParams, volumes: dict[str, np.ndarray],
                     threshold_r: float = 0.99) -> list[AnomalyReport]:
    """One report per volume, sorted ascending by r (most anomalous first)."""
    reports = []
    for volume_id in volumes:
        curve = score_volume(params, volumes[volume_id], volume_id)
        reports.append(AnomalyReport(
            volume_id=volume_id,
            pearson_r=curve.pearson_r,
            threshold_r=threshold_r,
            flagged=bool(curve.pearson_r < threshold_r),
            direction=int(np.sign(curve.slope)),
            degenerate=curve.degenerate,
        ))
    return sorted(reports, key=lambda rep: (rep.pearson_r, rep.volume_id))


def score_histogram(scores: np.ndarray, labels: np.ndarray, bin_width: float) -> Histogram:
    """Counts per class over one bin grid anchored at a bin_width multiple."""
    if not bin_width > 0:
        raise EvaluateError(f"bin width must be > 0, got {bin_width}")
    scores = np.asarray(scores, dtype=float).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    if scores.shape != labels.shape:
        raise EvaluateError(
            f"scores and labels must align, got {scores.shape} and {labels.shape}")
    if scores.size == 0:
        raise EvaluateError("cannot bin zero scores")
    lo = np.floor(scores.min() / bin_width) * bin_width
    n_bins = max(1, int(np.ceil((scores.max() - lo) / bin_width)))
    edges = lo + bin_width * np.arange(n_bins + 1)
    if scores.max() > edges[-1]:  # roundoff can leave the max just outside
        edges = np.append(edges, edges[-1] + bin_width)
    hist = Histogram(bin_edges=edges)
    for c in np.unique(labels):
        hist.counts[int(c)], _ = np.histogram(scores[labels == c], bins=edges)
    return hist


# --- CSV export (plotting happens elsewhere; these are the data contracts)


def write_curves_csv(curves: list[ScoreCurve], path) -> None:
    lines = ["volume_id,slice_index,score"]
    for curve in curves:
        lines.extend(f"{curve.volume_id},{i},{repr(float(s))}"
                     for i, s in enumerate(curve.scores))
    Path(path).write_text("\n".join(lines) + "\n")


def write_anomaly_csv(reports: list[AnomalyReport], path) -> None:
    lines = ["volume_id,pearson_r,flagged,slope_sign"]
    lines.extend(
        f"{rep.volume_id},{repr(float(rep.pearson_r))},"
        f"{'true' if rep.flagged else 'false'},{rep.direction}"
        for rep in reports)
    Path(path).write_text("\n".join(lines) + "\n")


def write_histogram_csv(hist: Histogram, path) -> None:
    lines = ["class,bin_low,bin_high,count"]
    for c in sorted(hist.counts):
        counts = hist.counts[c]
        lines.extend(
            f"{c},{repr(float(hist.bin_edges[b]))},"
            f"{repr(float(hist.bin_edges[b + 1]))},{int(counts[b])}"
            for b in range(counts.size))
    Path(path).write_text("\n".join(lines) + "\n")
