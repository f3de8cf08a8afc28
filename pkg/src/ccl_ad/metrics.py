"""Detection and localization metrics plus the class-separation diagnostic."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

METRIC_NAMES = ("i_auroc", "p_auroc", "pro")
V_SCORE_NOTE = "v_measure: V-measure of k-means(C) clusters of test-time global vectors vs. true class ids"
_EIGHT = np.ones((3, 3), dtype=int)


class MetricError(ValueError):
    pass


def auroc(scores, labels) -> float:
    """Area under the ROC curve via the Mann-Whitney rank statistic (ties count 1/2)."""
    scores = np.asarray(scores, dtype=np.float64).ravel()
    labels = np.asarray(labels).astype(bool).ravel()
    if scores.shape != labels.shape:
        raise MetricError("scores and labels differ in length")
    n_pos = int(labels.sum())
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("auroc needs both positive and negative labels")
    # midranks doubled so every quantity stays an exact integer
    ranks2 = (2 * rankdata(scores, method="average")).astype(np.int64)
    u2 = int(ranks2[labels].sum()) - n_pos * (n_pos + 1)
    return u2 / (2 * n_pos * n_neg)


def pixel_auroc(maps, masks) -> float:
    """AUROC over the pooled pixels of all maps."""
    scores = np.concatenate([np.asarray(m, dtype=np.float64).ravel() for m in maps])
    labels = np.concatenate([np.asarray(m).astype(bool).ravel() for m in masks])
    if not labels.any():
        raise MetricError("no anomalous pixels in the pool")
    return auroc(scores, labels)


def _pro_curve(maps: np.ndarray, masks: np.ndarray, thresholds: np.ndarray):
    """(fpr, mean region overlap) for ``map >= t`` at each threshold."""
    regions = []
    for i in range(len(masks)):
        labelled, n = ndimage.label(masks[i], structure=_EIGHT)
        for r in range(1, n + 1):
            regions.append((i, labelled == r))
    if not regions:
        raise MetricError("no connected anomalous region in the pool")
    normal = ~masks
    n_normal = normal.sum()
    fprs, pros = [], []
    for t in thresholds:
        pred = maps >= t
        fprs.append((pred & normal).sum() / n_normal if n_normal else 0.0)
        pros.append(np.mean([pred[i][region].mean() for i, region in regions]))
    return np.asarray(fprs), np.asarray(pros)


def _truncated_area(fpr: np.ndarray, pro: np.ndarray, limit: float) -> float:
    keep = fpr <= limit
    x, y = list(fpr[keep]), list(pro[keep])
    beyond = np.nonzero(~keep)[0]
    if beyond.size:
        j = beyond[0]
        x0, y0 = (fpr[j - 1], pro[j - 1]) if j > 0 else (0.0, 0.0)
        x1, y1 = fpr[j], pro[j]
        y_lim = y0 + (y1 - y0) * (limit - x0) / (x1 - x0) if x1 > x0 else y1
        x.append(limit)
        y.append(y_lim)
    return float(np.trapezoid(y, x))


def aupro(maps, masks, fpr_limit: float = 0.3, thresholds: int = 200) -> float:
    """Normalised area under the per-region-overlap vs FPR curve up to ``fpr_limit``.

    Regions are 8-connected components of the ground truth. When the pool has
    at most ``thresholds`` distinct scores every distinct score is used as a
    threshold (exact curve); otherwise ``thresholds`` evenly spaced values.
    """
    maps = np.stack([np.asarray(m, dtype=np.float64) for m in maps])
    masks = np.stack([np.asarray(m).astype(bool) for m in masks])
    distinct = np.unique(maps)
    if distinct.size <= thresholds:
        ts = distinct
    else:
        ts = np.linspace(distinct[0], distinct[-1], thresholds)
    ts = ts[::-1]  # high to low: fpr and overlap both grow along the sweep
    fpr, pro = _pro_curve(maps, masks, ts)
    fpr = np.concatenate([[0.0], fpr])
    pro = np.concatenate([[0.0], pro])
    # round-off in the trapezoid sum can overshoot the [0, 1] range by an ulp
    return min(max(_truncated_area(fpr, pro, fpr_limit) / fpr_limit, 0.0), 1.0)


def _entropy(counts: np.ndarray) -> float:
    p = counts[counts > 0] / counts.sum()
    return float(-(p * np.log(p)).sum())


def v_measure(predicted, true) -> float:
    """Harmonic mean of homogeneity and completeness."""
    predicted = np.asarray(predicted).ravel()
    true = np.asarray(true).ravel()
    if predicted.size == 0:
        raise MetricError("empty label lists")
    if predicted.shape != true.shape:
        raise MetricError("label lists differ in length")
    _, ci = np.unique(true, return_inverse=True)
    _, ki = np.unique(predicted, return_inverse=True)
    table = np.zeros((ci.max() + 1, ki.max() + 1))
    np.add.at(table, (ci, ki), 1)
    n = table.sum()
    h_c = _entropy(table.sum(axis=1))
    h_k = _entropy(table.sum(axis=0))
    nz = table > 0
    col = np.broadcast_to(table.sum(axis=0, keepdims=True), table.shape)
    row = np.broadcast_to(table.sum(axis=1, keepdims=True), table.shape)
    h_c_given_k = -float((table[nz] / n * np.log(table[nz] / col[nz])).sum())
    h_k_given_c = -float((table[nz] / n * np.log(table[nz] / row[nz])).sum())
    homogeneity = 1.0 if h_c == 0 else 1.0 - h_c_given_k / h_c
    completeness = 1.0 if h_k == 0 else 1.0 - h_k_given_c / h_k
    if homogeneity + completeness == 0:
        return 0.0
    return float(2 * homogeneity * completeness / (homogeneity + completeness))


@dataclass
class MetricsReport:
    per_class: dict
    mean: dict
    v_measure: Optional[float] = None
    config_hash: str = ""
    sample_counts: dict = field(default_factory=dict)
    notes: list = field(default_factory=lambda: [V_SCORE_NOTE])

    def to_dict(self) -> dict:
        return asdict(self)

    def write(self, out_dir) -> tuple:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        json_path = out_dir / "metrics.json"
        json_path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        csv_path = out_dir / "metrics.csv"
        with open(csv_path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["class", *METRIC_NAMES])
            for name, row in self.per_class.items():
                writer.writerow([name, *(_fmt(row.get(m)) for m in METRIC_NAMES)])
            writer.writerow(["mean", *(_fmt(self.mean.get(m)) for m in METRIC_NAMES)])
        return json_path, csv_path

    @classmethod
    def read(cls, path) -> "MetricsReport":
        return cls(**json.loads(Path(path).read_text()))


def _fmt(value) -> str:
    return "" if value is None else f"{value:.6f}"


def summarize(per_class: dict) -> dict:
    mean = {}
    for m in METRIC_NAMES:
        vals = [row[m] for row in per_class.values() if row.get(m) is not None]
        mean[m] = float(np.mean(vals)) if vals else None
    return mean


def _safe(metric, *args):
    try:
        return float(metric(*args))
    except MetricError as exc:
        logger.warning("metric %s skipped: %s", metric.__name__, exc)
        return None


def evaluate(model, index, seed: int = 0, batch_size: int = 32, use_masks_as_maps: bool = False,
             config_hash: str = "") -> MetricsReport:
    """Score every test sample and assemble per-class and mean metrics.

    ``use_masks_as_maps`` replaces predicted maps (and scores) with ground
    truth, an oracle hook for pipeline checks.
    """
    from .pseudo_labels import fit_kmeans
    from .scoring import score_samples

    tests = index.test_samples
    if not tests:
        raise MetricError("test split is empty")
    maps, g = score_samples(model, tests, batch_size=batch_size)
    if use_masks_as_maps:
        maps = [s.full_mask().astype(np.float64) for s in tests]
        scores = np.array([float(s.is_anomalous) for s in tests])
    else:
        scores = np.array([m.image_score for m in maps])
        maps = [m.map for m in maps]

    per_class, counts = {}, {}
    for cid, name in enumerate(index.class_names):
        idx = [i for i, s in enumerate(tests) if s.class_id == cid]
        counts[name] = len(idx)
        if not idx:
            logger.warning("class %s has no test samples", name)
            per_class[name] = {m: None for m in METRIC_NAMES}
            continue
        labels = [tests[i].is_anomalous for i in idx]
        cmaps = [maps[i] for i in idx]
        cmasks = [tests[i].full_mask() for i in idx]
        per_class[name] = {
            "i_auroc": _safe(auroc, scores[idx], labels),
            "p_auroc": _safe(pixel_auroc, cmaps, cmasks),
            "pro": _safe(aupro, cmaps, cmasks),
        }

    v = None
    if index.class_count >= 2 and len(tests) >= index.class_count:
        km = fit_kmeans(g, index.class_count, seed=seed)
        v = v_measure(km.predict(g), [s.class_id for s in tests])
    return MetricsReport(per_class=per_class, mean=summarize(per_class), v_measure=v,
                         config_hash=config_hash, sample_counts=counts)
