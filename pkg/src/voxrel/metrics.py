"""Classification metrics, ROC/AUC, region relevance tables, baseline."""

from __future__ import annotations

from dataclasses import dataclass
from decimal import ROUND_HALF_DOWN, Decimal

import numpy as np

from voxrel.preprocess import DatasetManifest
from voxrel.volume import load_mask


def balanced_accuracy(sensitivity: float, specificity: float) -> float:
    return (sensitivity + specificity) / 2.0


def format_percent(fraction: float) -> str:
    """Format a fraction as a percent with two decimals.

    Exact decimal ties (x.xx5) round toward zero, matching the reporting
    convention of the reference results tables.
    """
    return str((Decimal(repr(float(fraction))) * 100).quantize(Decimal("0.01"), rounding=ROUND_HALF_DOWN))


def classification_metrics(scores, labels, threshold: float = 0.5) -> dict:
    """Sensitivity/specificity/accuracy of thresholded probabilities.

    Balanced accuracy is None when a class is absent.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if scores.shape != labels.shape or scores.ndim != 1 or len(scores) == 0:
        raise ValueError("scores and labels must be equal-length 1D sequences")
    preds = scores >= threshold
    pos = labels == 1
    neg = labels == 0
    tp = int(np.sum(preds & pos))
    tn = int(np.sum(~preds & neg))
    sensitivity = tp / int(pos.sum()) if pos.any() else None
    specificity = tn / int(neg.sum()) if neg.any() else None
    if sensitivity is None or specificity is None:
        bal = None
    else:
        bal = balanced_accuracy(sensitivity, specificity)
    return {
        "sensitivity": sensitivity,
        "specificity": specificity,
        "balanced_accuracy": bal,
        "accuracy": float(np.mean(preds == pos)),
    }


def roc_auc(scores, labels) -> dict:
    """ROC points over all score thresholds and the trapezoidal AUC.

    The AUC equals the Mann-Whitney statistic with ties counted half.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    n_pos = int(np.sum(labels == 1))
    n_neg = int(np.sum(labels == 0))
    if n_pos == 0 or n_neg == 0:
        raise ValueError("ROC needs both classes present")
    order = np.argsort(-scores, kind="stable")
    points = [(0.0, 0.0, float("inf"))]
    tp = fp = 0
    i = 0
    while i < len(order):
        thr = scores[order[i]]
        while i < len(order) and scores[order[i]] == thr:
            if labels[order[i]] == 1:
                tp += 1
            else:
                fp += 1
            i += 1
        points.append((fp / n_neg, tp / n_pos, float(thr)))
    auc = 0.0
    for (x0, y0, _), (x1, y1, _) in zip(points, points[1:]):
        auc += (x1 - x0) * (y0 + y1) / 2.0
    return {"auc": auc, "roc_points": points}


@dataclass(frozen=True)
class RegionRow:
    region: str
    relevance_sum: float
    relevance_mean: float
    voxel_count: int


@dataclass
class RegionTable:
    """Per-region relevance statistics; background (label 0) kept separate."""

    rows: list[RegionRow]
    background: RegionRow

    def by_region(self) -> dict[str, RegionRow]:
        return {r.region: r for r in self.rows}


def region_relevance(heatmap_data: np.ndarray, labels: np.ndarray, names: list[str]) -> RegionTable:
    """Aggregate signed relevance per labeled region.

    ``labels`` is a u16 label volume; ``names[k]`` names label k, with
    names[0] the background.
    """
    if heatmap_data.shape != labels.shape:
        raise ValueError(f"dims mismatch: heatmap {heatmap_data.shape} vs labels {labels.shape}")
    data = heatmap_data.astype(np.float64).ravel()
    lab = labels.astype(np.int64).ravel()
    n_labels = len(names)
    sums = np.bincount(lab, weights=data, minlength=n_labels)
    counts = np.bincount(lab, minlength=n_labels)
    rows = []
    for k in range(1, n_labels):
        if counts[k] == 0:
            continue
        rows.append(RegionRow(names[k], float(sums[k]), float(sums[k] / counts[k]), int(counts[k])))
    bg_mean = float(sums[0] / counts[0]) if counts[0] else 0.0
    background = RegionRow(names[0] if names else "background", float(sums[0]), bg_mean, int(counts[0]))
    return RegionTable(rows, background)


def mean_region_table(tables: list[RegionTable]) -> RegionTable:
    """Average per-region statistics over a group of subject tables."""
    if not tables:
        raise ValueError("empty table group")
    first = tables[0]
    regions = [r.region for r in first.rows]
    for t in tables[1:]:
        if [r.region for r in t.rows] != regions:
            raise ValueError("region sets differ between tables")
    rows = []
    for i, region in enumerate(regions):
        sums = [t.rows[i].relevance_sum for t in tables]
        means = [t.rows[i].relevance_mean for t in tables]
        rows.append(RegionRow(region, float(np.mean(sums)), float(np.mean(means)), first.rows[i].voxel_count))
    bg_sums = [t.background.relevance_sum for t in tables]
    bg_means = [t.background.relevance_mean for t in tables]
    background = RegionRow(first.background.region, float(np.mean(bg_sums)), float(np.mean(bg_means)), first.background.voxel_count)
    return RegionTable(rows, background)


def top_regions(tables_by_class: dict[int, RegionTable], k: int = 30) -> list[dict]:
    """Rank regions by the summed absolute per-class relevance means."""
    classes = sorted(tables_by_class)
    if not classes:
        raise ValueError("no class tables given")
    maps = {c: tables_by_class[c].by_region() for c in classes}
    names = [r.region for r in tables_by_class[classes[0]].rows]
    for c in classes[1:]:
        if set(maps[c]) != set(names):
            raise ValueError("class tables cover different region sets")
    ranked = []
    for region in names:
        key = sum(abs(maps[c][region].relevance_mean) for c in classes)
        ranked.append(
            {
                "region": region,
                "rank_key": float(key),
                "means": {c: maps[c][region].relevance_mean for c in classes},
            }
        )
    ranked.sort(key=lambda r: (-r["rank_key"], r["region"]))
    return ranked[: int(k)]


def class_relevance_summary(sums_by_class: dict[int, list[float]]) -> dict[int, dict]:
    """Mean and population std of per-subject relevance sums, per class."""
    out = {}
    for label, sums in sums_by_class.items():
        if len(sums) == 0:
            raise ValueError(f"class {label} has no heatmaps")
        arr = np.asarray(sums, dtype=np.float64)
        out[label] = {"mean": float(arr.mean()), "std": float(arr.std()), "n": len(sums)}
    return out


def lesion_volumes(manifest: DatasetManifest, split: str) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Lesion-mask voxel counts (unit voxel volume) and labels for a split."""
    feats, labels, ids = [], [], []
    for s in manifest.split_subjects(split):
        if s.lesion_mask_path is None:
            raise ValueError(f"subject {s.id} has no lesion mask")
        m = load_mask(manifest.resolve(s.lesion_mask_path))
        feats.append(float(m.count()))
        labels.append(s.label)
        ids.append(s.id)
    return np.asarray(feats, dtype=np.float64), np.asarray(labels, dtype=np.int64), ids


def lesion_load_baseline(manifest: DatasetManifest, iters: int = 2000, lr: float = 0.5) -> dict:
    """Logistic regression on the scalar lesion volume.

    Fit by full-batch gradient descent on the train split, evaluated on the
    holdout split. Stands in for the reference lesion-load classifier.
    """
    x_tr, y_tr, _ = lesion_volumes(manifest, "train")
    x_te, y_te, _ = lesion_volumes(manifest, "holdout")
    mu, sd = x_tr.mean(), x_tr.std()
    if sd == 0:
        sd = 1.0
    xs_tr = (x_tr - mu) / sd
    xs_te = (x_te - mu) / sd
    w = b = 0.0
    n = len(xs_tr)
    for _ in range(iters):
        p = 1.0 / (1.0 + np.exp(-(w * xs_tr + b)))
        err = p - y_tr
        w -= lr * float(err @ xs_tr) / n
        b -= lr * float(err.sum()) / n
    probs = 1.0 / (1.0 + np.exp(-(w * xs_te + b)))
    out = classification_metrics(probs, y_te)
    out.update(roc_auc(probs, y_te))
    out["weight"] = w
    out["intercept"] = b
    return out
