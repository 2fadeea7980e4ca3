"""Detection and localization metrics.

Conventions are fixed so results are reproducible to the last bit given the
same inputs:

- AUROC uses the rank formulation with averaged ties (equivalent to the
  probability that a random positive outranks a random negative, counting
  ties as half).
- Average precision integrates the precision-recall step function over the
  distinct score thresholds, ties grouped (no interpolation).
- F1-max sweeps the distinct scores as thresholds with ``score >= threshold``
  predicting positive; an empty positive prediction set counts as F1 = 0.
- Per-region overlap (PRO) labels each mask's connected components
  (8-connectivity by default), sweeps the distinct values of the pooled
  pixel maps descending, records (FPR, mean per-region overlap) per
  threshold, anchors the curve at (0, 0), and integrates by trapezoid up to
  ``fpr_limit`` (linear interpolation at the cut), normalized by the limit.

Image metrics score one (scores, labels) pair per image; pixel metrics pool
every pixel of every test image.
"""

from __future__ import annotations

import csv
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import ndimage
from scipy.stats import rankdata

from .errors import (
    ConfigurationError,
    ManifestValidationError,
    ParameterError,
    ShapeError,
    UndefinedMetricError,
)
from .tensor_io import DatasetManifest, read_tensor


@dataclass
class LabeledScores:
    """Parallel score/label arrays; labels are 0 (normal) or 1 (anomalous)."""

    scores: np.ndarray  # (n,) float64
    labels: np.ndarray  # (n,) int64 in {0, 1}

    def __post_init__(self) -> None:
        scores = np.ascontiguousarray(self.scores, dtype=np.float64)
        labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if scores.ndim != 1 or labels.ndim != 1:
            raise ShapeError("scores and labels must be rank-1")
        if scores.shape != labels.shape:
            raise ShapeError(
                f"scores ({scores.shape[0]}) and labels ({labels.shape[0]}) "
                f"disagree on length"
            )
        if scores.shape[0] == 0:
            raise ParameterError("scores are empty")
        if not np.isfinite(scores).all():
            raise ParameterError("scores contain non-finite values")
        if not np.isin(labels, (0, 1)).all():
            raise ParameterError("labels must be 0 or 1")
        self.scores = scores
        self.labels = labels

    @property
    def n_pos(self) -> int:
        return int(self.labels.sum())

    @property
    def n_neg(self) -> int:
        return int(self.labels.shape[0] - self.labels.sum())


def auroc(data: LabeledScores) -> float:
    """Area under the ROC curve, ties averaged."""
    n_pos, n_neg = data.n_pos, data.n_neg
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError(
            f"AUROC needs both classes; got {n_pos} positives, {n_neg} negatives"
        )
    ranks = rankdata(data.scores, method="average")
    pos_rank_sum = float(ranks[data.labels == 1].sum())
    return (pos_rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg)


def _threshold_sweep(data: LabeledScores) -> tuple[np.ndarray, np.ndarray]:
    """Cumulative (tp, fp) after each distinct threshold, descending.

    Element j corresponds to predicting positive for every sample whose score
    is >= the j-th largest distinct score.
    """
    order = np.argsort(-data.scores, kind="stable")
    sorted_scores = data.scores[order]
    sorted_labels = data.labels[order]
    tp = np.cumsum(sorted_labels)
    fp = np.cumsum(1 - sorted_labels)
    # Last position of each run of equal scores.
    boundary = np.nonzero(np.diff(sorted_scores))[0]
    idx = np.concatenate([boundary, [sorted_scores.shape[0] - 1]])
    return tp[idx].astype(np.float64), fp[idx].astype(np.float64)


def average_precision(data: LabeledScores) -> float:
    """Step-integrated area under the precision-recall curve."""
    n_pos = data.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("average precision needs at least one positive")
    tp, fp = _threshold_sweep(data)
    precision = tp / (tp + fp)
    recall = tp / n_pos
    prev_recall = np.concatenate([[0.0], recall[:-1]])
    return float(((recall - prev_recall) * precision).sum())


def f1_max(data: LabeledScores) -> float:
    """Maximum F1 over the distinct-score threshold sweep."""
    n_pos = data.n_pos
    if n_pos == 0:
        raise UndefinedMetricError("F1 needs at least one positive")
    tp, fp = _threshold_sweep(data)
    denom = 2.0 * tp + fp + (n_pos - tp)
    # denom = 0 only if tp = fp = 0 and tp = n_pos, impossible with n_pos > 0.
    f1 = 2.0 * tp / denom
    return float(f1.max())


def pro(
    pixel_maps: Sequence[np.ndarray],
    masks: Sequence[np.ndarray],
    *,
    fpr_limit: float = 0.3,
    connectivity: int = 8,
) -> float:
    """Area under the per-region-overlap curve up to ``fpr_limit``, normalized.

    ``pixel_maps`` are per-image score maps, ``masks`` the matching binary
    ground-truth masks. Regions are connected components of each mask; the
    sweep and the FPR pool every image's pixels together.
    """
    if not (isinstance(fpr_limit, (int, float)) and 0.0 < fpr_limit <= 1.0):
        raise ParameterError(f"fpr_limit must be in (0, 1], got {fpr_limit!r}")
    if connectivity not in (4, 8):
        raise ParameterError(f"connectivity must be 4 or 8, got {connectivity!r}")
    if len(pixel_maps) == 0 or len(pixel_maps) != len(masks):
        raise ParameterError(
            f"need matching non-empty map/mask sequences, got "
            f"{len(pixel_maps)} maps and {len(masks)} masks"
        )
    structure = np.ones((3, 3), dtype=np.int64) if connectivity == 8 else None

    region_scores: list[np.ndarray] = []
    normal_scores: list[np.ndarray] = []
    converted: list[np.ndarray] = []
    for i, (pixel_map, mask) in enumerate(zip(pixel_maps, masks)):
        pixel_map = np.asarray(pixel_map, dtype=np.float64)
        mask = np.asarray(mask)
        if pixel_map.ndim != 2 or pixel_map.shape != mask.shape:
            raise ShapeError(
                f"map/mask pair {i} disagrees on shape: {pixel_map.shape} vs "
                f"{mask.shape}"
            )
        if not np.isfinite(pixel_map).all():
            raise ParameterError(f"pixel map {i} holds non-finite values")
        if not np.isin(mask, (0, 1)).all():
            raise ParameterError(f"mask {i} holds values other than 0/1")
        mask = mask.astype(bool)
        labeled, n_regions = ndimage.label(mask, structure=structure)
        for region in range(1, n_regions + 1):
            region_scores.append(np.sort(pixel_map[labeled == region], axis=None))
        normal_scores.append(pixel_map[~mask].ravel())
        converted.append(pixel_map)

    if not region_scores:
        raise UndefinedMetricError("PRO needs at least one anomalous region")
    normal = np.sort(np.concatenate(normal_scores))
    if normal.size == 0:
        raise UndefinedMetricError("PRO needs at least one normal pixel")

    # Distinct pooled values, descending: one curve point per threshold.
    pooled = np.unique(np.concatenate([m.ravel() for m in converted]))
    thresholds = np.ascontiguousarray(pooled[::-1], dtype=np.float64)

    fpr = (normal.size - np.searchsorted(normal, thresholds, side="left")) / normal.size
    overlap = np.zeros(thresholds.shape[0], dtype=np.float64)
    for scores in region_scores:
        overlap += (
            scores.size - np.searchsorted(scores, thresholds, side="left")
        ) / scores.size
    overlap /= len(region_scores)

    # Anchor at (0, 0): the empty prediction set above the highest threshold.
    fpr = np.concatenate([[0.0], fpr])
    overlap = np.concatenate([[0.0], overlap])

    inside = int((fpr < fpr_limit).sum())  # fpr is non-decreasing
    if inside == fpr.shape[0]:
        # Unreachable when limit <= 1: the lowest threshold predicts every
        # pixel positive, so the last FPR is exactly 1.
        xs, ys = fpr, overlap
    else:
        x0, y0 = fpr[inside - 1], overlap[inside - 1]
        x1, y1 = fpr[inside], overlap[inside]
        if x1 > x0:
            y_cut = y0 + (fpr_limit - x0) * (y1 - y0) / (x1 - x0)
        else:
            y_cut = y1
        xs = np.concatenate([fpr[:inside], [fpr_limit]])
        ys = np.concatenate([overlap[:inside], [y_cut]])
    return float(np.trapezoid(ys, xs) / fpr_limit)


# ---------------------------------------------------------------------------
# Report assembly
# ---------------------------------------------------------------------------


@dataclass
class CategoryMetrics:
    """Image-level metrics plus optional pixel-level metrics for one category."""

    image_auroc: float
    image_ap: float
    image_f1_max: float
    pixel_auroc: float | None = None
    pixel_ap: float | None = None
    pixel_f1_max: float | None = None
    pixel_pro: float | None = None

    def __post_init__(self) -> None:
        for name in (
            "image_auroc", "image_ap", "image_f1_max",
            "pixel_auroc", "pixel_ap", "pixel_f1_max", "pixel_pro",
        ):
            value = getattr(self, name)
            if value is not None and not (0.0 <= value <= 1.0):
                raise ParameterError(f"{name}={value!r} is outside [0, 1]")

    def to_dict(self) -> dict:
        out: dict = {
            "image": {
                "auroc": self.image_auroc,
                "ap": self.image_ap,
                "f1_max": self.image_f1_max,
            }
        }
        if self.pixel_auroc is None:
            out["pixel"] = None
        else:
            out["pixel"] = {
                "auroc": self.pixel_auroc,
                "ap": self.pixel_ap,
                "f1_max": self.pixel_f1_max,
                "pro": self.pixel_pro,
            }
        return out


@dataclass
class EvaluationReport:
    per_category: dict[str, CategoryMetrics]
    aggregate: CategoryMetrics
    metadata: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "categories": {
                name: cm.to_dict() for name, cm in self.per_category.items()
            },
            "aggregate": self.aggregate.to_dict(),
            "metadata": self.metadata,
        }


def evaluate(
    results: Sequence,
    manifest: DatasetManifest,
    *,
    fpr_limit: float = 0.3,
    connectivity: int = 8,
    pixel_metrics: bool | None = None,
    metadata: dict | None = None,
) -> EvaluationReport:
    """Score a finished run against the manifest's labels and masks.

    ``results`` are AnomalyResult-like objects (``image_id``, ``s``,
    ``s_vis``, ``s_text``, ``pixel_map``). Every test entry in the manifest
    must be present. ``pixel_metrics=None`` enables pixel metrics
    automatically when every anomalous entry carries a mask; ``True`` demands
    them (ConfigurationError if a mask is missing); ``False`` skips them.
    """
    by_id = {r.image_id: r for r in results}
    missing = [e.id for e in manifest.test if e.id not in by_id]
    if missing:
        raise ConfigurationError(
            f"results are missing {len(missing)} test entries, first: {missing[0]!r}"
        )

    scores = np.array([by_id[e.id].s for e in manifest.test], dtype=np.float64)
    labels = np.array([e.label for e in manifest.test], dtype=np.int64)
    image_scores = LabeledScores(scores=scores, labels=labels)
    image = {
        "auroc": auroc(image_scores),
        "ap": average_precision(image_scores),
        "f1_max": f1_max(image_scores),
    }

    anomalous = [e for e in manifest.test if e.label == 1]
    have_all_masks = bool(anomalous) and all(e.mask is not None for e in anomalous)
    if pixel_metrics is None:
        pixel_metrics = have_all_masks
    if pixel_metrics and not have_all_masks:
        lacking = next((e.id for e in anomalous if e.mask is None), None)
        raise ConfigurationError(
            "pixel metrics requested but an anomalous entry has no mask"
            + (f": {lacking!r}" if lacking else " (and there are no anomalous entries)")
        )

    pixel = None
    pro_value = None
    if pixel_metrics:
        maps: list[np.ndarray] = []
        masks: list[np.ndarray] = []
        h, w = manifest.image_size
        for entry in manifest.test:
            pixel_map = np.asarray(by_id[entry.id].pixel_map, dtype=np.float64)
            if pixel_map.shape != (h, w):
                raise ShapeError(
                    f"pixel map of {entry.id!r} has shape {pixel_map.shape}, "
                    f"expected {(h, w)}"
                )
            if entry.mask is not None:
                mask = read_tensor(
                    manifest.resolve(entry.mask),
                    expected_shape=(h, w),
                    expected_dtype=np.uint8,
                )
                if not np.isin(mask, (0, 1)).all():
                    raise ManifestValidationError(
                        f"mask of {entry.id!r} holds values other than 0/1"
                    )
                if entry.label == 0 and mask.any():
                    raise ManifestValidationError(
                        f"{entry.id!r} is labeled normal but its mask has "
                        f"anomalous pixels"
                    )
            else:
                mask = np.zeros((h, w), dtype=np.uint8)
            maps.append(pixel_map)
            masks.append(mask)
        pooled = LabeledScores(
            scores=np.concatenate([m.ravel() for m in maps]),
            labels=np.concatenate([m.ravel().astype(np.int64) for m in masks]),
        )
        pixel = {
            "auroc": auroc(pooled),
            "ap": average_precision(pooled),
            "f1_max": f1_max(pooled),
        }
        pro_value = pro(maps, masks, fpr_limit=fpr_limit, connectivity=connectivity)

    category_metrics = CategoryMetrics(
        image_auroc=image["auroc"],
        image_ap=image["ap"],
        image_f1_max=image["f1_max"],
        pixel_auroc=None if pixel is None else pixel["auroc"],
        pixel_ap=None if pixel is None else pixel["ap"],
        pixel_f1_max=None if pixel is None else pixel["f1_max"],
        pixel_pro=pro_value,
    )
    return EvaluationReport(
        per_category={manifest.category: category_metrics},
        aggregate=category_metrics,
        metadata=dict(metadata) if metadata else {},
    )


_CSV_COLUMNS = (
    "category",
    "image_auroc",
    "image_ap",
    "image_f1_max",
    "pixel_auroc",
    "pixel_ap",
    "pixel_f1_max",
    "pixel_pro",
)


def write_report(
    report: EvaluationReport,
    json_path: str | os.PathLike,
    csv_path: str | os.PathLike,
) -> None:
    """Write the report as JSON plus a one-row-per-category CSV."""
    Path(json_path).write_text(
        json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(_CSV_COLUMNS)
        rows = list(report.per_category.items()) + [("aggregate", report.aggregate)]
        for name, cm in rows:
            writer.writerow(
                [
                    name,
                    repr(cm.image_auroc),
                    repr(cm.image_ap),
                    repr(cm.image_f1_max),
                    "" if cm.pixel_auroc is None else repr(cm.pixel_auroc),
                    "" if cm.pixel_ap is None else repr(cm.pixel_ap),
                    "" if cm.pixel_f1_max is None else repr(cm.pixel_f1_max),
                    "" if cm.pixel_pro is None else repr(cm.pixel_pro),
                ]
            )
