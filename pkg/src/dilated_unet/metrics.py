"""Segmentation metrics: confusion counts, DSC/SE/SP/ACC and Hausdorff distance.

Degenerate denominators (nothing to find and nothing predicted) score 1.0.
Hausdorff distance is undefined when either foreground set is empty and is
reported as ``None`` rather than 0.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

from .errors import DatasetError, ShapeError


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    tn: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.tn + self.fn

    def __add__(self, other: "ConfusionCounts") -> "ConfusionCounts":
        return ConfusionCounts(self.tp + other.tp, self.fp + other.fp,
                               self.tn + other.tn, self.fn + other.fn)


def confusion(pred_mask, gt_mask, class_id: int) -> ConfusionCounts:
    pred = np.asarray(pred_mask)
    gt = np.asarray(gt_mask)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    p = pred == class_id
    g = gt == class_id
    tp = int(np.count_nonzero(p & g))
    fp = int(np.count_nonzero(p & ~g))
    fn = int(np.count_nonzero(~p & g))
    return ConfusionCounts(tp, fp, int(p.size) - tp - fp - fn, fn)


def _ratio(num: int, den: int) -> float:
    return 1.0 if den == 0 else num / den


def dice_coefficient(c: ConfusionCounts, include_tn: bool = False) -> float:
    """``2TP / (2TP + FP + FN)``; ``include_tn`` adds TN to the denominator (literal variant)."""
    den = 2 * c.tp + c.fp + c.fn + (c.tn if include_tn else 0)
    return _ratio(2 * c.tp, den)


def basic_metrics(c: ConfusionCounts, include_tn_in_dice: bool = False) -> tuple[float, float, float, float]:
    """Return ``(sensitivity, specificity, accuracy, dice)``."""
    se = _ratio(c.tp, c.tp + c.fn)
    sp = _ratio(c.tn, c.tn + c.fp)
    acc = _ratio(c.tp + c.tn, c.total)
    return se, sp, acc, dice_coefficient(c, include_tn_in_dice)


def _directed(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """For each point of ``a``, Euclidean distance to its nearest point of ``b``."""
    out = np.empty(len(a))
    step = max(1, 4_000_000 // max(len(b), 1))
    bf = b.astype(np.float64)
    for i in range(0, len(a), step):
        diff = a[i : i + step, None, :].astype(np.float64) - bf[None]
        out[i : i + step] = np.sqrt((diff * diff).sum(-1).min(axis=1))
    return out


def hausdorff(pred_mask, gt_mask, percentile: float | None = None) -> float | None:
    """Symmetric Hausdorff distance (pixels) between foreground sets.

    ``percentile=95`` gives HD95: the 95th percentile of the pooled directed
    nearest-neighbour distances.  Returns ``None`` when either set is empty.
    """
    pred = np.asarray(pred_mask).astype(bool)
    gt = np.asarray(gt_mask).astype(bool)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} and ground truth {gt.shape} differ")
    a = np.argwhere(pred)
    b = np.argwhere(gt)
    if len(a) == 0 or len(b) == 0:
        return None
    d_ab = _directed(a, b)
    d_ba = _directed(b, a)
    if percentile is None:
        return float(max(d_ab.max(), d_ba.max()))
    return float(np.percentile(np.concatenate([d_ab, d_ba]), percentile))


@dataclass
class ClassMetrics:
    dsc: float
    sensitivity: float
    specificity: float
    accuracy: float
    hd: float | None
    hd95: float | None
    counts: ConfusionCounts


@dataclass
class MetricsReport:
    class_names: list[str]
    per_class: dict[str, ClassMetrics]
    mean_dsc: float
    mean_sensitivity: float
    mean_specificity: float
    mean_accuracy: float
    mean_hd: float | None
    mean_hd95: float | None
    num_samples: int
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        def num(x):
            return "undefined" if x is None else x

        return {
            "num_samples": self.num_samples,
            "class_names": list(self.class_names),
            "mean": {
                "dsc": self.mean_dsc,
                "sensitivity": self.mean_sensitivity,
                "specificity": self.mean_specificity,
                "accuracy": self.mean_accuracy,
                "hd": num(self.mean_hd),
                "hd95": num(self.mean_hd95),
            },
            "per_class": {
                name: {
                    "dsc": m.dsc,
                    "sensitivity": m.sensitivity,
                    "specificity": m.specificity,
                    "accuracy": m.accuracy,
                    "hd": num(m.hd),
                    "hd95": num(m.hd95),
                    "tp": m.counts.tp, "fp": m.counts.fp, "tn": m.counts.tn, "fn": m.counts.fn,
                }
                for name, m in self.per_class.items()
            },
            "notes": list(self.notes),
        }

    def to_json(self, indent: int | None = 2) -> str:
        return json.dumps(self.to_dict(), indent=indent)


def _mean_defined(values: Iterable[float | None]) -> float | None:
    vals = [v for v in values if v is not None]
    return float(np.mean(vals)) if vals else None


def report_from_masks(preds: list[np.ndarray], gts: list[np.ndarray], num_classes: int,
                      class_names: list[str] | None = None, with_hd: bool = True) -> MetricsReport:
    """Aggregate per-class metrics over paired masks.

    Confusion counts are pooled over all samples before the ratio metrics are
    taken; HD/HD95 are averaged over the samples where they are defined.
    Means run over foreground classes (1..num_classes-1) only.
    """
    if not preds:
        raise DatasetError("cannot evaluate an empty dataset")
    names = class_names or ["background"] + [f"class{c}" for c in range(1, num_classes)]
    per_class = {}
    for c in range(num_classes):
        counts = ConfusionCounts(0, 0, 0, 0)
        hds, hd95s = [], []
        for p, g in zip(preds, gts):
            counts = counts + confusion(p, g, c)
            if with_hd:
                hds.append(hausdorff(p == c, g == c))
                hd95s.append(hausdorff(p == c, g == c, percentile=95))
        se, sp, acc, dsc = basic_metrics(counts)
        per_class[names[c]] = ClassMetrics(dsc, se, sp, acc, _mean_defined(hds),
                                           _mean_defined(hd95s), counts)
    fg = [per_class[names[c]] for c in range(1, num_classes)]
    return MetricsReport(
        class_names=names,
        per_class=per_class,
        mean_dsc=float(np.mean([m.dsc for m in fg])),
        mean_sensitivity=float(np.mean([m.sensitivity for m in fg])),
        mean_specificity=float(np.mean([m.specificity for m in fg])),
        mean_accuracy=float(np.mean([m.accuracy for m in fg])),
        mean_hd=_mean_defined(m.hd for m in fg),
        mean_hd95=_mean_defined(m.hd95 for m in fg),
        num_samples=len(preds),
        notes=["counts pooled over samples; HD averaged over samples where both sets are non-empty",
               "means exclude background; empty-vs-empty denominators score 1.0"],
    )


def evaluate(model, dataset, num_classes: int | None = None, with_hd: bool = True) -> MetricsReport:
    """Argmax-predict every sample with ``model`` (image -> logits) and score it.

    ``with_hd=False`` skips the (quadratic) Hausdorff computation.
    """
    samples = list(dataset)
    if not samples:
        raise DatasetError("cannot evaluate an empty dataset")
    from .tensor import no_grad

    preds, gts = [], []
    with no_grad():
        for s in samples:
            logits = model(s.image)
            logits = getattr(logits, "data", logits)
            preds.append(np.argmax(np.asarray(logits), axis=-1))
            gts.append(np.asarray(s.mask))
    if num_classes is None:
        num_classes = getattr(model, "num_classes", None) or int(np.asarray(logits).shape[-1])
    return report_from_masks(preds, gts, num_classes, with_hd=with_hd)
