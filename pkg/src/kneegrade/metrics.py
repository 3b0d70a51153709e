"""Evaluation metrics for grading and localization.

Conventions for degenerate inputs are fixed constants:

* precision / recall / F1 with a zero denominator are 0;
* Cohen's kappa with chance agreement p_e == 1 is 1 if observed agreement
  is perfect, else 0;
* DICE of two empty masks is 1;
* the neighbour fraction with no misclassifications is 1.

Per-grade kappa is Cohen's kappa on the one-vs-rest 2x2 collapse of the
confusion matrix for that grade.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

REPORT_VERSION = 1
NUM_GRADES = 5


def confusion_matrix(actual, predicted, k: int = NUM_GRADES) -> np.ndarray:
    """Counts with rows = actual grade, columns = predicted grade."""
    a = np.asarray(actual, dtype=int)
    p = np.asarray(predicted, dtype=int)
    if a.shape != p.shape:
        raise ValueError(f"{a.size} actual labels vs {p.size} predictions")
    if a.size and (min(a.min(), p.min()) < 0 or max(a.max(), p.max()) >= k):
        raise ValueError(f"labels must lie in [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (a, p), 1)
    return cm


def _check(cm) -> np.ndarray:
    cm = np.asarray(cm)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1] or cm.shape[0] == 0:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if np.any(cm < 0):
        raise ValueError("confusion counts must be nonnegative")
    return cm.astype(np.float64)


def _ratio(num: float, den: float) -> float:
    return float(num / den) if den else 0.0


def prf(cm) -> dict:
    """Per-grade precision, recall and F1, plus their unweighted means."""
    cm = _check(cm)
    tp = np.diag(cm)
    cols, rows = cm.sum(axis=0), cm.sum(axis=1)
    precision = [_ratio(tp[k], cols[k]) for k in range(len(cm))]
    recall = [_ratio(tp[k], rows[k]) for k in range(len(cm))]
    f1 = [_ratio(2 * p * r, p + r) for p, r in zip(precision, recall)]
    return {
        "precision": precision,
        "recall": recall,
        "f1": f1,
        "macro": {
            "precision": float(np.mean(precision)),
            "recall": float(np.mean(recall)),
            "f1": float(np.mean(f1)),
        },
    }


def cohen_kappa(cm) -> float:
    cm = _check(cm)
    total = cm.sum()
    if total == 0:
        raise ValueError("kappa of an empty confusion matrix is undefined")
    p_o = np.trace(cm) / total
    p_e = float((cm.sum(axis=0) * cm.sum(axis=1)).sum() / (total * total))
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1.0 - p_e))


def one_vs_rest(cm, k: int) -> np.ndarray:
    cm = _check(cm)
    tp = cm[k, k]
    fn = cm[k].sum() - tp
    fp = cm[:, k].sum() - tp
    tn = cm.sum() - tp - fn - fp
    return np.array([[tp, fn], [fp, tn]])


def per_grade_kappa(cm, k: int) -> float:
    return cohen_kappa(one_vs_rest(cm, k))


def mae(preds, actuals) -> float:
    p = np.asarray(preds, dtype=np.float64)
    a = np.asarray(actuals, dtype=np.float64)
    if p.shape != a.shape:
        raise ValueError(f"length mismatch: {p.size} predictions vs {a.size} actuals")
    if p.size == 0:
        raise ValueError("mae of an empty sequence is undefined")
    return float(np.abs(p - a).mean())


def bootstrap_ci(errors, level: float = 0.95, resamples: int = 2000, seed: int = 0) -> tuple[float, float]:
    """Percentile bootstrap interval for the mean of ``errors``."""
    e = np.asarray(errors, dtype=np.float64).ravel()
    if e.size == 0:
        raise ValueError("bootstrap of an empty sample is undefined")
    if not 0 < level < 1:
        raise ValueError(f"level must lie in (0, 1), got {level}")
    rng = np.random.default_rng(seed)
    means = np.empty(resamples)
    # fixed-size chunks keep memory bounded without changing the draw sequence
    for start in range(0, resamples, 256):
        stop = min(resamples, start + 256)
        means[start:stop] = e[rng.integers(0, e.size, size=(stop - start, e.size))].mean(axis=1)
    alpha = (1 - level) / 2
    lo, hi = np.quantile(means, [alpha, 1 - alpha])
    return float(lo), float(hi)


def neighbor_fraction(cm) -> float:
    """Share of misclassifications that land on an adjacent grade."""
    cm = _check(cm)
    i, j = np.indices(cm.shape)
    wrong = cm[i != j].sum()
    if wrong == 0:
        return 1.0
    return float(cm[np.abs(i - j) == 1].sum() / wrong)


def dice(mask_a, mask_b) -> float:
    a = np.asarray(mask_a, dtype=bool)
    b = np.asarray(mask_b, dtype=bool)
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return float(2 * int(np.logical_and(a, b).sum()) / total)


def bbox_mse(pred_boxes, gt_boxes) -> float:
    """Mean squared error over all (cx, cy, w, h) coordinates of all boxes."""
    p = np.asarray(pred_boxes, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    if p.shape != g.shape:
        raise ValueError(f"{len(p)} predicted boxes vs {len(g)} ground-truth boxes")
    if p.size == 0:
        raise ValueError("bbox_mse of no boxes is undefined")
    return float(((p - g) ** 2).mean())


def side_accuracy(preds: Sequence[str], gts: Sequence[str]) -> float:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predicted sides vs {len(gts)} ground-truth sides")
    if len(preds) == 0:
        raise ValueError("side_accuracy of no samples is undefined")
    return float(sum(p == g for p, g in zip(preds, gts)) / len(preds))


def iou(box_a, box_b) -> float:
    """IoU of two normalized (cx, cy, w, h) boxes."""
    ax0, ay0 = box_a[0] - box_a[2] / 2, box_a[1] - box_a[3] / 2
    bx0, by0 = box_b[0] - box_b[2] / 2, box_b[1] - box_b[3] / 2
    ix = max(0.0, min(ax0 + box_a[2], bx0 + box_b[2]) - max(ax0, bx0))
    iy = max(0.0, min(ay0 + box_a[3], by0 + box_b[3]) - max(ay0, by0))
    inter = ix * iy
    union = box_a[2] * box_a[3] + box_b[2] * box_b[3] - inter
    return float(inter / union) if union > 0 else 0.0


# ------------------------------------------------------------------ report

@dataclass
class Localization:
    bbox_mse: float
    dice: float
    side_accuracy: float
    iou_pass_rate: Optional[float] = None


@dataclass
class EvalReport:
    confusion: np.ndarray
    per_grade: dict
    macro: dict
    mae: float
    mae_ci: tuple[float, float]
    neighbor_fraction: float
    localization: Optional[Localization] = None
    label: str = ""
    extra: dict = field(default_factory=dict)

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        d = {
            "version": REPORT_VERSION,
            "label": self.label,
            "n": self.total,
            "confusion": self.confusion.astype(int).tolist(),
            "per_grade": self.per_grade,
            "macro": self.macro,
            "mae": self.mae,
            "mae_ci": list(self.mae_ci),
            "neighbor_fraction": self.neighbor_fraction,
            "localization": None if self.localization is None else vars(self.localization),
        }
        if self.extra:
            d["extra"] = self.extra
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def confusion_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        k = len(self.confusion)
        writer.writerow(["actual"] + [f"pred_{j}" for j in range(k)])
        for i, row in enumerate(self.confusion):
            writer.writerow([f"actual_{i}"] + [int(v) for v in row])
        return buf.getvalue()


def evaluate(actual, predicted, *, seed: int = 0, resamples: int = 2000, label: str = "",
             localization: Optional[Localization] = None) -> EvalReport:
    """Build the full report for integer grade predictions."""
    actual = np.asarray(actual, dtype=int)
    predicted = np.asarray(predicted, dtype=int)
    cm = confusion_matrix(actual, predicted)
    scores = prf(cm)
    kappas = [per_grade_kappa(cm, k) for k in range(NUM_GRADES)]
    per_grade = {str(k): {"precision": scores["precision"][k], "recall": scores["recall"][k],
                          "f1": scores["f1"][k], "kappa": kappas[k]} for k in range(NUM_GRADES)}
    macro = dict(scores["macro"], kappa=float(np.mean(kappas)), overall_kappa=cohen_kappa(cm))
    errors = np.abs(predicted - actual)
    return EvalReport(cm, per_grade, macro, mae(predicted, actual),
                      bootstrap_ci(errors, 0.95, resamples, seed), neighbor_fraction(cm),
                      localization, label)
