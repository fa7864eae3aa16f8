"""Segmentation metrics computed from a single confusion-matrix basis.

Rows of a confusion matrix are truth classes, columns are predictions.
Degenerate conventions:

* DICE of an empty annotation against an empty prediction is 100 %.
* Per-class F1 with a zero denominator is 0; macro F1 averages over the
  classes present in the truth.
* Kappa is 1 when expected and observed agreement are both 1.
"""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field

import numpy as np


def confusion(pred: np.ndarray, truth: np.ndarray, k: int) -> np.ndarray:
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"prediction {pred.shape} and truth {truth.shape} differ in size")
    for name, a in (("prediction", pred), ("truth", truth)):
        if a.size and (a.min() < 0 or a.max() >= k):
            raise ValueError(f"{name} has classes outside 0..{k - 1}")
    idx = truth.astype(np.int64).ravel() * k + pred.astype(np.int64).ravel()
    return np.bincount(idx, minlength=k * k).reshape(k, k)


def accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 1.0


def dice(cm: np.ndarray) -> float:
    """Foreground (class 1) DICE in percent."""
    if cm.shape != (2, 2):
        raise ValueError("dice expects a binary confusion matrix")
    tp = cm[1, 1]
    fp = cm[0, 1]
    fn = cm[1, 0]
    denom = 2 * tp + fp + fn
    if denom == 0:
        return 100.0
    return float(2 * tp / denom * 100.0)


def per_class_f1(cm: np.ndarray) -> np.ndarray:
    tp = np.diag(cm).astype(np.float64)
    denom = 2 * tp + (cm.sum(axis=0) - tp) + (cm.sum(axis=1) - tp)
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def f1_scores(cm: np.ndarray) -> tuple[float, float]:
    """Return (micro_f1, macro_f1)."""
    tp = np.trace(cm)
    # every miss is one FP and one FN in single-label classification
    off = cm.sum() - tp
    micro = float(2 * tp / (2 * tp + 2 * off)) if cm.sum() else 0.0
    present = cm.sum(axis=1) > 0
    macro = float(per_class_f1(cm)[present].mean()) if present.any() else 0.0
    return micro, macro


def kappa(cm: np.ndarray) -> float:
    total = cm.sum()
    if total == 0:
        raise ValueError("kappa of an empty confusion matrix")
    n = cm.astype(np.float64)
    p_o = np.trace(n) / total
    p_e = float((n.sum(axis=1) * n.sum(axis=0)).sum() / total**2)
    if p_e == 1.0:
        return 1.0 if p_o == 1.0 else 0.0
    return float((p_o - p_e) / (1 - p_e))


def challenge_score(cm: np.ndarray) -> float:
    micro, macro = f1_scores(cm)
    return kappa(cm) + (macro + micro) / 2


GLEASON_WINNER_SCORE = 0.8451  # documentation only


@dataclass
class EvaluationReport:
    task: str
    per_image: list[dict] = field(default_factory=list)
    aggregate: dict = field(default_factory=dict)
    fold_id: int | None = None
    confusion: list[list[int]] | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "EvaluationReport":
        return cls(**json.loads(text))

    def to_text(self) -> str:
        head = f"task: {self.task}" + (f"  fold: {self.fold_id}" if self.fold_id is not None else "")
        lines = [head]
        for key in sorted(self.aggregate):
            lines.append(f"  {key:<24}{self.aggregate[key]:.6f}")
        return "\n".join(lines) + "\n"

    def to_csv(self) -> str:
        buf = io.StringIO()
        keys = sorted({k for row in self.per_image for k in row if k != "image_id"})
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(["fold", "image_id"] + keys)
        fold = "" if self.fold_id is None else self.fold_id
        for row in self.per_image:
            writer.writerow([fold, row["image_id"]] + [_fmt(row.get(k)) for k in keys])
        agg_keys = sorted(self.aggregate)
        writer.writerow(["fold", "summary"] + agg_keys)
        writer.writerow([fold, "summary"] + [_fmt(self.aggregate[k]) for k in agg_keys])
        return buf.getvalue()


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return f"{v:.6f}"
    return str(v)


def evaluate(
    pred_maps: dict[str, np.ndarray] | list[np.ndarray],
    truth_maps: dict[str, np.ndarray] | list[np.ndarray],
    task: str,
    fold_id: int | None = None,
) -> EvaluationReport:
    """Pixel-pooled evaluation over a set of images.

    digestpath: pixel accuracy on positive and negative images separately,
    total accuracy both pixel-pooled and image-averaged, pooled DICE and F1.
    gleason: pooled kappa, micro/macro F1 and the challenge score.
    """
    if isinstance(pred_maps, dict):
        ids = sorted(pred_maps)
        missing = set(ids) ^ set(truth_maps)
        if missing:
            raise ValueError(f"prediction/truth image lists differ: {sorted(missing)}")
        preds = [pred_maps[i] for i in ids]
        truths = [truth_maps[i] for i in ids]
    else:
        preds, truths = list(pred_maps), list(truth_maps)
        ids = [str(i) for i in range(len(preds))]
        if len(preds) != len(truths):
            raise ValueError("prediction and truth lists differ in length")
    if not preds:
        raise ValueError("nothing to evaluate")
    if task not in ("digestpath", "gleason"):
        raise ValueError(f"unknown task {task!r}")

    k = 2 if task == "digestpath" else 4
    report = EvaluationReport(task=task, fold_id=fold_id)
    pooled = np.zeros((k, k), dtype=np.int64)
    pos = np.zeros((k, k), dtype=np.int64)
    neg = np.zeros((k, k), dtype=np.int64)
    image_acc = []
    for image_id, p, t in zip(ids, preds, truths):
        cm = confusion(p, t, k)
        pooled += cm
        row = {"image_id": image_id, "pixels": int(cm.sum()), "accuracy": accuracy(cm)}
        if task == "digestpath":
            positive = bool(cm[1].sum() > 0)
            (pos if positive else neg)[...] += cm
            row["positive"] = int(positive)
            row["dice"] = dice(cm)
        else:
            micro, macro = f1_scores(cm)
            row.update(kappa=kappa(cm), micro_f1=micro, macro_f1=macro, score=challenge_score(cm))
        image_acc.append(row["accuracy"])
        report.per_image.append(row)

    agg = {"accuracy": accuracy(pooled), "accuracy_image_mean": float(np.mean(image_acc))}
    micro, macro = f1_scores(pooled)
    agg.update(micro_f1=micro, macro_f1=macro)
    if task == "digestpath":
        agg["dice"] = dice(pooled)
        agg["f1_foreground"] = float(per_class_f1(pooled)[1])
        if pos.sum():
            agg["accuracy_positive"] = accuracy(pos)
        if neg.sum():
            agg["accuracy_negative"] = accuracy(neg)
    else:
        agg["kappa"] = kappa(pooled)
        agg["score"] = challenge_score(pooled)
    report.aggregate = agg
    report.confusion = pooled.tolist()
    return report


def average_folds(reports: list[EvaluationReport]) -> dict:
    """Arithmetic mean of each aggregate metric across folds."""
    if not reports:
        raise ValueError("no fold reports")
    keys = sorted(set.intersection(*(set(r.aggregate) for r in reports)))
    return {k: float(np.mean([r.aggregate[k] for r in reports])) for k in keys}
