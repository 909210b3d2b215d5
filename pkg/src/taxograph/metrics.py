"""Segmentation metrics (mIoU, pixel accuracy, mean F1) and panoptic quality."""
from __future__ import annotations

import math
from fractions import Fraction
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np


class ConfusionMatrix:
    """L x L pixel counts, rows = ground truth, columns = prediction."""

    def __init__(self, num_classes: int) -> None:
        if num_classes < 1:
            raise ValueError("need at least one class")
        self.num_classes = num_classes
        self.counts = np.zeros((num_classes, num_classes), dtype=np.int64)

    def update(self, pred: np.ndarray, gt: np.ndarray) -> "ConfusionMatrix":
        pred, gt = np.asarray(pred), np.asarray(gt)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != ground-truth shape {gt.shape}")
        L = self.num_classes
        p, g = pred.reshape(-1).astype(np.int64), gt.reshape(-1).astype(np.int64)
        if p.size and (min(p.min(), g.min()) < 0 or max(p.max(), g.max()) >= L):
            raise ValueError(f"label outside [0, {L})")
        self.counts += np.bincount(g * L + p, minlength=L * L).reshape(L, L)
        return self

    def merge(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        out = ConfusionMatrix(self.num_classes)
        out.counts = self.counts + other.counts
        return out

    def per_class(self) -> dict[str, np.ndarray]:
        c = self.counts.astype(np.float64)
        tp = np.diag(c)
        fp = c.sum(axis=0) - tp
        fn = c.sum(axis=1) - tp
        present = (tp + fp + fn) > 0
        with np.errstate(divide="ignore", invalid="ignore"):
            iou = np.where(present, tp / (tp + fp + fn), np.nan)
            precision = np.where(tp + fp > 0, tp / (tp + fp), 0.0)
            recall = np.where(tp + fn > 0, tp / (tp + fn), 0.0)
            f1 = np.where(precision + recall > 0, 2 * precision * recall / (precision + recall), 0.0)
        f1 = np.where(present, f1, np.nan)
        return {"iou": iou, "f1": f1, "present": present}

    def summary(self) -> dict[str, float]:
        pc = self.per_class()
        total = self.counts.sum()
        present = pc["present"]
        return {
            "miou": float(np.mean(pc["iou"][present])) if present.any() else 0.0,
            "accuracy": float(np.trace(self.counts) / total) if total else 0.0,
            "mean_f1": float(np.mean(pc["f1"][present])) if present.any() else 0.0,
        }


def segmentation_metrics(pred, gt, num_classes: int) -> dict[str, float]:
    """mIoU / pixel accuracy / mean F1 over one map or a sequence of maps.

    Classes absent from both prediction and ground truth are left out of
    the means.
    """
    cm = ConfusionMatrix(num_classes)
    if isinstance(pred, np.ndarray) and isinstance(gt, np.ndarray):
        cm.update(pred, gt)
    else:
        pred, gt = list(pred), list(gt)
        if len(pred) != len(gt):
            raise ValueError(f"{len(pred)} predictions for {len(gt)} ground-truth maps")
        for p, g in zip(pred, gt):
            cm.update(p, g)
    return cm.summary()


def metrics_report(cm: ConfusionMatrix, labels: Sequence[str] | None = None) -> dict:
    pc = cm.per_class()
    names = list(labels) if labels is not None else [str(i) for i in range(cm.num_classes)]
    per_class = {
        name: {"iou": None if math.isnan(pc["iou"][i]) else float(pc["iou"][i]),
               "f1": None if math.isnan(pc["f1"][i]) else float(pc["f1"][i])}
        for i, name in enumerate(names)
    }
    return {**cm.summary(), "per_class": per_class}


_BASELINE_STREAM = 0x52414E44


def random_baseline_miou(gts: Sequence[np.ndarray], num_classes: int, seed: int = 0, draws: int = 5) -> float:
    """Mean mIoU of a predictor that picks labels uniformly at random."""
    # tagged stream, so it cannot coincide with a generator that drew ``gts`` from the same seed
    rng = np.random.default_rng([seed, _BASELINE_STREAM])
    scores = []
    for _ in range(draws):
        preds = [rng.integers(0, num_classes, size=g.shape) for g in gts]
        scores.append(segmentation_metrics(preds, gts, num_classes)["miou"])
    return float(np.mean(scores))


# --------------------------------------------------------------------------
# panoptic quality
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class Segment:
    mask: np.ndarray
    category: int
    identity: int = 0


def _as_segments(items: Iterable) -> list[Segment]:
    out = []
    for s in items:
        if isinstance(s, Segment):
            out.append(Segment(np.asarray(s.mask, dtype=bool), int(s.category), int(s.identity)))
        else:
            mask, category, identity = s
            out.append(Segment(np.asarray(mask, dtype=bool), int(category), int(identity)))
    return out


def _check_disjoint(segs: list[Segment], side: str) -> None:
    by_class: dict[int, np.ndarray] = {}
    for s in segs:
        seen = by_class.get(s.category)
        if seen is not None:
            if seen.shape != s.mask.shape:
                raise ValueError(f"{side} masks have inconsistent shapes")
            if np.any(seen & s.mask):
                raise ValueError(f"{side} segments of class {s.category} overlap")
            by_class[s.category] = seen | s.mask
        else:
            by_class[s.category] = s.mask.copy()


def mask_iou(a: np.ndarray, b: np.ndarray) -> Fraction:
    inter = int(np.count_nonzero(a & b))
    union = int(np.count_nonzero(a | b))
    return Fraction(inter, union) if union else Fraction(0)


def pq_from_matches(
    categories: Iterable[int],
    matched: dict[int, list],
    fp: dict[int, int],
    fn: dict[int, int],
    things: set[int],
) -> dict[str, float]:
    """PQ from per-class match IoUs and FP / FN counts.

    Arithmetic is exact (rationals) and rounded to float once at the end.
    """
    per_class: dict[int, Fraction] = {}
    for c in sorted(set(categories)):
        ious = [Fraction(v) for v in matched.get(c, [])]
        denom = len(ious) + Fraction(fp.get(c, 0), 2) + Fraction(fn.get(c, 0), 2)
        if denom == 0:
            continue
        per_class[c] = sum(ious, Fraction(0)) / denom

    def avg(keys):
        vals = [per_class[k] for k in keys]
        return float(sum(vals, Fraction(0)) / len(vals)) if vals else 0.0

    return {
        "pq": avg(per_class),
        "pq_thing": avg([c for c in per_class if c in things]),
        "pq_stuff": avg([c for c in per_class if c not in things]),
    }


def _match(pred_s: list[Segment], gt_s: list[Segment]):
    matched: dict[int, list[Fraction]] = {}
    used_pred: set[int] = set()
    used_gt: set[int] = set()
    for gi, g in enumerate(gt_s):
        for pi, p in enumerate(pred_s):
            if pi in used_pred or p.category != g.category:
                continue
            iou = mask_iou(p.mask, g.mask)
            if iou > 0.5:
                matched.setdefault(g.category, []).append(iou)
                used_pred.add(pi)
                used_gt.add(gi)
                break
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}
    for pi, p in enumerate(pred_s):
        if pi not in used_pred:
            fp[p.category] = fp.get(p.category, 0) + 1
    for gi, g in enumerate(gt_s):
        if gi not in used_gt:
            fn[g.category] = fn.get(g.category, 0) + 1
    return matched, fp, fn


def panoptic_quality(pred: Iterable, gt: Iterable, things: Iterable[int] = ()) -> dict[str, float]:
    """Panoptic quality, averaged over categories, split into thing / stuff.

    Segments are ``(mask, category, identity)`` triples.  A prediction matches
    a ground-truth segment of the same category when their IoU exceeds 0.5;
    segments of one category are disjoint on each side, so such a match is
    unique.
    """
    return panoptic_quality_dataset([(pred, gt)], things)


def panoptic_quality_dataset(scenes: Iterable[tuple[Iterable, Iterable]], things: Iterable[int] = ()) -> dict[str, float]:
    """PQ with TP / FP / FN pooled over several ``(pred, gt)`` scenes before averaging."""
    things = set(int(t) for t in things)
    matched: dict[int, list[Fraction]] = {}
    fp: dict[int, int] = {}
    fn: dict[int, int] = {}
    cats: list[int] = []
    for pred, gt in scenes:
        pred_s, gt_s = _as_segments(pred), _as_segments(gt)
        _check_disjoint(pred_s, "predicted")
        _check_disjoint(gt_s, "ground-truth")
        m, f_p, f_n = _match(pred_s, gt_s)
        for c, v in m.items():
            matched.setdefault(c, []).extend(v)
        for c, v in f_p.items():
            fp[c] = fp.get(c, 0) + v
        for c, v in f_n.items():
            fn[c] = fn.get(c, 0) + v
        cats += [s.category for s in pred_s] + [s.category for s in gt_s]
    return pq_from_matches(cats, matched, fp, fn, things)
