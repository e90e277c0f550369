"""Classification accuracy and detection average-precision metrics.

Table values are percentages; report aggregation rounds half-up at two
decimals and averages exactly in decimal arithmetic, matching how published
result tables are assembled.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal

import numpy as np

from .errors import EvalError
from .geometry import TP_DIAMETER_FRACTION, VALID, ObjectModel, pose_distance


@dataclass
class ConfusionMatrix:
    """Counts with "valid" as the positive class."""

    tp: int = 0
    fn: int = 0
    tn: int = 0
    fp: int = 0

    @property
    def total(self) -> int:
        return self.tp + self.fn + self.tn + self.fp


def confusion(records) -> ConfusionMatrix:
    """records: iterable of (gt_label, predicted_label)."""
    cm = ConfusionMatrix()
    for gt, pred in records:
        if gt == VALID:
            if pred == VALID:
                cm.tp += 1
            else:
                cm.fn += 1
        else:
            if pred == VALID:
                cm.fp += 1
            else:
                cm.tn += 1
    return cm


def aca(cm: ConfusionMatrix) -> float:
    """Average class accuracy: mean of the two per-class recalls, in percent."""
    if cm.tp + cm.fn == 0 or cm.tn + cm.fp == 0:
        raise EvalError("average class accuracy needs both classes present")
    return 100.0 * 0.5 * (cm.tp / (cm.tp + cm.fn) + cm.tn / (cm.tn + cm.fp))


def oa(cm: ConfusionMatrix) -> float:
    """Overall accuracy in percent."""
    if cm.total == 0:
        raise EvalError("empty confusion matrix")
    return 100.0 * (cm.tp + cm.tn) / cm.total


def average_precision(
    detections,
    gts_per_scene: dict,
    model: ObjectModel,
    threshold_frac: float = TP_DIAMETER_FRACTION,
) -> float:
    """All-point interpolated AP (percent) with exclusive ground-truth matching.

    detections: iterable of (scene_id, Pose, score).  Sorted by score
    descending (ties keep input order), each detection greedily matches the
    nearest still-unmatched ground truth of its scene if that distance is
    below threshold_frac * diameter; matched ground truths are consumed.
    """
    dets = list(detections)
    total_gt = sum(len(g.poses) for g in gts_per_scene.values())
    if total_gt == 0:
        raise EvalError("average precision needs at least one ground-truth instance")
    order = sorted(range(len(dets)), key=lambda i: (-dets[i][2], i))
    matched: dict = {sid: np.zeros(len(g.poses), bool) for sid, g in gts_per_scene.items()}
    thr = threshold_frac * model.diameter

    tp_flags = np.zeros(len(dets), bool)
    for rank, i in enumerate(order):
        scene_id, pose, _ = dets[i]
        gt = gts_per_scene.get(scene_id)
        if gt is None or not gt.poses:
            continue
        used = matched[scene_id]
        cands = [j for j in range(len(gt.poses)) if not used[j]]
        if not cands:
            continue
        dists = [pose_distance(pose, gt.poses[j], model) for j in cands]
        k = int(np.argmin(dists))
        if dists[k] < thr:
            used[cands[k]] = True
            tp_flags[rank] = True

    tp_cum = np.cumsum(tp_flags)
    ranks = np.arange(1, len(dets) + 1)
    precision = tp_cum / ranks
    recall = tp_cum / total_gt
    # right-to-left precision envelope, then sum over recall increments
    envelope = np.maximum.accumulate(precision[::-1])[::-1]
    prev = 0.0
    ap = 0.0
    for p, r in zip(envelope, recall):
        if r > prev:
            ap += (r - prev) * p
            prev = r
    return 100.0 * ap


def confidence_replacement_experiment(
    records,
    validator,
    gts_per_scene: dict,
    model: ObjectModel,
    threshold_frac: float = TP_DIAMETER_FRACTION,
) -> tuple[float, float]:
    """AP with the detector's confidence vs AP with the validator's TP probability.

    validator: callable mapping a detection record to its p_valid score.
    """
    records = list(records)
    before = average_precision(
        [(r.scene_id, r.pose, r.detector_confidence) for r in records],
        gts_per_scene, model, threshold_frac)
    after = average_precision(
        [(r.scene_id, r.pose, float(validator(r))) for r in records],
        gts_per_scene, model, threshold_frac)
    return before, after


def round2(x) -> float:
    """Round half-up at two decimals (publication-table convention)."""
    return float(Decimal(repr(float(x))).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


def _mean2(values) -> float:
    """Exact decimal mean of two-decimal table values, rounded half-up."""
    vals = [Decimal(repr(round2(v))) for v in values]
    mean = sum(vals) / Decimal(len(vals))
    return float(mean.quantize(Decimal("0.01"), rounding=ROUND_HALF_UP))


@dataclass
class EvalReport:
    """Per-object metric rows plus their arithmetic mean row."""

    objects: list = field(default_factory=list)
    average: dict = field(default_factory=dict)


_METRICS = ("aca", "oa", "ap_before", "ap_after")


def report(objects: list) -> EvalReport:
    """Aggregate per-object rows {name, aca, oa, ap_before, ap_after}.

    Values are rounded to two decimals; the average row is their exact
    decimal mean.  Metrics missing from every row are skipped.
    """
    if not objects:
        raise EvalError("report needs at least one object row")
    rows = []
    for obj in objects:
        row = {"name": obj["name"]}
        for m in _METRICS:
            if m in obj and obj[m] is not None:
                row[m] = round2(obj[m])
        rows.append(row)
    avg = {"name": "Average"}
    for m in _METRICS:
        present = [r[m] for r in rows if m in r]
        if present and len(present) == len(rows):
            avg[m] = _mean2(present)
    return EvalReport(objects=rows, average=avg)


def report_to_json(rep: EvalReport) -> dict:
    return {"objects": rep.objects, "average": rep.average}


def save_report(rep: EvalReport, json_path, text_path=None) -> None:
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(report_to_json(rep), fh, indent=2, sort_keys=True)
        fh.write("\n")
    if text_path is not None:
        with open(text_path, "w", encoding="utf-8") as fh:
            fh.write(format_report(rep))


def format_report(rep: EvalReport) -> str:
    cols = [m for m in _METRICS if m in rep.average]
    headers = {"aca": "ACA %", "oa": "OA %", "ap_before": "AP before %",
               "ap_after": "AP after %"}
    name_w = max(len("Object"), max(len(r["name"]) for r in rep.objects + [rep.average]))
    head = "Object".ljust(name_w) + "".join(headers[c].rjust(14) for c in cols)
    lines = [head, "-" * len(head)]
    for row in rep.objects + [rep.average]:
        line = row["name"].ljust(name_w)
        for c in cols:
            line += (f"{row[c]:.2f}" if c in row else "-").rjust(14)
        lines.append(line)
    return "\n".join(lines) + "\n"
