"""Detection evaluation: confidence-ranked matching at an IoU threshold,
precision/recall, the hidden/visible true-positive split at visibility 0.5,
all-point interpolated PR curves and AP, and the TP_visible/TP proneness
curve.

Conventions pinned here: the recall denominator for the hidden and visible
variants reuses the overall count of undetected ground truths, exactly as the
split-variant equations read, so variant recalls need not reach 1.  False
positives are shared, unfiltered, between the variants.
"""

from __future__ import annotations

import csv
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .boxes import BBox, Detection, iou
from .data import GroundTruth, Video, hidden_fraction
from .detector import ModelParams, decode, nms, stream_grids
from .tensor import ContractError, Tensor

EVAL_NMS_IOU = 0.5
EVAL_MATCH_IOU = 0.7
VISIBILITY_SPLIT = 0.5


@dataclass
class MatchRecord:
    detection: Detection
    outcome: str  # "TP" or "FP"
    gt: GroundTruth | None = None

    @property
    def confidence(self) -> float:
        return self.detection.confidence

    @property
    def visibility(self) -> float | None:
        return None if self.gt is None else self.gt.visibility


@dataclass(frozen=True)
class PRPoint:
    recall: float
    precision: float
    confidence: float


@dataclass
class EvalReport:
    ap_all: float
    ap_hidden: float
    ap_visible: float
    curves: dict[str, list[PRPoint]]
    proneness: list[tuple[float, float]]
    counts: dict[str, int]
    hidden_fraction: float

    def to_dict(self) -> dict:
        return {
            "ap_all": self.ap_all,
            "ap_hidden": self.ap_hidden,
            "ap_visible": self.ap_visible,
            "counts": self.counts,
            "hidden_fraction": self.hidden_fraction,
        }


def match_detections(dets: Sequence[Detection], gts: Sequence[GroundTruth],
                     iou_threshold: float = EVAL_MATCH_IOU
                     ) -> tuple[list[MatchRecord], int]:
    """Greedy per-frame matching in descending confidence: each detection
    takes the unmatched ground truth with the highest IoU if it clears the
    threshold (IoU ties go to the lower gt index).  Returns records sorted by
    descending confidence plus the count of undetected ground truths."""
    by_frame_gt: dict[int, list[GroundTruth]] = {}
    for g in gts:
        by_frame_gt.setdefault(g.frame_index, []).append(g)
    matched: set[int] = set()
    records: list[MatchRecord] = []
    ordered = sorted(dets, key=lambda d: -d.confidence)
    for d in ordered:
        best_iou, best_gt = iou_threshold, None
        for g in by_frame_gt.get(d.frame_index, ()):
            if id(g) in matched:
                continue
            v = iou(d.box, g.box)
            if v >= best_iou and (best_gt is None or v > best_iou):
                best_iou, best_gt = v, g
        if best_gt is not None:
            matched.add(id(best_gt))
            records.append(MatchRecord(d, "TP", best_gt))
        else:
            records.append(MatchRecord(d, "FP"))
    return records, len(gts) - len(matched)


def split_tp(matches: Sequence[MatchRecord],
             visibility_threshold: float = VISIBILITY_SPLIT
             ) -> tuple[list[int], list[int]]:
    """Cumulative hidden/visible TP counts per rank; visibility exactly at
    the threshold counts as visible.  TP == TP_hidden + TP_visible at every
    rank by construction."""
    hidden, visible = [], []
    nh = nv = 0
    for m in matches:
        if m.outcome == "TP":
            if m.visibility < visibility_threshold:
                nh += 1
            else:
                nv += 1
        hidden.append(nh)
        visible.append(nv)
    return hidden, visible


def pr_curve(matches: Sequence[MatchRecord], total_gt: int,
             variant: str = "all",
             visibility_threshold: float = VISIBILITY_SPLIT) -> list[PRPoint]:
    """Ranked precision/recall sweep.  The variant numerator is TP, TP_hidden
    or TP_visible; FP and the overall undetected count are shared."""
    if variant not in ("all", "hidden", "visible"):
        raise ContractError(f"unknown variant {variant!r}")
    if total_gt <= 0:
        raise ContractError("pr_curve needs a positive ground-truth total")
    hidden, visible = split_tp(matches, visibility_threshold)
    points: list[PRPoint] = []
    tp = fp = 0
    for rank, m in enumerate(matches):
        if m.outcome == "TP":
            tp += 1
        else:
            fp += 1
        num = {"all": tp, "hidden": hidden[rank], "visible": visible[rank]}[variant]
        fn = total_gt - tp
        if num + fp == 0:
            continue
        points.append(PRPoint(recall=num / (num + fn) if num + fn else 0.0,
                              precision=num / (num + fp),
                              confidence=m.confidence))
    return points


def interpolated_ap(curve: Sequence[PRPoint]) -> float:
    """All-point interpolation: sum over distinct recall values of the recall
    increment times the max precision at recall >= that value."""
    if not curve:
        return 0.0
    recalls = np.array([p.recall for p in curve])
    precisions = np.array([p.precision for p in curve])
    ap = 0.0
    prev_r = 0.0
    for r in sorted(set(recalls.tolist())):
        if r <= prev_r:
            continue
        ap += (r - prev_r) * float(precisions[recalls >= r].max())
        prev_r = r
    return ap


def proneness_curve(matches: Sequence[MatchRecord], total_gt: int,
                    visibility_threshold: float = VISIBILITY_SPLIT
                    ) -> list[tuple[float, float]]:
    """(overall recall, TP_visible/TP) along the ranked sweep; ranks with no
    true positives yet are omitted."""
    hidden, visible = split_tp(matches, visibility_threshold)
    points = []
    tp = 0
    for rank, m in enumerate(matches):
        if m.outcome == "TP":
            tp += 1
        if tp == 0:
            continue
        points.append((tp / total_gt, visible[rank] / tp))
    return points


def _eval_video(params: ModelParams, video: Video, mode: str,
                nms_iou: float) -> tuple[list[MatchRecord], int, int]:
    frames = [Tensor(f) for f in video.frames]
    dets: list[Detection] = []
    for t, grid in enumerate(stream_grids(frames, mode, params)):
        frame_dets = decode(grid, 0.0, params.config, frame_index=t)
        dets.extend(nms(frame_dets, nms_iou))
    records, fn = match_detections(dets, video.gt, EVAL_MATCH_IOU)
    return records, fn, len(video.gt)


def evaluate(params: ModelParams, videos: Sequence[Video] | Video, mode: str,
             nms_iou: float = EVAL_NMS_IOU) -> EvalReport:
    """Full evaluation protocol: decode at confidence threshold 0 so the
    complete PR sweep exists, NMS, greedy matching at IoU 0.7, split at
    visibility 0.5, curves, APs and the proneness curve."""
    if isinstance(videos, Video):
        videos = [videos]
    if not videos or all(not v.gt for v in videos):
        raise ContractError("evaluation needs at least one video with ground truth")

    workers = int(os.environ.get("TDET_THREADS", "1") or "1")
    if workers > 1 and len(videos) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(
                lambda v: _eval_video(params, v, mode, nms_iou), videos))
    else:
        results = [_eval_video(params, v, mode, nms_iou) for v in videos]

    records = [r for recs, _, _ in results for r in recs]
    records.sort(key=lambda m: -m.confidence)
    total_gt = sum(n for _, _, n in results)

    curves = {v: pr_curve(records, total_gt, v) for v in ("all", "hidden", "visible")}
    hidden, visible = split_tp(records)
    tp = sum(1 for m in records if m.outcome == "TP")
    fp = len(records) - tp
    counts = {
        "TP": tp,
        "FP": fp,
        "FN": total_gt - tp,
        "TP_hidden": hidden[-1] if records else 0,
        "TP_visible": visible[-1] if records else 0,
        "total_gt": total_gt,
    }
    all_gts = [g for v in videos for g in v.gt]
    return EvalReport(
        ap_all=interpolated_ap(curves["all"]),
        ap_hidden=interpolated_ap(curves["hidden"]),
        ap_visible=interpolated_ap(curves["visible"]),
        curves=curves,
        proneness=proneness_curve(records, total_gt),
        counts=counts,
        hidden_fraction=hidden_fraction(all_gts),
    )


def write_report(report: EvalReport, out_dir) -> None:
    """report.json with scalars and counts, one CSV per PR curve variant, and
    proneness.csv."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "report.json", "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")
    for variant, curve in report.curves.items():
        with open(out / f"curve_{variant}.csv", "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["rank", "confidence", "precision", "recall"])
            for rank, p in enumerate(curve, start=1):
                writer.writerow([rank, repr(p.confidence), repr(p.precision), repr(p.recall)])
    with open(out / "proneness.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["recall", "tp_visible_over_tp"])
        for r, y in report.proneness:
            writer.writerow([repr(r), repr(y)])


def read_report(in_dir) -> dict:
    with open(Path(in_dir) / "report.json") as fh:
        return json.load(fh)
