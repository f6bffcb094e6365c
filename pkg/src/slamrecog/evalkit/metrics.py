"""Detection and proposal metrics: PR curves, all-points AP, recall vs IoU."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Mapping, Optional, Sequence

import numpy as np

from ..geometry import BoundingBox, iou, iou_matrix
from ..mapio import Annotation

log = logging.getLogger(__name__)

BACKGROUND = "background"


@dataclass(frozen=True)
class Detection:
    frame_id: int
    box: BoundingBox
    label: str
    score: float
    seed_id: Optional[int] = None

    def to_json(self) -> dict:
        d = {"frame_id": self.frame_id, "box": list(self.box.as_tuple()),
             "label": self.label, "score": self.score}
        if self.seed_id is not None:
            d["seed_id"] = self.seed_id
        return d

    @classmethod
    def from_json(cls, d: dict) -> "Detection":
        sid = d.get("seed_id")
        return cls(int(d["frame_id"]), BoundingBox(*d["box"]), str(d["label"]),
                   float(d["score"]), None if sid is None else int(sid))


@dataclass
class ClassCurve:
    label: str
    scores: np.ndarray
    precision: np.ndarray
    recall: np.ndarray
    ap: float
    n_gt: int


@dataclass
class PrCurve:
    curves: Dict[str, ClassCurve] = field(default_factory=dict)
    mAP: float = float("nan")

    @property
    def ap(self) -> Dict[str, float]:
        return {k: c.ap for k, c in self.curves.items()}


def average_precision(precision: np.ndarray, recall: np.ndarray) -> float:
    """Area under the monotone precision envelope, all recall points."""
    if len(precision) == 0:
        return 0.0
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def match_detections(dets: Sequence[Detection], gt: Sequence[Annotation],
                     iou_thresh: float = 0.5) -> np.ndarray:
    """Greedy one-to-one matching in descending score. Returns TP flags in score order."""
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    by_frame: Dict[int, List[Annotation]] = {}
    for a in gt:
        by_frame.setdefault(a.frame_id, []).append(a)
    used = {fid: np.zeros(len(v), bool) for fid, v in by_frame.items()}
    tp = np.zeros(len(dets), bool)
    for rank, i in enumerate(order):
        d = dets[i]
        cands = by_frame.get(d.frame_id, [])
        best, best_j = -1.0, -1
        for j, a in enumerate(cands):
            if used[d.frame_id][j]:
                continue
            o = iou(d.box, a.box)
            if o > best:
                best, best_j = o, j
        if best_j >= 0 and best >= iou_thresh:
            used[d.frame_id][best_j] = True
            tp[rank] = True
    return tp


def pr_curve(detections: Sequence[Detection], ground_truth: Sequence[Annotation],
             iou_thresh: float = 0.5, classes: Optional[Sequence[str]] = None,
             background: str = BACKGROUND) -> PrCurve:
    if classes is None:
        classes = sorted({a.label for a in ground_truth} | {d.label for d in detections})
    out = PrCurve()
    aps = []
    for c in classes:
        if c == background:
            continue
        gt_c = [a for a in ground_truth if a.label == c]
        det_c = [d for d in detections if d.label == c]
        scores = np.array(sorted((d.score for d in det_c), reverse=True))
        if not gt_c:
            log.warning("class %r has no ground truth; AP undefined and excluded from mAP", c)
            out.curves[c] = ClassCurve(c, scores, np.zeros(0), np.zeros(0), float("nan"), 0)
            continue
        tp = match_detections(det_c, gt_c, iou_thresh)
        ctp = np.cumsum(tp)
        cfp = np.cumsum(~tp)
        recall = ctp / len(gt_c)
        precision = ctp / np.maximum(ctp + cfp, 1)
        ap = average_precision(precision, recall)
        out.curves[c] = ClassCurve(c, scores, precision, recall, ap, len(gt_c))
        aps.append(ap)
    out.mAP = float(np.mean(aps)) if aps else float("nan")
    return out


def recall_at_iou(proposals: Mapping[int, Sequence[BoundingBox]], ground_truth: Sequence[Annotation],
                  iou_grid: Iterable[float] = (0.5, 0.6, 0.7, 0.8, 0.9)) -> List[dict]:
    """Fraction of ground-truth boxes covered by some proposal at each IoU threshold."""
    frames = set(proposals) | {a.frame_id for a in ground_truth}
    best = np.zeros(len(ground_truth))
    for k, a in enumerate(ground_truth):
        boxes = proposals.get(a.frame_id, [])
        if boxes:
            arr = np.array([b.as_tuple() for b in boxes])
            best[k] = iou_matrix(np.array([a.box.as_tuple()]), arr).max()
    n_props = sum(len(proposals.get(f, [])) for f in frames)
    mean_props = n_props / len(frames) if frames else 0.0
    rows = []
    for tau in iou_grid:
        rec = float(np.mean(best >= tau)) if len(ground_truth) else float("nan")
        rows.append({"iou": float(tau), "recall": rec, "proposals_per_frame": mean_props})
    return rows


# ---------------------------------------------------------------- accuracy

def match_gt_to_proposals(proposals: Mapping[int, Sequence], ground_truth: Sequence[Annotation],
                          iou_thresh: float = 0.5) -> Dict[int, object]:
    """Map each annotation index to its best-overlapping proposal (IoU >= thresh)."""
    out = {}
    for k, a in enumerate(ground_truth):
        best, arg = iou_thresh, None
        for p in proposals.get(a.frame_id, []):
            o = iou(a.box, p.box)
            if o >= best and (arg is None or o > best):
                best, arg = o, p
        if arg is not None:
            out[k] = arg
    return out


def single_view_accuracy(frame_labels: Mapping[tuple, str], matches: Mapping[int, object],
                         ground_truth: Sequence[Annotation]) -> float:
    """Per-(frame, object) accuracy of independent per-frame labels.

    ``frame_labels`` maps ``(frame_id, seed_id)`` to the label predicted in that frame.
    """
    hits = [frame_labels[(p.frame_id, p.seed_id)] == ground_truth[k].label
            for k, p in matches.items()]
    return float(np.mean(hits)) if hits else float("nan")


def scene_object_labels(matches: Mapping[int, object], ground_truth: Sequence[Annotation],
                        seed_labels: Mapping[int, str]) -> Dict[int, Optional[str]]:
    """Scene-level label of each ground-truth object: the aggregated label of
    the seed that matched it in the most frames (lowest seed id on ties)."""
    votes: Dict[int, Dict[int, int]] = {}
    for k, p in matches.items():
        oid = ground_truth[k].object_id
        votes.setdefault(oid, {})
        votes[oid][p.seed_id] = votes[oid].get(p.seed_id, 0) + 1
    out: Dict[int, Optional[str]] = {}
    for oid in sorted({a.object_id for a in ground_truth}):
        v = votes.get(oid)
        if not v:
            out[oid] = None
            continue
        sid = min(v, key=lambda s: (-v[s], s))
        out[oid] = seed_labels.get(sid)
    return out


def multi_view_accuracy(object_labels: Mapping[int, Optional[str]],
                        ground_truth: Sequence[Annotation]) -> float:
    truth = {a.object_id: a.label for a in ground_truth}
    hits = [object_labels.get(oid) == lab for oid, lab in truth.items()]
    return float(np.mean(hits)) if hits else float("nan")


# -------------------------------------------------------------------- output

def write_pr_csv(curve: PrCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["label", "rank", "score", "precision", "recall", "ap"])
        for lab, c in curve.curves.items():
            for i in range(len(c.precision)):
                w.writerow([lab, i + 1, f"{c.scores[i]:.9g}", f"{c.precision[i]:.9g}",
                            f"{c.recall[i]:.9g}", f"{c.ap:.9g}"])
        w.writerow(["mAP", "", "", "", "", f"{curve.mAP:.9g}"])


def write_recall_csv(rows: List[dict], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["iou", "recall", "proposals_per_frame"])
        w.writeheader()
        for r in rows:
            w.writerow({k: f"{v:.9g}" for k, v in r.items()})


def read_detections(path) -> List[Detection]:
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(Detection.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise ValueError(f"{path}:{i}: malformed detection ({exc})") from None
    return out


def write_detections(dets: Sequence[Detection], path) -> None:
    with open(path, "w") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json(), sort_keys=True) + "\n")
