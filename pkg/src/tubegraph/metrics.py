"""Classification report and detection mAP (temporal, frame and video level).

Matching follows descending score.  Detections with equal scores form a
group that is matched jointly (maximum number of matches, then maximum total
IoU) against the ground truths still free, so the result never depends on
the input order of tied detections.  A lone detection therefore simply takes
the free ground truth of highest IoU, provided IoU >= threshold.

AP is the mean over true positives of the precision at their rank,
normalised by the number of ground truths (no interpolation).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Hashable, Iterable, Mapping, NamedTuple, Optional, Sequence

import numpy as np
from scipy.optimize import linear_sum_assignment

from .geometry import ActivitySegment, Box, box_iou, spatiotemporal_tube_iou, temporal_iou

DEFAULT_THRESHOLDS = (0.1, 0.2, 0.3, 0.4, 0.5)


# -- classification ----------------------------------------------------------

def classification_report(predictions: Sequence[int], ground_truth: Sequence[int],
                          labels: Optional[Iterable[int]] = None) -> dict:
    if len(predictions) != len(ground_truth):
        raise ValueError(f"{len(predictions)} predictions for {len(ground_truth)} labels")
    if not predictions:
        raise ValueError("empty prediction list")
    pred = np.asarray(predictions)
    true = np.asarray(ground_truth)
    labels = sorted(set(true.tolist()) | set(pred.tolist()) if labels is None else labels)
    per_class = {}
    for c in labels:
        tp = int(np.sum((pred == c) & (true == c)))
        n_pred = int(np.sum(pred == c))
        n_true = int(np.sum(true == c))
        p = tp / n_pred if n_pred else 0.0
        r = tp / n_true if n_true else 0.0
        f1 = 2 * p * r / (p + r) if p + r > 0 else 0.0
        per_class[int(c)] = {"precision": p, "recall": r, "f1": f1, "support": n_true}
    macro = {m: float(np.mean([v[m] for v in per_class.values()])) for m in ("precision", "recall", "f1")}
    return {"accuracy": float(np.mean(pred == true)), "per_class": per_class, "macro": macro}


# -- matching and AP ------------------------------------------------------------

@dataclass
class MatchResult:
    """Scored detections of one class with their TP flags, plus the GT count."""

    detections: list[tuple[float, bool]] = field(default_factory=list)
    n_ground_truth: int = 0

    def extend(self, other: "MatchResult") -> None:
        self.detections.extend(other.detections)
        self.n_ground_truth += other.n_ground_truth


def _assignment_value(weight: np.ndarray) -> float:
    rows, cols = linear_sum_assignment(weight, maximize=True)
    return float(weight[rows, cols].sum())


def _group_assignment(sub: np.ndarray, ok: np.ndarray) -> dict[int, int]:
    """Equal-score detections -> ground truths: most matches, then highest total IoU.

    Among optimal assignments the set of ground truths used is the
    lexicographically smallest one, so what stays free for lower scores does
    not depend on detection order.  Within that set each row in turn takes
    the smallest column that still admits an optimal completion.
    """
    n = min(sub.shape)
    # hierarchy of bonuses: one more match > one more required column > any IoU total
    b_col = n + 1.0
    b_match = b_col * (n + 2.0)
    base = np.where(ok, b_match + sub, 0.0)
    target = _assignment_value(base)
    count = int(target // b_match)

    def feasible(required: list[int]) -> bool:
        w = base.copy()
        w[:, required] += np.where(ok[:, required], b_col, 0.0)
        return _assignment_value(w) >= target + b_col * len(required) - 1e-9

    chosen: list[int] = []
    for c in np.flatnonzero(ok.any(axis=0)):
        if len(chosen) == count:
            break
        if feasible(chosen + [int(c)]):
            chosen.append(int(c))

    weight = np.zeros_like(base)
    weight[:, chosen] = base[:, chosen]
    out: dict[int, int] = {}
    fixed = 0.0
    for r in range(weight.shape[0]):
        for c in np.flatnonzero(weight[r] > 0):
            trial = weight.copy()
            trial[r, :] = 0.0
            trial[:, c] = 0.0
            if fixed + weight[r, c] + _assignment_value(trial) >= target - 1e-9:
                out[r] = int(c)
                fixed += weight[r, c]
                break
        weight[r, :] = 0.0
        if r in out:
            weight[:, out[r]] = 0.0
    return out


def match_detections(scores: Sequence[float], iou: np.ndarray, threshold: float) -> list[bool]:
    """TP flag for each detection given its IoU against every ground truth.

    ``iou`` is ``(n_det, n_gt)``.  A pair qualifies when IoU >= ``threshold``.
    Detections are taken in descending score; a group of equal scores is
    matched jointly to the unused ground truths (see ``_group_assignment``).
    """
    scores = np.asarray(scores, dtype=np.float64)
    if not len(scores):
        return []
    iou = np.asarray(iou, dtype=np.float64).reshape(len(scores), -1)
    n_gt = iou.shape[1]
    tp = [False] * len(scores)
    free = np.ones(n_gt, dtype=bool)
    order = np.argsort(-scores, kind="stable")
    i = 0
    while i < len(order):
        j = i
        while j < len(order) and scores[order[j]] == scores[order[i]]:
            j += 1
        group = order[i:j]
        i = j
        cols = np.flatnonzero(free)
        if not len(cols):
            continue
        sub = iou[np.ix_(group, cols)]
        ok = sub >= threshold
        if len(group) == 1:
            cand = np.where(ok[0], sub[0], -1.0)
            best = int(np.argmax(cand))
            if cand[best] >= 0:
                tp[group[0]] = True
                free[cols[best]] = False
            continue
        for r, c in _group_assignment(sub, ok).items():
            tp[group[r]] = True
            free[cols[c]] = False
    return tp


def average_precision(matches: MatchResult) -> Optional[float]:
    """Non-interpolated AP; ``None`` when there is nothing to score."""
    if matches.n_ground_truth == 0:
        return None if not matches.detections else 0.0
    # TP before FP among equal scores, otherwise input order (sort is stable)
    ranked = sorted(matches.detections, key=lambda d: (-d[0], not d[1]))
    hits = 0
    total = 0.0
    for rank, (_, is_tp) in enumerate(ranked, start=1):
        if is_tp:
            hits += 1
            total += hits / rank
    return total / matches.n_ground_truth


def _summarise(per_class: Mapping[int, MatchResult]) -> dict:
    aps = {c: average_precision(m) for c, m in sorted(per_class.items())}
    with_gt = [ap for c, ap in aps.items() if per_class[c].n_ground_truth > 0]
    return {
        "per_class": {int(c): ap for c, ap in aps.items() if ap is not None},
        "mAP": float(np.mean(with_gt)) if with_gt else 0.0,
    }


def _check_threshold(threshold: float) -> None:
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"IoU threshold must lie in (0, 1], got {threshold}")


def _match_grouped(dets, gts, iou_fn, threshold) -> dict[int, MatchResult]:
    """``dets``/``gts`` map (class, group key) to lists; matching stays within a group."""
    per_class: dict[int, MatchResult] = defaultdict(MatchResult)
    for key in sorted(set(dets) | set(gts), key=repr):
        cls = key[0]
        d = dets.get(key, [])
        g = gts.get(key, [])
        res = MatchResult(n_ground_truth=len(g))
        if d:
            scores = [s for s, _ in d]
            iou = np.array([[iou_fn(x, y) for y in g] for _, x in d]).reshape(len(d), len(g))
            res.detections = list(zip(scores, match_detections(scores, iou, threshold)))
        per_class[cls].extend(res)
    return per_class


# -- temporal ------------------------------------------------------------------

def _as_video_map(segments) -> Mapping[Hashable, Sequence[ActivitySegment]]:
    return segments if isinstance(segments, Mapping) else {None: segments}


def temporal_detection_map(detections, ground_truth, threshold: float) -> dict:
    """Per-class AP and mAP of activity segments at one temporal-IoU threshold.

    Both arguments are either one video's segment list or a mapping from
    video id to segment lists.  mAP averages the classes that have ground
    truth.
    """
    _check_threshold(threshold)
    dets, gts = defaultdict(list), defaultdict(list)
    for vid, segs in _as_video_map(detections).items():
        for s in segs:
            dets[(s.label, vid)].append((s.score, s.interval))
    for vid, segs in _as_video_map(ground_truth).items():
        for s in segs:
            gts[(s.label, vid)].append(s.interval)
    return _summarise(_match_grouped(dets, gts, temporal_iou, threshold))


# -- frame / video ----------------------------------------------------------------

class FrameDetection(NamedTuple):
    video: Hashable
    frame: int
    label: int
    score: float
    box: Box


class FrameTruth(NamedTuple):
    video: Hashable
    frame: int
    label: int
    box: Box


class TubeDetection(NamedTuple):
    video: Hashable
    label: int
    score: float
    boxes: Mapping[int, Box]


class TubeTruth(NamedTuple):
    video: Hashable
    label: int
    boxes: Mapping[int, Box]


def frame_map(detections: Iterable[FrameDetection], ground_truth: Iterable[FrameTruth],
              threshold: float) -> dict:
    _check_threshold(threshold)
    dets, gts = defaultdict(list), defaultdict(list)
    for d in detections:
        dets[(d.label, d.video, d.frame)].append((d.score, d.box))
    for g in ground_truth:
        gts[(g.label, g.video, g.frame)].append(g.box)
    return _summarise(_match_grouped(dets, gts, box_iou, threshold))


def video_map(detections: Iterable[TubeDetection], ground_truth: Iterable[TubeTruth],
              threshold: float) -> dict:
    _check_threshold(threshold)
    dets, gts = defaultdict(list), defaultdict(list)
    for d in detections:
        dets[(d.label, d.video)].append((d.score, d.boxes))
    for g in ground_truth:
        gts[(g.label, g.video)].append(g.boxes)
    return _summarise(_match_grouped(dets, gts, spatiotemporal_tube_iou, threshold))


# -- reporting ----------------------------------------------------------------

def format_map_table(rows: Mapping[str, Mapping[float, float]], title: str = "mAP (%)") -> str:
    """Plain-text table: one row per method/task, one column per threshold."""
    thresholds = sorted({t for r in rows.values() for t in r})
    head = f"{title:<24}" + "".join(f"{t:>8.2f}" for t in thresholds)
    lines = [head, "-" * len(head)]
    for name, r in rows.items():
        lines.append(f"{name:<24}" + "".join(
            f"{100 * r[t]:>8.1f}" if t in r else f"{'-':>8}" for t in thresholds))
    return "\n".join(lines)
