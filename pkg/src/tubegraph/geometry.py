"""Boxes, micro-tubes, snippet tubes, tube linking and IoU variants.

Boxes are corner-form ``(x1, y1, x2, y2)`` in pixels; ``(x, y, w, h)`` only
appears at file boundaries.  Frame indices are 1-based and inclusive.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Mapping, Optional, Sequence

import numpy as np

TUBE_LEN = 12
MICRO_GAP = 3


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self):
        vals = (self.x1, self.y1, self.x2, self.y2)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"non-finite box {vals}")
        if self.x2 < self.x1 or self.y2 < self.y1:
            raise ValueError(f"inverted box {vals}")

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return self.width * self.height

    @property
    def center(self) -> tuple[float, float]:
        return (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    def to_xywh(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.width, self.height)

    @classmethod
    def from_xywh(cls, x: float, y: float, w: float, h: float) -> "Box":
        if w < 0 or h < 0:
            raise ValueError(f"negative box extent w={w}, h={h}")
        return cls(x, y, x + w, y + h)

    def clamp(self, width: float, height: float) -> "Box":
        x1 = min(max(self.x1, 0.0), width)
        y1 = min(max(self.y1, 0.0), height)
        x2 = min(max(self.x2, x1), width)
        y2 = min(max(self.y2, y1), height)
        return Box(x1, y1, x2, y2)


def box_iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


@dataclass(frozen=True)
class TemporalInterval:
    start_frame: int
    end_frame: int

    def __post_init__(self):
        if self.start_frame > self.end_frame:
            raise ValueError(f"interval start {self.start_frame} > end {self.end_frame}")

    def __len__(self) -> int:
        return self.end_frame - self.start_frame + 1


@dataclass(frozen=True)
class ActivitySegment:
    """A labelled frame interval: a ground-truth activity or a detection."""

    label: int
    interval: TemporalInterval
    score: float = 1.0

    @property
    def start_frame(self) -> int:
        return self.interval.start_frame

    @property
    def end_frame(self) -> int:
        return self.interval.end_frame


def temporal_iou(a: TemporalInterval, b: TemporalInterval) -> float:
    inter = min(a.end_frame, b.end_frame) - max(a.start_frame, b.start_frame) + 1
    if inter <= 0:
        return 0.0
    return inter / (len(a) + len(b) - inter)


def spatiotemporal_tube_iou(a: Mapping[int, Box], b: Mapping[int, Box]) -> float:
    """Temporal IoU of the frame spans times mean box IoU over shared frames."""
    if not a or not b:
        return 0.0
    span_a = TemporalInterval(min(a), max(a))
    span_b = TemporalInterval(min(b), max(b))
    t_iou = temporal_iou(span_a, span_b)
    if t_iou == 0.0:
        return 0.0
    lo = max(span_a.start_frame, span_b.start_frame)
    hi = min(span_a.end_frame, span_b.end_frame)
    ious = [box_iou(a[f], b[f]) if f in a and f in b else 0.0 for f in range(lo, hi + 1)]
    return t_iou * float(np.mean(ious))


# -- micro-tubes -----------------------------------------------------------

@dataclass(frozen=True)
class MicroTube:
    start_frame: int
    gap: int
    start_box: Box
    end_box: Box
    class_scores: tuple[float, ...]

    def __post_init__(self):
        if self.gap < 1:
            raise ValueError(f"micro-tube gap must be >= 1, got {self.gap}")
        if any(not 0.0 <= s <= 1.0 for s in self.class_scores):
            raise ValueError(f"class scores must lie in [0, 1]: {self.class_scores}")

    @property
    def end_frame(self) -> int:
        return self.start_frame + self.gap


def _lerp_box(a: Box, b: Box, alpha: float) -> Box:
    # (1-a)*p + a*q reproduces both endpoints bit-exactly
    return Box(*((1.0 - alpha) * p + alpha * q for p, q in zip(a.as_tuple(), b.as_tuple())))


def interpolate_micro_tube(mt: MicroTube) -> list[tuple[int, Box]]:
    """All ``gap + 1`` frames of a micro-tube, intermediates linearly interpolated."""
    out = [(mt.start_frame, mt.start_box)]
    for i in range(1, mt.gap):
        out.append((mt.start_frame + i, _lerp_box(mt.start_box, mt.end_box, i / mt.gap)))
    out.append((mt.end_frame, mt.end_box))
    return out


@dataclass(frozen=True)
class ActionTube:
    """One atomic action inside one snippet: exactly ``TUBE_LEN`` boxes.

    ``first_frame`` is the absolute frame where the underlying detection
    first appears (frames before it hold the first box); it only feeds the
    appearance-order sort of the scene graph.
    """

    snippet_index: int
    boxes: tuple[Box, ...]
    action_label: int
    confidence: float = 1.0
    tube_id: int = 0
    first_frame: Optional[int] = None

    def __post_init__(self):
        if len(self.boxes) != TUBE_LEN:
            raise ValueError(f"action tube needs {TUBE_LEN} boxes, got {len(self.boxes)}")
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")

    @property
    def start_frame(self) -> int:
        return self.snippet_index * TUBE_LEN + 1

    @property
    def appearance_frame(self) -> int:
        return self.start_frame if self.first_frame is None else self.first_frame

    def box_array(self) -> np.ndarray:
        return np.array([b.as_tuple() for b in self.boxes], dtype=np.float64)

    def frame_map(self) -> dict[int, Box]:
        return {self.start_frame + i: b for i, b in enumerate(self.boxes)}


def assemble_snippet_tubes(
    micro_tubes: Sequence[MicroTube],
    snippet_len: int = TUBE_LEN,
    snippet_index: Optional[int] = None,
    tube_id: int = 0,
) -> ActionTube:
    """Join a chain of micro-tubes into one snippet-long action tube.

    With ``snippet_len=12`` and gap 3 the chain is three micro-tubes anchored
    at frame pairs (1,4), (5,8), (9,12) relative to the snippet start.
    """
    if not micro_tubes:
        raise ValueError("empty micro-tube chain")
    gap = micro_tubes[0].gap
    expected = snippet_len // (gap + 1)
    if len(micro_tubes) != expected or expected * (gap + 1) != snippet_len:
        raise ValueError(f"chain of {len(micro_tubes)} micro-tubes with gap {gap} "
                         f"cannot cover {snippet_len} frames")
    start = micro_tubes[0].start_frame
    if snippet_index is None:
        snippet_index = (start - 1) // snippet_len
    for i, mt in enumerate(micro_tubes):
        want = start + i * (gap + 1)
        if mt.start_frame != want or mt.gap != gap:
            raise ValueError(f"micro-tube {i} starts at frame {mt.start_frame} "
                             f"(gap {mt.gap}); expected frame {want} with gap {gap}")
    boxes = [b for mt in micro_tubes for _, b in interpolate_micro_tube(mt)]
    scores = np.mean([mt.class_scores for mt in micro_tubes], axis=0)
    label = int(np.argmax(scores))
    return ActionTube(snippet_index, tuple(boxes), label, float(scores[label]), tube_id)


def split_tube(tube: ActionTube, n_classes: int, gap: int = MICRO_GAP) -> list[MicroTube]:
    """Inverse of ``assemble_snippet_tubes`` for piecewise-linear tubes."""
    scores = [0.0] * n_classes
    scores[tube.action_label] = tube.confidence
    out = []
    for s in range(0, len(tube.boxes), gap + 1):
        out.append(MicroTube(tube.start_frame + s, gap, tube.boxes[s], tube.boxes[s + gap],
                             tuple(scores)))
    return out


# -- linking ---------------------------------------------------------------

def _key(score: float) -> float:
    # 1e-9 resolution so equal-by-construction scores tie deterministically
    return round(score, 9)


@dataclass(frozen=True)
class TubeChain:
    """A linked path: one candidate index per consecutive step from ``start_step``."""

    label: int
    start_step: int
    candidates: tuple[int, ...]
    score: float

    @property
    def steps(self) -> range:
        return range(self.start_step, self.start_step + len(self.candidates))


def _blocks(alive: list[list[int]]) -> list[tuple[int, int]]:
    out, t = [], 0
    while t < len(alive):
        if alive[t]:
            s = t
            while t < len(alive) and alive[t]:
                t += 1
            out.append((s, t))
        else:
            t += 1
    return out


def _best_block_path(steps, alive, s, e, label, lam) -> tuple[float, tuple[int, ...]]:
    # suffix Viterbi, then a forward trace that prefers lower candidate indices
    suffix: list[dict[int, float]] = [dict() for _ in range(e - s)]
    for t in range(e - 1, s - 1, -1):
        for j in alive[t]:
            here = steps[t][j].class_scores[label]
            if t + 1 < e:
                end_box = steps[t][j].end_box
                here += max(lam * box_iou(end_box, steps[t + 1][n].start_box) + suffix[t + 1 - s][n]
                            for n in alive[t + 1])
            suffix[t - s][j] = here

    def pick(options: dict[int, float]) -> int:
        best = max(_key(v) for v in options.values())
        return min(j for j, v in options.items() if _key(v) == best)

    path = [pick(suffix[0])]
    for t in range(s + 1, e):
        prev = steps[t - 1][path[-1]].end_box
        path.append(pick({n: lam * box_iou(prev, steps[t][n].start_box) + suffix[t - s][n]
                          for n in alive[t]}))
    return suffix[0][path[0]], tuple(path)


def link_micro_tubes(
    steps: Sequence[Sequence[MicroTube]],
    lam: float = 1.0,
    labels: Optional[Sequence[int]] = None,
) -> list[TubeChain]:
    """Link per-step micro-tube candidates into chains, class by class.

    For each class the best-scoring path (sum of class scores plus ``lam``
    times the IoU between consecutive end/start boxes) over a maximal run of
    non-empty steps is extracted, its candidates are removed, and the search
    repeats until nothing is left.  Ties resolve towards the earlier run,
    then the lexicographically smaller candidate indices.
    """
    if lam < 0:
        raise ValueError(f"lambda must be non-negative, got {lam}")
    if labels is None:
        n = max((len(mt.class_scores) for step in steps for mt in step), default=0)
        labels = range(n)
    chains: list[TubeChain] = []
    for label in labels:
        alive = [list(range(len(step))) for step in steps]
        while True:
            best = None
            for s, e in _blocks(alive):
                score, path = _best_block_path(steps, alive, s, e, label, lam)
                if best is None or _key(score) > _key(best[0]):
                    best = (score, s, path)
            if best is None:
                break
            score, s, path = best
            chains.append(TubeChain(label, s, path, score))
            for i, j in enumerate(path):
                alive[s + i].remove(j)
    return chains
