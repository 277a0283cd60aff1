"""Synthetic scenarios with ROAD-like and SARAS-like annotation structure.

A video is a sequence of snippet-aligned activity segments.  Each activity
class has a template: the atomic action labels that must be present while it
lasts, laid out left to right in that order (each tube keeps to its own
vertical lane).  ROAD-style videos put background gaps between activities;
SARAS-style videos are tiled by phases with no background.

Features stand in for backbone activations: every tube adds a tent-shaped
bump (1 at the box centre, 0 at its edges) to channel ``label % C`` of the
frames it covers, on top of seeded uniform noise.
"""

from __future__ import annotations

import dataclasses
import math
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np

from ..deform import FeatureVolume
from ..geometry import ActivitySegment, Box, TemporalInterval
from .schema import SchemaError, TubeAnnotation, VideoAnnotation

ROAD_ACTIONS = [
    "AV-move", "AV-stop", "AV-slow", "Veh-stop-at-junction", "Veh-cross-junction",
    "Ped-crossing", "Cyc-crossing", "Veh-in-queue", "TL-red", "Veh-merging",
    "Ped-sudden-appear", "Ped-walk-on-road",
]

ROAD_GRAMMAR = {
    "negotiating_intersection": ["TL-red", "Veh-cross-junction", "AV-stop"],
    "negotiating_pedestrian_crossing": ["AV-stop", "Ped-crossing", "Cyc-crossing"],
    "waiting_in_a_queue": ["AV-stop", "Veh-in-queue", "Veh-in-queue"],
    "merging_into_vehicle_lane": ["AV-stop", "Veh-merging"],
    "sudden_appearance": ["AV-move", "Ped-sudden-appear"],
    "walking_in_middle_of_road": ["AV-slow", "Ped-walk-on-road"],
}

SARAS_ACTIONS = [
    "PullingTissue", "CuttingTissue", "SuckingBlood", "SuckingSmoke", "BladderNeckDissection",
    "ClippingTissue", "PullingSeminalVesicle", "CuttingSeminalVesicle", "UrethraDissection",
    "PullingProstate", "BladderAnastomosis", "CuttingThread",
]

SARAS_GRAMMAR = {
    "bladder_mobilization": ["PullingTissue", "CuttingTissue"],
    "afp_dissection": ["PullingTissue", "SuckingSmoke", "CuttingTissue"],
    "bladder_neck_transection": ["BladderNeckDissection", "SuckingBlood"],
    "nvp_dissection": ["ClippingTissue", "PullingTissue"],
    "exposure_of_seminal_vesicles": ["PullingSeminalVesicle", "CuttingSeminalVesicle", "SuckingSmoke"],
    "urethral_division": ["UrethraDissection", "CuttingTissue"],
    "prostate_liberation": ["PullingProstate", "CuttingTissue", "SuckingBlood"],
    "vesicourethral_anastomosis": ["BladderAnastomosis", "CuttingThread"],
}

# the lone tube sometimes present in ROAD background snippets
ROAD_IDLE_ACTION = "AV-move"

# coordinates are kept on a 1/64 px lattice so (x, y, w, h) <-> corners is exact
QUANTUM = 64.0


def _q(v):
    return np.round(np.asarray(v) * QUANTUM) / QUANTUM


@dataclass
class ScenarioConfig:
    style: str = "road"
    n_videos: int = 50
    n_test: int = 10
    frames_per_video: int = 120
    frame_size: tuple[int, int] = (300, 300)
    snippet_len: int = 12
    action_labels: Optional[list[str]] = None
    grammar: Optional[dict[str, list[str]]] = None
    min_segment_snippets: int = 2
    max_segment_snippets: int = 4
    max_tubes: int = 6
    jitter_sigma: float = 0.0
    drop_prob: float = 0.0
    flip_prob: float = 0.0
    channels: int = 64
    spatial_scale: float = 0.125
    feature_noise: float = 0.02
    seed: int = 0

    def __post_init__(self):
        if self.style not in ("road", "saras"):
            raise ValueError(f"style must be 'road' or 'saras', got {self.style!r}")
        self.frame_size = tuple(int(v) for v in self.frame_size)
        if self.action_labels is None:
            self.action_labels = list(ROAD_ACTIONS if self.style == "road" else SARAS_ACTIONS)
        if self.grammar is None:
            self.grammar = {k: list(v) for k, v in
                            (ROAD_GRAMMAR if self.style == "road" else SARAS_GRAMMAR).items()}
        for name in ("drop_prob", "flip_prob"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1], got {p}")
        if self.jitter_sigma < 0:
            raise ValueError(f"jitter_sigma must be >= 0, got {self.jitter_sigma}")
        if not self.grammar:
            raise ValueError("activity grammar is empty")
        if not 0 <= self.n_test <= self.n_videos:
            raise ValueError(f"n_test={self.n_test} outside [0, n_videos={self.n_videos}]")
        if self.frames_per_video < self.snippet_len:
            raise ValueError("videos must hold at least one snippet")
        for act, template in self.grammar.items():
            if not template:
                raise ValueError(f"activity {act!r} has an empty template")
            if len(template) > self.max_tubes:
                raise ValueError(f"activity {act!r} needs {len(template)} simultaneous tubes, "
                                 f"more than max_tubes={self.max_tubes}")
            unknown = [a for a in template if a not in self.action_labels]
            if unknown:
                raise ValueError(f"activity {act!r} uses unknown atomic actions {unknown}")

    @property
    def activity_labels(self) -> list[str]:
        names = list(self.grammar)
        return ["background", *names] if self.style == "road" else names

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["frame_size"] = list(self.frame_size)
        # ordered pairs: grammar order fixes the activity ids and JSON is written with sorted keys
        d["grammar"] = [[k, list(v)] for k, v in self.grammar.items()]
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise SchemaError(f"scenario config: unknown field(s) {unknown}")
        d = dict(d)
        if isinstance(d.get("grammar"), list):
            try:
                d["grammar"] = {str(k): list(v) for k, v in d["grammar"]}
            except (TypeError, ValueError) as exc:
                raise SchemaError(f"scenario config: grammar must be [name, template] pairs ({exc})") from exc
        try:
            return cls(**d)
        except (TypeError, ValueError) as exc:
            raise SchemaError(f"scenario config: {exc}") from exc


def _video_rng(seed: int, index: int, stream: int) -> np.random.Generator:
    return np.random.default_rng([seed, index, stream])


def _timeline(cfg: ScenarioConfig, rng: np.random.Generator) -> list[tuple[Optional[str], int]]:
    """Snippet-aligned (activity or None for background, length in snippets) runs."""
    n = cfg.frames_per_video // cfg.snippet_len
    acts = list(cfg.grammar)
    runs: list[tuple[Optional[str], int]] = []
    background = cfg.style == "road" and rng.random() < 0.5
    prev = None
    left = n
    while left > 0:
        if background:
            length = int(rng.integers(2, 4))
            name = None
        else:
            length = int(rng.integers(cfg.min_segment_snippets, cfg.max_segment_snippets + 1))
            choices = [a for a in acts if a != prev] or acts
            name = choices[int(rng.integers(len(choices)))]
            prev = name
        length = min(length, left)
        if left - length < max(2, cfg.min_segment_snippets):
            length = left
        runs.append((name, length))
        left -= length
        if cfg.style == "road":
            background = not background
    return runs


def _lane_track(rng, lane: tuple[float, float], frames: range, frame_size, snippet_len) -> dict[int, Box]:
    """Piecewise-linear box motion inside one vertical lane, new velocity every snippet."""
    h_img, w_img = frame_size
    lo, hi = lane
    lane_w = hi - lo
    bw = min(rng.uniform(0.5, 0.8) * lane_w, 0.35 * w_img)
    bh = rng.uniform(0.25, 0.45) * h_img
    x = rng.uniform(lo, hi - bw)
    y = rng.uniform(0.0, h_img - bh)
    boxes = {}
    vx = vy = 0.0
    for f in frames:
        if (f - 1) % snippet_len == 0:
            vx, vy = rng.uniform(-0.6, 0.6, size=2)
        x = min(max(x + vx, lo), hi - bw)
        y = min(max(y + vy, 0.0), h_img - bh)
        x1, y1, x2, y2 = _q([x, y, x + bw, y + bh])
        boxes[f] = Box(float(x1), float(y1), float(min(x2, w_img)), float(min(y2, h_img)))
    return boxes


def _clean_video(cfg: ScenarioConfig, index: int) -> VideoAnnotation:
    rng = _video_rng(cfg.seed, index, 0)
    acts = cfg.activity_labels
    ann = VideoAnnotation(
        video_id=f"{cfg.style}_{index:04d}",
        n_frames=cfg.frames_per_video,
        frame_size=cfg.frame_size,
        style=cfg.style,
        action_labels=list(cfg.action_labels),
        activity_labels=acts,
    )
    h_img, w_img = cfg.frame_size
    start = 1
    for name, length in _timeline(cfg, rng):
        frames = range(start, start + length * cfg.snippet_len)
        if name is None:
            template = [ROAD_IDLE_ACTION] if rng.random() < 0.5 else []
        else:
            template = cfg.grammar[name]
            ann.activities.append(ActivitySegment(acts.index(name), TemporalInterval(frames[0], frames[-1])))
        lane_w = w_img / max(len(template), 1)
        for i, atom in enumerate(template):
            lane = (i * lane_w, (i + 1) * lane_w)
            boxes = _lane_track(rng, lane, frames, cfg.frame_size, cfg.snippet_len)
            ann.tubes.append(TubeAnnotation(len(ann.tubes), cfg.action_labels.index(atom), boxes))
        start = frames[-1] + 1
    # frames past the last full snippet: phases still tile the video, tubes stop
    if cfg.style == "saras" and ann.activities and start <= cfg.frames_per_video:
        last = ann.activities[-1]
        ann.activities[-1] = ActivitySegment(last.label, TemporalInterval(last.start_frame, cfg.frames_per_video))
    return ann


def _noisy_copy(cfg: ScenarioConfig, clean: VideoAnnotation, index: int) -> VideoAnnotation:
    rng = _video_rng(cfg.seed, index, 1)
    h_img, w_img = clean.frame_size
    noisy = dataclasses.replace(clean, tubes=[], activities=list(clean.activities))
    any_noise = cfg.jitter_sigma > 0 or cfg.drop_prob > 0 or cfg.flip_prob > 0
    n_labels = len(clean.action_labels)
    for t in clean.tubes:
        drop, flip, conf_draw = rng.random(3)
        if drop < cfg.drop_prob:
            continue
        label, conf = t.label, t.confidence
        if flip < cfg.flip_prob and n_labels > 1:
            label = int((t.label + 1 + rng.integers(n_labels - 1)) % n_labels)
            conf = float(_q(0.3 + 0.3 * conf_draw))
        elif any_noise:
            conf = float(_q(0.6 + 0.4 * conf_draw))
        boxes = t.boxes
        if cfg.jitter_sigma > 0:
            boxes = {}
            for f in t.frames():
                c = np.array(t.boxes[f].as_tuple()) + rng.normal(0.0, cfg.jitter_sigma, 4)
                x1, x2 = np.clip(np.sort(c[[0, 2]]), 0.0, w_img)
                y1, y2 = np.clip(np.sort(c[[1, 3]]), 0.0, h_img)
                x1, y1, x2, y2 = _q([x1, y1, x2, y2])
                boxes[f] = Box(float(x1), float(y1), float(x2), float(y2))
        noisy.tubes.append(TubeAnnotation(t.tube_id, label, boxes, conf))
    return noisy


def generate_scenarios(cfg: ScenarioConfig) -> tuple[list[VideoAnnotation], list[VideoAnnotation]]:
    """Clean annotations and their noisy "detection" copies, one pair per video."""
    clean = [_clean_video(cfg, i) for i in range(cfg.n_videos)]
    for ann in clean:
        ann.validate(ann.video_id)
    noisy = [_noisy_copy(cfg, c, i) for i, c in enumerate(clean)]
    return clean, noisy


# -- features ----------------------------------------------------------------------

def feature_grid_size(frame_size: tuple[int, int], spatial_scale: float) -> tuple[int, int]:
    return (math.ceil(frame_size[0] * spatial_scale), math.ceil(frame_size[1] * spatial_scale))


def _tent(coords: np.ndarray, lo: float, hi: float) -> np.ndarray:
    half = 0.5 * (hi - lo)
    if half <= 0:
        return np.zeros_like(coords)
    return np.clip(1.0 - np.abs(coords - 0.5 * (lo + hi)) / half, 0.0, None)


def render_feature_volume(
    ann: VideoAnnotation,
    snippet_index: int,
    channels: int = 64,
    spatial_scale: float = 0.125,
    noise: float = 0.02,
    seed: int = 0,
    snippet_len: int = 12,
) -> FeatureVolume:
    first = snippet_index * snippet_len + 1
    if snippet_index < 0 or first + snippet_len - 1 > ann.n_frames:
        raise ValueError(f"snippet {snippet_index} does not fit inside {ann.n_frames} frames")
    hf, wf = feature_grid_size(ann.frame_size, spatial_scale)
    rng = np.random.default_rng([seed, zlib.crc32(ann.video_id.encode()), snippet_index, 7])
    vol = rng.uniform(-noise, noise, size=(channels, snippet_len, hf, wf)) if noise > 0 \
        else np.zeros((channels, snippet_len, hf, wf))
    px = np.arange(wf) / spatial_scale
    py = np.arange(hf) / spatial_scale
    for t in ann.tubes:
        ch = t.label % channels
        for i in range(snippet_len):
            b = t.boxes.get(first + i)
            if b is not None:
                vol[ch, i] += np.outer(_tent(py, b.y1, b.y2), _tent(px, b.x1, b.x2))
    return FeatureVolume(vol, spatial_scale, (float(ann.frame_size[0]), float(ann.frame_size[1])))
