"""JSON file schemas: annotations, detections, graphs, metrics and manifests.

Every file is a JSON object carrying ``schema_version`` and ``kind``.
Loading is strict: unknown keys, missing keys, wrong types and out-of-range
values raise ``SchemaError`` naming the offending path.  Boxes are written
as ``[frame, x, y, w, h]`` rows.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

from ..geometry import ActivitySegment, Box, TemporalInterval

SCHEMA_VERSION = 1


class DataError(Exception):
    """Base class for problems with input files."""


class ParseError(DataError):
    pass


class SchemaError(DataError):
    pass


class VersionError(DataError):
    pass


# -- strict field access --------------------------------------------------------

def _obj(d: Any, path: str, required: Sequence[str], optional: Sequence[str] = ()) -> dict:
    if not isinstance(d, dict):
        raise SchemaError(f"{path}: expected an object, got {type(d).__name__}")
    missing = [k for k in required if k not in d]
    if missing:
        raise SchemaError(f"{path}: missing field(s) {missing}")
    unknown = sorted(set(d) - set(required) - set(optional))
    if unknown:
        raise SchemaError(f"{path}: unknown field(s) {unknown}")
    return d


def _typed(v: Any, kind, path: str):
    if kind is float:
        ok = isinstance(v, (int, float)) and not isinstance(v, bool)
        v = float(v) if ok else v
    elif kind is int:
        ok = isinstance(v, int) and not isinstance(v, bool)
    else:
        ok = isinstance(v, kind)
    if not ok:
        raise SchemaError(f"{path}: expected {getattr(kind, '__name__', kind)}, got {v!r}")
    return v


def _list(v: Any, path: str) -> list:
    return _typed(v, list, path)


def check_header(d: Any, kind: str, path: str = "$") -> None:
    if not isinstance(d, dict):
        raise SchemaError(f"{path}: expected an object")
    version = d.get("schema_version")
    if version != SCHEMA_VERSION:
        raise VersionError(f"{path}.schema_version: expected {SCHEMA_VERSION}, got {version!r}")
    if d.get("kind") != kind:
        raise SchemaError(f"{path}.kind: expected {kind!r}, got {d.get('kind')!r}")


def header(kind: str) -> dict:
    return {"schema_version": SCHEMA_VERSION, "kind": kind}


def read_json(path: str) -> Any:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except OSError as exc:
        raise DataError(f"{path}: {exc.strerror}") from exc
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: line {exc.lineno} column {exc.colno} "
                         f"(offset {exc.pos}): {exc.msg}") from exc


def write_json(path: str, obj: Any) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


# -- segments ----------------------------------------------------------------------

def segment_to_dict(s: ActivitySegment) -> dict:
    return {"label": s.label, "start": s.start_frame, "end": s.end_frame, "score": s.score}


def segment_from_dict(d: Any, path: str) -> ActivitySegment:
    _obj(d, path, ("label", "start", "end", "score"))
    start = _typed(d["start"], int, f"{path}.start")
    end = _typed(d["end"], int, f"{path}.end")
    score = _typed(d["score"], float, f"{path}.score")
    if start > end:
        raise SchemaError(f"{path}: start {start} after end {end}")
    if not 0.0 <= score <= 1.0:
        raise SchemaError(f"{path}.score: {score} outside [0, 1]")
    return ActivitySegment(_typed(d["label"], int, f"{path}.label"), TemporalInterval(start, end), score)


# -- video annotation --------------------------------------------------------------

@dataclass
class TubeAnnotation:
    tube_id: int
    label: int
    boxes: dict[int, Box]
    confidence: float = 1.0

    def frames(self) -> list[int]:
        return sorted(self.boxes)


@dataclass
class VideoAnnotation:
    video_id: str
    n_frames: int
    frame_size: tuple[int, int]  # (height, width)
    style: str
    action_labels: list[str]
    activity_labels: list[str]
    tubes: list[TubeAnnotation] = field(default_factory=list)
    activities: list[ActivitySegment] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            **header("video_annotation"),
            "video_id": self.video_id,
            "n_frames": self.n_frames,
            "frame_size": list(self.frame_size),
            "style": self.style,
            "action_labels": list(self.action_labels),
            "activity_labels": list(self.activity_labels),
            "tubes": [{
                "tube_id": t.tube_id,
                "label": t.label,
                "confidence": t.confidence,
                "boxes": [[f, *t.boxes[f].to_xywh()] for f in t.frames()],
            } for t in self.tubes],
            "activities": [segment_to_dict(s) for s in self.activities],
        }

    @classmethod
    def from_dict(cls, d: Any, path: str = "$") -> "VideoAnnotation":
        check_header(d, "video_annotation", path)
        _obj(d, path, ("schema_version", "kind", "video_id", "n_frames", "frame_size", "style",
                       "action_labels", "activity_labels", "tubes", "activities"))
        n_frames = _typed(d["n_frames"], int, f"{path}.n_frames")
        size = _list(d["frame_size"], f"{path}.frame_size")
        if len(size) != 2:
            raise SchemaError(f"{path}.frame_size: expected [height, width]")
        h, w = (_typed(v, int, f"{path}.frame_size[{i}]") for i, v in enumerate(size))
        style = _typed(d["style"], str, f"{path}.style")
        if style not in ("road", "saras"):
            raise SchemaError(f"{path}.style: expected 'road' or 'saras', got {style!r}")
        ann = cls(
            video_id=_typed(d["video_id"], str, f"{path}.video_id"),
            n_frames=n_frames,
            frame_size=(h, w),
            style=style,
            action_labels=[_typed(v, str, f"{path}.action_labels[{i}]")
                           for i, v in enumerate(_list(d["action_labels"], f"{path}.action_labels"))],
            activity_labels=[_typed(v, str, f"{path}.activity_labels[{i}]")
                             for i, v in enumerate(_list(d["activity_labels"], f"{path}.activity_labels"))],
        )
        for i, t in enumerate(_list(d["tubes"], f"{path}.tubes")):
            tp = f"{path}.tubes[{i}]"
            _obj(t, tp, ("tube_id", "label", "confidence", "boxes"))
            tid = _typed(t["tube_id"], int, f"{tp}.tube_id")
            boxes = {}
            for j, row in enumerate(_list(t["boxes"], f"{tp}.boxes")):
                bp = f"{tp}.boxes[{j}]"
                if not isinstance(row, list) or len(row) != 5:
                    raise SchemaError(f"{bp}: expected [frame, x, y, w, h]")
                frame = _typed(row[0], int, f"{bp}[0]")
                x, y, bw, bh = (_typed(v, float, f"{bp}[{k + 1}]") for k, v in enumerate(row[1:]))
                if bw < 0 or bh < 0:
                    raise SchemaError(f"{bp}: tube {tid} frame {frame} has negative size w={bw}, h={bh}")
                if frame in boxes:
                    raise SchemaError(f"{bp}: tube {tid} repeats frame {frame}")
                boxes[frame] = Box.from_xywh(x, y, bw, bh)
            ann.tubes.append(TubeAnnotation(tid, _typed(t["label"], int, f"{tp}.label"), boxes,
                                            _typed(t["confidence"], float, f"{tp}.confidence")))
        ann.activities = [segment_from_dict(s, f"{path}.activities[{i}]")
                          for i, s in enumerate(_list(d["activities"], f"{path}.activities"))]
        ann.validate(path)
        return ann

    def validate(self, path: str = "$") -> None:
        h, w = self.frame_size
        if self.n_frames < 1:
            raise SchemaError(f"{path}.n_frames: must be >= 1")
        ids = set()
        for t in self.tubes:
            if t.tube_id in ids:
                raise SchemaError(f"{path}: duplicate tube id {t.tube_id}")
            ids.add(t.tube_id)
            if not 0 <= t.label < len(self.action_labels):
                raise SchemaError(f"{path}: tube {t.tube_id} label {t.label} outside the action vocabulary")
            if not 0.0 <= t.confidence <= 1.0:
                raise SchemaError(f"{path}: tube {t.tube_id} confidence {t.confidence} outside [0, 1]")
            for f, b in t.boxes.items():
                if not 1 <= f <= self.n_frames:
                    raise SchemaError(f"{path}: tube {t.tube_id} frame {f} outside [1, {self.n_frames}]")
                if b.x1 < 0 or b.y1 < 0 or b.x2 > w or b.y2 > h:
                    raise SchemaError(f"{path}: tube {t.tube_id} frame {f} box {b.to_xywh()} "
                                      f"leaves the {w}x{h} frame")
        for s in self.activities:
            if not 0 <= s.label < len(self.activity_labels):
                raise SchemaError(f"{path}: activity label {s.label} outside the vocabulary")
            if s.start_frame < 1 or s.end_frame > self.n_frames:
                raise SchemaError(f"{path}: activity [{s.start_frame}, {s.end_frame}] "
                                  f"outside [1, {self.n_frames}]")
        segs = sorted(self.activities, key=lambda s: s.start_frame)
        for a, b in zip(segs, segs[1:]):
            if b.start_frame <= a.end_frame:
                raise SchemaError(f"{path}: activities [{a.start_frame}, {a.end_frame}] and "
                                  f"[{b.start_frame}, {b.end_frame}] overlap")
        if self.style == "saras":
            covered = sum(len(s.interval) for s in segs)
            if covered != self.n_frames:
                raise SchemaError(f"{path}: saras activities cover {covered} of {self.n_frames} frames")

    @property
    def background_label(self) -> Optional[int]:
        return self.activity_labels.index("background") if "background" in self.activity_labels else None


def load_annotation(path: str) -> VideoAnnotation:
    return VideoAnnotation.from_dict(read_json(path), os.path.basename(path))


def save_annotation(path: str, ann: VideoAnnotation) -> None:
    write_json(path, ann.to_dict())


# -- detections (detect output) ------------------------------------------------------

@dataclass
class SnippetRecord:
    index: int
    label: int
    probabilities: list[float]
    n_nodes: int


@dataclass
class VideoDetections:
    video_id: str
    segments: list[ActivitySegment]
    snippets: list[SnippetRecord] = field(default_factory=list)


def detections_to_dict(videos: Sequence[VideoDetections], activity_labels: Sequence[str]) -> dict:
    return {
        **header("activity_detections"),
        "activity_labels": list(activity_labels),
        "videos": [{
            "video_id": v.video_id,
            "segments": [segment_to_dict(s) for s in v.segments],
            "snippets": [{"index": s.index, "label": s.label, "probabilities": list(s.probabilities),
                          "n_nodes": s.n_nodes} for s in v.snippets],
        } for v in videos],
    }


def detections_from_dict(d: Any, path: str = "$") -> tuple[list[VideoDetections], list[str]]:
    check_header(d, "activity_detections", path)
    _obj(d, path, ("schema_version", "kind", "activity_labels", "videos"))
    labels = [_typed(v, str, f"{path}.activity_labels[{i}]")
              for i, v in enumerate(_list(d["activity_labels"], f"{path}.activity_labels"))]
    out = []
    for i, v in enumerate(_list(d["videos"], f"{path}.videos")):
        vp = f"{path}.videos[{i}]"
        _obj(v, vp, ("video_id", "segments", "snippets"))
        segs = [segment_from_dict(s, f"{vp}.segments[{j}]")
                for j, s in enumerate(_list(v["segments"], f"{vp}.segments"))]
        snips = []
        for j, s in enumerate(_list(v["snippets"], f"{vp}.snippets")):
            sp = f"{vp}.snippets[{j}]"
            _obj(s, sp, ("index", "label", "probabilities", "n_nodes"))
            snips.append(SnippetRecord(
                _typed(s["index"], int, f"{sp}.index"), _typed(s["label"], int, f"{sp}.label"),
                [_typed(p, float, f"{sp}.probabilities[{k}]")
                 for k, p in enumerate(_list(s["probabilities"], f"{sp}.probabilities"))],
                _typed(s["n_nodes"], int, f"{sp}.n_nodes")))
        out.append(VideoDetections(_typed(v["video_id"], str, f"{vp}.video_id"), segs, snips))
    return out, labels


def load_detections(path: str) -> tuple[list[VideoDetections], list[str]]:
    return detections_from_dict(read_json(path), os.path.basename(path))


def save_detections(path: str, videos: Sequence[VideoDetections], activity_labels: Sequence[str]) -> None:
    write_json(path, detections_to_dict(videos, activity_labels))


# -- graphs and metrics (write-mostly) ----------------------------------------------------

def graphs_to_dict(graphs: dict[str, list[dict]]) -> dict:
    return {**header("scene_graphs"), "videos": {vid: gs for vid, gs in sorted(graphs.items())}}


def graphs_from_dict(d: Any, path: str = "$") -> dict[str, list[dict]]:
    check_header(d, "scene_graphs", path)
    _obj(d, path, ("schema_version", "kind", "videos"))
    videos = _typed(d["videos"], dict, f"{path}.videos")
    keys = ("snippet", "tube_ids", "labels", "order_edges", "similarity_edges", "label_edges", "adjacency")
    for vid, gs in videos.items():
        for i, g in enumerate(_list(gs, f"{path}.videos.{vid}")):
            _obj(g, f"{path}.videos.{vid}[{i}]", keys)
    return videos


def metrics_to_dict(task: str, protocol: dict, results: dict) -> dict:
    return {**header("metrics"), "task": task, "protocol": protocol, "results": results}


def metrics_from_dict(d: Any, path: str = "$") -> dict:
    check_header(d, "metrics", path)
    _obj(d, path, ("schema_version", "kind", "task", "protocol", "results"))
    task = _typed(d["task"], str, f"{path}.task")
    if task not in ("temporal", "frame", "video", "classify"):
        raise SchemaError(f"{path}.task: unknown task {task!r}")
    _typed(d["protocol"], dict, f"{path}.protocol")
    _typed(d["results"], dict, f"{path}.results")
    return d
