"""Datasets on disk and their conversion to model snippets.

Layout of a dataset directory::

    manifest.json            scenario config + train/test video ids
    annotations/<id>.json    clean ground truth (tubes and activities)
    detections/<id>.json     tube detections (the noisy copy), same schema

Feature volumes are not stored: rendering is deterministic, so they are
recomputed from the clean annotation and the scenario config on load.
"""

from __future__ import annotations

import functools
import os
from dataclasses import dataclass
import numpy as np

from ..geometry import (ActionTube, Box, MicroTube, TubeChain, assemble_snippet_tubes,
                        interpolate_micro_tube, link_micro_tubes)
from ..metrics import FrameDetection, FrameTruth, TubeDetection, TubeTruth
from ..pipeline import Snippet
from .schema import (SchemaError, TubeAnnotation, VideoAnnotation, _obj, check_header, header, load_annotation,
                     read_json, save_annotation, write_json)
from .synth import ScenarioConfig, generate_scenarios, render_feature_volume


@dataclass
class Dataset:
    root: str
    scenario: ScenarioConfig
    splits: dict[str, list[str]]

    @property
    def activity_labels(self) -> list[str]:
        return self.scenario.activity_labels

    def video_ids(self, split: str) -> list[str]:
        if split == "all":
            return [v for s in ("train", "test") for v in self.splits[s]]
        if split not in self.splits:
            raise SchemaError(f"{self.root}: no split {split!r} (have {sorted(self.splits)})")
        return list(self.splits[split])

    def annotation(self, video_id: str) -> VideoAnnotation:
        return load_annotation(os.path.join(self.root, "annotations", f"{video_id}.json"))

    def detections(self, video_id: str) -> VideoAnnotation:
        return load_annotation(os.path.join(self.root, "detections", f"{video_id}.json"))

    def snippets(self, split: str, delta: int = 3) -> list[Snippet]:
        out = []
        for vid in self.video_ids(split):
            out.extend(video_snippets(self.annotation(vid), self.detections(vid), self.scenario, delta))
        return out


def write_dataset(root: str, cfg: ScenarioConfig) -> Dataset:
    clean, noisy = generate_scenarios(cfg)
    os.makedirs(os.path.join(root, "annotations"), exist_ok=True)
    os.makedirs(os.path.join(root, "detections"), exist_ok=True)
    for c, n in zip(clean, noisy):
        save_annotation(os.path.join(root, "annotations", f"{c.video_id}.json"), c)
        save_annotation(os.path.join(root, "detections", f"{n.video_id}.json"), n)
    ids = [c.video_id for c in clean]
    n_train = cfg.n_videos - cfg.n_test
    splits = {"train": ids[:n_train], "test": ids[n_train:]}
    write_json(os.path.join(root, "manifest.json"),
               {**header("dataset"), "scenario": cfg.to_dict(), "splits": splits})
    return Dataset(root, cfg, splits)


def load_dataset(root: str) -> Dataset:
    path = os.path.join(root, "manifest.json")
    d = read_json(path)
    check_header(d, "dataset", "manifest.json")
    _obj(d, "manifest.json", ("schema_version", "kind", "scenario", "splits"))
    splits = d["splits"]
    if not isinstance(splits, dict) or set(splits) != {"train", "test"}:
        raise SchemaError("manifest.json.splits: expected exactly 'train' and 'test'")
    return Dataset(root, ScenarioConfig.from_dict(d["scenario"]), {k: list(v) for k, v in splits.items()})


# -- snippets ------------------------------------------------------------------------

def snippet_activity_labels(ann: VideoAnnotation, snippet_len: int = 12) -> list[int]:
    """Activity id of each full snippet.

    A snippet takes the label of the segment covering most of its frames
    (earlier segment on ties); uncovered frames vote for background.
    """
    n = ann.n_frames // snippet_len
    bg = ann.background_label
    out = []
    for s in range(n):
        lo, hi = s * snippet_len + 1, (s + 1) * snippet_len
        covered = sum(max(0, min(hi, seg.end_frame) - max(lo, seg.start_frame) + 1) for seg in ann.activities)
        best, best_cover = bg, (snippet_len - covered if bg is not None else 0)
        for seg in ann.activities:
            cover = min(hi, seg.end_frame) - max(lo, seg.start_frame) + 1
            if cover > best_cover:
                best, best_cover = seg.label, cover
        if best is None:
            raise SchemaError(f"{ann.video_id}: snippet {s} is not covered by any activity "
                              f"and the vocabulary has no background class")
        out.append(int(best))
    return out


def snippet_micro_tubes(det: VideoAnnotation, snippet_index: int, snippet_len: int = 12,
                        delta: int = 3) -> list[tuple[TubeAnnotation, list[MicroTube]]]:
    """Micro-tube chain of every detected tube overlapping the snippet.

    Anchor boxes are read at frames (1, 1+delta), (2+delta, 2+2*delta), ...
    of the snippet; where a tube lacks a frame its nearest box is used.
    """
    first = snippet_index * snippet_len + 1
    n_labels = len(det.action_labels)
    chains = []
    for t in det.tubes:
        frames = sorted(t.boxes)
        if not frames or frames[-1] < first or frames[0] > first + snippet_len - 1:
            continue
        arr = np.array(frames)

        def box_at(f: int) -> Box:
            return t.boxes[int(arr[np.argmin(np.abs(arr - f))])]

        scores = np.zeros(n_labels)
        scores[t.label] = t.confidence
        chain = []
        for a in range(snippet_len // (delta + 1)):
            s = first + a * (delta + 1)
            chain.append(MicroTube(s, delta, box_at(s), box_at(s + delta), tuple(scores)))
        chains.append((t, chain))
    return chains


def snippet_tubes(det: VideoAnnotation, snippet_index: int, snippet_len: int = 12,
                  delta: int = 3) -> list[ActionTube]:
    out = []
    for t, chain in snippet_micro_tubes(det, snippet_index, snippet_len, delta):
        tube = assemble_snippet_tubes(chain, snippet_len, snippet_index, t.tube_id)
        out.append(ActionTube(snippet_index, tube.boxes, t.label, t.confidence, t.tube_id,
                              min(t.boxes)))
    return out


def video_snippets(clean: VideoAnnotation, det: VideoAnnotation, scenario: ScenarioConfig,
                   delta: int = 3) -> list[Snippet]:
    m = scenario.snippet_len
    labels = snippet_activity_labels(clean, m)
    out = []
    for s, lab in enumerate(labels):
        render = functools.partial(render_feature_volume, clean, s, scenario.channels,
                                   scenario.spatial_scale, scenario.feature_noise, scenario.seed, m)
        out.append(Snippet(clean.video_id, s, render, snippet_tubes(det, s, m, delta), lab))
    return out


# -- tube-level evaluation inputs -------------------------------------------------------

def link_video_tubes(det: VideoAnnotation, snippet_len: int = 12, delta: int = 3,
                     lam: float = 1.0) -> tuple[list[TubeChain], list[list[MicroTube]]]:
    """Link the micro-tubes of a whole video into per-class chains.

    Returns the chains and the per-step candidate lists their indices refer to.
    """
    n_snip = det.n_frames // snippet_len
    per = snippet_len // (delta + 1)
    steps: list[list[MicroTube]] = [[] for _ in range(n_snip * per)]
    for s in range(n_snip):
        for _, chain in snippet_micro_tubes(det, s, snippet_len, delta):
            for a, mt in enumerate(chain):
                steps[s * per + a].append(mt)
    chains = []
    for label in sorted({t.label for t in det.tubes}):
        sub = [[mt for mt in step if mt.class_scores[label] > 0] for step in steps]
        for ch in link_micro_tubes(sub, lam, [label]):
            # map back to indices into the unfiltered steps
            idx = []
            for i, j in enumerate(ch.candidates):
                step = steps[ch.start_step + i]
                idx.append(next(n for n, mt in enumerate(step) if mt is sub[ch.start_step + i][j]))
            chains.append(TubeChain(label, ch.start_step, tuple(idx), ch.score))
    return chains, steps


def linked_tube_detections(det: VideoAnnotation, snippet_len: int = 12, delta: int = 3,
                           lam: float = 1.0) -> list[TubeDetection]:
    chains, steps = link_video_tubes(det, snippet_len, delta, lam)
    out = []
    for ch in chains:
        mts = [steps[ch.start_step + i][j] for i, j in enumerate(ch.candidates)]
        boxes = {f: b for mt in mts for f, b in interpolate_micro_tube(mt)}
        score = float(np.mean([mt.class_scores[ch.label] for mt in mts]))
        out.append(TubeDetection(det.video_id, ch.label, score, boxes))
    return out


def ground_truth_tubes(ann: VideoAnnotation) -> list[TubeTruth]:
    return [TubeTruth(ann.video_id, t.label, dict(t.boxes)) for t in ann.tubes]


def frame_detections(det: VideoAnnotation) -> list[FrameDetection]:
    return [FrameDetection(det.video_id, f, t.label, t.confidence, b)
            for t in det.tubes for f, b in sorted(t.boxes.items())]


def frame_ground_truth(ann: VideoAnnotation) -> list[FrameTruth]:
    return [FrameTruth(ann.video_id, f, t.label, b) for t in ann.tubes for f, b in sorted(t.boxes.items())]
