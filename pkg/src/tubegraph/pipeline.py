"""Snippet classification model, training loop and post-processing.

A snippet's tubes are pooled from its feature volume (standard, deformable
or modulated), projected to node features, connected into a scene graph and
classified by the GCN.  Per-snippet labels are then cleaned by a single
look-behind/look-ahead pass and turned into activity segments.
"""

from __future__ import annotations

import dataclasses
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .deform import FeatureVolume, GAMMA, offset_outputs, pool_tubes, predict_offsets, whole_frame_box
from .gcn import GCN, _glorot
from .geometry import TUBE_LEN, ActionTube, ActivitySegment, TemporalInterval
from .graph import BACKGROUND_NODE_LABEL, SceneGraph, build_scene_graph, canonical_order, project_node_features
from .tensor import SGD, Tensor, backward, concat, getitem, parameter, softmax, softmax_cross_entropy

log = logging.getLogger(__name__)

POOLING_MODES = ("standard", "deformable", "modulated")


class TrainingError(RuntimeError):
    pass


@dataclass
class Config:
    snippet_len: int = 12
    tube_len: int = 12
    delta: int = 3
    k: int = 7
    n_s: int = 2
    gamma: float = GAMMA
    pooling: str = "deformable"
    shared_offsets: bool = False
    d_node: int = 256
    d_h: int = 512
    d_out: int = 2048
    kappa: int = 2
    readout: str = "final"
    background: str = "present"
    lr: float = 0.01
    momentum: float = 0.9
    epochs: int = 50
    batch_size: int = 16
    seed: int = 0

    def __post_init__(self):
        if self.tube_len != TUBE_LEN or self.snippet_len != self.tube_len:
            raise ValueError(f"snippet_len and tube_len must both be {TUBE_LEN}")
        if self.delta < 1 or self.tube_len % (self.delta + 1):
            raise ValueError(f"delta={self.delta}: micro-tubes of {self.delta + 1} frames "
                             f"must tile {self.tube_len} frames")
        if self.pooling not in POOLING_MODES:
            raise ValueError(f"pooling must be one of {POOLING_MODES}, got {self.pooling!r}")
        if self.readout not in ("final", "concat"):
            raise ValueError(f"readout must be 'final' or 'concat', got {self.readout!r}")
        if self.background not in ("present", "absent"):
            raise ValueError(f"background must be 'present' or 'absent', got {self.background!r}")
        for name in ("k", "n_s", "d_node", "d_h", "d_out", "kappa", "batch_size"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.epochs < 0 or self.lr <= 0 or not 0 <= self.momentum < 1:
            raise ValueError("need epochs >= 0, lr > 0 and 0 <= momentum < 1")

    @property
    def background_label(self) -> Optional[int]:
        # background is class 0 of the activity vocabulary when present
        return 0 if self.background == "present" else None

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ValueError(f"unknown config key(s) {unknown}")
        return cls(**d)


# -- snippets -----------------------------------------------------------------------

def segment_video(n_frames: int, snippet_len: int = 12) -> list[TemporalInterval]:
    """Consecutive full snippets; a trailing partial snippet is dropped."""
    if n_frames < 1:
        raise ValueError(f"n_frames must be >= 1, got {n_frames}")
    return [TemporalInterval(i * snippet_len + 1, (i + 1) * snippet_len)
            for i in range(n_frames // snippet_len)]


def whole_frame_tube(fv: FeatureVolume, snippet_index: int) -> ActionTube:
    """Placeholder node for snippets without detections."""
    box = whole_frame_box(fv)
    return ActionTube(snippet_index, (box,) * TUBE_LEN, BACKGROUND_NODE_LABEL, 1.0, -1)


@dataclass
class Snippet:
    """One snippet's features, detected tubes (canonical order) and activity label.

    ``features`` may be a zero-argument callable that renders the volume on
    demand, which keeps large datasets out of memory.
    """

    video_id: str
    index: int
    features: Union[FeatureVolume, Callable[[], FeatureVolume], None]
    tubes: list[ActionTube]
    label: int = -1
    _pooled: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if self.features is not None and not self.tubes:
            self.tubes = [whole_frame_tube(self.volume(), self.index)]
        self.tubes = [self.tubes[i] for i in canonical_order(self.tubes)]

    def volume(self) -> FeatureVolume:
        if self.features is None:
            raise ValueError(f"snippet {self.index} of {self.video_id} has no feature volume")
        return self.features if isinstance(self.features, FeatureVolume) else self.features()

    @property
    def boxes(self) -> np.ndarray:
        return np.stack([t.box_array() for t in self.tubes])

    def standard_pooled(self, k: int, n_s: int) -> np.ndarray:
        """``(T, C, L, k, k)``; cached since it has no learnable inputs."""
        key = (k, n_s)
        if key not in self._pooled:
            self._pooled[key] = pool_tubes(self.volume(), self.boxes, k=k, n_s=n_s).data
        return self._pooled[key]


@dataclass
class SnippetPrediction:
    snippet_index: int
    label: int
    probabilities: np.ndarray
    node_count: int


# -- model --------------------------------------------------------------------------

class ActivityModel:
    def __init__(self, config: Config, channels: int, n_classes: int):
        self.config = config
        self.channels = channels
        self.n_classes = n_classes
        rng = np.random.default_rng([config.seed, 0])
        c = config
        d_pool = channels * c.tube_len * c.k * c.k
        self.params: dict[str, Tensor] = {}
        if c.pooling != "standard":
            n_off = offset_outputs(c.tube_len, c.k, c.pooling == "modulated", c.shared_offsets)
            # zero init: training starts from the undeformed bins
            self.params["off.w"] = parameter(np.zeros((d_pool, n_off)))
            self.params["off.b"] = parameter(np.zeros(n_off))
        self.params["proj.w"] = parameter(_glorot(rng, d_pool, c.d_node))
        self.params["proj.b"] = parameter(np.zeros(c.d_node))
        self.gcn = GCN(c.d_node, c.d_h, c.d_out, n_classes, c.readout, rng)
        self.params.update(self.gcn.named_parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        missing = sorted(set(self.params) - set(state))
        extra = sorted(set(state) - set(self.params))
        if missing or extra:
            raise ValueError(f"parameter mismatch: missing {missing}, unexpected {extra}")
        for k, p in self.params.items():
            if state[k].shape != p.shape:
                raise ValueError(f"{k}: shape {state[k].shape}, expected {p.shape}")
            p.data = np.array(state[k], dtype=np.float64)

    def meta(self) -> dict:
        return {"config": self.config.to_dict(), "channels": self.channels, "n_classes": self.n_classes}

    @classmethod
    def from_checkpoint(cls, params: dict[str, np.ndarray], meta: dict) -> "ActivityModel":
        model = cls(Config.from_dict(meta["config"]), int(meta["channels"]), int(meta["n_classes"]))
        model.load_state_dict(params)
        return model

    def pool(self, snippets: Sequence[Snippet]) -> Tensor:
        c = self.config
        std = np.concatenate([s.standard_pooled(c.k, c.n_s) for s in snippets])
        if c.pooling == "standard":
            return Tensor(std)
        fieldv = predict_offsets(Tensor(std), self.params["off.w"], self.params["off.b"],
                                 modulated=c.pooling == "modulated", shared=c.shared_offsets)
        parts, start = [], 0
        for s in snippets:
            sl = slice(start, start + len(s.tubes))
            start = sl.stop
            mod = getitem(fieldv.modulation, sl) if fieldv.modulation is not None else None
            parts.append(pool_tubes(s.volume(), s.boxes, getitem(fieldv.offsets, sl), mod,
                                    gamma=c.gamma, k=c.k, n_s=c.n_s))
        return parts[0] if len(parts) == 1 else concat(parts, axis=0)

    def forward(self, snippets: Sequence[Snippet]) -> tuple[Tensor, list[SceneGraph]]:
        """Class logits ``(B, n_classes)`` and the scene graph of every snippet."""
        feats = project_node_features(self.pool(snippets), self.params["proj.w"], self.params["proj.b"])
        graphs, start = [], 0
        for s in snippets:
            n = len(s.tubes)
            # graph structure is built from current values and carries no gradient
            graphs.append(build_scene_graph(s.tubes, Tensor(feats.data[start:start + n]), self.config.kappa))
            start += n
        x_g = self.gcn.embed(feats, [g.adjacency for g in graphs])
        return self.gcn.logits(x_g), graphs


# -- training -----------------------------------------------------------------------

@dataclass
class TrainResult:
    model: ActivityModel
    history: list[dict]
    best_epoch: int


def _batches(n: int, size: int, rng: np.random.Generator):
    order = rng.permutation(n)
    return [order[i:i + size] for i in range(0, n, size)]


def evaluate_accuracy(model: ActivityModel, snippets: Sequence[Snippet]) -> float:
    preds = predict_snippets(model, snippets)
    return float(np.mean([p.label == s.label for p, s in zip(preds, snippets)]))


def train(train_snippets: Sequence[Snippet], config: Config,
          val_snippets: Optional[Sequence[Snippet]] = None,
          channels: Optional[int] = None, n_classes: Optional[int] = None,
          on_epoch: Optional[Callable[[dict], None]] = None) -> TrainResult:
    """Minibatch SGD on mean softmax cross-entropy for a fixed number of epochs.

    With validation snippets the parameters of the best validation epoch
    (first one on ties) are returned, otherwise those of the last epoch.
    """
    if not train_snippets:
        raise ValueError("empty training set")
    labels = np.array([s.label for s in train_snippets])
    if np.any(labels < 0):
        raise ValueError("training snippets must carry activity labels")
    if channels is None:
        channels = train_snippets[0].volume().channels
    if n_classes is None:
        n_classes = int(labels.max()) + 1
    model = ActivityModel(config, channels, n_classes)
    opt = SGD(model.params.values(), config.lr, config.momentum)
    shuffle = np.random.default_rng([config.seed, 1])
    history = []
    best_acc, best_epoch, best_state = -1.0, 0, model.state_dict()
    for epoch in range(1, config.epochs + 1):
        total, correct = 0.0, 0
        for b, idx in enumerate(_batches(len(train_snippets), config.batch_size, shuffle)):
            batch = [train_snippets[i] for i in idx]
            logits, _ = model.forward(batch)
            loss = softmax_cross_entropy(logits, labels[idx])
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingError(f"non-finite loss {value} at epoch {epoch}, batch {b} "
                                    f"(videos {sorted({s.video_id for s in batch})})")
            backward(loss)
            opt.step()
            total += value * len(idx)
            correct += int(np.sum(np.argmax(logits.data, axis=1) == labels[idx]))
        row = {"epoch": epoch, "loss": total / len(train_snippets),
               "train_acc": correct / len(train_snippets)}
        if val_snippets:
            row["val_acc"] = evaluate_accuracy(model, val_snippets)
            if row["val_acc"] > best_acc:
                best_acc, best_epoch, best_state = row["val_acc"], epoch, model.state_dict()
        history.append(row)
        log.info("epoch %d loss %.6f train_acc %.4f%s", epoch, row["loss"], row["train_acc"],
                 f" val_acc {row['val_acc']:.4f}" if "val_acc" in row else "")
        if on_epoch is not None:
            on_epoch(row)
    if val_snippets and config.epochs:
        model.load_state_dict(best_state)
    else:
        best_epoch = config.epochs
    return TrainResult(model, history, best_epoch)


# -- inference and post-processing -----------------------------------------------------------

def predict_snippets(model: ActivityModel, snippets: Sequence[Snippet]) -> list[SnippetPrediction]:
    out = []
    size = model.config.batch_size
    for i in range(0, len(snippets), size):
        batch = snippets[i:i + size]
        for s in batch:
            if s.features is None:
                raise ValueError(f"snippet {s.index} of {s.video_id} has no feature volume")
        logits, _ = model.forward(batch)
        for s, row in zip(batch, logits.data):
            probs = softmax(row)
            out.append(SnippetPrediction(s.index, int(np.argmax(probs)), probs, len(s.tubes)))
    return out


def classify_video(snippets: Sequence[Snippet], model: ActivityModel) -> list[SnippetPrediction]:
    """One prediction per snippet of a video, in snippet order."""
    return predict_snippets(model, sorted(snippets, key=lambda s: s.index))


def smooth_labels(labels: Sequence[int]) -> list[int]:
    """Absorb isolated label flips: ``a b a`` becomes ``a a a`` in one left-to-right pass."""
    out = list(labels)
    for i in range(1, len(out) - 1):
        if out[i] != out[i - 1] and out[i + 1] == out[i - 1]:
            out[i] = out[i - 1]
    return out


def extract_segments(labels: Sequence[int], probabilities, snippet_len: int = 12,
                     background_label: Optional[int] = None,
                     first_index: int = 0) -> list[ActivitySegment]:
    """Runs of equal labels as frame intervals, scored by mean class probability.

    ``first_index`` is the snippet index of ``labels[0]``; runs of
    ``background_label`` are not emitted.
    """
    probs = np.asarray(probabilities, dtype=np.float64)
    if len(probs) != len(labels):
        raise ValueError(f"{len(labels)} labels but {len(probs)} probability rows")
    segs = []
    i = 0
    while i < len(labels):
        j = i
        while j < len(labels) and labels[j] == labels[i]:
            j += 1
        lab = int(labels[i])
        if lab != background_label:
            score = float(np.clip(np.mean(probs[i:j, lab]), 0.0, 1.0))
            interval = TemporalInterval((first_index + i) * snippet_len + 1, (first_index + j) * snippet_len)
            segs.append(ActivitySegment(lab, interval, score))
        i = j
    return segs


def detect_activities(snippets: Sequence[Snippet], model: ActivityModel):
    """Predictions, smoothed labels and activity segments of one video."""
    preds = classify_video(snippets, model)
    smoothed = smooth_labels([p.label for p in preds])
    first = preds[0].snippet_index if preds else 0
    segs = extract_segments(smoothed, [p.probabilities for p in preds], model.config.snippet_len,
                            model.config.background_label, first)
    return preds, smoothed, segs
