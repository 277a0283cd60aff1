import time
from dataclasses import dataclass

import numpy as np
import pytest
from hypothesis import settings

from tubegraph import metrics
from tubegraph.data.dataset import load_dataset, snippet_activity_labels, video_snippets, write_dataset
from tubegraph.data.synth import ScenarioConfig
from tubegraph.pipeline import Config, detect_activities, train

settings.register_profile("default", deadline=None, print_blob=True)
settings.load_profile("default")

# epochs of the shared default-configuration run; training accuracy saturates by epoch 4
DEFAULT_RUN_EPOCHS = 10


@dataclass
class DefaultRun:
    history: list
    accuracy: float
    temporal_map: dict
    seconds: float


_ACCEPTANCE = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; echoed in the terminal summary."""
    def report(number: int, title: str, ok: bool, detail: str) -> bool:
        line = f"ACCEPTANCE {number} {'PASS' if ok else 'FAIL'}: {title} ({detail})"
        _ACCEPTANCE.append((number, line))
        print(line)
        return ok
    return report


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(_ACCEPTANCE):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def default_dataset(tmp_path_factory):
    root = tmp_path_factory.mktemp("default_dataset")
    t0 = time.time()
    write_dataset(root, ScenarioConfig())
    ds = load_dataset(root)
    ds.generation_seconds = time.time() - t0
    return ds


@pytest.fixture(scope="session")
def default_run(default_dataset):
    """Deformable model trained on the default scenario (40 train / 10 test videos, seed 0)."""
    ds = default_dataset
    t0 = time.time()
    history = []
    result = train(ds.snippets("train"), Config(epochs=DEFAULT_RUN_EPOCHS), None, ds.scenario.channels,
                   len(ds.activity_labels), history.append)
    correct = total = 0
    det, gt = {}, {}
    for vid in ds.video_ids("test"):
        ann = ds.annotation(vid)
        snippets = video_snippets(ann, ds.detections(vid), ds.scenario, result.model.config.delta)
        preds, _, segs = detect_activities(snippets, result.model)
        truth = snippet_activity_labels(ann, ds.scenario.snippet_len)
        correct += sum(p.label == truth[p.snippet_index] for p in preds)
        total += len(preds)
        det[vid], gt[vid] = segs, ann.activities
    tmap = metrics.temporal_detection_map(det, gt, 0.5)
    return DefaultRun(history, correct / total, tmap, ds.generation_seconds + time.time() - t0)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
