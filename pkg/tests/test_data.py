import collections
import json
import os

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubegraph.data.checkpoint import dumps_checkpoint, load_checkpoint, loads_checkpoint, save_checkpoint
from tubegraph.data.dataset import (frame_detections, frame_ground_truth, ground_truth_tubes, link_video_tubes,
                                    linked_tube_detections, load_dataset, snippet_activity_labels,
                                    snippet_micro_tubes, snippet_tubes, video_snippets, write_dataset)
from tubegraph.data.schema import (ParseError, SchemaError, SnippetRecord, TubeAnnotation, VersionError,
                                   VideoAnnotation, VideoDetections, detections_from_dict, detections_to_dict,
                                   graphs_from_dict, graphs_to_dict, load_annotation, load_detections,
                                   metrics_from_dict, metrics_to_dict, read_json, save_annotation,
                                   save_detections)
from tubegraph.data.synth import (ROAD_GRAMMAR, SARAS_GRAMMAR, ScenarioConfig, feature_grid_size,
                                  generate_scenarios, render_feature_volume)
from tubegraph.geometry import ActivitySegment, Box, TemporalInterval
from tubegraph.metrics import TubeDetection, frame_map, video_map

SMALL_ROAD = dict(n_videos=6, n_test=2, frame_size=(96, 128), channels=16)


def annotation(**kw):
    ann = VideoAnnotation("vid", 24, (100, 200), "road", ["a", "b"], ["background", "act"])
    ann.tubes.append(TubeAnnotation(3, 1, {1: Box(0, 0, 10.5, 20), 2: Box(1, 1, 11.5, 21)}, 0.75))
    ann.activities.append(ActivitySegment(1, TemporalInterval(1, 12), 1.0))
    for k, v in kw.items():
        setattr(ann, k, v)
    return ann


class TestAnnotationSchema:
    def test_round_trip(self, tmp_path):
        ann = annotation()
        path = tmp_path / "a.json"
        save_annotation(path, ann)
        assert load_annotation(path) == ann

    def test_generated_round_trip_is_byte_stable(self, tmp_path):
        clean, noisy = generate_scenarios(ScenarioConfig(jitter_sigma=2.0, flip_prob=0.1, **SMALL_ROAD))
        for ann in clean[:2] + noisy[:2]:
            p1, p2 = tmp_path / "1.json", tmp_path / "2.json"
            save_annotation(p1, ann)
            loaded = load_annotation(p1)
            assert loaded == ann
            save_annotation(p2, loaded)
            assert p1.read_bytes() == p2.read_bytes()

    def test_boxes_written_as_xywh(self):
        row = annotation().to_dict()["tubes"][0]["boxes"][0]
        assert row == [1, 0.0, 0.0, 10.5, 20.0]

    def test_parse_error_has_position(self, tmp_path):
        path = tmp_path / "bad.json"
        text = json.dumps(annotation().to_dict())
        path.write_text(text[:40])
        with pytest.raises(ParseError, match=r"bad.json: line 1 column \d+ \(offset \d+\)"):
            load_annotation(path)

    def test_negative_width_names_tube_and_frame(self, tmp_path):
        d = annotation().to_dict()
        d["tubes"][0]["boxes"][1][3] = -2.0
        path = tmp_path / "neg.json"
        path.write_text(json.dumps(d))
        with pytest.raises(SchemaError, match=r"tube 3 frame 2 has negative size"):
            load_annotation(path)

    def test_version_mismatch(self):
        d = annotation().to_dict()
        d["schema_version"] = 2
        with pytest.raises(VersionError, match="schema_version"):
            VideoAnnotation.from_dict(d)

    def test_unknown_and_missing_fields(self):
        d = annotation().to_dict()
        d["extra"] = 1
        with pytest.raises(SchemaError, match="extra"):
            VideoAnnotation.from_dict(d)
        d = annotation().to_dict()
        del d["tubes"][0]["confidence"]
        with pytest.raises(SchemaError, match=r"tubes\[0\].*confidence"):
            VideoAnnotation.from_dict(d)

    def test_wrong_type(self):
        d = annotation().to_dict()
        d["n_frames"] = "24"
        with pytest.raises(SchemaError, match="n_frames"):
            VideoAnnotation.from_dict(d)

    @pytest.mark.parametrize("mutate, message", [
        (lambda a: a.tubes.append(TubeAnnotation(3, 0, {})), "duplicate tube id"),
        (lambda a: a.tubes.append(TubeAnnotation(4, 5, {})), "outside the action vocabulary"),
        (lambda a: a.tubes.append(TubeAnnotation(4, 0, {30: Box(0, 0, 1, 1)})), "frame 30 outside"),
        (lambda a: a.tubes.append(TubeAnnotation(4, 0, {1: Box(190, 0, 210, 1)})), "leaves the 200x100 frame"),
        (lambda a: a.activities.append(ActivitySegment(1, TemporalInterval(10, 20))), "overlap"),
        (lambda a: a.activities.append(ActivitySegment(1, TemporalInterval(20, 30))), "outside"),
    ])
    def test_validation(self, mutate, message):
        ann = annotation()
        mutate(ann)
        with pytest.raises(SchemaError, match=message):
            VideoAnnotation.from_dict(ann.to_dict())

    def test_saras_must_tile(self):
        ann = annotation(style="saras", activity_labels=["p1", "p2"])
        ann.activities = [ActivitySegment(0, TemporalInterval(1, 12))]
        with pytest.raises(SchemaError, match="cover 12 of 24"):
            ann.validate()

    def test_missing_file(self, tmp_path):
        with pytest.raises(Exception, match="nope.json"):
            read_json(tmp_path / "nope.json")


class TestOtherSchemas:
    def test_detections_round_trip(self, tmp_path):
        videos = [VideoDetections("v1", [ActivitySegment(2, TemporalInterval(13, 36), 0.625)],
                                  [SnippetRecord(0, 0, [0.75, 0.25], 1), SnippetRecord(1, 1, [0.5, 0.5], 3)])]
        path = tmp_path / "d.json"
        save_detections(path, videos, ["background", "x"])
        assert load_detections(path) == (videos, ["background", "x"])
        assert detections_from_dict(detections_to_dict(videos, ["a"])) == (videos, ["a"])

    def test_detections_score_range(self):
        d = detections_to_dict([VideoDetections("v", [ActivitySegment(0, TemporalInterval(1, 2), 0.5)])], ["a"])
        d["videos"][0]["segments"][0]["score"] = 1.5
        with pytest.raises(SchemaError, match=r"segments\[0\]\.score"):
            detections_from_dict(d)

    def test_graphs_round_trip(self):
        g = {"snippet": 0, "tube_ids": [1], "labels": [0], "order_edges": [], "similarity_edges": [],
             "label_edges": [], "adjacency": [[0]]}
        d = graphs_to_dict({"v": [g]})
        assert graphs_from_dict(json.loads(json.dumps(d))) == {"v": [g]}
        del d["videos"]["v"][0]["labels"]
        with pytest.raises(SchemaError):
            graphs_from_dict(d)

    def test_metrics(self):
        d = metrics_to_dict("temporal", {"iou": [0.5]}, {"0.5": {"mAP": 1.0}})
        assert metrics_from_dict(d) == d
        d["task"] = "other"
        with pytest.raises(SchemaError):
            metrics_from_dict(d)

    def test_wrong_kind(self):
        with pytest.raises(SchemaError, match="kind"):
            detections_from_dict(metrics_to_dict("temporal", {}, {}))


class TestCheckpoint:
    def params(self):
        return {"w": np.arange(6.0).reshape(2, 3), "b": np.array([-1.5, 2.25]), "s": np.array(3.0)}

    def test_round_trip(self, tmp_path):
        path = tmp_path / "m.ckpt"
        save_checkpoint(path, self.params(), {"config": {"k": 7}})
        params, meta = load_checkpoint(path)
        assert list(params) == ["w", "b", "s"] and meta == {"config": {"k": 7}}
        for k, v in self.params().items():
            assert np.array_equal(params[k], v) and params[k].shape == v.shape

    def test_bytes_are_deterministic(self):
        assert dumps_checkpoint(self.params(), {"b": 1, "a": 2}) == dumps_checkpoint(self.params(), {"a": 2, "b": 1})

    def test_truncation_names_offset(self):
        buf = dumps_checkpoint(self.params())
        for cut in (4, 20, len(buf) - 3):
            with pytest.raises(ParseError, match=r"truncated at offset \d+"):
                loads_checkpoint(buf[:cut])

    def test_trailing_bytes(self):
        with pytest.raises(ParseError, match="trailing"):
            loads_checkpoint(dumps_checkpoint(self.params()) + b"\x00")

    def test_bad_magic_and_version(self):
        buf = bytearray(dumps_checkpoint(self.params()))
        with pytest.raises(ParseError, match="magic"):
            loads_checkpoint(b"X" + bytes(buf[1:]))
        buf[8] = 9
        with pytest.raises(VersionError):
            loads_checkpoint(bytes(buf))


class TestGenerator:
    def test_zero_noise_copy_equals_clean(self):
        clean, noisy = generate_scenarios(ScenarioConfig(**SMALL_ROAD))
        assert clean == noisy

    def test_drop_all(self):
        _, noisy = generate_scenarios(ScenarioConfig(drop_prob=1.0, **SMALL_ROAD))
        assert all(not v.tubes for v in noisy)

    def test_saras_phases_tile(self):
        clean, _ = generate_scenarios(ScenarioConfig(style="saras", n_videos=5, n_test=1, frames_per_video=130))
        for v in clean:
            segs = sorted(v.activities, key=lambda s: s.start_frame)
            assert segs[0].start_frame == 1 and segs[-1].end_frame == 130
            assert all(b.start_frame == a.end_frame + 1 for a, b in zip(segs, segs[1:]))

    def test_default_vocabularies(self):
        assert len(ScenarioConfig().activity_labels) == 1 + len(ROAD_GRAMMAR) == 7
        assert len(ScenarioConfig(style="saras").activity_labels) == len(SARAS_GRAMMAR) == 8

    def test_road_has_background_gaps(self):
        clean, _ = generate_scenarios(ScenarioConfig(**SMALL_ROAD))
        covered = sum(len(s.interval) for v in clean for s in v.activities)
        assert 0 < covered < sum(v.n_frames for v in clean)

    def test_unrealizable_template(self):
        with pytest.raises(ValueError, match="max_tubes"):
            ScenarioConfig(max_tubes=2)
        with pytest.raises(ValueError, match="unknown atomic"):
            ScenarioConfig(grammar={"x": ["nope"]})

    @pytest.mark.parametrize("bad", [dict(drop_prob=1.5), dict(flip_prob=-0.1), dict(jitter_sigma=-1.0),
                                     dict(style="other"), dict(n_test=60)])
    def test_config_validation(self, bad):
        with pytest.raises(ValueError):
            ScenarioConfig(**bad)

    def test_config_round_trip(self):
        cfg = ScenarioConfig(style="saras", jitter_sigma=1.5, seed=4)
        assert ScenarioConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg
        with pytest.raises(SchemaError, match="bogus"):
            ScenarioConfig.from_dict({"bogus": 1})

    def test_noise_applied(self):
        cfg = ScenarioConfig(jitter_sigma=2.0, drop_prob=0.1, flip_prob=0.05, n_videos=20, n_test=5)
        clean, noisy = generate_scenarios(cfg)
        n_clean = sum(len(v.tubes) for v in clean)
        n_noisy = sum(len(v.tubes) for v in noisy)
        assert 0.8 * n_clean < n_noisy < n_clean
        by_id = {(c.video_id, t.tube_id): t for c in clean for t in c.tubes}
        flipped = [t for v in noisy for t in v.tubes if t.label != by_id[(v.video_id, t.tube_id)].label]
        assert flipped and all(0.3 <= t.confidence <= 0.6 for t in flipped)
        assert any(t.boxes != by_id[(v.video_id, t.tube_id)].boxes for v in noisy for t in v.tubes)

    def test_boxes_on_lattice_and_in_frame(self):
        _, noisy = generate_scenarios(ScenarioConfig(jitter_sigma=3.0, **SMALL_ROAD))
        for v in noisy:
            for t in v.tubes:
                for b in t.boxes.values():
                    assert all(float(c * 64).is_integer() for c in b.as_tuple())

    @pytest.mark.parametrize("style", ["road", "saras"])
    def test_segments_realize_their_template(self, style):
        cfg = ScenarioConfig(style=style, n_videos=8, n_test=2)
        clean, _ = generate_scenarios(cfg)
        for v in clean:
            for seg in v.activities:
                want = collections.Counter(cfg.action_labels.index(a)
                                           for a in cfg.grammar[cfg.activity_labels[seg.label]])
                for s in range((seg.start_frame - 1) // 12, seg.end_frame // 12):
                    frames = range(12 * s + 1, 12 * s + 13)
                    present = collections.Counter(t.label for t in v.tubes if all(f in t.boxes for f in frames))
                    assert all(present[k] >= n for k, n in want.items())

    def test_deterministic(self):
        cfg = ScenarioConfig(jitter_sigma=1.0, drop_prob=0.2, flip_prob=0.2, **SMALL_ROAD)
        assert generate_scenarios(cfg) == generate_scenarios(ScenarioConfig.from_dict(cfg.to_dict()))
        other = generate_scenarios(ScenarioConfig(seed=1, **SMALL_ROAD))[0]
        assert other != generate_scenarios(cfg)[0]


class TestRender:
    def ann(self, tubes):
        a = VideoAnnotation("r", 12, (64, 64), "road", [f"a{i}" for i in range(20)], ["background"])
        a.tubes = tubes
        return a

    def test_grid_size(self):
        assert feature_grid_size((300, 300), 0.125) == (38, 38)
        fv = render_feature_volume(self.ann([]), 0, channels=4)
        assert fv.values.shape == (4, 12, 8, 8) and fv.image_size == (64.0, 64.0)

    def test_no_tubes_is_noise_floor(self):
        v = render_feature_volume(self.ann([]), 0, channels=4, noise=0.02).values.data
        assert np.all(np.abs(v) <= 0.02)

    def test_single_tube_argmax_channel(self):
        box = Box(8, 8, 56, 40)
        v = render_feature_volume(self.ann([TubeAnnotation(0, 17, {f: box for f in range(1, 13)})]), 0,
                                  channels=8, spatial_scale=0.25, noise=0.02).values.data
        # interior grid cells of the box
        inside = v[:, :, 3:9, 3:13]
        assert np.all(np.argmax(inside, axis=0) == 17 % 8)
        assert v[1, 0, 6, 8] == pytest.approx(1.0, abs=0.02 + 1e-12)

    def test_overlap_is_additive(self):
        a = TubeAnnotation(0, 1, {f: Box(0, 0, 40, 40) for f in range(1, 13)})
        b = TubeAnnotation(1, 2, {f: Box(20, 20, 60, 60) for f in range(1, 13)})
        both = render_feature_volume(self.ann([a, b]), 0, channels=4, spatial_scale=0.25, noise=0.0).values.data
        only_a = render_feature_volume(self.ann([a]), 0, channels=4, spatial_scale=0.25, noise=0.0).values.data
        only_b = render_feature_volume(self.ann([b]), 0, channels=4, spatial_scale=0.25, noise=0.0).values.data
        assert np.array_equal(both, only_a + only_b)
        assert both[1, 0, 7, 7] > 0 and both[2, 0, 7, 7] > 0

    def test_frames_follow_boxes(self):
        t = TubeAnnotation(0, 0, {f: Box(2 * f - 20, 8, 2 * f - 4, 24) for f in range(13, 25)})
        a = self.ann([t])
        a.n_frames = 24
        v = render_feature_volume(a, 1, channels=2, spatial_scale=1.0, noise=0.0).values.data
        # the response peaks at the box centre of each frame
        peaks = [int(np.argmax(v[0, i, 16])) for i in range(12)]
        assert peaks == [2 * (13 + i) - 12 for i in range(12)]

    def test_snippet_must_fit(self):
        with pytest.raises(ValueError):
            render_feature_volume(self.ann([]), 1)

    def test_deterministic(self):
        a = render_feature_volume(self.ann([]), 0, seed=3).values.data
        assert np.array_equal(a, render_feature_volume(self.ann([]), 0, seed=3).values.data)
        assert not np.array_equal(a, render_feature_volume(self.ann([]), 0, seed=4).values.data)


class TestDataset:
    @pytest.fixture(scope="class")
    @classmethod
    def ds(cls, tmp_path_factory):
        root = tmp_path_factory.mktemp("ds")
        write_dataset(root, ScenarioConfig(jitter_sigma=1.0, drop_prob=0.1, **SMALL_ROAD))
        return load_dataset(root)

    def test_layout(self, ds):
        assert sorted(os.listdir(ds.root)) == ["annotations", "detections", "manifest.json"]
        assert len(ds.video_ids("train")) == 4 and len(ds.video_ids("test")) == 2
        assert ds.video_ids("all") == ds.video_ids("train") + ds.video_ids("test")
        with pytest.raises(SchemaError):
            ds.video_ids("val")

    def test_generate_is_byte_identical(self, ds, tmp_path):
        write_dataset(tmp_path, ds.scenario)
        for rel in ["manifest.json"] + [f"{d}/{v}.json" for d in ("annotations", "detections")
                                        for v in ds.video_ids("all")]:
            assert (tmp_path / rel).read_bytes() == open(os.path.join(ds.root, rel), "rb").read()

    def test_snippet_labels(self):
        ann = annotation()
        ann.activities = [ActivitySegment(1, TemporalInterval(5, 20))]
        # snippet 0 holds 8 activity frames, snippet 1 holds 8
        assert snippet_activity_labels(ann) == [1, 1]
        ann.activities = [ActivitySegment(1, TemporalInterval(10, 24))]
        assert snippet_activity_labels(ann) == [0, 1]

    def test_snippet_labels_need_background_or_cover(self):
        ann = annotation(activity_labels=["p"], activities=[])
        with pytest.raises(SchemaError, match="no background"):
            snippet_activity_labels(ann)

    def test_micro_tube_anchors(self, ds):
        det = ds.detections(ds.video_ids("train")[0])
        for t, chain in snippet_micro_tubes(det, 1):
            assert [(m.start_frame, m.end_frame) for m in chain] == [(13, 16), (17, 20), (21, 24)]
            assert chain[0].class_scores[t.label] == t.confidence

    def test_snippet_tubes_follow_detections(self, ds):
        det = ds.detections(ds.video_ids("train")[0])
        for s in range(det.n_frames // 12):
            for tube in snippet_tubes(det, s):
                src = next(t for t in det.tubes if t.tube_id == tube.tube_id)
                for i, b in enumerate(tube.boxes):
                    f = 12 * s + 1 + i
                    if f in src.boxes and (i % 4 in (0, 3)):
                        assert b == src.boxes[f]

    def test_video_snippets(self, ds):
        vid = ds.video_ids("test")[0]
        snippets = video_snippets(ds.annotation(vid), ds.detections(vid), ds.scenario)
        assert [s.index for s in snippets] == list(range(10))
        assert [s.label for s in snippets] == snippet_activity_labels(ds.annotation(vid))
        assert snippets[0].volume().values.shape == (16, 12, 12, 16)
        assert all(s.tubes for s in snippets)

    def test_linking_covers_clean_tubes(self, tmp_path):
        write_dataset(tmp_path, ScenarioConfig(**SMALL_ROAD))
        ds = load_dataset(tmp_path)
        for vid in ds.video_ids("all"):
            ann = ds.annotation(vid)
            linked = linked_tube_detections(ann)
            # same-label tubes that follow each other may be joined, never split
            for t in ground_truth_tubes(ann):
                assert any(d.label == t.label and set(t.boxes) <= set(d.boxes) for d in linked)
            assert frame_map(frame_detections(ann), frame_ground_truth(ann), 0.5)["mAP"] == 1.0
            chains, steps = link_video_tubes(ann)
            used = [(c.start_step + i, j) for c in chains for i, j in enumerate(c.candidates)]
            assert len(used) == len(set(used)) == sum(len(s) for s in steps)

    def test_split_tubes_score_full_video_map(self, tmp_path):
        write_dataset(tmp_path, ScenarioConfig(**SMALL_ROAD))
        ds = load_dataset(tmp_path)
        vid = ds.video_ids("all")[0]
        ann = ds.annotation(vid)
        gt = ground_truth_tubes(ann)
        det = [TubeDetection(t.video, t.label, 1.0, t.boxes) for t in gt]
        assert video_map(det, gt, 0.5)["mAP"] == 1.0
