import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tubegraph.geometry import (ActionTube, Box, MicroTube, TemporalInterval, assemble_snippet_tubes, box_iou,
                                interpolate_micro_tube, link_micro_tubes, spatiotemporal_tube_iou, split_tube,
                                temporal_iou)

from oracles import enumerate_links


def mt(frame, a, b, scores=(1.0,), gap=3):
    return MicroTube(frame, gap, Box(*a), Box(*b), tuple(scores))


coord = st.floats(0, 100, allow_nan=False).map(lambda v: round(v * 4) / 4)


@st.composite
def boxes(draw):
    x1, y1 = draw(coord), draw(coord)
    return Box(x1, y1, x1 + draw(coord), y1 + draw(coord))


class TestBox:
    def test_validation(self):
        with pytest.raises(ValueError):
            Box(5, 0, 4, 1)
        with pytest.raises(ValueError):
            Box(0, 0, float("nan"), 1)
        with pytest.raises(ValueError):
            Box.from_xywh(0, 0, -1, 2)

    def test_xywh_round_trip(self):
        b = Box.from_xywh(2.5, 3.0, 10.0, 4.25)
        assert b == Box(2.5, 3.0, 12.5, 7.25)
        assert b.to_xywh() == (2.5, 3.0, 10.0, 4.25)

    def test_clamp(self):
        assert Box(-5, -5, 400, 20).clamp(300, 300) == Box(0, 0, 300, 20)
        assert Box(310, 310, 320, 320).clamp(300, 300).area == 0.0


class TestBoxIou:
    def test_identical(self):
        assert box_iou(Box(1, 2, 5, 9), Box(1, 2, 5, 9)) == 1.0

    def test_disjoint(self):
        assert box_iou(Box(0, 0, 1, 1), Box(2, 2, 3, 3)) == 0.0

    def test_half_shift(self):
        assert box_iou(Box(0, 0, 10, 10), Box(5, 0, 15, 10)) == pytest.approx(1 / 3, abs=1e-15)

    def test_degenerate(self):
        assert box_iou(Box(0, 0, 0, 10), Box(0, 0, 0, 10)) == 0.0

    @settings(max_examples=200, deadline=None)
    @given(boxes(), boxes())
    def test_symmetric_and_bounded(self, a, b):
        v = box_iou(a, b)
        assert v == box_iou(b, a)
        assert 0.0 <= v <= 1.0
        if v == 1.0:
            assert a == b

    @settings(max_examples=100, deadline=None)
    @given(boxes())
    def test_self_iou_is_one(self, a):
        if a.area > 0:
            assert box_iou(a, a) == 1.0


class TestTemporal:
    def test_examples(self):
        assert temporal_iou(TemporalInterval(3, 8), TemporalInterval(3, 8)) == 1.0
        assert temporal_iou(TemporalInterval(0, 9), TemporalInterval(5, 14)) == pytest.approx(1 / 3)
        assert temporal_iou(TemporalInterval(0, 4), TemporalInterval(5, 9)) == 0.0

    def test_single_frame_intervals(self):
        assert temporal_iou(TemporalInterval(4, 4), TemporalInterval(4, 4)) == 1.0
        assert len(TemporalInterval(4, 4)) == 1

    def test_inverted(self):
        with pytest.raises(ValueError):
            TemporalInterval(5, 4)


class TestTubeIou:
    def test_identical(self):
        a = {f: Box(f, 0, f + 10, 10) for f in range(5)}
        assert spatiotemporal_tube_iou(a, dict(a)) == 1.0

    def test_disjoint_boxes(self):
        a = {f: Box(0, 0, 10, 10) for f in range(5)}
        b = {f: Box(20, 20, 30, 30) for f in range(5)}
        assert spatiotemporal_tube_iou(a, b) == 0.0

    def test_half_span(self):
        a = {f: Box(0, 0, 10, 10) for f in range(10)}
        b = {f: Box(0, 0, 10, 10) for f in range(20)}
        assert spatiotemporal_tube_iou(a, b) == 0.5

    def test_empty(self):
        assert spatiotemporal_tube_iou({}, {1: Box(0, 0, 1, 1)}) == 0.0

    def test_missing_frame_counts_zero(self):
        a = {1: Box(0, 0, 10, 10), 3: Box(0, 0, 10, 10)}
        b = {f: Box(0, 0, 10, 10) for f in (1, 2, 3)}
        assert spatiotemporal_tube_iou(a, b) == pytest.approx(2 / 3)


class TestInterpolate:
    def test_linear_drift(self):
        out = interpolate_micro_tube(mt(1, (0, 0, 10, 10), (3, 0, 13, 10)))
        assert out == [(1, Box(0, 0, 10, 10)), (2, Box(1, 0, 11, 10)), (3, Box(2, 0, 12, 10)),
                       (4, Box(3, 0, 13, 10))]

    def test_constant(self):
        out = interpolate_micro_tube(mt(7, (1, 2, 3, 4), (1, 2, 3, 4)))
        assert {b for _, b in out} == {Box(1, 2, 3, 4)}

    def test_midpoint(self):
        out = interpolate_micro_tube(mt(1, (0, 0, 2, 2), (4, 4, 10, 10), gap=2))
        assert out[1] == (2, Box(2, 2, 6, 6))

    def test_gap_one(self):
        out = interpolate_micro_tube(mt(1, (0, 0, 2, 2), (4, 4, 10, 10), gap=1))
        assert [f for f, _ in out] == [1, 2]

    def test_validation(self):
        with pytest.raises(ValueError):
            mt(1, (0, 0, 1, 1), (0, 0, 1, 1), gap=0)
        with pytest.raises(ValueError):
            mt(1, (0, 0, 1, 1), (0, 0, 1, 1), scores=(1.5,))

    @settings(max_examples=150, deadline=None)
    @given(boxes(), boxes(), st.integers(1, 6))
    def test_endpoints_exact_and_extents_nonnegative(self, a, b, gap):
        out = interpolate_micro_tube(MicroTube(10, gap, a, b, (0.5,)))
        assert out[0] == (10, a) and out[-1] == (10 + gap, b)
        assert [f for f, _ in out] == list(range(10, 11 + gap))
        for _, box in out:
            assert box.width >= 0 and box.height >= 0


class TestAssemble:
    def chain(self, boxes_at, scores=(0.9, 0.1), start=1):
        return [mt(start + 4 * i, boxes_at(start + 4 * i), boxes_at(start + 4 * i + 3), scores)
                for i in range(3)]

    def test_constant_boxes(self):
        t = assemble_snippet_tubes(self.chain(lambda f: (1, 1, 5, 5)))
        assert t.boxes == (Box(1, 1, 5, 5),) * 12

    def test_label_and_confidence(self):
        t = assemble_snippet_tubes(self.chain(lambda f: (1, 1, 5, 5)))
        assert t.action_label == 0 and t.confidence == pytest.approx(0.9)

    def test_mean_scores_choose_label(self):
        c = [mt(1, (0, 0, 1, 1), (0, 0, 1, 1), (0.9, 0.0)),
             mt(5, (0, 0, 1, 1), (0, 0, 1, 1), (0.0, 0.6)),
             mt(9, (0, 0, 1, 1), (0, 0, 1, 1), (0.0, 0.6))]
        t = assemble_snippet_tubes(c)
        assert t.action_label == 1 and t.confidence == pytest.approx(0.4)

    def test_global_linear_drift(self):
        # piecewise anchors sampled from one linear motion reproduce it everywhere
        t = assemble_snippet_tubes(self.chain(lambda f: (2.0 * f, 0.5 * f, 2.0 * f + 8, 0.5 * f + 6), start=13))
        assert t.snippet_index == 1
        for i, box in enumerate(t.boxes):
            f = 13 + i
            assert np.allclose(box.as_tuple(), (2.0 * f, 0.5 * f, 2.0 * f + 8, 0.5 * f + 6), atol=1e-12)
        assert t.frame_map()[13] == t.boxes[0]

    def test_wrong_length(self):
        with pytest.raises(ValueError):
            assemble_snippet_tubes(self.chain(lambda f: (0, 0, 1, 1))[:2])
        with pytest.raises(ValueError):
            assemble_snippet_tubes([])

    def test_coverage_gap(self):
        c = self.chain(lambda f: (0, 0, 1, 1))
        c[1] = mt(6, (0, 0, 1, 1), (0, 0, 1, 1), (0.9, 0.1))
        with pytest.raises(ValueError, match="micro-tube 1"):
            assemble_snippet_tubes(c)

    def test_action_tube_length(self):
        with pytest.raises(ValueError):
            ActionTube(0, (Box(0, 0, 1, 1),) * 11, 0)

    @settings(max_examples=100, deadline=None)
    @given(st.lists(boxes(), min_size=4, max_size=4), st.integers(0, 5), st.integers(0, 2),
           st.floats(0, 1))
    def test_assemble_split_identity(self, anchors, snippet, label, conf):
        # anchor boxes at frames 1,4,5,8,9,12 (the 4/5 and 8/9 pairs shared), linear in between
        a = [anchors[0], anchors[1], anchors[1], anchors[2], anchors[2], anchors[3]]
        micro = [MicroTube(snippet * 12 + 1 + 4 * i, 3, a[2 * i], a[2 * i + 1],
                           tuple(conf if c == label else 0.0 for c in range(3))) for i in range(3)]
        tube = assemble_snippet_tubes(micro)
        again = assemble_snippet_tubes(split_tube(tube, 3))
        assert again.boxes == tube.boxes
        assert again.snippet_index == snippet
        if conf > 0:
            assert again.action_label == label and again.confidence == pytest.approx(conf)


class TestLinking:
    def test_single_candidate_per_step(self):
        steps = [[mt(1 + 4 * t, (0, 0, 5, 5), (0, 0, 5, 5), (0.7,))] for t in range(3)]
        chains = link_micro_tubes(steps)
        assert len(chains) == 1
        assert chains[0].candidates == (0, 0, 0) and chains[0].start_step == 0
        assert chains[0].score == pytest.approx(0.7 * 3 + 2.0)

    def test_parallel_tracks_do_not_swap(self):
        left, right = (0, 0, 10, 10), (50, 0, 60, 10)
        steps = []
        for t in range(3):
            pair = [mt(1 + 4 * t, left, left, (0.5,)), mt(1 + 4 * t, right, right, (0.5,))]
            steps.append(pair if t % 2 == 0 else pair[::-1])
        chains = link_micro_tubes(steps)
        assert sorted(c.candidates for c in chains) == [(0, 1, 0), (1, 0, 1)]
        for c in chains:
            boxes_ = {steps[s][j].start_box for s, j in zip(c.steps, c.candidates)}
            assert len(boxes_) == 1

    def test_empty_step_breaks_chain(self):
        steps = [[mt(1, (0, 0, 5, 5), (0, 0, 5, 5))], [], [mt(9, (0, 0, 5, 5), (0, 0, 5, 5))]]
        chains = link_micro_tubes(steps)
        assert [(c.start_step, c.candidates) for c in chains] == [(0, (0,)), (2, (0,))]

    def test_no_candidates(self):
        assert link_micro_tubes([[], []]) == []

    def test_negative_lambda(self):
        with pytest.raises(ValueError):
            link_micro_tubes([[]], lam=-1)

    def test_per_class(self):
        steps = [[mt(1, (0, 0, 5, 5), (0, 0, 5, 5), (0.2, 0.8))]]
        chains = link_micro_tubes(steps, labels=[1])
        assert [c.label for c in chains] == [1]
        assert len(link_micro_tubes(steps)) == 2


lattice = st.sampled_from([0.0, 0.25, 0.5, 1.0])
lattice_box = st.sampled_from([(0, 0, 10, 10), (5, 0, 15, 10), (20, 20, 30, 30)])


@st.composite
def link_instances(draw):
    n_steps = draw(st.integers(1, 3))
    steps = []
    for t in range(n_steps):
        n = draw(st.integers(0, 3))
        steps.append([MicroTube(1 + 4 * t, 3, Box(*draw(lattice_box)), Box(*draw(lattice_box)),
                                (draw(lattice), draw(lattice))) for _ in range(n)])
    return steps, draw(st.sampled_from([0.0, 0.5, 1.0]))


@settings(max_examples=300, deadline=None)
@given(link_instances())
def test_linking_matches_exhaustive_search(inst):
    steps, lam = inst
    got = [(c.label, c.start_step, c.candidates, round(c.score, 9)) for c in link_micro_tubes(steps, lam)]
    want = [(lab, s, p, round(sc, 9)) for lab, s, p, sc in enumerate_links(steps, lam)]
    assert got == want


@settings(max_examples=100, deadline=None)
@given(link_instances())
def test_linking_uses_every_candidate_once_per_class(inst):
    steps, lam = inst
    chains = link_micro_tubes(steps, lam)
    for label in range(2):
        used = [(s, j) for c in chains if c.label == label for s, j in zip(c.steps, c.candidates)]
        assert sorted(used) == sorted((s, j) for s, step in enumerate(steps) for j in range(len(step)))
