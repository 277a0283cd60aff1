"""Finite-difference checks of every differentiable operation in the model.

Each case builds a small random problem from a seed and reduces the
operation's output to a scalar through a fixed random projection, so every
output element contributes to the checked gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Iterable

import numpy as np

from .deform import FeatureVolume, OffsetField, bilinear_sample, pool_tubes, predict_offsets
from .gcn import GCN, gcn_layer_forward, graph_readout, normalize_adjacency
from .geometry import TUBE_LEN, ActionTube, Box
from .pipeline import ActivityModel, Config, Snippet
from .tensor import Tensor, check_gradients, linear, mul, softmax_cross_entropy, tsum

TOLERANCE = 1e-4


@dataclass
class GradResult:
    name: str
    seed: int
    error: float

    @property
    def ok(self) -> bool:
        return self.error < TOLERANCE


def _project(out: Tensor, rng: np.random.Generator) -> Tensor:
    return tsum(mul(out, Tensor(rng.normal(size=out.shape))))


def _volume(rng, c=3, h=9, w=10, scale=0.5) -> FeatureVolume:
    return FeatureVolume(rng.normal(size=(c, TUBE_LEN, h, w)), scale)


def _boxes(rng, fv: FeatureVolume, n_t: int) -> np.ndarray:
    ih, iw = fv.image_size
    x1 = rng.uniform(0, 0.5 * iw, size=(n_t, TUBE_LEN))
    y1 = rng.uniform(0, 0.5 * ih, size=(n_t, TUBE_LEN))
    bw = rng.uniform(0.2 * iw, 0.5 * iw, size=(n_t, TUBE_LEN))
    bh = rng.uniform(0.2 * ih, 0.5 * ih, size=(n_t, TUBE_LEN))
    return np.stack([x1, y1, x1 + bw, y1 + bh], axis=-1)


def _pool_cases(seed: int, k: int = 3, n_s: int = 2):
    rng = np.random.default_rng([seed, 11])
    fv = _volume(rng)
    boxes = _boxes(rng, fv, 2)
    off = rng.normal(0, 1.0, size=(2, TUBE_LEN, k, k, 2))
    mod = rng.uniform(0.1, 0.9, size=(2, TUBE_LEN, k, k))
    kw = dict(k=k, n_s=n_s)

    def with_features(offsets=None, modulation=None):
        def f(x):
            fv2 = FeatureVolume(x, fv.spatial_scale, fv.image_size)
            o = Tensor(offsets) if offsets is not None else None
            m = Tensor(modulation) if modulation is not None else None
            return _project(pool_tubes(fv2, boxes, o, m, **kw), np.random.default_rng(seed))
        return f

    def with_offsets(modulation=None):
        def f(x):
            m = Tensor(modulation) if modulation is not None else None
            return _project(pool_tubes(fv, boxes, x, m, **kw), np.random.default_rng(seed))
        return f

    def with_modulation(x):
        return _project(pool_tubes(fv, boxes, Tensor(off), x, **kw), np.random.default_rng(seed))

    feats = fv.values.data
    return [
        ("roi_pool.standard/features", with_features(), feats),
        ("roi_pool.deformable/features", with_features(off), feats),
        ("roi_pool.deformable/offsets", with_offsets(), off),
        ("roi_pool.modulated/features", with_features(off, mod), feats),
        ("roi_pool.modulated/offsets", with_offsets(mod), off),
        ("roi_pool.modulated/modulation", with_modulation, mod),
    ]


def _bilinear_cases(seed: int):
    rng = np.random.default_rng([seed, 12])
    fv = _volume(rng)
    frame = int(rng.integers(TUBE_LEN))
    # keep clear of integer grid lines, where the interpolant has kinks
    x = float(rng.integers(-1, 10) + rng.uniform(0.05, 0.95))
    y = float(rng.integers(-1, 9) + rng.uniform(0.05, 0.95))
    proj = rng.normal(size=fv.channels)

    def red(out):
        return tsum(mul(out, Tensor(proj)))

    return [
        # only four cells per channel receive gradient, so probe every coordinate
        ("bilinear/features",
         lambda t: red(bilinear_sample(FeatureVolume(t, fv.spatial_scale), frame, x, y)), fv.values.data,
         fv.values.size),
        ("bilinear/x", lambda t: red(bilinear_sample(fv, frame, t, y)), np.array(x)),
        ("bilinear/y", lambda t: red(bilinear_sample(fv, frame, x, t)), np.array(y)),
    ]


def _offset_cases(seed: int, k: int = 3):
    rng = np.random.default_rng([seed, 13])
    c, n_t = 2, 3
    pooled = rng.normal(size=(n_t, c, TUBE_LEN, k, k))
    d_in = c * TUBE_LEN * k * k
    cases = []
    for shared in (False, True):
        n_out = (1 if shared else TUBE_LEN) * k * k * 3
        w = rng.normal(0, 0.05, size=(d_in, n_out))
        b = rng.normal(0, 0.1, size=n_out)
        tag = "shared" if shared else "per_frame"

        def red(fld: OffsetField, seed=seed):
            r = np.random.default_rng(seed)
            return _project(fld.offsets, r) + _project(fld.modulation, r)

        cases += [
            (f"offset_fc.{tag}/w", lambda x, b=b, s=shared: red(predict_offsets(Tensor(pooled), x, Tensor(b), True, s)), w),
            (f"offset_fc.{tag}/b", lambda x, w=w, s=shared: red(predict_offsets(Tensor(pooled), Tensor(w), x, True, s)), b),
            (f"offset_fc.{tag}/input", lambda x, w=w, b=b, s=shared: red(predict_offsets(x, Tensor(w), Tensor(b), True, s)), pooled),
        ]
    return cases


def _random_graph(rng, n):
    adj = (rng.random((n, n)) < 0.4).astype(float)
    adj = np.triu(adj, 1)
    return adj + adj.T


def _gcn_cases(seed: int):
    rng = np.random.default_rng([seed, 14])
    n, d_in, d_out = 5, 4, 6
    a_hat = normalize_adjacency(_random_graph(rng, n))
    h = rng.normal(size=(n, d_in))
    w = rng.normal(0, 0.5, size=(d_in, d_out))
    b = rng.normal(0, 0.5, size=d_out)
    r = lambda: np.random.default_rng(seed)
    sizes = [2, 3]
    layers = [rng.normal(size=(5, 3)), rng.normal(size=(5, 4))]

    def readout(mode):
        def f(x):
            return _project(graph_readout([Tensor(layers[0]), x], mode, sizes), r())
        return f

    n_cls = 4
    x_g = rng.normal(size=(3, 7))
    w_cls = rng.normal(0, 0.5, size=(7, n_cls))
    b_cls = rng.normal(0, 0.5, size=n_cls)
    target = rng.integers(n_cls, size=3)
    return [
        ("gcn_layer/h", lambda x: _project(gcn_layer_forward(x, a_hat, Tensor(w), Tensor(b)), r()), h),
        ("gcn_layer/w", lambda x: _project(gcn_layer_forward(Tensor(h), a_hat, x, Tensor(b)), r()), w),
        ("gcn_layer/b", lambda x: _project(gcn_layer_forward(Tensor(h), a_hat, Tensor(w), x), r()), b),
        ("readout.final/h", readout("final"), layers[1]),
        ("readout.concat/h", readout("concat"), layers[1]),
        ("classifier/w", lambda x: softmax_cross_entropy(linear(Tensor(x_g), x, Tensor(b_cls)), target), w_cls),
        ("classifier/b", lambda x: softmax_cross_entropy(linear(Tensor(x_g), Tensor(w_cls), x), target), b_cls),
        ("classifier/x", lambda x: softmax_cross_entropy(linear(x, Tensor(w_cls), Tensor(b_cls)), target), x_g),
    ]


def _model_cases(seed: int):
    """Whole forward pass: pooling, offsets, projection, GCN, readout, loss."""
    rng = np.random.default_rng([seed, 15])
    cfg = Config(k=3, d_node=6, d_h=5, d_out=4, pooling="modulated", readout="concat", seed=seed)
    snippets = []
    for s in range(2):
        fv = _volume(rng, c=2)
        # three tubes with kappa=2 give a complete graph, so edges cannot flip
        tubes = [ActionTube(s, tuple(Box(*row) for row in b), int(rng.integers(3)), 1.0, i)
                 for i, b in enumerate(_boxes(rng, fv, 3))]
        snippets.append(Snippet(f"v{seed}", s, fv, tubes, s))
    model = ActivityModel(cfg, 2, 2)
    model.params["off.w"].data = rng.normal(0, 0.02, size=model.params["off.w"].shape)
    labels = np.array([0, 1])
    cases = []
    for name in ("off.w", "proj.w", "gcn.w1", "cls.w"):
        p = model.params[name]

        def f(x, p=p, name=name):
            model.params[name] = x
            model.gcn.weights = [model.params[f"gcn.w{i}"] for i in (1, 2, 3)]
            model.gcn.w_cls = model.params["cls.w"]
            logits, _ = model.forward(snippets)
            return softmax_cross_entropy(logits, labels)

        cases.append((f"model/{name}", f, p.data))
    return cases


CASE_BUILDERS: list[Callable[[int], list]] = [
    _bilinear_cases, _pool_cases, _offset_cases, _gcn_cases, _model_cases,
]


def run_suite(seeds: Iterable[int] = range(20), max_coords: int = 24, eps: float = 1e-6) -> list[GradResult]:
    results = []
    for seed in seeds:
        for build in CASE_BUILDERS:
            for name, f, x0, *coords in build(seed):
                x = Tensor(np.array(x0, dtype=np.float64))
                n = coords[0] if coords else max_coords
                results.append(GradResult(name, seed, check_gradients(f, x, eps, n, seed)))
    return results
