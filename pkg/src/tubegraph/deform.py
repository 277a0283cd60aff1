"""3D RoI pooling over action tubes: standard, deformable and modulated.

A tube contributes one box per frame.  Each box is split into a ``k x k``
grid of bins and every bin averages ``n_s x n_s`` bilinear samples taken at
regular interior points.  The deformable variants translate a bin's samples
by ``gamma * offset * (box width, box height)`` in feature-grid units, and
the modulated variant additionally scales each bin by a value in [0, 1].

Feature grid convention: cell ``(y, x)`` sits at feature coordinate
``(y, x)`` and pixel coordinate ``(y, x) / spatial_scale``.  Samples outside
the grid read zeros.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence, Union

import numpy as np

from .geometry import ActionTube, Box
from .tensor import Tensor, ShapeError, _make, as_tensor, concat, getitem, linear, reshape, sigmoid

BINS = 7
SAMPLES = 2
GAMMA = 0.1


@dataclass
class FeatureVolume:
    """Per-snippet features ``(C, M, H_f, W_f)`` plus the pixel-to-grid ratio."""

    values: Tensor
    spatial_scale: float = 0.125
    image_size: Optional[tuple[float, float]] = None  # (height, width) in pixels

    def __post_init__(self):
        self.values = as_tensor(self.values)
        if self.values.ndim != 4:
            raise ShapeError(f"feature volume must be (C, M, H, W), got {self.values.shape}")
        if self.spatial_scale <= 0:
            raise ValueError(f"spatial_scale must be positive, got {self.spatial_scale}")
        if self.image_size is None:
            _, _, h, w = self.values.shape
            self.image_size = (h / self.spatial_scale, w / self.spatial_scale)

    @property
    def channels(self) -> int:
        return self.values.shape[0]

    @property
    def frames(self) -> int:
        return self.values.shape[1]


@dataclass
class OffsetField:
    """Normalised per-bin offsets ``(..., L, k, k, 2)`` and optional modulation ``(..., L, k, k)``."""

    offsets: Tensor
    modulation: Optional[Tensor] = None


# -- bilinear kernel -------------------------------------------------------

def _corners(xs: np.ndarray, ys: np.ndarray, frames: np.ndarray, h: int, w: int):
    """Flat indices, weights and validity of the 4 neighbours of each sample."""
    x0 = np.floor(xs)
    y0 = np.floor(ys)
    lx = xs - x0
    ly = ys - y0
    x0 = x0.astype(np.int64)
    y0 = y0.astype(np.int64)
    out = []
    for dy, dx, wgt in ((0, 0, (1 - ly) * (1 - lx)), (0, 1, (1 - ly) * lx),
                        (1, 0, ly * (1 - lx)), (1, 1, ly * lx)):
        cx, cy = x0 + dx, y0 + dy
        valid = (cx >= 0) & (cx < w) & (cy >= 0) & (cy < h)
        flat = np.where(valid, (frames * h + cy) * w + cx, 0)
        out.append((flat, wgt, valid))
    return out, lx, ly


class _Sampler:
    """Gathers features at fractional points and back-propagates through them."""

    def __init__(self, feats: np.ndarray, xs: np.ndarray, ys: np.ndarray, frames: np.ndarray):
        c, m, h, w = feats.shape
        self.shape = (c, m, h, w)
        self.flat = feats.reshape(c, m * h * w)
        self.corners, self.lx, self.ly = _corners(xs, ys, frames, h, w)
        # zero-padded neighbour values, each (C, *points)
        self.vals = [self.flat[:, idx] * valid for idx, _, valid in self.corners]

    def values(self) -> np.ndarray:
        return sum(v * wgt for v, (_, wgt, _) in zip(self.vals, self.corners))

    def grad_features(self, g: np.ndarray) -> np.ndarray:
        c, m, h, w = self.shape
        out = np.zeros((c, m * h * w))
        for idx, wgt, valid in self.corners:
            contrib = (g * (wgt * valid)).reshape(c, -1)
            flat_idx = idx.reshape(-1)
            for ch in range(c):
                out[ch] += np.bincount(flat_idx, weights=contrib[ch], minlength=m * h * w)
        return out.reshape(c, m, h, w)

    def grad_coords(self, g: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        v00, v01, v10, v11 = self.vals  # (y, x) neighbour order
        dvdx = (1 - self.ly) * (v01 - v00) + self.ly * (v11 - v10)
        dvdy = (1 - self.lx) * (v10 - v00) + self.lx * (v11 - v01)
        return (g * dvdx).sum(axis=0), (g * dvdy).sum(axis=0)


def bilinear_sample(fv: FeatureVolume, frame: int, x, y) -> Tensor:
    """Feature vector ``(C,)`` at fractional grid point ``(x, y)`` of ``frame``.

    ``x`` and ``y`` may be floats or scalar tensors; gradients reach the four
    neighbouring cells and the coordinates.
    """
    if not 0 <= frame < fv.frames:
        raise IndexError(f"frame {frame} outside [0, {fv.frames})")
    xt, yt = as_tensor(x), as_tensor(y)
    xs = xt.data.reshape(1)
    ys = yt.data.reshape(1)
    sampler = _Sampler(fv.values.data, xs, ys, np.array([frame]))
    feats = fv.values

    def _bw(g):
        g = g.reshape(-1, 1)
        gf = sampler.grad_features(g) if feats.requires_grad else None
        gx, gy = sampler.grad_coords(g)
        return gf, gx.reshape(xt.shape), gy.reshape(yt.shape)

    return _make(sampler.values().reshape(-1), (feats, xt, yt), _bw, "bilinear_sample")


# -- RoI pooling -------------------------------------------------------------

def tube_boxes_on_grid(boxes: np.ndarray, fv: FeatureVolume) -> np.ndarray:
    """Clamp pixel boxes ``(..., 4)`` to the image, then map them onto the grid."""
    img_h, img_w = fv.image_size
    b = np.array(boxes, dtype=np.float64, copy=True)
    b[..., 0] = np.clip(b[..., 0], 0.0, img_w)
    b[..., 1] = np.clip(b[..., 1], 0.0, img_h)
    b[..., 2] = np.clip(np.maximum(b[..., 2], b[..., 0]), 0.0, img_w)
    b[..., 3] = np.clip(np.maximum(b[..., 3], b[..., 1]), 0.0, img_h)
    return b * fv.spatial_scale


def pool_tubes(
    fv: FeatureVolume,
    boxes: np.ndarray,
    offsets: Optional[Tensor] = None,
    modulation: Optional[Tensor] = None,
    gamma: float = GAMMA,
    k: int = BINS,
    n_s: int = SAMPLES,
) -> Tensor:
    """Pool ``T`` tubes at once; ``boxes`` is ``(T, L, 4)`` in pixels.

    Returns ``(T, C, L, k, k)``.  ``offsets`` ``(T, L, k, k, 2)`` turns on
    deformation and ``modulation`` ``(T, L, k, k)`` scales each bin.
    """
    boxes = np.asarray(boxes, dtype=np.float64)
    if boxes.ndim != 3 or boxes.shape[2] != 4:
        raise ShapeError(f"boxes must be (T, L, 4), got {boxes.shape}")
    n_t, n_l, _ = boxes.shape
    if n_l != fv.frames:
        raise ShapeError(f"tube has {n_l} boxes but the volume has {fv.frames} frames")
    if offsets is not None and offsets.shape != (n_t, n_l, k, k, 2):
        raise ShapeError(f"offsets must be {(n_t, n_l, k, k, 2)}, got {offsets.shape}")
    if modulation is not None and modulation.shape != (n_t, n_l, k, k):
        raise ShapeError(f"modulation must be {(n_t, n_l, k, k)}, got {modulation.shape}")

    grid = tube_boxes_on_grid(boxes, fv)
    x1, y1 = grid[..., 0], grid[..., 1]
    bw = grid[..., 2] - x1
    bh = grid[..., 3] - y1
    frac = (np.arange(k)[:, None] + (np.arange(n_s)[None, :] + 0.5) / n_s) / k  # (k, n_s)
    # sample layout (T, L, row i, col j, sub-row a, sub-col b)
    xs = x1[..., None, None] + bw[..., None, None] * frac          # (T, L, j, b)
    ys = y1[..., None, None] + bh[..., None, None] * frac          # (T, L, i, a)
    shape = (n_t, n_l, k, k, n_s, n_s)
    xs = np.broadcast_to(xs[:, :, None, :, None, :], shape)
    ys = np.broadcast_to(ys[:, :, :, None, :, None], shape)
    if offsets is not None:
        off = offsets.data
        xs = xs + (gamma * off[..., 0] * bw[..., None, None])[..., None, None]
        ys = ys + (gamma * off[..., 1] * bh[..., None, None])[..., None, None]
    frames = np.broadcast_to(np.arange(n_l)[None, :, None, None, None, None], shape)

    sampler = _Sampler(fv.values.data, np.ascontiguousarray(xs), np.ascontiguousarray(ys), frames)
    per_sample = sampler.values()                                   # (C, T, L, k, k, s, s)
    pooled = per_sample.mean(axis=(-1, -2))                         # (C, T, L, k, k)
    pooled = np.transpose(pooled, (1, 0, 2, 3, 4))                  # (T, C, L, k, k)
    out = pooled * modulation.data[:, None] if modulation is not None else pooled

    feats = fv.values
    parents = [feats]
    if offsets is not None:
        parents.append(offsets)
    if modulation is not None:
        parents.append(modulation)

    def _bw(g):
        grads = []
        gu = g * modulation.data[:, None] if modulation is not None else g
        gs = np.transpose(gu, (1, 0, 2, 3, 4))[..., None, None] / (n_s * n_s)
        gs = np.broadcast_to(gs, per_sample.shape)
        grads.append(sampler.grad_features(gs) if feats.requires_grad else None)
        if offsets is not None:
            if offsets.requires_grad:
                gx, gy = sampler.grad_coords(gs)
                d_off = np.empty(offsets.shape)
                d_off[..., 0] = gamma * gx.sum(axis=(-1, -2)) * bw[..., None, None]
                d_off[..., 1] = gamma * gy.sum(axis=(-1, -2)) * bh[..., None, None]
                grads.append(d_off)
            else:
                grads.append(None)
        if modulation is not None:
            grads.append((g * pooled).sum(axis=1))
        return grads

    return _make(out, tuple(parents), _bw, "roi_pool_3d")


def _single(fv: FeatureVolume, tube, offsets=None, modulation=None, **kw) -> Tensor:
    boxes = tube.box_array() if isinstance(tube, ActionTube) else np.asarray(tube, dtype=np.float64)
    n_l = boxes.shape[0]
    k = kw.get("k", BINS)
    if offsets is not None:
        offsets = reshape(offsets, (1, n_l, k, k, 2))
    if modulation is not None:
        modulation = reshape(modulation, (1, n_l, k, k))
    out = pool_tubes(fv, boxes[None], offsets, modulation, **kw)
    return reshape(out, out.shape[1:])


def roi_pool_3d(fv: FeatureVolume, tube: Union[ActionTube, np.ndarray], k: int = BINS,
                n_s: int = SAMPLES) -> Tensor:
    """Standard 3D RoI pooling of one tube to ``(C, L, k, k)``."""
    return _single(fv, tube, k=k, n_s=n_s)


def deformable_roi_pool_3d(fv: FeatureVolume, tube, offsets, gamma: float = GAMMA,
                           k: int = BINS, n_s: int = SAMPLES) -> Tensor:
    if isinstance(offsets, OffsetField):
        offsets = offsets.offsets
    return _single(fv, tube, as_tensor(offsets), gamma=gamma, k=k, n_s=n_s)


def modulated_deformable_roi_pool_3d(fv: FeatureVolume, tube, offsets: OffsetField,
                                     gamma: float = GAMMA, k: int = BINS,
                                     n_s: int = SAMPLES) -> Tensor:
    if offsets.modulation is None:
        raise ValueError("modulated pooling needs a modulation field")
    return _single(fv, tube, as_tensor(offsets.offsets), as_tensor(offsets.modulation),
                   gamma=gamma, k=k, n_s=n_s)


# -- offset prediction --------------------------------------------------------

def offset_outputs(n_frames: int, k: int, modulated: bool, shared: bool = False) -> int:
    per = 1 if shared else n_frames
    return per * k * k * (3 if modulated else 2)


def predict_offsets(
    pooled: Tensor,
    w_off: Tensor,
    b_off: Optional[Tensor] = None,
    modulated: bool = False,
    shared: bool = False,
) -> OffsetField:
    """Fully-connected map from standard-pooled features to normalised offsets.

    ``pooled`` is ``(C, L, k, k)`` or a batch ``(T, C, L, k, k)``.  Output
    columns hold the ``L*k*k*2`` offsets first, then ``L*k*k`` modulation
    logits that pass through a sigmoid.  With ``shared`` one set of offsets
    is predicted per tube and repeated over frames.
    """
    single = pooled.ndim == 4
    batch = reshape(pooled, (1,) + pooled.shape) if single else pooled
    n_t, c, n_l, k, _ = batch.shape
    per = 1 if shared else n_l
    n_out = offset_outputs(n_l, k, modulated, shared)
    if w_off.shape != (c * n_l * k * k, n_out):
        raise ShapeError(f"offset weights must be {(c * n_l * k * k, n_out)}, got {w_off.shape}")
    raw = linear(reshape(batch, (n_t, -1)), w_off, b_off)
    n_xy = per * k * k * 2
    offs = reshape(getitem(raw, (slice(None), slice(0, n_xy))), (n_t, per, k, k, 2))
    mod = None
    if modulated:
        mod = reshape(sigmoid(getitem(raw, (slice(None), slice(n_xy, None)))), (n_t, per, k, k))
    if shared:
        offs = concat([offs] * n_l, axis=1)
        mod = concat([mod] * n_l, axis=1) if mod is not None else None
    if single:
        offs = reshape(offs, offs.shape[1:])
        mod = reshape(mod, mod.shape[1:]) if mod is not None else None
    return OffsetField(offs, mod)


def whole_frame_box(fv: FeatureVolume) -> Box:
    h, w = fv.image_size
    return Box(0.0, 0.0, float(w), float(h))
