"""Box algebra, anchors, NMS, RoI Align and mask crop/paste.

Boxes are continuous ``[x1, y1, x2, y2]`` pixel coordinates where pixel
``(r, c)`` covers ``[c, c+1) x [r, r+1)``. Arrays of boxes have shape
``(R, 4)``.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Sequence

import numpy as np

from . import tensor as T
from .tensor import Tensor

BBOX_CLIP = np.log(1000.0 / 16)


class GeometryError(ValueError):
    pass


class BBox(NamedTuple):
    x1: float
    y1: float
    x2: float
    y2: float

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    def valid(self) -> bool:
        return bool(np.all(np.isfinite(self)) and self.x2 > self.x1 and self.y2 > self.y1)


@dataclass(frozen=True)
class Proposal:
    box: BBox
    objectness: float


@dataclass
class AnchorGrid:
    stride: int
    scales: tuple
    ratios: tuple
    anchors: np.ndarray  # (H_f * W_f * A, 4), location-major
    feat_hw: tuple

    @property
    def per_location(self) -> int:
        return len(self.scales) * len(self.ratios)

    @property
    def locations(self) -> int:
        return self.feat_hw[0] * self.feat_hw[1]


def area(boxes: np.ndarray) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64)
    return np.clip(boxes[..., 2] - boxes[..., 0], 0, None) * np.clip(boxes[..., 3] - boxes[..., 1], 0, None)


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between ``a`` (N,4) and ``b`` (M,4)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    lt = np.maximum(a[:, None, :2], b[None, :, :2])
    rb = np.minimum(a[:, None, 2:], b[None, :, 2:])
    wh = np.clip(rb - lt, 0, None)
    inter = wh[..., 0] * wh[..., 1]
    union = area(a)[:, None] + area(b)[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        out = np.where(union > 0, inter / union, 0.0)
    return out


def iou(a, b) -> float:
    """Intersection over union of two boxes; 0 for degenerate overlap."""
    if tuple(a) == tuple(b) and area(np.asarray(a)) > 0:
        return 1.0
    return float(iou_matrix(a, b)[0, 0])


def _centers(boxes: np.ndarray):
    w = boxes[..., 2] - boxes[..., 0]
    h = boxes[..., 3] - boxes[..., 1]
    return boxes[..., 0] + 0.5 * w, boxes[..., 1] + 0.5 * h, w, h


def encode_targets(anchor, gt, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """Centre offsets scaled by anchor size and log size ratios."""
    a = np.asarray(anchor, dtype=np.float64)
    g = np.asarray(gt, dtype=np.float64)
    ax, ay, aw, ah = _centers(a)
    gx, gy, gw, gh = _centers(g)
    wx, wy, ww, wh = weights
    return np.stack([
        wx * (gx - ax) / aw,
        wy * (gy - ay) / ah,
        ww * np.log(gw / aw),
        wh * np.log(gh / ah),
    ], axis=-1)


def decode_deltas(deltas, anchor, weights=(1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    d = np.asarray(deltas, dtype=np.float64)
    a = np.asarray(anchor, dtype=np.float64)
    ax, ay, aw, ah = _centers(a)
    wx, wy, ww, wh = weights
    dx, dy = d[..., 0] / wx, d[..., 1] / wy
    dw = np.minimum(d[..., 2] / ww, BBOX_CLIP)
    dh = np.minimum(d[..., 3] / wh, BBOX_CLIP)
    cx, cy = ax + dx * aw, ay + dy * ah
    w, h = aw * np.exp(dw), ah * np.exp(dh)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def clip_boxes(boxes: np.ndarray, image_hw) -> np.ndarray:
    h, w = image_hw
    out = np.array(boxes, dtype=np.float64)
    out[..., 0::2] = np.clip(out[..., 0::2], 0, w)
    out[..., 1::2] = np.clip(out[..., 1::2], 0, h)
    return out


def make_anchors(feat_hw, stride: int, scales: Sequence[float], ratios: Sequence[float] = (0.5, 1.0, 2.0)) -> AnchorGrid:
    """Anchors of every (scale, ratio) centred on each feature cell.

    ``scales`` are square-root areas in pixels; ``ratio`` is height/width.
    """
    fh, fw = feat_hw
    if fh <= 0 or fw <= 0:
        raise GeometryError(f"no anchors for feature size {feat_hw}")
    base = []
    for s in scales:
        for r in ratios:
            w = s / np.sqrt(r)
            h = s * np.sqrt(r)
            base.append([-w / 2, -h / 2, w / 2, h / 2])
    base = np.array(base)
    cy, cx = np.meshgrid((np.arange(fh) + 0.5) * stride, (np.arange(fw) + 0.5) * stride, indexing="ij")
    shifts = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
    anchors = (shifts + base[None]).reshape(-1, 4)
    return AnchorGrid(stride, tuple(scales), tuple(ratios), anchors, (fh, fw))


def nms_indices(boxes: np.ndarray, scores: np.ndarray, iou_thresh: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy suppression; returns kept indices in descending score order.

    Equal scores are ordered by the lower original index.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    areas = area(boxes)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        if max_keep is not None and len(keep) >= max_keep:
            break
        rest = order[1:]
        lt = np.maximum(boxes[i, :2], boxes[rest, :2])
        rb = np.minimum(boxes[i, 2:], boxes[rest, 2:])
        wh = np.clip(rb - lt, 0, None)
        inter = wh[:, 0] * wh[:, 1]
        union = areas[i] + areas[rest] - inter
        ov = np.where(union > 0, inter / np.where(union > 0, union, 1), 0.0)
        order = rest[ov <= iou_thresh]
    return np.array(keep, dtype=np.int64)


def nms(proposals: Sequence[Proposal], iou_thresh: float, max_keep: int | None = None) -> list[Proposal]:
    if not proposals:
        return []
    boxes = np.array([p.box for p in proposals])
    scores = np.array([p.objectness for p in proposals])
    return [proposals[i] for i in nms_indices(boxes, scores, iou_thresh, max_keep)]


# -- RoI Align -------------------------------------------------------------------
def _interp_matrix(lo: np.ndarray, hi: np.ndarray, out: int, size: int, sampling: int) -> np.ndarray:
    """(R, out, size) weights averaging ``sampling`` bilinear samples per bin.

    ``lo``/``hi`` are box edges in feature-cell coordinates (cell centres at
    integers). Samples beyond one cell outside the map contribute zero.
    """
    r = lo.shape[0]
    bins = (hi - lo) / out
    frac = (np.arange(sampling) + 0.5) / sampling
    pos = lo[:, None, None] + (np.arange(out)[None, :, None] + frac[None, None, :]) * bins[:, None, None]
    valid = (pos >= -1.0) & (pos <= size)
    pos = np.clip(pos, 0, None)
    p0 = np.floor(pos).astype(np.int64)
    at_end = p0 >= size - 1
    p0 = np.where(at_end, size - 1, p0)
    p1 = np.where(at_end, size - 1, p0 + 1)
    w1 = np.where(at_end, 0.0, pos - p0)
    w0 = 1.0 - w1
    w0 = w0 * valid / sampling
    w1 = w1 * valid / sampling
    mat = np.zeros((r, out, size))
    ri = np.broadcast_to(np.arange(r)[:, None, None], pos.shape)
    oi = np.broadcast_to(np.arange(out)[None, :, None], pos.shape)
    np.add.at(mat, (ri, oi, p0), w0)
    np.add.at(mat, (ri, oi, p1), w1)
    return mat


def _box_array(boxes) -> np.ndarray:
    b = np.asarray([tuple(x) for x in boxes] if not isinstance(boxes, np.ndarray) else boxes, dtype=np.float64)
    return b.reshape(-1, b.shape[-1] if b.size else 4)


def roi_align(feature: Tensor, boxes, stride: float, out: int = 7, sampling: int = 2,
              batch_index=None, image_hw=None) -> Tensor:
    """Pool ``feature`` [N,C,H,W] inside each image-space box to [R,C,out,out].

    Each output cell averages ``sampling x sampling`` bilinear samples at
    regular sub-cell centres. Differentiable with respect to ``feature``;
    box coordinates are constants.
    """
    b = _box_array(boxes)
    n, c, h, w = feature.shape
    if image_hw is not None:
        b = clip_boxes(b, image_hw)
    for row in b:
        if not (row[2] > row[0] and row[3] > row[1]):
            raise GeometryError(f"zero-area RoI {tuple(float(v) for v in row)}")
    r = len(b)
    bidx = np.zeros(r, np.int64) if batch_index is None else np.asarray(batch_index, np.int64)
    dtype = feature.dtype
    if r == 0:
        return T._make(np.zeros((0, c, out, out), dtype), (feature,), lambda g: (np.zeros_like(feature.data),))
    fb = b / stride - 0.5
    ay = _interp_matrix(fb[:, 1], fb[:, 3], out, h, sampling).astype(dtype)  # (R, out, H)
    ax = _interp_matrix(fb[:, 0], fb[:, 2], out, w, sampling).astype(dtype)  # (R, out, W)
    f = feature.data
    res = np.empty((r, c, out, out), dtype)
    for img in np.unique(bidx):
        sel = np.nonzero(bidx == img)[0]
        tmp = ay[sel] @ f[img].transpose(1, 0, 2).reshape(h, c * w)  # (r, out, C*W)
        tmp = tmp.reshape(len(sel), out * c, w) @ ax[sel].transpose(0, 2, 1)  # (r, out*C, out)
        res[sel] = tmp.reshape(len(sel), out, c, out).transpose(0, 2, 1, 3)

    def bw(g):
        gf = np.zeros_like(f)
        for img in np.unique(bidx):
            sel = np.nonzero(bidx == img)[0]
            gs = g[sel].transpose(0, 2, 1, 3).reshape(len(sel), out * c, out)
            dtmp = (gs @ ax[sel]).reshape(len(sel), out, c * w)  # (r, out, C*W)
            acc = np.tensordot(ay[sel], dtmp, axes=([0, 1], [0, 1]))  # (H, C*W)
            gf[img] += acc.reshape(h, c, w).transpose(1, 0, 2)
        return (gf,)

    return T._make(res, (feature,), bw)


# -- masks -----------------------------------------------------------------------
def _bilinear_1d(pos: np.ndarray, size: int):
    pos = np.clip(pos, 0, size - 1)
    p0 = np.floor(pos).astype(np.int64)
    p1 = np.minimum(p0 + 1, size - 1)
    w1 = pos - p0
    return p0, p1, w1


def crop_resize_mask(gt_mask: np.ndarray, box, out: int = 14) -> np.ndarray:
    """Bilinear resize of the mask window under ``box`` to ``out x out``,
    binarised at 0.5.

    Samples sit at output-cell centres and are clamped to the pixel centres
    covered by the box, so a mask equal to an integer box maps to all ones.
    """
    m = np.asarray(gt_mask, dtype=np.float64)
    x1, y1, x2, y2 = (float(v) for v in box)
    h, w = m.shape
    if not (x2 > x1 and y2 > y1) or x2 <= 0 or y2 <= 0 or x1 >= w or y1 >= h:
        raise GeometryError(f"empty crop for box {(x1, y1, x2, y2)}")

    def axis_pos(lo, hi, size):
        centers = lo + (np.arange(out) + 0.5) * (hi - lo) / out - 0.5
        a, b = lo, hi - 1.0
        if b < a:
            a = b = 0.5 * (lo + hi) - 0.5
        return np.clip(centers, a, b).clip(0, size - 1)

    y0, y1i, wy = _bilinear_1d(axis_pos(y1, y2, h), h)
    x0, x1i, wx = _bilinear_1d(axis_pos(x1, x2, w), w)
    top = m[y0][:, x0] * (1 - wx) + m[y0][:, x1i] * wx
    bot = m[y1i][:, x0] * (1 - wx) + m[y1i][:, x1i] * wx
    res = top * (1 - wy[:, None]) + bot * wy[:, None]
    return (res >= 0.5).astype(np.uint8)


def paste_mask_soft(mask: np.ndarray, box, image_hw) -> np.ndarray:
    """Bilinear upsampling of a square probability mask into ``box``;
    zero outside the pixels whose centres lie in the box."""
    m = np.asarray(mask, dtype=np.float64)
    h, w = image_hw
    out = np.zeros((h, w))
    x1, y1, x2, y2 = (float(v) for v in box)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    cs = np.nonzero((cols >= x1) & (cols < x2))[0]
    rs = np.nonzero((rows >= y1) & (rows < y2))[0]
    if cs.size == 0 or rs.size == 0:
        return out
    k = m.shape[0]
    y0, y1i, wy = _bilinear_1d((rows[rs] - y1) / (y2 - y1) * k - 0.5, k)
    x0, x1i, wx = _bilinear_1d((cols[cs] - x1) / (x2 - x1) * k - 0.5, m.shape[1])
    top = m[y0][:, x0] * (1 - wx) + m[y0][:, x1i] * wx
    bot = m[y1i][:, x0] * (1 - wx) + m[y1i][:, x1i] * wx
    out[np.ix_(rs, cs)] = top * (1 - wy[:, None]) + bot * wy[:, None]
    return out


def paste_mask(mask: np.ndarray, box, image_hw, thresh: float = 0.5) -> np.ndarray:
    """Full-image binary mask: the pasted probabilities thresholded at 0.5."""
    return (paste_mask_soft(mask, box, image_hw) >= thresh).astype(np.uint8)


def tight_bbox(mask: np.ndarray) -> BBox:
    """Tight box of the nonzero set (exclusive upper edges)."""
    ys, xs = np.nonzero(mask)
    if ys.size == 0:
        raise GeometryError("tight box of an empty mask")
    return BBox(float(xs.min()), float(ys.min()), float(xs.max() + 1), float(ys.max() + 1))
