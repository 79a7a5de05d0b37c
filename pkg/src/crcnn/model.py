"""The two-stage detector: constrained-residual backbone, attention proposal
network, per-RoI classification/box heads and a class-agnostic mask branch
fed by a low/high-level feature fusion."""
from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from . import geometry as G
from . import tensor as T
from .data import CLASS_NAMES, resize_bilinear
from .layers import (CBAM, ChannelAffine, ConstrainedConv2d, Conv2d, Deconv2d, Linear, LossBundle,
                     Module, mask_bce, smooth_l1, softmax_cross_entropy)
from .tensor import Tensor

BACKBONE_STRIDE = 16


class ConfigError(ValueError):
    pass


@dataclass
class ModelConfig:
    """Architecture and sampling hyper-parameters.

    ``widths`` are the conv_2x..conv_5x stage widths; ``fuse_width`` is the
    conv_5x input width produced by the 1x1 expansion. Anchor scales are
    fractions of ``image_size``.
    """

    image_size: int = 192
    constrained_channels: int = 3
    constrained_kernel: int = 5
    constrained_joint: bool = False
    residual_gain: float = 16.0
    stem_width: int = 16
    widths: tuple = (32, 64, 128, 256)
    blocks: tuple = (2, 2, 2, 2)
    fuse_width: int = 256
    deconv_width: int = 128
    mask_mid_width: int = 32
    head_width: int = 256
    cbam_reduction: int = 8
    cbam_kernel: int = 7
    anchor_scales: tuple = (0.125, 0.25, 0.5)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    rpn_fg_iou: float = 0.7
    rpn_bg_iou: float = 0.3
    rpn_batch: int = 256
    rpn_fg_fraction: float = 0.5
    rpn_lambda: float = 10.0
    rpn_pre_nms: int = 2000
    rpn_nms: float = 0.7
    proposals_train: int = 256
    proposals_test: int = 300
    roi_batch: int = 64
    roi_fg_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    stage2_train: int = 4
    stage2_test: int = 8
    det_nms: float = 0.3
    det_score_thresh: float = 0.5
    min_box: float = 2.0
    bbox_weights: tuple = (10.0, 10.0, 5.0, 5.0)
    skip_structure: bool = True
    num_classes: int = 3
    init_seed: int = 0

    def __post_init__(self):
        for name in ("widths", "blocks", "anchor_scales", "anchor_ratios", "bbox_weights"):
            setattr(self, name, tuple(getattr(self, name)))
        if self.num_classes != 3:
            raise ConfigError("exactly three manipulation classes are supported")
        if len(self.widths) != 4 or len(self.blocks) != 4:
            raise ConfigError("widths and blocks need one entry per stage conv_2x..conv_5x")
        extents = [self.image_size, self.stem_width, self.fuse_width, self.deconv_width,
                   self.mask_mid_width, self.head_width, *self.widths, *self.blocks]
        if any(int(v) <= 0 for v in extents):
            raise ConfigError("all extents must be positive")

    def to_dict(self) -> dict:
        return {k: list(v) if isinstance(v, tuple) else v for k, v in dataclasses.asdict(self).items()}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown model config keys: {sorted(unknown)}")
        return cls(**d)

    def digest(self) -> bytes:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True).encode()).digest()


@dataclass
class BackboneTaps:
    c3: Tensor
    c4: Tensor
    att: Tensor
    residual: Tensor | None = None


@dataclass
class RpnTargets:
    labels: np.ndarray  # per anchor: 1 tampered, 0 background, -1 ignored
    reg_targets: np.ndarray  # (A, 4)
    n_cls: int
    n_reg: int
    lam: float = 10.0


@dataclass
class RpnOutput:
    logits: Tensor  # (A, 2)
    deltas: Tensor  # (A, 4)
    proposals: np.ndarray  # (P, 4) image coordinates
    scores: np.ndarray  # (P,) tampered probability
    anchors: G.AnchorGrid


@dataclass
class Detection:
    class_id: int
    score: float
    box: G.BBox
    mask: np.ndarray  # full-image binary
    prob: np.ndarray | None = field(default=None, repr=False)  # full-image soft mask

    @property
    def class_name(self) -> str:
        return CLASS_NAMES[self.class_id]


class BasicBlock(Module):
    """Two 3x3 convolutions with an identity (or projected) shortcut.

    The residual branch ends in a per-channel gain initialised to zero so an
    un-normalised stack starts as its shortcut path.
    """

    def __init__(self, cin: int, cout: int, rng, downsample: bool = False):
        if downsample:
            self.conv1 = Conv2d(cin, cout, 4, rng, stride=2, pad=1)
        else:
            self.conv1 = Conv2d(cin, cout, 3, rng)
        self.conv2 = Conv2d(cout, cout, 3, rng)
        self.gate = ChannelAffine(cout, scale=0.0)
        self.downsample = downsample
        self.proj = Conv2d(cin, cout, 1, rng, pad=0) if (downsample or cin != cout) else None

    def forward(self, x: Tensor) -> Tensor:
        h = self.gate(self.conv2(T.relu(self.conv1(x))))
        s = T.avg_pool2d(x, 2) if self.downsample else x
        if self.proj is not None:
            s = self.proj(s)
        return T.relu(h + s)


def _stage(cin, cout, n, rng, downsample):
    return [BasicBlock(cin if i == 0 else cout, cout, rng, downsample and i == 0) for i in range(n)]


class ConstrainedRCNN(Module):
    """Network parameters plus the forward pieces of both stages."""

    def __init__(self, config: ModelConfig | None = None):
        cfg = self.config = config or ModelConfig()
        rng = np.random.default_rng(cfg.init_seed)
        w2, w3, w4, w5 = cfg.widths
        self.constrained = ConstrainedConv2d(3, cfg.constrained_channels, rng, cfg.constrained_kernel,
                                             joint=cfg.constrained_joint)
        self.stem = Conv2d(cfg.constrained_channels, cfg.stem_width, 4, rng, stride=2, pad=1)
        self.conv2 = _stage(cfg.stem_width, w2, cfg.blocks[0], rng, False)
        self.conv3 = _stage(w2, w3, cfg.blocks[1], rng, True)
        self.conv4 = _stage(w3, w4, cfg.blocks[2], rng, True)
        self.cbam = CBAM(w4, rng, cfg.cbam_reduction, cfg.cbam_kernel)
        a = len(cfg.anchor_scales) * len(cfg.anchor_ratios)
        self.rpn_conv = Conv2d(w4, w4, 3, rng)
        self.rpn_cls = Conv2d(w4, 2 * a, 1, rng, pad=0)
        self.rpn_reg = Conv2d(w4, 4 * a, 1, rng, pad=0)
        self.rpn_reg.weight.data *= 0.1
        self.fc1 = Linear(w4 * 49, cfg.head_width, rng)
        self.fc2 = Linear(cfg.head_width, cfg.head_width, rng)
        self.cls_score = Linear(cfg.head_width, cfg.num_classes + 1, rng, scale=0.01)
        self.bbox_pred = Linear(cfg.head_width, 4 * (cfg.num_classes + 1), rng, scale=0.001)
        self.skip_proj = Conv2d(w3, w4, 1, rng, pad=0, bias=False)
        self.expand = Conv2d(w4, cfg.fuse_width, 1, rng, pad=0)
        self.conv5 = _stage(cfg.fuse_width, w5, cfg.blocks[3], rng, False)
        self.deconv = Deconv2d(w5, cfg.deconv_width, rng)
        self.mask_mid = Conv2d(cfg.deconv_width, cfg.mask_mid_width, 1, rng, pad=0)
        self.mask_out = Conv2d(cfg.mask_mid_width, 2, 1, rng, pad=0)
        self.mask_out.weight.data *= 0.1
        self._anchor_cache: dict = {}

    # -- input ----------------------------------------------------------------------
    def input_size(self, hw) -> tuple[int, int]:
        """Network input size: shorter side at ``image_size``, both sides
        rounded to a multiple of the backbone stride."""
        h, w = hw
        s = self.config.image_size / min(h, w)
        def snap(v):
            return max(BACKBONE_STRIDE, int(np.floor(v * s / BACKBONE_STRIDE + 0.5)) * BACKBONE_STRIDE)

        return snap(h), snap(w)

    def preprocess(self, image: np.ndarray) -> tuple[Tensor, np.ndarray]:
        """uint8 (H, W, 3) -> normalised [1, 3, H', W'] tensor and the (sx, sy)
        factors mapping original to network coordinates."""
        h, w = image.shape[:2]
        oh, ow = self.input_size((h, w))
        img = image if (oh, ow) == (h, w) else resize_bilinear(image, (oh, ow))
        x = (np.asarray(img, np.float32) / 127.5 - 1.0).transpose(2, 0, 1)[None]
        dtype = self.constrained.weight.dtype
        return Tensor(np.ascontiguousarray(x, dtype=dtype)), np.array([ow / w, oh / h])

    # -- stage 0: feature extraction -----------------------------------------------------
    def lmfe_forward(self, image: Tensor) -> BackboneTaps:
        n, c, h, w = image.shape
        if h < BACKBONE_STRIDE or w < BACKBONE_STRIDE or h % BACKBONE_STRIDE or w % BACKBONE_STRIDE:
            raise G.GeometryError(
                f"image {h}x{w} must be a positive multiple of the backbone stride {BACKBONE_STRIDE}")
        r = self.constrained(image)
        x = T.relu(self.stem(r * self.config.residual_gain))
        x = T.max_pool2d(x, 2)
        for blk in self.conv2:
            x = blk(x)
        for blk in self.conv3:
            x = blk(x)
        c3 = x
        for blk in self.conv4:
            x = blk(x)
        return BackboneTaps(c3=c3, c4=x, att=self.cbam(x), residual=r)

    # -- stage 1: proposals ----------------------------------------------------------
    def anchors(self, feat_hw) -> G.AnchorGrid:
        key = tuple(feat_hw)
        if key not in self._anchor_cache:
            scales = [s * self.config.image_size for s in self.config.anchor_scales]
            self._anchor_cache[key] = G.make_anchors(key, BACKBONE_STRIDE, scales, self.config.anchor_ratios)
        return self._anchor_cache[key]

    def rpn_a_forward(self, att: Tensor, image_hw, training: bool = False) -> RpnOutput:
        cfg = self.config
        grid = self.anchors(att.shape[2:])
        h = T.relu(self.rpn_conv(att))
        logits = T.reshape(T.transpose(self.rpn_cls(h), (0, 2, 3, 1)), (-1, 2))
        deltas = T.reshape(T.transpose(self.rpn_reg(h), (0, 2, 3, 1)), (-1, 4))
        limit = cfg.proposals_train if training else cfg.proposals_test
        props, scores = self.propose(logits.data, deltas.data, grid, image_hw, limit)
        return RpnOutput(logits, deltas, props, scores, grid)

    def propose(self, logits: np.ndarray, deltas: np.ndarray, grid: G.AnchorGrid, image_hw, limit: int):
        """Score sort, decode, clip, drop tiny boxes, NMS, keep ``limit``."""
        cfg = self.config
        z = logits.astype(np.float64)
        fg = 1.0 / (1.0 + np.exp(z[:, 0] - z[:, 1]))
        order = np.argsort(-fg, kind="stable")[: cfg.rpn_pre_nms]
        boxes = G.clip_boxes(G.decode_deltas(deltas[order], grid.anchors[order]), image_hw)
        wh = boxes[:, 2:] - boxes[:, :2]
        ok = np.all(wh >= cfg.min_box, axis=1)
        boxes, sc = boxes[ok], fg[order][ok]
        keep = G.nms_indices(boxes, sc, cfg.rpn_nms, limit)
        return boxes[keep], sc[keep]

    def rpn_targets(self, grid: G.AnchorGrid, gt_boxes: np.ndarray, rng: np.random.Generator) -> RpnTargets:
        cfg = self.config
        anchors = grid.anchors
        labels = np.full(len(anchors), -1, np.int64)
        ov = G.iou_matrix(anchors, gt_boxes)
        best = ov.max(axis=1)
        arg = ov.argmax(axis=1)
        labels[best < cfg.rpn_bg_iou] = 0
        gt_best = ov.max(axis=0)
        labels[np.any((ov == gt_best[None]) & (gt_best[None] > 0), axis=1)] = 1
        labels[best >= cfg.rpn_fg_iou] = 1
        fg = np.nonzero(labels == 1)[0]
        max_fg = int(cfg.rpn_batch * cfg.rpn_fg_fraction)
        if len(fg) > max_fg:
            labels[rng.choice(fg, len(fg) - max_fg, replace=False)] = -1
        bg = np.nonzero(labels == 0)[0]
        max_bg = cfg.rpn_batch - int((labels == 1).sum())
        if len(bg) > max_bg:
            labels[rng.choice(bg, len(bg) - max_bg, replace=False)] = -1
        reg = G.encode_targets(anchors, gt_boxes[arg])
        return RpnTargets(labels, reg, int((labels >= 0).sum()), grid.locations, cfg.rpn_lambda)

    # -- stage 1: heads -------------------------------------------------------------------
    def stage1_heads(self, att: Tensor, rois: np.ndarray) -> tuple[Tensor, Tensor]:
        if len(rois) == 0:
            raise G.GeometryError("stage-1 heads need at least one RoI")
        pooled = G.roi_align(att, rois, BACKBONE_STRIDE, out=7)
        x = T.reshape(pooled, (len(rois), -1))
        x = T.relu(self.fc1(x))
        x = T.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x)

    def sample_rois(self, proposals: np.ndarray, scores: np.ndarray, gt_boxes: np.ndarray,
                    gt_classes: np.ndarray, rng: np.random.Generator):
        """Mix of foreground (IoU >= roi_fg_iou) and background RoIs with
        their labels, box targets and objectness (the ground-truth box
        itself is appended with objectness 0)."""
        cfg = self.config
        rois = np.concatenate([proposals, gt_boxes], axis=0)
        obj = np.concatenate([scores, np.zeros(len(gt_boxes))])
        ov = G.iou_matrix(rois, gt_boxes)
        best, arg = ov.max(axis=1), ov.argmax(axis=1)
        fg = np.nonzero(best >= cfg.roi_fg_iou)[0]
        bg = np.nonzero(best < cfg.roi_fg_iou)[0]
        n_fg = min(len(fg), int(round(cfg.roi_batch * cfg.roi_fg_fraction)))
        fg = np.sort(rng.choice(fg, n_fg, replace=False)) if n_fg < len(fg) else fg
        n_bg = min(len(bg), cfg.roi_batch - n_fg)
        bg = np.sort(rng.choice(bg, n_bg, replace=False)) if n_bg < len(bg) else bg
        keep = np.concatenate([fg, bg])
        labels = np.zeros(len(keep), np.int64)
        labels[: len(fg)] = gt_classes[arg[fg]] + 1
        targets = G.encode_targets(rois[keep], gt_boxes[arg[keep]], cfg.bbox_weights)
        return rois[keep], labels, targets, obj[keep], arg[keep]

    # -- stage 2 -----------------------------------------------------------------------
    def stage2_fuse(self, taps: BackboneTaps, skip: bool | None = None) -> Tensor:
        skip = self.config.skip_structure if skip is None else skip
        x = taps.att
        if skip:
            low = self.skip_proj(T.avg_pool2d(taps.c3, 2))
            if low.shape != x.shape:
                raise T.ShapeError(f"skip projection {low.shape} does not match attention map {x.shape}")
            x = x + low
        return self.expand(x)

    def stage2_mask(self, enhanced: Tensor, boxes: np.ndarray) -> Tensor:
        """Foreground/background probabilities [R, 2, 14, 14] for each box."""
        boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
        if len(boxes) == 0:
            return Tensor(np.zeros((0, 2, 14, 14), enhanced.dtype))
        x = G.roi_align(enhanced, boxes, BACKBONE_STRIDE, out=7)
        for blk in self.conv5:
            x = blk(x)
        x = T.relu(self.deconv(x))
        x = T.relu(self.mask_mid(x))
        return T.softmax(self.mask_out(x), axis=1)

    # -- losses ------------------------------------------------------------------------
    def rpn_loss(self, logits: Tensor, deltas: Tensor, targets: RpnTargets) -> tuple[Tensor, Tensor]:
        """Classification mean over the sampled anchors plus ``lam / n_reg``
        times the smooth-L1 sum over positive anchors."""
        sampled = np.nonzero(targets.labels >= 0)[0]
        if sampled.size == 0:
            raise ValueError("rpn_loss: no sampled anchors (all labels ignored)")
        cls = softmax_cross_entropy(logits[sampled], targets.labels[sampled])
        pos = np.nonzero(targets.labels == 1)[0]
        if pos.size:
            reg = smooth_l1(deltas[pos], targets.reg_targets[pos]) * (targets.lam / targets.n_reg)
        else:
            reg = Tensor(np.zeros((), logits.dtype))
        return cls, reg

    def compute_losses(self, image: np.ndarray, gt_mask: np.ndarray, gt_class: int,
                       rng: np.random.Generator, stage2: bool = True) -> LossBundle:
        """All loss components for one training image (original resolution)."""
        x, scale = self.preprocess(image)
        net_hw = x.shape[2:]
        gt_box = np.asarray(G.tight_bbox(gt_mask), np.float64) * np.tile(scale, 2)
        gt_boxes = gt_box[None]
        gt_classes = np.array([gt_class])
        taps = self.lmfe_forward(x)
        rpn = self.rpn_a_forward(taps.att, net_hw, training=True)
        targets = self.rpn_targets(rpn.anchors, gt_boxes, rng)
        rpn_cls, rpn_reg = self.rpn_loss(rpn.logits, rpn.deltas, targets)

        rois, labels, btargets, obj, _ = self.sample_rois(rpn.proposals, rpn.scores, gt_boxes, gt_classes, rng)
        cls_logits, box_deltas = self.stage1_heads(taps.att, rois)
        cls_pred = softmax_cross_entropy(cls_logits, labels)
        fg = np.nonzero(labels > 0)[0]
        if fg.size:
            per_class = T.reshape(box_deltas, (len(rois), self.config.num_classes + 1, 4))
            sel = per_class[fg, labels[fg]]
            bbox_pred = smooth_l1(sel, btargets[fg]) * (1.0 / len(rois))
        else:
            bbox_pred = Tensor(np.zeros((), cls_logits.dtype))

        mask_loss = Tensor(np.zeros((), cls_logits.dtype))
        n_mask = 0
        if stage2 and fg.size:
            order = fg[np.argsort(-obj[fg], kind="stable")][: self.config.stage2_train]
            boxes = rois[order]
            inv = np.tile(1.0 / scale, 2)
            gt_small = np.stack([G.crop_resize_mask(gt_mask, b * inv) for b in boxes])
            enhanced = self.stage2_fuse(taps)
            probs = self.stage2_mask(enhanced, boxes)
            mask_loss = mask_bce(probs, gt_small)
            n_mask = len(boxes)
        return LossBundle(rpn_cls, rpn_reg, cls_pred, bbox_pred, mask_loss,
                          extras={"n_fg_rois": int(fg.size), "n_mask": n_mask, "n_rpn": targets.n_cls})

    # -- inference ---------------------------------------------------------------------
    def detect(self, image: np.ndarray, score_thresh: float | None = None,
               max_detections: int | None = None) -> list[Detection]:
        """Detections (class, score, box, mask) in original image coordinates,
        sorted by descending score."""
        cfg = self.config
        thresh = cfg.det_score_thresh if score_thresh is None else score_thresh
        max_det = cfg.stage2_test if max_detections is None else max_detections
        h, w = image.shape[:2]
        with T.no_grad():
            x, scale = self.preprocess(image)
            net_hw = x.shape[2:]
            taps = self.lmfe_forward(x)
            rpn = self.rpn_a_forward(taps.att, net_hw, training=False)
            if len(rpn.proposals) == 0:
                return []
            logits, deltas = self.stage1_heads(taps.att, rpn.proposals)
            z = logits.data.astype(np.float64)
            probs = np.exp(z - z.max(axis=1, keepdims=True))
            probs /= probs.sum(axis=1, keepdims=True)
            d = deltas.data.astype(np.float64).reshape(len(rpn.proposals), -1, 4)
            cands = []
            for c in range(1, cfg.num_classes + 1):
                boxes = G.clip_boxes(G.decode_deltas(d[:, c], rpn.proposals, cfg.bbox_weights), net_hw)
                sc = probs[:, c]
                ok = (sc >= thresh) & np.all(boxes[:, 2:] - boxes[:, :2] >= cfg.min_box, axis=1)
                idx = np.nonzero(ok)[0]
                for k in G.nms_indices(boxes[idx], sc[idx], cfg.det_nms):
                    cands.append((float(sc[idx[k]]), c - 1, boxes[idx[k]]))
            cands.sort(key=lambda t: (-t[0], t[1]))
            cands = cands[:max_det]
            if not cands:
                return []
            boxes = np.stack([b for _, _, b in cands])
            masks = self.stage2_mask(self.stage2_fuse(taps), boxes).data[:, 1]
        inv = np.tile(1.0 / scale, 2)
        out = []
        for (score, cls, box), m in zip(cands, masks):
            ob = box * inv
            prob = G.paste_mask_soft(m, ob, (h, w))
            out.append(Detection(cls, score, G.BBox(*map(float, ob)), (prob >= 0.5).astype(np.uint8), prob))
        return out


def total_loss(bundle: LossBundle) -> Tensor:
    """Stage-1 sum plus the mask loss; raises on a non-finite component."""
    for name, value in bundle.components().items():
        if not np.isfinite(value):
            raise FloatingPointError(f"non-finite loss component {name}")
    return bundle.stage1 + bundle.mask


def score_map(detections: list[Detection], image_hw) -> np.ndarray:
    """Per-pixel tamper score: max over detections of score x soft mask."""
    out = np.zeros(image_hw)
    for d in detections:
        prob = d.prob if d.prob is not None else d.mask.astype(np.float64)
        np.maximum(out, d.score * prob, out=out)
    return out
