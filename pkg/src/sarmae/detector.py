"""ViTDet-style detector: plain ViT backbone, Simple FPN, anchor RPN and a two-FC RoI head."""
from __future__ import annotations

from collections import OrderedDict
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from . import boxes as B
from . import tensor as T
from .checkpoint import Checkpoint
from .errors import CheckpointError, ShapeError
from .nn import Conv2d, ConvTranspose2d, Linear, Module, init_default
from .tensor import Tensor
from .vit import ViTConfig, ViTEncoder

BACKBONE_SCOPE = "backbone."


@dataclass(frozen=True)
class DetectorConfig:
    backbone: ViTConfig = field(default_factory=ViTConfig)
    num_classes: int = 6
    # intermediate widths of the 1/4, 1/8, 1/16, 1/32 branches
    fpn_branch_channels: tuple = (192, 384, 768, 768)
    fpn_channels: int = 256
    strides: tuple = (4, 8, 16, 32, 64)
    anchor_ratios: tuple = (0.5, 1.0, 2.0)
    anchor_scale: float = 8.0
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_batch_per_image: int = 256
    rpn_pos_fraction: float = 0.5
    rpn_pre_nms_topk: int = 1000
    rpn_post_nms_topk_train: int = 1000
    rpn_post_nms_topk_test: int = 300
    rpn_nms: float = 0.7
    rpn_min_size: float = 1.0
    rpn_smooth_l1_beta: float = 1.0 / 9.0
    roi_batch_per_image: int = 512
    roi_pos_fraction: float = 0.25
    roi_fg_iou: float = 0.5
    roi_output: int = 7
    roi_sampling: int = 2
    roi_canonical_size: float = 224.0
    roi_canonical_level: int = 4
    roi_box_weights: tuple = (10.0, 10.0, 5.0, 5.0)
    roi_smooth_l1_beta: float = 1.0
    fc_dim: int = 1024
    add_gt_proposals: bool = True
    score_thresh: float = 0.05
    test_nms: float = 0.5
    max_dets: int = 100

    def __post_init__(self):
        if self.backbone.patch != 16:
            raise ShapeError(f"the Simple FPN expects a stride-16 backbone, got patch {self.backbone.patch}")
        if self.fpn_branch_channels[2] != self.backbone.dim:
            raise ShapeError(f"the identity (1/16) branch width {self.fpn_branch_channels[2]} must equal "
                             f"the backbone dim {self.backbone.dim}")
        if len(self.strides) != 5:
            raise ShapeError("the pyramid has exactly five levels")

    @property
    def num_anchors(self) -> int:
        return len(self.anchor_ratios)

    def to_dict(self) -> dict:
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "DetectorConfig":
        d = dict(d)
        d["backbone"] = ViTConfig(**d["backbone"])
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        return cls(**d)


@dataclass
class DetectionSet:
    image_id: int
    image_size: tuple
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray

    def __len__(self) -> int:
        return int(self.boxes.shape[0])


class SimpleFPN(Module):
    """Five pyramid levels (strides 4..64) from a single stride-16 map.

    1/32: 2x2 stride-2 conv; 1/16: identity; 1/8: one 2x deconv; 1/4: two
    chained 2x deconvs. Each branch ends with a 1x1 conv to ``out`` channels
    and a 3x3 conv; the stride-64 level subsamples the stride-32 one.
    """

    def __init__(self, dim: int, branch: tuple, out: int):
        w4, w8, w16, w32 = branch
        self.up4_a = ConvTranspose2d(dim, w8)
        self.up4_b = ConvTranspose2d(w8, w4)
        self.up8 = ConvTranspose2d(dim, w8)
        self.down32 = Conv2d(dim, w32, 2, stride=2)
        self.lateral = [Conv2d(w, out, 1) for w in branch]
        self.output = [Conv2d(out, out, 3, padding=1) for _ in branch]

    def forward(self, x) -> list:
        H, W = x.shape[1:]
        x_even = T.pad2d(x, (0, H % 2, 0, W % 2)) if (H % 2 or W % 2) else x
        feats = [
            self.up4_b(T.gelu(self.up4_a(x))),
            self.up8(x),
            x,
            self.down32(x_even),
        ]
        levels = [out(lat(f)) for f, lat, out in zip(feats, self.lateral, self.output)]
        levels.append(T.maxpool2d(levels[-1], kernel=1, stride=2))
        return levels


class RPNHead(Module):
    """Shared 3x3 conv plus sibling 1x1 objectness and delta convs, applied per level."""

    def __init__(self, channels: int, num_anchors: int):
        self.conv = Conv2d(channels, channels, 3, padding=1)
        self.objectness = Conv2d(channels, num_anchors, 1)
        self.deltas = Conv2d(channels, 4 * num_anchors, 1)
        self._A = num_anchors

    def forward(self, level):
        """Return objectness [Hs*Ws*A] and deltas [Hs*Ws*A, 4] in (row, col, anchor) order."""
        h = T.relu(self.conv(level))
        _, Hs, Ws = level.shape
        obj = self.objectness(h).transpose(1, 2, 0).reshape(-1)
        deltas = self.deltas(h).reshape(self._A, 4, Hs, Ws).transpose(2, 3, 0, 1).reshape(-1, 4)
        return obj, deltas


class RoIHead(Module):
    def __init__(self, in_features: int, fc_dim: int, num_classes: int):
        self.fc1 = Linear(in_features, fc_dim)
        self.fc2 = Linear(fc_dim, fc_dim)
        self.cls_score = Linear(fc_dim, num_classes + 1)
        self.bbox_pred = Linear(fc_dim, 4 * num_classes)

    def forward(self, roi_feats):
        x = roi_feats.reshape(roi_feats.shape[0], -1)
        x = T.relu(self.fc1(x))
        x = T.relu(self.fc2(x))
        return self.cls_score(x), self.bbox_pred(x)


def simple_fpn(backbone_map, fpn: SimpleFPN) -> list:
    return fpn(backbone_map)


def rpn_forward(pyramid, head: RPNHead) -> list:
    return [head(level) for level in pyramid]


def roi_head_forward(roi_feats, head: RoIHead):
    return head(roi_feats)


def assign_levels(boxes, canonical_size: float = 224.0, canonical_level: int = 4,
                  min_level: int = 2, max_level: int = 6) -> np.ndarray:
    """Pyramid level ``floor(k0 + log2(sqrt(w*h) / size))`` clamped to [min, max]."""
    scale = np.sqrt(B.areas(boxes))
    k = np.floor(canonical_level + np.log2(scale / canonical_size + 1e-8))
    return np.clip(k, min_level, max_level).astype(np.int64)


def pool_rois(pyramid, strides, rois, cfg: DetectorConfig) -> Tensor:
    """Multi-level RoIAlign; returns [R, C, out, out] in the order of ``rois``."""
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    if rois.shape[0] == 0:
        C = pyramid[0].shape[0]
        return T.Tensor(np.zeros((0, C, cfg.roi_output, cfg.roi_output), dtype=pyramid[0].dtype))
    levels = assign_levels(rois, cfg.roi_canonical_size, cfg.roi_canonical_level)
    pieces, order = [], []
    for li, (feat, stride) in enumerate(zip(pyramid, strides)):
        sel = np.flatnonzero(levels == li + 2)
        if sel.size == 0:
            continue
        pieces.append(T.roi_align(feat, rois[sel], 1.0 / stride, cfg.roi_output, cfg.roi_sampling))
        order.append(sel)
    order = np.concatenate(order)
    pooled = T.concat(pieces, axis=0) if len(pieces) > 1 else pieces[0]
    inverse = np.empty_like(order)
    inverse[order] = np.arange(order.size)
    if np.array_equal(order, np.arange(order.size)):
        return pooled
    return T.gather(pooled, inverse, axis=0)


def select_proposals(rpn_out, anchors, image_size, pre_nms_topk: int = 1000,
                     post_nms_topk: int = 1000, nms_thresh: float = 0.7, min_size: float = 1.0):
    """Top-k per level, decode, clip, drop boxes with a side below ``min_size``,
    merge levels, NMS, keep the best ``post_nms_topk``. Returns (boxes, logits)."""
    all_boxes, all_scores = [], []
    for (obj, deltas), anc in zip(rpn_out, anchors):
        obj = np.asarray(obj.data if isinstance(obj, Tensor) else obj, dtype=np.float64)
        deltas = np.asarray(deltas.data if isinstance(deltas, Tensor) else deltas, dtype=np.float64)
        k = min(pre_nms_topk, obj.size)
        top = np.argsort(-obj, kind="stable")[:k]
        boxes = B.decode_deltas(anc[top], deltas[top], image_size=image_size,
                                max_log_scale=B.DELTA_CLAMP)
        keep = ((boxes[:, 2] - boxes[:, 0]) >= min_size) & ((boxes[:, 3] - boxes[:, 1]) >= min_size)
        all_boxes.append(boxes[keep])
        all_scores.append(obj[top][keep])
    boxes = np.concatenate(all_boxes) if all_boxes else np.zeros((0, 4))
    scores = np.concatenate(all_scores) if all_scores else np.zeros(0)
    keep = B.nms(boxes, scores, nms_thresh)[:post_nms_topk]
    return boxes[keep], scores[keep]


class Detector(Module):
    def __init__(self, cfg: DetectorConfig, seed=None):
        self._cfg = cfg
        self.backbone = ViTEncoder(cfg.backbone)
        self.fpn = SimpleFPN(cfg.backbone.dim, tuple(cfg.fpn_branch_channels), cfg.fpn_channels)
        self.rpn = RPNHead(cfg.fpn_channels, cfg.num_anchors)
        self.roi_head = RoIHead(cfg.fpn_channels * cfg.roi_output ** 2, cfg.fc_dim, cfg.num_classes)
        self._anchor_cache: dict = {}
        if seed is not None:
            init_detector(self, seed)

    @property
    def config(self) -> DetectorConfig:
        return self._cfg

    def features(self, image) -> list:
        return self.fpn(self.backbone.forward_map(image))

    def anchors(self, pyramid) -> list:
        shapes = tuple(tuple(level.shape[1:]) for level in pyramid)
        if shapes not in self._anchor_cache:
            self._anchor_cache[shapes] = B.generate_anchors(
                shapes, self._cfg.strides, self._cfg.anchor_ratios, self._cfg.anchor_scale)
        return self._anchor_cache[shapes]

    def losses(self, image, gt_boxes, gt_labels, rng: np.random.Generator) -> dict:
        """Training losses for one image; see :func:`detection_losses`."""
        cfg = self._cfg
        image = T.as_tensor(image)
        image_size = tuple(image.shape[1:])
        pyramid = self.features(image)
        rpn_out = rpn_forward(pyramid, self.rpn)
        anchors = self.anchors(pyramid)
        with T.no_grad():
            proposals, _ = select_proposals(rpn_out, anchors, image_size, cfg.rpn_pre_nms_topk,
                                            cfg.rpn_post_nms_topk_train, cfg.rpn_nms, cfg.rpn_min_size)
        gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
        gt_labels = np.asarray(gt_labels, dtype=np.int64).reshape(-1)
        if cfg.add_gt_proposals and gt_boxes.shape[0]:
            proposals = np.concatenate([proposals, gt_boxes])
        rois, roi_labels, roi_targets = sample_rois(proposals, gt_boxes, gt_labels, cfg, rng)
        feats = pool_rois(pyramid, cfg.strides, rois, cfg)
        cls_logits, box_deltas = self.roi_head(feats)
        return detection_losses(rpn_out, np.concatenate(anchors), gt_boxes, (cls_logits, box_deltas),
                                roi_labels, roi_targets, cfg, rng)

    def detect(self, image, image_id: int = 0, score_thresh: Optional[float] = None,
               nms_thresh: Optional[float] = None, max_dets: Optional[int] = None) -> DetectionSet:
        cfg = self._cfg
        score_thresh = cfg.score_thresh if score_thresh is None else score_thresh
        nms_thresh = cfg.test_nms if nms_thresh is None else nms_thresh
        max_dets = cfg.max_dets if max_dets is None else max_dets
        image = T.as_tensor(image)
        image_size = tuple(image.shape[1:])
        with T.no_grad():
            pyramid = self.features(image)
            rpn_out = rpn_forward(pyramid, self.rpn)
            proposals, _ = select_proposals(rpn_out, self.anchors(pyramid), image_size,
                                            cfg.rpn_pre_nms_topk, cfg.rpn_post_nms_topk_test,
                                            cfg.rpn_nms, cfg.rpn_min_size)
            if proposals.shape[0] == 0:
                return _empty_detections(image_id, image_size)
            cls_logits, box_deltas = self.roi_head(pool_rois(pyramid, cfg.strides, proposals, cfg))
        probs = T.softmax(cls_logits, axis=-1).data.astype(np.float64)
        deltas = box_deltas.data.astype(np.float64).reshape(-1, cfg.num_classes, 4)
        K, R = cfg.num_classes, proposals.shape[0]
        decoded = B.decode_deltas(np.repeat(proposals, K, axis=0), deltas.reshape(-1, 4),
                                  cfg.roi_box_weights, image_size,
                                  B.DELTA_CLAMP).reshape(R, K, 4)
        scores = probs[:, 1:]
        r_idx, c_idx = np.nonzero(scores > score_thresh)
        boxes = decoded[r_idx, c_idx]
        sc = scores[r_idx, c_idx]
        valid = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
        boxes, sc, labels = boxes[valid], sc[valid], c_idx[valid]
        keep = B.batched_nms(boxes, sc, labels, nms_thresh)[:max_dets]
        return DetectionSet(image_id, image_size, boxes[keep], sc[keep], labels[keep].astype(np.int64))

    def to_checkpoint(self, step: int = 0, rng_state=None, provenance=None) -> Checkpoint:
        return Checkpoint("detector", {"detector": self._cfg.to_dict()}, OrderedDict(
            (n, p.data.astype(np.float32)) for n, p in self.named_parameters()), step, rng_state,
            provenance)

    @classmethod
    def from_checkpoint(cls, ckpt: Checkpoint) -> "Detector":
        if ckpt.kind != "detector":
            raise CheckpointError(f"expected a detector checkpoint, got kind {ckpt.kind!r}")
        model = cls(DetectorConfig.from_dict(ckpt.config["detector"]))
        model.load_state_dict(ckpt.tensors, strict=True)
        return model

    def load_encoder(self, ckpt: Checkpoint) -> None:
        """Copy ``encoder.*`` tensors into ``backbone.*``; raises listing unmatched names."""
        if ckpt.kind not in ("encoder", "mae"):
            raise CheckpointError(f"expected an encoder checkpoint, got kind {ckpt.kind!r}")
        state = {BACKBONE_SCOPE + n[len("encoder."):]: a for n, a in ckpt.tensors.items()
                 if n.startswith("encoder.")}
        unmatched = []
        for name, p in self.backbone.named_parameters(BACKBONE_SCOPE):
            arr = state.pop(name, None)
            if arr is None:
                unmatched.append(f"{name} (missing)")
            elif tuple(arr.shape) != p.shape:
                unmatched.append(f"{name} (shape {tuple(arr.shape)} vs {p.shape})")
        unmatched += [f"{n} (unexpected)" for n in state]
        if unmatched:
            raise CheckpointError("unmatched backbone tensors: " + ", ".join(unmatched))
        params = dict(self.backbone.named_parameters(BACKBONE_SCOPE))
        for name, arr in ckpt.tensors.items():
            if name.startswith("encoder."):
                p = params[BACKBONE_SCOPE + name[len("encoder."):]]
                p.data = np.array(arr, dtype=p.dtype)


def _empty_detections(image_id, image_size) -> DetectionSet:
    return DetectionSet(image_id, image_size, np.zeros((0, 4)), np.zeros(0), np.zeros(0, dtype=np.int64))


def sample_rois(proposals, gt_boxes, gt_labels, cfg: DetectorConfig, rng: np.random.Generator):
    """Pick RoIs for the head: foreground at IoU >= fg threshold (label = class + 1),
    background otherwise (label 0). Returns (rois, labels, regression targets for fg rows)."""
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    n = proposals.shape[0]
    if gt_boxes.shape[0]:
        ious = B.box_iou(proposals, gt_boxes)
        matched = ious.argmax(axis=1)
        best = ious[np.arange(n), matched]
        fg = best >= cfg.roi_fg_iou
    else:
        matched = np.zeros(n, dtype=np.int64)
        fg = np.zeros(n, dtype=bool)
    flags = np.where(fg, B.POSITIVE, B.NEGATIVE)
    pos, neg = B.sample_labels(flags, cfg.roi_batch_per_image, cfg.roi_pos_fraction, rng)
    idx = np.concatenate([pos, neg])
    rois = proposals[idx]
    labels = np.zeros(idx.size, dtype=np.int64)
    targets = np.zeros((idx.size, 4))
    if pos.size:
        labels[: pos.size] = gt_labels[matched[pos]] + 1
        targets[: pos.size] = B.encode_deltas(proposals[pos], gt_boxes[matched[pos]], cfg.roi_box_weights)
    return rois, labels, targets


def detection_losses(rpn_out, anchors, gt_boxes, roi_out, roi_labels, roi_targets,
                     cfg: DetectorConfig, rng: np.random.Generator) -> dict:
    """RPN and RoI-head losses for one image.

    * ``rpn_cls``: binary cross-entropy averaged over the sampled anchors.
    * ``rpn_reg``: smooth-L1 (beta ``rpn_smooth_l1_beta``) summed over positive
      anchors, divided by the number of sampled anchors.
    * ``roi_cls``: (K+1)-way cross-entropy averaged over the sampled RoIs.
    * ``roi_reg``: smooth-L1 (beta ``roi_smooth_l1_beta``) of the matched-class
      deltas summed over foreground RoIs, divided by the number of sampled RoIs.

    ``total`` is the unweighted sum.
    """
    obj = T.concat([o for o, _ in rpn_out], axis=0) if len(rpn_out) > 1 else rpn_out[0][0]
    deltas = T.concat([d for _, d in rpn_out], axis=0) if len(rpn_out) > 1 else rpn_out[0][1]
    labels, matched = B.assign_anchors(anchors, gt_boxes, cfg.rpn_pos_iou, cfg.rpn_neg_iou)
    pos, neg = B.sample_labels(labels, cfg.rpn_batch_per_image, cfg.rpn_pos_fraction, rng)
    sampled = np.concatenate([pos, neg])
    target = np.concatenate([np.ones(pos.size), np.zeros(neg.size)])
    zero = T.Tensor(0.0)
    rpn_cls = T.bce_with_logits(T.gather(obj, sampled), target) if sampled.size else zero
    if pos.size:
        t = B.encode_deltas(anchors[pos], gt_boxes[matched[pos]])
        rpn_reg = T.smooth_l1(T.gather(deltas, pos) - t, cfg.rpn_smooth_l1_beta).sum() * (1.0 / sampled.size)
    else:
        rpn_reg = zero

    cls_logits, box_deltas = roi_out
    R = cls_logits.shape[0]
    roi_cls = T.cross_entropy(cls_logits, roi_labels) if R else zero
    fg = np.flatnonzero(roi_labels > 0)
    if fg.size:
        cols = (roi_labels[fg, None] - 1) * 4 + np.arange(4)[None, :]
        pred = T.getitem(box_deltas, (fg[:, None], cols))
        roi_reg = T.smooth_l1(pred - roi_targets[fg], cfg.roi_smooth_l1_beta).sum() * (1.0 / R)
    else:
        roi_reg = zero
    total = rpn_cls + rpn_reg + roi_cls + roi_reg
    return {"rpn_cls": rpn_cls, "rpn_reg": rpn_reg, "roi_cls": roi_cls, "roi_reg": roi_reg, "total": total}


def _uniform_fill(rng, shape, fan_in, dtype):
    bound = np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(dtype)


def init_detector(model: Detector, seed) -> None:
    """ViT-style init for the backbone; fan-in uniform for FPN convs and FC layers,
    small normals for the prediction layers."""
    rng = np.random.default_rng(seed)
    init_default(model.backbone, rng)
    for name, p in model.named_parameters():
        if name.startswith(BACKBONE_SCOPE):
            continue
        if name.endswith("bias"):
            p.data = np.zeros(p.shape, dtype=p.dtype)
        elif name.startswith("fpn.") and "up" in name.split(".")[1]:
            p.data = _uniform_fill(rng, p.shape, p.shape[0], p.dtype)
        elif name.startswith("fpn."):
            p.data = _uniform_fill(rng, p.shape, int(np.prod(p.shape[1:])), p.dtype)
        elif name.startswith("rpn."):
            p.data = (rng.standard_normal(p.shape) * 0.01).astype(p.dtype)
        elif name.startswith("roi_head.fc"):
            p.data = _uniform_fill(rng, p.shape, p.shape[0], p.dtype)
        elif name.startswith("roi_head.cls_score"):
            p.data = (rng.standard_normal(p.shape) * 0.01).astype(p.dtype)
        else:
            p.data = (rng.standard_normal(p.shape) * 0.001).astype(p.dtype)


def detect(image, model: Detector, score_thresh: float = 0.05, nms: float = 0.5,
           max_dets: int = 100, image_id: int = 0) -> DetectionSet:
    return model.detect(image, image_id, score_thresh, nms, max_dets)
