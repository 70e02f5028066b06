"""Box geometry for the detector: IoU, delta coding, NMS, anchors, anchor assignment.

Boxes are ``(x1, y1, x2, y2)`` in image pixels. Array functions take [N,4]
float arrays.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from . import kernels
from .errors import ParameterError

# exp() clamp for decoded width/height deltas
DELTA_CLAMP = math.log(1000.0 / 16)

POSITIVE, NEGATIVE, IGNORE = 1, 0, -1


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float
    score: Optional[float] = None
    label: Optional[int] = None

    @property
    def width(self) -> float:
        return self.x2 - self.x1

    @property
    def height(self) -> float:
        return self.y2 - self.y1

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    def as_array(self) -> np.ndarray:
        return np.array([self.x1, self.y1, self.x2, self.y2], dtype=np.float64)


def iou(a: Box, b: Box) -> float:
    iw = min(a.x2, b.x2) - max(a.x1, b.x1)
    ih = min(a.y2, b.y2) - max(a.y1, b.y1)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union if union > 0 else 0.0


def box_iou(a, b) -> np.ndarray:
    """Pairwise IoU matrix [len(a), len(b)]."""
    return kernels.box_iou(a, b)


def areas(boxes) -> np.ndarray:
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])


def encode_deltas(anchors, gts, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0)) -> np.ndarray:
    """``(tx, ty, tw, th)`` of ``gts`` relative to ``anchors`` (Faster R-CNN parameterisation).

    ``weights`` multiply the four components.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    g = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    gw, gh = g[:, 2] - g[:, 0], g[:, 3] - g[:, 1]
    if np.any(aw <= 0) or np.any(ah <= 0) or np.any(gw <= 0) or np.any(gh <= 0):
        raise ParameterError("encode_deltas needs boxes with positive width and height")
    wx, wy, ww, wh = weights
    tx = wx * ((g[:, 0] + 0.5 * gw) - (a[:, 0] + 0.5 * aw)) / aw
    ty = wy * ((g[:, 1] + 0.5 * gh) - (a[:, 1] + 0.5 * ah)) / ah
    tw = ww * np.log(gw / aw)
    th = wh * np.log(gh / ah)
    return np.stack([tx, ty, tw, th], axis=1)


def decode_deltas(anchors, deltas, weights: Sequence[float] = (1.0, 1.0, 1.0, 1.0),
                  image_size: Optional[tuple] = None,
                  max_log_scale: Optional[float] = None) -> np.ndarray:
    """Inverse of :func:`encode_deltas`; clipped to ``image_size=(H, W)`` when given.

    ``max_log_scale`` caps the width/height deltas before ``exp``; predicted
    deltas pass :data:`DELTA_CLAMP` so an untrained head cannot overflow.
    """
    a = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    d = np.asarray(deltas, dtype=np.float64).reshape(-1, 4)
    if np.any(a[:, 2] <= a[:, 0]) or np.any(a[:, 3] <= a[:, 1]):
        raise ParameterError("decode_deltas needs anchors with positive width and height")
    aw, ah = a[:, 2] - a[:, 0], a[:, 3] - a[:, 1]
    acx, acy = a[:, 0] + 0.5 * aw, a[:, 1] + 0.5 * ah
    wx, wy, ww, wh = weights
    dx, dy = d[:, 0] / wx, d[:, 1] / wy
    dw, dh = d[:, 2] / ww, d[:, 3] / wh
    if max_log_scale is not None:
        dw, dh = np.minimum(dw, max_log_scale), np.minimum(dh, max_log_scale)
    cx, cy = acx + dx * aw, acy + dy * ah
    w, h = aw * np.exp(dw), ah * np.exp(dh)
    out = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=1)
    if image_size is not None:
        out = clip_boxes(out, image_size)
    return out


def clip_boxes(boxes, image_size) -> np.ndarray:
    H, W = image_size
    out = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    out[:, 0::2] = np.clip(out[:, 0::2], 0, W)
    out[:, 1::2] = np.clip(out[:, 1::2], 0, H)
    return out


def nms(boxes, scores, thresh: float) -> np.ndarray:
    """Greedy NMS; returns kept indices in descending-score order.

    A box is suppressed when its IoU with an already kept box is ``>= thresh``;
    equal scores keep the lower index first.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return kernels.nms(boxes, np.asarray(scores, dtype=np.float64), float(thresh))


def batched_nms(boxes, scores, labels, thresh: float) -> np.ndarray:
    """NMS applied independently per label; result sorted by descending score."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    # shift each label's boxes into a disjoint region so one NMS pass suffices
    span = boxes.max() - min(boxes.min(), 0) + 1.0
    shifted = boxes + (labels.astype(np.float64) * span)[:, None]
    return nms(shifted, scores, thresh)


def generate_anchors(level_shapes: Sequence[tuple], strides: Sequence[int],
                     ratios: Sequence[float] = (0.5, 1.0, 2.0), scale: float = 8.0) -> list:
    """Anchors per level, each [Hs*Ws*len(ratios), 4] in (row, col, ratio) order.

    The anchor side is ``scale * stride``; ratio ``r`` (height/width) gives
    dims ``(base / sqrt(r), base * sqrt(r))`` centred at ``(i + 0.5) * stride``.
    """
    if len(level_shapes) != len(strides):
        raise ParameterError("level_shapes and strides must have equal length")
    out = []
    r = np.asarray(ratios, dtype=np.float64)
    for (Hs, Ws), stride in zip(level_shapes, strides):
        base = scale * stride
        w, h = base / np.sqrt(r), base * np.sqrt(r)
        cell = np.stack([-0.5 * w, -0.5 * h, 0.5 * w, 0.5 * h], axis=1)  # [A,4]
        cy, cx = np.meshgrid((np.arange(Hs) + 0.5) * stride, (np.arange(Ws) + 0.5) * stride,
                             indexing="ij")
        centers = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
        out.append((centers + cell[None]).reshape(-1, 4))
    return out


def assign_anchors(anchors, gts, pos_thresh: float = 0.7, neg_thresh: float = 0.3):
    """Label anchors positive / negative / ignore against ground-truth boxes.

    Returns ``(labels, matched)`` where ``labels`` holds POSITIVE, NEGATIVE or
    IGNORE per anchor and ``matched`` the index of the assigned gt (-1 when
    there are no gts). An anchor is positive when its best IoU is at least
    ``pos_thresh`` or when it is the best anchor for some gt (lowest index on
    ties); negative when its best IoU is at most ``neg_thresh``.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    if gts.shape[0] == 0:
        return np.full(n, NEGATIVE, dtype=np.int64), np.full(n, -1, dtype=np.int64)
    ious = box_iou(anchors, gts)  # [n, g]
    matched = ious.argmax(axis=1)
    best = ious[np.arange(n), matched]
    labels = np.full(n, IGNORE, dtype=np.int64)
    labels[best <= neg_thresh] = NEGATIVE
    labels[best >= pos_thresh] = POSITIVE
    best_anchor = ious.argmax(axis=0)  # first max, i.e. lowest anchor index
    for g, a in enumerate(best_anchor):
        if ious[a, g] > 0:
            labels[a] = POSITIVE
    return labels, matched


def sample_labels(labels, num: int, pos_fraction: float, rng: np.random.Generator):
    """Subsample to at most ``num`` positives+negatives with at most ``pos_fraction`` positives.

    Returns (positive indices, negative indices); ignored entries are never picked.
    """
    pos = np.flatnonzero(labels == POSITIVE)
    neg = np.flatnonzero(labels == NEGATIVE)
    n_pos = min(pos.size, int(num * pos_fraction))
    n_neg = min(neg.size, num - n_pos)
    pos = np.sort(rng.permutation(pos)[:n_pos])
    neg = np.sort(rng.permutation(neg)[:n_neg])
    return pos, neg


def flip_boxes(boxes, width: float) -> np.ndarray:
    """Mirror boxes horizontally inside an image of the given width."""
    b = np.array(boxes, dtype=np.float64).reshape(-1, 4)
    return np.stack([width - b[:, 2], b[:, 1], width - b[:, 0], b[:, 3]], axis=1)
