"""COCO-style box AP: mAP@[.50:.95], AP50, AP75 and small/medium/large mAP.

Protocol, per (class, IoU threshold, area bin):

* detections of each image are sorted by score and truncated to ``max_dets``;
* each detection greedily takes the unmatched gt with the highest IoU at or
  above the threshold, preferring in-bin gts (ties go to the lower gt index);
* detections matched to out-of-bin gts, and unmatched detections whose own
  area is out of bin, are ignored;
* precision is made non-increasing in recall and sampled at 101 recall points.

Classes with no in-bin ground truth are excluded from the mean; a metric
with nothing to average is reported as -1.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import boxes as B
from .errors import DataError

METRIC_NAMES = ("mAP", "AP50", "AP75", "mAP_s", "mAP_m", "mAP_l")


@dataclass(frozen=True)
class EvalConfig:
    iou_thresholds: tuple = tuple(np.round(np.linspace(0.5, 0.95, 10), 2))
    recall_samples: int = 101
    area_bins: dict = field(default_factory=lambda: {
        "all": (0.0, float("inf")),
        "small": (0.0, 32.0 ** 2),
        "medium": (32.0 ** 2, 96.0 ** 2),
        "large": (96.0 ** 2, float("inf")),
    })
    max_dets: int = 100

    def __post_init__(self):
        if any(b <= a for a, b in zip(self.iou_thresholds, self.iou_thresholds[1:])):
            raise ValueError("IoU thresholds must be strictly increasing")

    @property
    def recall_points(self) -> np.ndarray:
        return np.linspace(0.0, 1.0, self.recall_samples)


def in_bin(area, name: str, bins: dict) -> np.ndarray:
    """Bin membership; small is ``a < 32^2``, medium ``32^2 <= a <= 96^2``, large ``a > 96^2``."""
    lo, hi = bins[name]
    area = np.asarray(area, dtype=np.float64)
    if name == "all":
        return np.ones(area.shape, dtype=bool)
    if name == "small":
        return area < hi
    if name == "large":
        return area > lo
    return (area >= lo) & (area <= hi)


@dataclass
class ImageGT:
    image_id: int
    boxes: np.ndarray
    labels: np.ndarray


@dataclass
class ImageDets:
    image_id: int
    boxes: np.ndarray
    scores: np.ndarray
    labels: np.ndarray
    ids: np.ndarray | None = None


@dataclass
class PRCurve:
    scores: np.ndarray  # of non-ignored detections, descending
    tp: np.ndarray
    num_gt: int
    precision: np.ndarray = field(init=False)
    recall: np.ndarray = field(init=False)

    def __post_init__(self):
        tp = np.cumsum(self.tp, dtype=np.float64)
        fp = np.cumsum(~self.tp, dtype=np.float64)
        self.recall = tp / self.num_gt if self.num_gt else np.zeros_like(tp)
        self.precision = tp / np.maximum(tp + fp, np.spacing(1))

    def interpolated(self, recall_points: np.ndarray) -> np.ndarray:
        env = self.precision.copy()
        for i in range(env.size - 1, 0, -1):
            if env[i - 1] < env[i]:
                env[i - 1] = env[i]
        idx = np.searchsorted(self.recall, recall_points, side="left")
        out = np.zeros(recall_points.size)
        ok = idx < env.size
        out[ok] = env[idx[ok]]
        return out


def match_detections(det_boxes, gt_boxes, gt_ignore, iou_thresh: float):
    """Greedy matching of score-sorted detections.

    Returns ``(matched, matched_ignored)``: per detection, whether it matched a
    gt and whether that gt was an ignored (out-of-bin) one.
    """
    det_boxes = np.asarray(det_boxes, dtype=np.float64).reshape(-1, 4)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    gt_ignore = np.asarray(gt_ignore, dtype=bool)
    nd, ng = det_boxes.shape[0], gt_boxes.shape[0]
    matched = np.zeros(nd, dtype=bool)
    matched_ignored = np.zeros(nd, dtype=bool)
    if nd == 0 or ng == 0:
        return matched, matched_ignored
    ious = B.box_iou(det_boxes, gt_boxes)
    # in-bin gts first, original order otherwise
    order = np.argsort(gt_ignore, kind="stable")
    taken = np.zeros(ng, dtype=bool)
    for d in range(nd):
        best, m = iou_thresh, -1
        for g in order:
            if taken[g]:
                continue
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best or (m > -1 and ious[d, g] == best):
                continue
            best, m = ious[d, g], g
        if m == -1:
            continue
        taken[m] = True
        matched[d] = True
        matched_ignored[d] = gt_ignore[m]
    return matched, matched_ignored


def average_precision(curve: PRCurve, recall_points: np.ndarray | None = None) -> float:
    if recall_points is None:
        recall_points = np.linspace(0.0, 1.0, 101)
    return float(curve.interpolated(recall_points).mean())


def _group(items, key):
    out: dict = {}
    for it in items:
        out.setdefault(key(it), []).append(it)
    return out


def evaluate(dets: Sequence[ImageDets], gts: Sequence[ImageGT], cfg: EvalConfig | None = None,
             num_classes: int | None = None) -> np.ndarray:
    """AP table of shape [thresholds, classes, area bins]; -1 where a class has no in-bin gt."""
    cfg = cfg or EvalConfig()
    gt_by_img = {g.image_id: g for g in gts}
    if len(gt_by_img) != len(gts):
        raise DataError("duplicate image ids in ground truth")
    det_by_img: dict = {}
    seen_ids = set()
    for d in dets:
        if d.image_id not in gt_by_img:
            raise DataError(f"detections reference unknown image id {d.image_id}")
        if d.image_id in det_by_img:
            raise DataError(f"duplicate detection sets for image id {d.image_id}")
        if d.ids is not None:
            for i in np.asarray(d.ids).tolist():
                if i in seen_ids:
                    raise DataError(f"duplicate detection id {i}")
                seen_ids.add(i)
        det_by_img[d.image_id] = d
    if num_classes is None:
        labels = [np.asarray(g.labels) for g in gts] + [np.asarray(d.labels) for d in dets]
        num_classes = int(max((int(l.max()) for l in labels if l.size), default=-1)) + 1
    bins = list(cfg.area_bins)
    rp = cfg.recall_points
    table = -np.ones((len(cfg.iou_thresholds), num_classes, len(bins)))
    image_ids = sorted(gt_by_img)
    for k in range(num_classes):
        for a, bin_name in enumerate(bins):
            per_t_scores = [[] for _ in cfg.iou_thresholds]
            per_t_tp = [[] for _ in cfg.iou_thresholds]
            num_gt = 0
            for image_id in image_ids:
                g = gt_by_img[image_id]
                gsel = np.asarray(g.labels) == k
                gboxes = np.asarray(g.boxes, dtype=np.float64).reshape(-1, 4)[gsel]
                gign = ~in_bin(B.areas(gboxes), bin_name, cfg.area_bins)
                num_gt += int((~gign).sum())
                d = det_by_img.get(image_id)
                if d is None:
                    continue
                dsel = np.flatnonzero(np.asarray(d.labels) == k)
                order = dsel[np.argsort(-np.asarray(d.scores)[dsel], kind="stable")][: cfg.max_dets]
                dboxes = np.asarray(d.boxes, dtype=np.float64).reshape(-1, 4)[order]
                dscores = np.asarray(d.scores, dtype=np.float64)[order]
                d_out = ~in_bin(B.areas(dboxes), bin_name, cfg.area_bins)
                for t, thr in enumerate(cfg.iou_thresholds):
                    matched, m_ign = match_detections(dboxes, gboxes, gign, thr)
                    ignore = m_ign | (~matched & d_out)
                    per_t_scores[t].append(dscores[~ignore])
                    per_t_tp[t].append(matched[~ignore])
            if num_gt == 0:
                continue
            for t in range(len(cfg.iou_thresholds)):
                scores = np.concatenate(per_t_scores[t]) if per_t_scores[t] else np.zeros(0)
                tp = np.concatenate(per_t_tp[t]) if per_t_tp[t] else np.zeros(0, dtype=bool)
                o = np.argsort(-scores, kind="mergesort")
                table[t, k, a] = average_precision(PRCurve(scores[o], tp[o], num_gt), rp)
    return table


def _mean_valid(values: np.ndarray) -> float:
    v = values[values > -1]
    return float(v.mean()) if v.size else -1.0


def summarize(dets: Sequence[ImageDets], gts: Sequence[ImageGT], cfg: EvalConfig | None = None,
              num_classes: int | None = None) -> dict:
    cfg = cfg or EvalConfig()
    table = evaluate(dets, gts, cfg, num_classes)
    bins = list(cfg.area_bins)
    thr = list(cfg.iou_thresholds)
    a_all = bins.index("all")
    return {
        "mAP": _mean_valid(table[:, :, a_all]),
        "AP50": _mean_valid(table[thr.index(0.5), :, a_all]),
        "AP75": _mean_valid(table[thr.index(0.75), :, a_all]),
        "mAP_s": _mean_valid(table[:, :, bins.index("small")]),
        "mAP_m": _mean_valid(table[:, :, bins.index("medium")]),
        "mAP_l": _mean_valid(table[:, :, bins.index("large")]),
    }


# ---------------------------------------------------------------------------
# file formats
# ---------------------------------------------------------------------------

def write_detections_text(path, dets: Sequence[ImageDets]) -> None:
    """One ``image_id label score x1 y1 x2 y2`` line per detection."""
    lines = []
    for d in dets:
        for box, score, label in zip(np.asarray(d.boxes).reshape(-1, 4), d.scores, d.labels):
            lines.append(f"{d.image_id} {int(label)} {float(score)!r} "
                         + " ".join(repr(float(v)) for v in box))
    Path(path).write_text("".join(line + "\n" for line in lines), encoding="utf-8")


def read_detections_text(path) -> list:
    per: dict = {}
    for n, line in enumerate(Path(path).read_text(encoding="utf-8").splitlines()):
        if not line.strip():
            continue
        parts = line.split()
        if len(parts) != 7:
            raise DataError(f"{path}:{n + 1}: expected 7 fields, got {len(parts)}")
        image_id, label = int(parts[0]), int(parts[1])
        score, *box = (float(p) for p in parts[2:])
        per.setdefault(image_id, []).append((label, score, box))
    return [ImageDets(i, np.array([b for _, _, b in v]).reshape(-1, 4), np.array([s for _, s, _ in v]),
                      np.array([l for l, _, _ in v], dtype=np.int64)) for i, v in sorted(per.items())]


def write_detections_json(path, dets: Sequence[ImageDets], category_ids: Sequence[int]) -> None:
    """COCO result list: ``{"image_id", "category_id", "bbox": [x, y, w, h], "score"}``."""
    out = []
    for d in dets:
        for box, score, label in zip(np.asarray(d.boxes).reshape(-1, 4), d.scores, d.labels):
            x1, y1, x2, y2 = (float(v) for v in box)
            out.append({"image_id": d.image_id, "category_id": int(category_ids[int(label)]),
                        "bbox": [x1, y1, x2 - x1, y2 - y1], "score": float(score)})
    Path(path).write_text(json.dumps(out, indent=1) + "\n", encoding="utf-8")


def read_detections_json(path, category_ids: Sequence[int]) -> list:
    label_of = {int(c): i for i, c in enumerate(category_ids)}
    try:
        records = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read detections {path}: {exc}") from exc
    per: dict = {}
    for n, r in enumerate(records):
        try:
            x, y, w, h = r["bbox"]
            per.setdefault(r["image_id"], []).append(
                (label_of[int(r["category_id"])], float(r["score"]), [x, y, x + w, y + h], r.get("id")))
        except (KeyError, TypeError, ValueError) as exc:
            raise DataError(f"{path}: malformed detection record {n} ({exc})") from exc
    out = []
    for i, v in sorted(per.items()):
        ids = [e[3] for e in v]
        out.append(ImageDets(i, np.array([e[2] for e in v], dtype=np.float64).reshape(-1, 4),
                             np.array([e[1] for e in v]), np.array([e[0] for e in v], dtype=np.int64),
                             None if all(x is None for x in ids) else np.array(ids)))
    return out


def format_report(metrics: dict) -> str:
    return "".join(f"{name} {metrics[name]:.6f}\n" for name in METRIC_NAMES)


def write_report(stem, metrics: dict) -> None:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    stem.with_suffix(".txt").write_text(format_report(metrics), encoding="utf-8")
    stem.with_suffix(".json").write_text(json.dumps(metrics, indent=1, sort_keys=True) + "\n",
                                         encoding="utf-8")
