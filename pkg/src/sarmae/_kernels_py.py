"""Pure numpy/scipy implementations of the hot kernels.

Used when the compiled ``_kernels`` extension is unavailable, and as the
reference the compiled versions are tested against.
"""
import numpy as np
from scipy import sparse


def box_iou(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.clip(iw, 0, None) * np.clip(ih, 0, None)
    union = area_a[:, None] + area_b[None, :] - inter
    with np.errstate(invalid="ignore", divide="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    return iou


def nms(boxes, scores, thresh):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = boxes.T
    areas = (x2 - x1) * (y2 - y1)
    keep = []
    while order.size:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        iw = np.clip(np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]), 0, None)
        ih = np.clip(np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]), 0, None)
        inter = iw * ih
        union = areas[i] + areas[rest] - inter
        with np.errstate(invalid="ignore", divide="ignore"):
            iou = np.where(union > 0, inter / union, 0.0)
        order = rest[iou < thresh]
    return np.asarray(keep, dtype=np.int64)


def _sampling_matrix(rois, scale, H, W, out_h, out_w, sampling, aligned):
    rois = np.asarray(rois, dtype=np.float64).reshape(-1, 4)
    R = rois.shape[0]
    off = 0.5 if aligned else 0.0
    x1 = rois[:, 0] * scale - off
    y1 = rois[:, 1] * scale - off
    rw = (rois[:, 2] - rois[:, 0]) * scale
    rh = (rois[:, 3] - rois[:, 1]) * scale
    if not aligned:
        rw = np.maximum(rw, 1.0)
        rh = np.maximum(rh, 1.0)
    bw, bh = rw / out_w, rh / out_h
    frac = (np.arange(sampling) + 0.5) / sampling
    # sample coordinates: [R, out, sampling]
    ys = y1[:, None, None] + (np.arange(out_h)[None, :, None] + frac[None, None, :]) * bh[:, None, None]
    xs = x1[:, None, None] + (np.arange(out_w)[None, :, None] + frac[None, None, :]) * bw[:, None, None]
    # broadcast to [R, oh, ow, s, s]
    Y = np.broadcast_to(ys[:, :, None, :, None], (R, out_h, out_w, sampling, sampling))
    X = np.broadcast_to(xs[:, None, :, None, :], (R, out_h, out_w, sampling, sampling))
    valid = ~((Y < -1.0) | (Y > H) | (X < -1.0) | (X > W))
    Y = np.maximum(Y, 0.0)
    X = np.maximum(X, 0.0)
    y0 = np.floor(Y).astype(np.int64)
    x0 = np.floor(X).astype(np.int64)
    ytop = y0 >= H - 1
    xtop = x0 >= W - 1
    y0 = np.where(ytop, H - 1, y0)
    x0 = np.where(xtop, W - 1, x0)
    y1i = np.where(ytop, H - 1, y0 + 1)
    x1i = np.where(xtop, W - 1, x0 + 1)
    ly = np.where(ytop, 0.0, Y - y0)
    lx = np.where(xtop, 0.0, X - x0)
    hy, hx = 1.0 - ly, 1.0 - lx
    norm = valid / float(sampling * sampling)
    rows = np.broadcast_to(np.arange(R * out_h * out_w).reshape(R, out_h, out_w, 1, 1), Y.shape)
    cols = np.stack([y0 * W + x0, y0 * W + x1i, y1i * W + x0, y1i * W + x1i]).reshape(4, -1)
    vals = np.stack([hy * hx, hy * lx, ly * hx, ly * lx]) * norm
    rows = np.broadcast_to(rows.reshape(1, -1), (4, rows.size))
    return sparse.csr_matrix((vals.reshape(-1), (rows.reshape(-1), cols.reshape(-1))),
                             shape=(R * out_h * out_w, H * W))


def roi_align_forward(feat, rois, scale, out_h, out_w, sampling, aligned=True):
    C, H, W = feat.shape
    R = np.asarray(rois).reshape(-1, 4).shape[0]
    S = _sampling_matrix(rois, scale, H, W, out_h, out_w, sampling, aligned)
    out = S @ feat.reshape(C, H * W).T.astype(np.float64)
    return out.reshape(R, out_h, out_w, C).transpose(0, 3, 1, 2).astype(feat.dtype)


def roi_align_backward(grad, rois, scale, H, W, sampling, aligned=True):
    R, C, out_h, out_w = grad.shape
    S = _sampling_matrix(rois, scale, H, W, out_h, out_w, sampling, aligned)
    g = grad.transpose(0, 2, 3, 1).reshape(R * out_h * out_w, C).astype(np.float64)
    return (S.T @ g).T.reshape(C, H, W).astype(grad.dtype)
