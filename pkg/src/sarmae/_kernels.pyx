# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box and RoIAlign kernels; same contracts as ``_kernels_py``."""
import numpy as np
cimport numpy as cnp
from libc.math cimport floor
from cython cimport floating

cnp.import_array()


def box_iou(a, b):
    cdef double[:, ::1] A = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] B = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = A.shape[0], m = B.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] O = out
    cdef double iw, ih, inter, union, area_a, area_b
    for i in range(n):
        area_a = (A[i, 2] - A[i, 0]) * (A[i, 3] - A[i, 1])
        for j in range(m):
            iw = min(A[i, 2], B[j, 2]) - max(A[i, 0], B[j, 0])
            ih = min(A[i, 3], B[j, 3]) - max(A[i, 1], B[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            area_b = (B[j, 2] - B[j, 0]) * (B[j, 3] - B[j, 1])
            union = area_a + area_b - inter
            if union > 0:
                O[i, j] = inter / union
    return out


def nms(boxes, scores, double thresh):
    cdef double[:, ::1] bx = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    sc = np.asarray(scores, dtype=np.float64).reshape(-1)
    cdef cnp.int64_t[::1] order = np.ascontiguousarray(np.argsort(-sc, kind="stable").astype(np.int64))
    cdef Py_ssize_t n = order.shape[0], a, b, i, j, nkeep = 0
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] K = keep
    cdef double iw, ih, inter, union, area_i, area_j
    for a in range(n):
        if dead[a]:
            continue
        i = order[a]
        K[nkeep] = i
        nkeep += 1
        area_i = (bx[i, 2] - bx[i, 0]) * (bx[i, 3] - bx[i, 1])
        for b in range(a + 1, n):
            if dead[b]:
                continue
            j = order[b]
            iw = min(bx[i, 2], bx[j, 2]) - max(bx[i, 0], bx[j, 0])
            ih = min(bx[i, 3], bx[j, 3]) - max(bx[i, 1], bx[j, 1])
            if iw <= 0 or ih <= 0:
                continue
            inter = iw * ih
            area_j = (bx[j, 2] - bx[j, 0]) * (bx[j, 3] - bx[j, 1])
            union = area_i + area_j - inter
            if union > 0 and inter / union >= thresh:
                dead[b] = 1
    return keep[:nkeep].copy()


cdef inline void _corners(double y, double x, Py_ssize_t H, Py_ssize_t W,
                          Py_ssize_t* idx, double* w) nogil:
    cdef Py_ssize_t y0, x0, y1, x1
    cdef double ly, lx
    if y < -1.0 or y > H or x < -1.0 or x > W:
        w[0] = 0; w[1] = 0; w[2] = 0; w[3] = 0
        idx[0] = 0; idx[1] = 0; idx[2] = 0; idx[3] = 0
        return
    if y < 0:
        y = 0
    if x < 0:
        x = 0
    y0 = <Py_ssize_t>floor(y)
    x0 = <Py_ssize_t>floor(x)
    if y0 >= H - 1:
        y0 = H - 1
        y1 = H - 1
        ly = 0
    else:
        y1 = y0 + 1
        ly = y - y0
    if x0 >= W - 1:
        x0 = W - 1
        x1 = W - 1
        lx = 0
    else:
        x1 = x0 + 1
        lx = x - x0
    idx[0] = y0 * W + x0
    idx[1] = y0 * W + x1
    idx[2] = y1 * W + x0
    idx[3] = y1 * W + x1
    w[0] = (1 - ly) * (1 - lx)
    w[1] = (1 - ly) * lx
    w[2] = ly * (1 - lx)
    w[3] = ly * lx


cdef void _roi_geom(double[:, ::1] R, Py_ssize_t r, double scale, bint aligned,
                    int out_h, int out_w, double* geom) nogil:
    cdef double off = 0.5 if aligned else 0.0
    cdef double rw = (R[r, 2] - R[r, 0]) * scale
    cdef double rh = (R[r, 3] - R[r, 1]) * scale
    if not aligned:
        if rw < 1.0:
            rw = 1.0
        if rh < 1.0:
            rh = 1.0
    geom[0] = R[r, 0] * scale - off
    geom[1] = R[r, 1] * scale - off
    geom[2] = rw / out_w
    geom[3] = rh / out_h


def _forward(floating[:, :, ::1] F, double[:, ::1] R, double scale, int out_h, int out_w,
             int sampling, bint aligned, Py_ssize_t H, Py_ssize_t W, floating[:, :, :, ::1] O):
    # channel-last: F is [H*W, 1, C] flattened spatially, O is [R, out_h, out_w, C]
    cdef Py_ssize_t C = F.shape[2]
    cdef Py_ssize_t r, c, ph, pw, iy, ix, k
    cdef Py_ssize_t idx[4]
    cdef double w[4]
    cdef double geom[4]
    cdef double y, x, norm = 1.0 / (sampling * sampling)
    cdef floating* dst
    cdef floating* src
    with nogil:
        for r in range(R.shape[0]):
            _roi_geom(R, r, scale, aligned, out_h, out_w, geom)
            for ph in range(out_h):
                for pw in range(out_w):
                    dst = &O[r, ph, pw, 0]
                    for iy in range(sampling):
                        y = geom[1] + ph * geom[3] + (iy + 0.5) * geom[3] / sampling
                        for ix in range(sampling):
                            x = geom[0] + pw * geom[2] + (ix + 0.5) * geom[2] / sampling
                            _corners(y, x, H, W, idx, w)
                            for k in range(4):
                                if w[k] == 0:
                                    continue
                                src = &F[idx[k], 0, 0]
                                for c in range(C):
                                    dst[c] += w[k] * norm * src[c]


def _backward(floating[:, :, :, ::1] G, double[:, ::1] R, double scale, int sampling,
              bint aligned, Py_ssize_t H, Py_ssize_t W, floating[:, :, ::1] GF):
    # channel-last: G is [R, out_h, out_w, C], GF is [H*W, 1, C]
    cdef Py_ssize_t C = GF.shape[2]
    cdef Py_ssize_t out_h = G.shape[1], out_w = G.shape[2]
    cdef Py_ssize_t r, c, ph, pw, iy, ix, k
    cdef Py_ssize_t idx[4]
    cdef double w[4]
    cdef double geom[4]
    cdef double y, x, norm = 1.0 / (sampling * sampling)
    cdef floating* dst
    cdef floating* src
    with nogil:
        for r in range(R.shape[0]):
            _roi_geom(R, r, scale, aligned, out_h, out_w, geom)
            for ph in range(out_h):
                for pw in range(out_w):
                    src = &G[r, ph, pw, 0]
                    for iy in range(sampling):
                        y = geom[1] + ph * geom[3] + (iy + 0.5) * geom[3] / sampling
                        for ix in range(sampling):
                            x = geom[0] + pw * geom[2] + (ix + 0.5) * geom[2] / sampling
                            _corners(y, x, H, W, idx, w)
                            for k in range(4):
                                if w[k] == 0:
                                    continue
                                dst = &GF[idx[k], 0, 0]
                                for c in range(C):
                                    dst[c] += w[k] * norm * src[c]


def roi_align_forward(feat, rois, double scale, int out_h, int out_w, int sampling, bint aligned=True):
    C, H, W = feat.shape
    F = np.ascontiguousarray(np.asarray(feat).reshape(C, H * W).T).reshape(H * W, 1, C)
    R = np.ascontiguousarray(np.asarray(rois, dtype=np.float64).reshape(-1, 4))
    out = np.zeros((R.shape[0], out_h, out_w, C), dtype=F.dtype)
    if R.shape[0]:
        _forward(F, R, scale, out_h, out_w, sampling, aligned, H, W, out)
    return np.ascontiguousarray(out.transpose(0, 3, 1, 2))


def roi_align_backward(grad, rois, double scale, int H, int W, int sampling, bint aligned=True):
    C = grad.shape[1]
    G = np.ascontiguousarray(np.asarray(grad).transpose(0, 2, 3, 1))
    R = np.ascontiguousarray(np.asarray(rois, dtype=np.float64).reshape(-1, 4))
    out = np.zeros((H * W, 1, C), dtype=G.dtype)
    if R.shape[0]:
        _backward(G, R, scale, sampling, aligned, H, W, out)
    return np.ascontiguousarray(out.reshape(H * W, C).T.reshape(C, H, W))
