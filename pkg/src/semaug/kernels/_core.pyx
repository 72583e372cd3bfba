# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled box kernels: pairwise IoU, greedy NMS and greedy TP/FP matching."""
import numpy as np

cimport numpy as cnp
from libc.math cimport fmax, fmin

cnp.import_array()


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t i,
                        const double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double iw = fmin(a[i, 2], b[j, 2]) - fmax(a[i, 0], b[j, 0])
    cdef double ih = fmin(a[i, 3], b[j, 3]) - fmax(a[i, 1], b[j, 1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    cdef double area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
    cdef double area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
    cdef double union = area_a + area_b - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def box_iou(const double[:, ::1] a, const double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] o = out
    with nogil:
        for i in range(n):
            for j in range(m):
                o[i, j] = _iou(a, i, b, j)
    return out


def nms(const double[:, ::1] boxes, const double[::1] scores, double iou_threshold):
    cdef Py_ssize_t n = boxes.shape[0], ii, jj, i, j
    cdef cnp.int64_t[::1] order = np.argsort(-np.asarray(scores), kind="stable").astype(np.int64)
    suppressed_arr = np.zeros(n, dtype=np.uint8)
    cdef cnp.uint8_t[::1] suppressed = suppressed_arr
    keep = np.empty(n, dtype=np.int64)
    cdef cnp.int64_t[::1] k = keep
    cdef Py_ssize_t nkeep = 0
    with nogil:
        for ii in range(n):
            i = order[ii]
            if suppressed[i]:
                continue
            k[nkeep] = i
            nkeep += 1
            for jj in range(ii + 1, n):
                j = order[jj]
                if not suppressed[j] and _iou(boxes, i, boxes, j) > iou_threshold:
                    suppressed[j] = 1
    return keep[:nkeep].copy()


def greedy_match(const double[:, ::1] preds, const double[:, ::1] gts, double iou_threshold):
    cdef Py_ssize_t n = preds.shape[0], g = gts.shape[0], i, j, best_j
    cdef double best, v
    flags = np.zeros(n, dtype=bool)
    cdef cnp.npy_bool[::1] f = flags
    used_arr = np.zeros(g, dtype=np.uint8)
    cdef cnp.uint8_t[::1] used = used_arr
    with nogil:
        for i in range(n):
            best = -1.0
            best_j = -1
            for j in range(g):
                if used[j]:
                    continue
                v = _iou(preds, i, gts, j)
                if v > best:
                    best = v
                    best_j = j
            if best_j >= 0 and best > iou_threshold:
                used[best_j] = 1
                f[i] = True
    return flags
