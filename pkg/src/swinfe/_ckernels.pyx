# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the hot kernels in ``_pykernels``.

Loop order follows the numpy reference so results are bit-identical.
"""
import numpy as np
cimport numpy as cnp
cimport cython

cnp.import_array()

BACKEND = "cython"

ctypedef fused real:
    float
    double


def _im2col(real[:, :, :, ::1] xp, real[:, :, :, ::1] cols,
            int kh, int kw, int stride, int out_h, int out_w):
    cdef Py_ssize_t B = xp.shape[0], C = xp.shape[1]
    cdef Py_ssize_t b, c, i, j, oh, ow, col
    with nogil:
        for b in range(B):
            for oh in range(out_h):
                for ow in range(out_w):
                    col = 0
                    for c in range(C):
                        for i in range(kh):
                            for j in range(kw):
                                cols[b, oh, ow, col] = xp[b, c, oh * stride + i, ow * stride + j]
                                col += 1


def im2col(xp, int kh, int kw, int stride, int out_h, int out_w):
    xp = np.ascontiguousarray(xp)
    B, C = xp.shape[0], xp.shape[1]
    cols = np.empty((B, out_h, out_w, C * kh * kw), dtype=xp.dtype)
    _im2col(xp, cols, kh, kw, stride, out_h, out_w)
    return cols


def _col2im(real[:, :, :, ::1] cols, real[:, :, :, ::1] out,
            int C, int kh, int kw, int stride):
    cdef Py_ssize_t B = cols.shape[0], out_h = cols.shape[1], out_w = cols.shape[2]
    cdef Py_ssize_t b, c, i, j, oh, ow
    cdef Py_ssize_t kk = kh * kw
    with nogil:
        for i in range(kh):
            for j in range(kw):
                for b in range(B):
                    for c in range(C):
                        for oh in range(out_h):
                            for ow in range(out_w):
                                out[b, c, oh * stride + i, ow * stride + j] += \
                                    cols[b, oh, ow, c * kk + i * kw + j]


def col2im(cols, int C, int Hp, int Wp, int kh, int kw, int stride):
    cols = np.ascontiguousarray(cols)
    out = np.zeros((cols.shape[0], C, Hp, Wp), dtype=cols.dtype)
    _col2im(cols, out, C, kh, kw, stride)
    return out


cdef inline double _iou(double[:, ::1] a, Py_ssize_t i, double[:, ::1] b, Py_ssize_t j) noexcept nogil:
    cdef double area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
    cdef double area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
    cdef double iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
    cdef double ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
    cdef double inter = max(iw, 0.0) * max(ih, 0.0)
    cdef double union = area_a + area_b - inter
    if union > 0:
        return inter / union
    return 0.0


def iou_matrix(a, b):
    cdef double[:, ::1] av = np.ascontiguousarray(np.asarray(a, dtype=np.float64).reshape(-1, 4))
    cdef double[:, ::1] bv = np.ascontiguousarray(np.asarray(b, dtype=np.float64).reshape(-1, 4))
    out = np.zeros((av.shape[0], bv.shape[0]), dtype=np.float64)
    cdef double[:, ::1] ov = out
    cdef Py_ssize_t i, j
    with nogil:
        for i in range(av.shape[0]):
            for j in range(bv.shape[0]):
                ov[i, j] = _iou(av, i, bv, j)
    return out


def nms_sorted(boxes, double iou_thresh):
    cdef double[:, ::1] bv = np.ascontiguousarray(np.asarray(boxes, dtype=np.float64).reshape(-1, 4))
    cdef Py_ssize_t n = bv.shape[0], i, j, nkeep = 0
    keep = np.empty(n, dtype=np.int64)
    supp = np.zeros(n, dtype=np.uint8)
    cdef cnp.int64_t[::1] kv = keep
    cdef unsigned char[::1] sv = supp
    with nogil:
        for i in range(n):
            if sv[i]:
                continue
            kv[nkeep] = i
            nkeep += 1
            for j in range(i + 1, n):
                if not sv[j] and _iou(bv, i, bv, j) >= iou_thresh:
                    sv[j] = 1
    return keep[:nkeep].copy()
