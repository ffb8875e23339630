# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt, fabs

cnp.import_array()


def conv2d_forward(double[:, :, ::1] x, double[:, :, :, ::1] k, int groups):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t c_out = k.shape[0], c_g = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t o_per_g = c_out // groups
    cdef Py_ssize_t o, g, ci, cin, y, xx, i, j, yy, xs
    cdef double kv
    out_arr = np.zeros((c_out, h, w))
    cdef double[:, :, ::1] out = out_arr
    with nogil:
        for o in range(c_out):
            g = o // o_per_g
            for ci in range(c_g):
                cin = g * c_g + ci
                for i in range(kh):
                    for j in range(kw):
                        kv = k[o, ci, i, j]
                        if kv == 0.0:
                            continue
                        for y in range(h):
                            yy = y + i - ph
                            if yy < 0 or yy >= h:
                                continue
                            for xx in range(w):
                                xs = xx + j - pw
                                if xs < 0 or xs >= w:
                                    continue
                                out[o, y, xx] += kv * x[cin, yy, xs]
    return out_arr


def conv2d_backward(double[:, :, ::1] x, double[:, :, :, ::1] k,
                    double[:, :, ::1] gout, int groups):
    cdef Py_ssize_t c = x.shape[0], h = x.shape[1], w = x.shape[2]
    cdef Py_ssize_t c_out = k.shape[0], c_g = k.shape[1], kh = k.shape[2], kw = k.shape[3]
    cdef Py_ssize_t ph = kh // 2, pw = kw // 2
    cdef Py_ssize_t o_per_g = c_out // groups
    cdef Py_ssize_t o, g, ci, cin, y, xx, i, j, yy, xs
    cdef double kv, acc, go
    gx_arr = np.zeros((c, h, w))
    gk_arr = np.zeros((c_out, c_g, kh, kw))
    cdef double[:, :, ::1] gx = gx_arr
    cdef double[:, :, :, ::1] gk = gk_arr
    with nogil:
        for o in range(c_out):
            g = o // o_per_g
            for ci in range(c_g):
                cin = g * c_g + ci
                for i in range(kh):
                    for j in range(kw):
                        kv = k[o, ci, i, j]
                        acc = 0.0
                        for y in range(h):
                            yy = y + i - ph
                            if yy < 0 or yy >= h:
                                continue
                            for xx in range(w):
                                xs = xx + j - pw
                                if xs < 0 or xs >= w:
                                    continue
                                go = gout[o, y, xx]
                                acc += go * x[cin, yy, xs]
                                gx[cin, yy, xs] += kv * go
                        gk[o, ci, i, j] = acc
    return gx_arr, gk_arr


def nms(double[:, ::1] corners, scores, double threshold):
    cdef Py_ssize_t n = corners.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order_arr = np.ascontiguousarray(np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable"), dtype=np.int64)
    cdef cnp.int64_t[::1] order = order_arr
    alive_arr = np.ones(n, dtype=np.uint8)
    cdef unsigned char[::1] alive = alive_arr
    keep_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] keep = keep_arr
    cdef Py_ssize_t nk = 0, p, q, a, b
    cdef double area_a, area_b, iw, ih, inter, iou
    with nogil:
        for p in range(n):
            a = order[p]
            if not alive[a]:
                continue
            keep[nk] = a
            nk += 1
            area_a = (corners[a, 2] - corners[a, 0]) * (corners[a, 3] - corners[a, 1])
            for q in range(p + 1, n):
                b = order[q]
                if not alive[b]:
                    continue
                area_b = (corners[b, 2] - corners[b, 0]) * (corners[b, 3] - corners[b, 1])
                iw = min(corners[a, 2], corners[b, 2]) - max(corners[a, 0], corners[b, 0])
                ih = min(corners[a, 3], corners[b, 3]) - max(corners[a, 1], corners[b, 1])
                if iw < 0.0:
                    iw = 0.0
                if ih < 0.0:
                    ih = 0.0
                inter = iw * ih
                iou = inter / (area_a + area_b - inter)
                if iou > threshold:
                    alive[b] = 0
    return keep_arr[:nk].copy()


def salience_map(double[::1] xs, double[::1] ys, double[:, ::1] boxes):
    cdef Py_ssize_t h = xs.shape[0], w = ys.shape[0], nb = boxes.shape[0]
    cdef Py_ssize_t b, i, j
    cdef double cx, cy, bw, bh, dx, dy, nx, ny, val
    out_arr = np.zeros((h, w))
    cdef double[:, ::1] out = out_arr
    with nogil:
        for b in range(nb):
            cx = boxes[b, 0]
            cy = boxes[b, 1]
            bw = boxes[b, 2]
            bh = boxes[b, 3]
            for i in range(h):
                dx = xs[i] - cx
                if fabs(dx) > bw / 2.0:
                    continue
                nx = dx / bw
                for j in range(w):
                    dy = ys[j] - cy
                    if fabs(dy) > bh / 2.0:
                        continue
                    ny = dy / bh
                    val = 1.0 - sqrt(2.0 * nx * nx + 2.0 * ny * ny)
                    if val < 0.0:
                        val = 0.0
                    if val > out[i, j]:
                        out[i, j] = val
    return out_arr
