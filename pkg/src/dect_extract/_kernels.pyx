# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Twin of ``_fallback.py``; results must match bit for bit."""

import numpy as np
cimport numpy as cnp
from libc.math cimport floor

cnp.import_array()

NAME = "cython"


cdef inline double _lerp(double a, double b, double f) nogil:
    cdef double v, lo, hi
    if f == 0.0:
        return a
    v = a + f * (b - a)
    if a < b:
        lo = a
        hi = b
    else:
        lo = b
        hi = a
    if v < lo:
        v = lo
    if v > hi:
        v = hi
    return v


cdef inline double _sample(const double[:, ::1] img, Py_ssize_t h, Py_ssize_t w,
                           double x, double y) nogil:
    cdef Py_ssize_t x0, y0, x1, y1
    cdef double fx, fy, top, bot
    if x < 0.0:
        x = 0.0
    elif x > w - 1.0:
        x = w - 1.0
    if y < 0.0:
        y = 0.0
    elif y > h - 1.0:
        y = h - 1.0
    x0 = <Py_ssize_t>floor(x)
    y0 = <Py_ssize_t>floor(y)
    fx = x - x0
    fy = y - y0
    x1 = x0 + 1 if x0 + 1 < w else w - 1
    y1 = y0 + 1 if y0 + 1 < h else h - 1
    top = _lerp(img[y0, x0], img[y0, x1], fx)
    bot = _lerp(img[y1, x0], img[y1, x1], fx)
    return _lerp(top, bot, fy)


def bilinear_points(img, xs, ys):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    xa = np.asarray(xs, dtype=np.float64)
    shape = xa.shape
    cdef const double[::1] xv = np.ascontiguousarray(xa).ravel()
    cdef const double[::1] yv = np.ascontiguousarray(ys, dtype=np.float64).ravel()
    cdef Py_ssize_t n = xv.shape[0], i
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1]
    out = np.empty(n, dtype=np.float64)
    cdef double[::1] ov = out
    with nogil:
        for i in range(n):
            ov[i] = _sample(im, h, w, xv[i], yv[i])
    return out.reshape(shape)


def bilinear_affine(img, double a, double b, double tx, double c, double d, double ty,
                    Py_ssize_t out_h, Py_ssize_t out_w):
    cdef const double[:, ::1] im = np.ascontiguousarray(img, dtype=np.float64)
    cdef Py_ssize_t h = im.shape[0], w = im.shape[1], iu, iv
    cdef double u, v
    out = np.empty((out_h, out_w), dtype=np.float64)
    cdef double[:, ::1] ov = out
    with nogil:
        for iv in range(out_h):
            v = <double>iv
            for iu in range(out_w):
                u = <double>iu
                ov[iv, iu] = _sample(im, h, w, a * u + b * v + tx, c * u + d * v + ty)
    return out


def best_split(x_sorted, y_sorted, double min_leaf, double mean):
    cdef const double[::1] x = np.ascontiguousarray(x_sorted, dtype=np.float64)
    cdef const double[::1] y = np.ascontiguousarray(y_sorted, dtype=np.float64)
    cdef Py_ssize_t n = x.shape[0], i, best_i = -1
    cdef double s_l = 0.0, total = 0.0, nl, nr, g, best = 0.0, thr, lo, hi
    cdef double fn = <double>n
    if n < 2:
        return 0.0, 0.0, 0
    with nogil:
        for i in range(n):
            total = total + (y[i] - mean)
        for i in range(n - 1):
            s_l = s_l + (y[i] - mean)
            nl = <double>(i + 1)
            nr = fn - nl
            if not (x[i] < x[i + 1]) or nl < min_leaf or nr < min_leaf:
                continue
            g = s_l * s_l / nl + (total - s_l) * (total - s_l) / nr - total * total / fn
            if best_i < 0 or g > best:
                best = g
                best_i = i
    if best_i < 0:
        return 0.0, 0.0, 0
    lo = x[best_i]
    hi = x[best_i + 1]
    thr = (lo + hi) / 2.0
    if thr <= lo:
        thr = hi
    return best, thr, best_i + 1


def route_leaves(X, feature, threshold, left, right):
    cdef const double[:, ::1] xv = np.ascontiguousarray(X, dtype=np.float64)
    cdef const cnp.intp_t[::1] fv = np.ascontiguousarray(feature, dtype=np.intp)
    cdef const double[::1] tv = np.ascontiguousarray(threshold, dtype=np.float64)
    cdef const cnp.intp_t[::1] lv = np.ascontiguousarray(left, dtype=np.intp)
    cdef const cnp.intp_t[::1] rv = np.ascontiguousarray(right, dtype=np.intp)
    cdef Py_ssize_t n = xv.shape[0], i
    cdef cnp.intp_t nd
    out = np.empty(n, dtype=np.intp)
    cdef cnp.intp_t[::1] ov = out
    with nogil:
        for i in range(n):
            nd = 0
            while fv[nd] >= 0:
                if xv[i, fv[nd]] < tv[nd]:
                    nd = lv[nd]
                else:
                    nd = rv[nd]
            ov[i] = nd
    return out
