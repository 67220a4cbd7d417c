# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of the kernels in ``_kernels_py``.

Accumulations run in the same order as the numpy versions so both backends
return bit-identical arrays.
"""
import numpy as np
cimport numpy as cnp
from cython cimport floating
from libc.math cimport log, sqrt

cnp.import_array()


def im2col3x3(floating[:, :, ::1] x):
    cdef Py_ssize_t h = x.shape[0], w = x.shape[1], c = x.shape[2]
    cdef Py_ssize_t r, cc, dr, dc, ch, rr, c2, o
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((h * w, 9 * c), dtype=dtype)
    cdef floating[:, ::1] out = out_arr
    for r in range(h):
        for cc in range(w):
            o = r * w + cc
            for dr in range(3):
                rr = r + dr - 1
                for dc in range(3):
                    c2 = cc + dc - 1
                    if 0 <= rr < h and 0 <= c2 < w:
                        for ch in range(c):
                            out[o, (dr * 3 + dc) * c + ch] = x[rr, c2, ch]
                    else:
                        for ch in range(c):
                            out[o, (dr * 3 + dc) * c + ch] = 0
    return out_arr


def col2im3x3(dcols, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c):
    return _col2im3x3(np.ascontiguousarray(dcols).reshape(h * w, 9 * c), h, w, c)


def _col2im3x3(floating[:, ::1] d, Py_ssize_t h, Py_ssize_t w, Py_ssize_t c):
    cdef Py_ssize_t r, cc, dr, dc, ch, sr, sc
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((h, w, c), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    for r in range(h):
        for cc in range(w):
            for ch in range(c):
                acc = 0
                for dr in range(3):
                    sr = r + 1 - dr
                    if sr < 0 or sr >= h:
                        continue
                    for dc in range(3):
                        sc = cc + 1 - dc
                        if sc < 0 or sc >= w:
                            continue
                        acc = acc + d[sr * w + sc, (dr * 3 + dc) * c + ch]
                out[r, cc, ch] = acc
    return out_arr


def maxpool2_forward(floating[:, :, ::1] x):
    cdef Py_ssize_t h2 = x.shape[0] // 2, w2 = x.shape[1] // 2, c = x.shape[2]
    cdef Py_ssize_t i, j, ch
    cdef floating best, v
    cdef unsigned char k
    dtype = np.float32 if floating is float else np.float64
    y_arr = np.empty((h2, w2, c), dtype=dtype)
    idx_arr = np.empty((h2, w2, c), dtype=np.uint8)
    cdef floating[:, :, ::1] y = y_arr
    cdef unsigned char[:, :, ::1] idx = idx_arr
    for i in range(h2):
        for j in range(w2):
            for ch in range(c):
                best = x[2 * i, 2 * j, ch]
                k = 0
                v = x[2 * i, 2 * j + 1, ch]
                if v > best:
                    best = v
                    k = 1
                v = x[2 * i + 1, 2 * j, ch]
                if v > best:
                    best = v
                    k = 2
                v = x[2 * i + 1, 2 * j + 1, ch]
                if v > best:
                    best = v
                    k = 3
                y[i, j, ch] = best
                idx[i, j, ch] = k
    return y_arr, idx_arr


def maxpool2_backward(floating[:, :, ::1] dy, const unsigned char[:, :, ::1] idx):
    cdef Py_ssize_t h2 = dy.shape[0], w2 = dy.shape[1], c = dy.shape[2]
    cdef Py_ssize_t i, j, ch
    cdef unsigned char k
    dtype = np.float32 if floating is float else np.float64
    dx_arr = np.zeros((2 * h2, 2 * w2, c), dtype=dtype)
    cdef floating[:, :, ::1] dx = dx_arr
    for i in range(h2):
        for j in range(w2):
            for ch in range(c):
                k = idx[i, j, ch]
                dx[2 * i + (k >> 1), 2 * j + (k & 1), ch] = dy[i, j, ch]
    return dx_arr


def deconv_scatter(cols, Py_ssize_t stride):
    return _deconv_scatter(np.ascontiguousarray(cols), stride)


def _deconv_scatter(floating[:, :, :, :, ::1] cols, Py_ssize_t s):
    cdef Py_ssize_t h = cols.shape[0], w = cols.shape[1], c = cols.shape[4]
    cdef Py_ssize_t p = s // 2
    cdef Py_ssize_t y, x, ch, Y, X, I, J, rr, rc, qr, qc, i, j
    cdef floating acc
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((h * s, w * s, c), dtype=dtype)
    cdef floating[:, :, ::1] out = out_arr
    for y in range(h * s):
        Y = y + p
        I = Y // s
        rr = Y - I * s
        for x in range(w * s):
            X = x + p
            J = X // s
            rc = X - J * s
            for ch in range(c):
                acc = 0
                for qr in range(2):
                    i = I - qr
                    if i < 0 or i >= h:
                        continue
                    for qc in range(2):
                        j = J - qc
                        if j < 0 or j >= w:
                            continue
                        acc = acc + cols[i, j, qr * s + rr, qc * s + rc, ch]
                out[y, x, ch] = acc
    return out_arr


def deconv_gather(dout, Py_ssize_t stride, Py_ssize_t h, Py_ssize_t w):
    return _deconv_gather(np.ascontiguousarray(dout), stride, h, w)


def _deconv_gather(floating[:, :, ::1] dout, Py_ssize_t s, Py_ssize_t h, Py_ssize_t w):
    cdef Py_ssize_t c = dout.shape[2]
    cdef Py_ssize_t p = s // 2
    cdef Py_ssize_t H = h * s, W = w * s
    cdef Py_ssize_t i, j, qr, qc, rr, rc, ch, y, x
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty((h, w, 2 * s, 2 * s, c), dtype=dtype)
    cdef floating[:, :, :, :, ::1] out = out_arr
    for i in range(h):
        for j in range(w):
            for qr in range(2):
                for rr in range(s):
                    y = (i + qr) * s + rr - p
                    for qc in range(2):
                        for rc in range(s):
                            x = (j + qc) * s + rc - p
                            if 0 <= y < H and 0 <= x < W:
                                for ch in range(c):
                                    out[i, j, qr * s + rr, qc * s + rc, ch] = dout[y, x, ch]
                            else:
                                for ch in range(c):
                                    out[i, j, qr * s + rr, qc * s + rc, ch] = 0
    return out_arr


def kmeans_assign(const double[:, ::1] points, const double[:, ::1] centers):
    cdef Py_ssize_t n = points.shape[0], k = centers.shape[0]
    cdef Py_ssize_t i, j, best
    cdef double d, dbest, a, b
    lab_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] lab = lab_arr
    for i in range(n):
        best = 0
        dbest = 0
        for j in range(k):
            a = points[i, 0] - centers[j, 0]
            b = points[i, 1] - centers[j, 1]
            d = a * a + b * b
            if j == 0 or d < dbest:
                dbest = d
                best = j
        lab[i] = best
    return lab_arr


def adam_update(floating[::1] p, floating[::1] g, floating[::1] m, floating[::1] v,
                double lr, double beta1, double beta2, double c1, double c2, double eps):
    """In-place Adam step on flat arrays, operation order as in the numpy fallback."""
    cdef Py_ssize_t i, n = p.shape[0]
    cdef floating fb1 = beta1, fb2 = beta2, f1b1 = 1.0 - beta1, f1b2 = 1.0 - beta2
    cdef floating fc1 = c1, fc2 = c2, flr = lr, feps = eps
    cdef floating gi, mi, vi, step
    for i in range(n):
        gi = g[i]
        mi = m[i] * fb1
        mi = mi + f1b1 * gi
        vi = v[i] * fb2
        vi = vi + f1b2 * (gi * gi)
        m[i] = mi
        v[i] = vi
        step = flr * (mi / fc1)
        step = step / (<floating>sqrt(vi / fc2) + feps)
        p[i] = p[i] - step


def softmax_xent(z, labels):
    """Mean cross-entropy of row-wise softmax and its gradient w.r.t. ``z``.

    The loss is accumulated in double precision; agrees with the numpy
    fallback to rounding.
    """
    z = np.ascontiguousarray(z)
    shifted = z - _rowmax(z)[:, None]
    e = np.exp(shifted)
    return _softmax_finish(shifted, e, np.ascontiguousarray(labels, dtype=np.intp))


def _rowmax(floating[:, ::1] z):
    cdef Py_ssize_t n = z.shape[0], c = z.shape[1], i, j
    cdef floating m
    dtype = np.float32 if floating is float else np.float64
    out_arr = np.empty(n, dtype=dtype)
    cdef floating[::1] out = out_arr
    for i in range(n):
        m = z[i, 0]
        for j in range(1, c):
            if z[i, j] > m:
                m = z[i, j]
        out[i] = m
    return out_arr


def _softmax_finish(floating[:, ::1] shifted, floating[:, ::1] e, const Py_ssize_t[::1] labels):
    cdef Py_ssize_t n = e.shape[0], c = e.shape[1], i, j, lab
    cdef double s, total = 0.0, inv_n = 1.0 / n
    cdef floating scale
    for i in range(n):
        s = 0.0
        for j in range(c):
            s += e[i, j]
        lab = labels[i]
        total += log(s) - shifted[i, lab]
        scale = inv_n / s
        for j in range(c):
            e[i, j] = e[i, j] * scale
        e[i, lab] -= <floating>inv_n
    return total * inv_n, np.asarray(e)
