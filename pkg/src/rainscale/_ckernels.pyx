# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled versions of the kernels in ``_pykernels``.

Loop order is chosen so each output element sums its contributions in the
same order as the numpy version; results are bit-identical.
"""

import numpy as np
cimport numpy as cnp

cnp.import_array()

ctypedef cnp.float64_t f64
ctypedef cnp.int64_t i64


def conv_out_size(Py_ssize_t size, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    return (size + 2 * pad - k) // stride + 1


cdef inline void _valid_range(Py_ssize_t j, Py_ssize_t stride, Py_ssize_t pad,
                              Py_ssize_t w, Py_ssize_t ow,
                              Py_ssize_t* lo, Py_ssize_t* hi) noexcept nogil:
    # output columns ox with 0 <= ox*stride + j - pad < w
    cdef Py_ssize_t a = pad - j, b = w - 1 + pad - j
    if a <= 0:
        lo[0] = 0
    else:
        lo[0] = (a + stride - 1) // stride
    if b < 0:
        hi[0] = 0
    else:
        hi[0] = b // stride + 1
    if hi[0] > ow:
        hi[0] = ow
    if lo[0] > hi[0]:
        lo[0] = hi[0]


def im2col(x, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef const f64[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef Py_ssize_t n = xv.shape[0], c = xv.shape[1], h = xv.shape[2], w = xv.shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    out = np.zeros((n, c * k * k, oh * ow), dtype=np.float64)
    cdef f64[:, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        _valid_range(j, stride, pad, w, ow, &lo, &hi)
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            base = j - pad
                            for ox in range(lo, hi):
                                ov[b, row, oy * ow + ox] = xv[b, ch, iy, ox * stride + base]
    return out


def col2im(cols, shape, Py_ssize_t k, Py_ssize_t stride, Py_ssize_t pad):
    cdef Py_ssize_t n = shape[0], c = shape[1], h = shape[2], w = shape[3]
    cdef Py_ssize_t oh = (h + 2 * pad - k) // stride + 1
    cdef Py_ssize_t ow = (w + 2 * pad - k) // stride + 1
    cdef const f64[:, :, ::1] cv = np.ascontiguousarray(cols, dtype=np.float64).reshape(
        n, c * k * k, oh * ow)
    out = np.zeros((n, c, h, w), dtype=np.float64)
    cdef f64[:, :, :, ::1] ov = out
    cdef Py_ssize_t b, ch, i, j, oy, ox, iy, row, lo, hi, base
    with nogil:
        for b in range(n):
            for ch in range(c):
                for i in range(k):
                    for j in range(k):
                        row = (ch * k + i) * k + j
                        _valid_range(j, stride, pad, w, ow, &lo, &hi)
                        base = j - pad
                        for oy in range(oh):
                            iy = oy * stride + i - pad
                            if iy < 0 or iy >= h:
                                continue
                            for ox in range(lo, hi):
                                ov[b, ch, iy, ox * stride + base] += cv[b, row, oy * ow + ox]
    return out


cdef inline i64 _find(i64[::1] parent, i64 a) noexcept nogil:
    cdef i64 root = a, nxt
    while parent[root] != root:
        root = parent[root]
    while parent[a] != root:
        nxt = parent[a]
        parent[a] = root
        a = nxt
    return root


def label_reach(mask, offsets):
    cdef const cnp.uint8_t[:, ::1] mv = np.ascontiguousarray(mask, dtype=np.uint8)
    cdef const i64[:, ::1] off = np.ascontiguousarray(
        np.asarray(offsets, dtype=np.int64).reshape(-1, 2))
    cdef Py_ssize_t ny = mv.shape[0], nx = mv.shape[1], m = off.shape[0]
    parent_arr = np.arange(ny * nx, dtype=np.int64)
    cdef i64[::1] parent = parent_arr
    labels_arr = np.zeros((ny, nx), dtype=np.int64)
    cdef i64[:, ::1] labels = labels_arr
    remap_arr = np.zeros(ny * nx, dtype=np.int64)
    cdef i64[::1] remap = remap_arr
    cdef Py_ssize_t y, x, o, ty, tx
    cdef i64 ra, rb, nxt_label = 0
    with nogil:
        for y in range(ny):
            for x in range(nx):
                if not mv[y, x]:
                    continue
                for o in range(m):
                    ty = y + off[o, 0]
                    tx = x + off[o, 1]
                    if ty < 0 or ty >= ny or tx < 0 or tx >= nx or not mv[ty, tx]:
                        continue
                    ra = _find(parent, y * nx + x)
                    rb = _find(parent, ty * nx + tx)
                    if ra < rb:
                        parent[rb] = ra
                    elif rb < ra:
                        parent[ra] = rb
        for y in range(ny):
            for x in range(nx):
                if not mv[y, x]:
                    continue
                ra = _find(parent, y * nx + x)
                if remap[ra] == 0:
                    nxt_label += 1
                    remap[ra] = nxt_label
                labels[y, x] = remap[ra]
    return labels_arr, int(nxt_label)
