"""Numpy implementations of the hot kernels.

These are the reference versions and the import-time fallback for
``_ckernels``. Both backends must agree bit for bit: every output element
accumulates its contributions in the same (kernel-row, kernel-col) order.
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components


def conv_out_size(size, k, stride, pad):
    return (size + 2 * pad - k) // stride + 1


def im2col(x, k, stride, pad):
    """Unfold ``x`` (n, c, h, w) into columns (n, c*k*k, oh*ow)."""
    n, c, h, w = x.shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    if pad:
        x = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = sliding_window_view(x, (k, k), axis=(2, 3))
    win = win[:, :, : (oh - 1) * stride + 1 : stride, : (ow - 1) * stride + 1 : stride]
    # (n, c, oh, ow, k, k) -> (n, c, k, k, oh, ow)
    cols = np.ascontiguousarray(win.transpose(0, 1, 4, 5, 2, 3))
    return cols.reshape(n, c * k * k, oh * ow)


def col2im(cols, shape, k, stride, pad):
    """Scatter-add columns back into an (n, c, h, w) array; adjoint of im2col."""
    n, c, h, w = shape
    oh = conv_out_size(h, k, stride, pad)
    ow = conv_out_size(w, k, stride, pad)
    cols = cols.reshape(n, c, k, k, oh, ow)
    buf = np.zeros((n, c, h + 2 * pad, w + 2 * pad))
    for i in range(k):
        for j in range(k):
            buf[:, :, i : i + stride * oh : stride, j : j + stride * ow : stride] += cols[:, :, i, j]
    return np.ascontiguousarray(buf[:, :, pad : pad + h, pad : pad + w])


def label_reach(mask, offsets):
    """Label cells of ``mask`` linked through any of ``offsets``.

    ``offsets`` is an (m, 2) int array holding one of each +/- pair. Labels
    are dense, 1-based and ordered by the raster index of each component's
    first cell; background is 0.
    """
    mask = np.asarray(mask, dtype=bool)
    ny, nx = mask.shape
    flat = np.flatnonzero(mask)
    labels = np.zeros(ny * nx, dtype=np.int64)
    if flat.size == 0:
        return labels.reshape(ny, nx), 0
    index = np.full(ny * nx, -1, dtype=np.int64)
    index[flat] = np.arange(flat.size)
    ys, xs = np.divmod(flat, nx)
    src, dst = [], []
    for dy, dx in np.asarray(offsets).reshape(-1, 2):
        ty, tx = ys + dy, xs + dx
        ok = (ty >= 0) & (ty < ny) & (tx >= 0) & (tx < nx)
        tgt = np.where(ok, ty * nx + tx, 0)
        ok &= mask.ravel()[tgt]
        src.append(np.flatnonzero(ok))
        dst.append(index[tgt[ok]])
    src = np.concatenate(src) if src else np.zeros(0, dtype=np.int64)
    dst = np.concatenate(dst) if dst else np.zeros(0, dtype=np.int64)
    graph = coo_matrix((np.ones(src.size), (src, dst)), shape=(flat.size, flat.size))
    ncomp, comp = connected_components(graph, directed=False)
    # components in order of first appearance along the raster scan
    _, first = np.unique(comp, return_index=True)
    order = np.argsort(first, kind="stable")
    dense = np.empty(ncomp, dtype=np.int64)
    dense[order] = np.arange(1, ncomp + 1)
    labels[flat] = dense[comp]
    return labels.reshape(ny, nx), int(ncomp)
