"""Pure numpy implementations of the hot kernels.

These are the reference versions; ``_ckernels`` must agree with them
(bitwise for NMS and salience maps, to rounding for convolutions).
"""

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x, k, groups):
    c, h, w = x.shape
    c_out, c_g, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    xg = win.reshape(groups, c_g, h, w, kh, kw)
    kg = k.reshape(groups, c_out // groups, c_g, kh, kw)
    out = np.einsum("gchwij,gocij->gohw", xg, kg, optimize=True)
    return np.ascontiguousarray(out.reshape(c_out, h, w))


def conv2d_backward(x, k, gout, groups):
    c, h, w = x.shape
    c_out, c_g, kh, kw = k.shape
    ph, pw = kh // 2, kw // 2
    xp = np.pad(x, ((0, 0), (ph, ph), (pw, pw)))
    win = sliding_window_view(xp, (kh, kw), axis=(1, 2))
    xg = win.reshape(groups, c_g, h, w, kh, kw)
    kg = k.reshape(groups, c_out // groups, c_g, kh, kw)
    gg = gout.reshape(groups, c_out // groups, h, w)

    gk = np.einsum("gchwij,gohw->gocij", xg, gg, optimize=True).reshape(k.shape)
    gxp = np.zeros((groups, c_g, h + 2 * ph, w + 2 * pw))
    for i in range(kh):
        for j in range(kw):
            gxp[:, :, i:i + h, j:j + w] += np.einsum(
                "goc,gohw->gchw", kg[:, :, :, i, j], gg, optimize=True
            )
    gx = gxp[:, :, ph:ph + h, pw:pw + w].reshape(c, h, w)
    return np.ascontiguousarray(gx), gk


def pairwise_iou(corners):
    """IoU matrix for an (n, 4) array of x1, y1, x2, y2 boxes."""
    x1, y1, x2, y2 = corners.T
    area = (x2 - x1) * (y2 - y1)
    iw = np.maximum(0.0, np.minimum(x2[:, None], x2[None, :]) - np.maximum(x1[:, None], x1[None, :]))
    ih = np.maximum(0.0, np.minimum(y2[:, None], y2[None, :]) - np.maximum(y1[:, None], y1[None, :]))
    inter = iw * ih
    return inter / (area[:, None] + area[None, :] - inter)


def nms(corners, scores, threshold):
    """Greedy NMS; returns kept indices in descending score order.

    Ties in score go to the lower index. A box is suppressed when its IoU
    with an already kept box is strictly greater than ``threshold``.
    """
    n = len(scores)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.argsort(-scores, kind="stable")
    x1, y1, x2, y2 = corners.T
    area = (x2 - x1) * (y2 - y1)
    alive = np.ones(n, dtype=bool)
    keep = []
    for pos in range(n):
        i = order[pos]
        if not alive[i]:
            continue
        keep.append(i)
        rest = order[pos + 1:]
        rest = rest[alive[rest]]
        if rest.size == 0:
            continue
        iw = np.maximum(0.0, np.minimum(x2[i], x2[rest]) - np.maximum(x1[i], x1[rest]))
        ih = np.maximum(0.0, np.minimum(y2[i], y2[rest]) - np.maximum(y1[i], y1[rest]))
        inter = iw * ih
        iou = inter / (area[i] + area[rest] - inter)
        alive[rest[iou > threshold]] = False
    return np.asarray(keep, dtype=np.int64)


def salience_map(xs, ys, boxes):
    """Max-over-boxes salience confidence on the grid ``xs`` x ``ys``.

    ``boxes`` is an (n, 4) array of cx, cy, w, h.
    """
    out = np.zeros((len(xs), len(ys)))
    for cx, cy, bw, bh in boxes:
        dx = xs[:, None] - cx
        dy = ys[None, :] - cy
        nx = dx / bw
        ny = dy / bh
        val = 1.0 - np.sqrt(2.0 * nx * nx + 2.0 * ny * ny)
        inside = (np.abs(dx) <= bw / 2.0) & (np.abs(dy) <= bh / 2.0)
        val = np.where(inside, np.maximum(val, 0.0), 0.0)
        np.maximum(out, val, out=out)
    return out
