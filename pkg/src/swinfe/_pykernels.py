"""Pure numpy versions of the hot kernels.

These define the reference arithmetic order; the compiled module in
``_ckernels.pyx`` reproduces it exactly so both backends are bit-identical.
"""
import numpy as np

BACKEND = "python"


def im2col(xp, kh, kw, stride, out_h, out_w):
    """Gather patches of a padded ``[B, C, H, W]`` array.

    Returns ``[B, out_h, out_w, C*kh*kw]`` with the patch axis ordered
    (channel, kernel row, kernel column).
    """
    B, C = xp.shape[:2]
    cols = np.empty((B, out_h, out_w, C, kh, kw), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            sl = xp[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride]
            cols[:, :, :, :, i, j] = sl.transpose(0, 2, 3, 1)
    return cols.reshape(B, out_h, out_w, C * kh * kw)


def col2im(cols, C, Hp, Wp, kh, kw, stride):
    """Scatter-add patch gradients back onto a padded ``[B, C, Hp, Wp]`` grid."""
    B, out_h, out_w = cols.shape[:3]
    c6 = cols.reshape(B, out_h, out_w, C, kh, kw)
    out = np.zeros((B, C, Hp, Wp), dtype=cols.dtype)
    for i in range(kh):
        for j in range(kw):
            out[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += (
                c6[:, :, :, :, i, j].transpose(0, 3, 1, 2))
    return out


def iou_matrix(a, b):
    """Pairwise IoU between ``[N, 4]`` and ``[M, 4]`` boxes (x1, y1, x2, y2)."""
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    inter = np.maximum(iw, 0.0) * np.maximum(ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    np.divide(inter, union, out=out, where=union > 0)
    return out


def nms_sorted(boxes, iou_thresh):
    """Greedy suppression over boxes already sorted by descending score.

    Returns the kept positions (into ``boxes``) in order.
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    n = boxes.shape[0]
    suppressed = np.zeros(n, dtype=bool)
    keep = []
    for i in range(n):
        if suppressed[i]:
            continue
        keep.append(i)
        if i + 1 < n:
            ious = iou_matrix(boxes[i:i + 1], boxes[i + 1:])[0]
            suppressed[i + 1:] |= ious >= iou_thresh
    return np.asarray(keep, dtype=np.int64)
