"""Single-class detection evaluation: IoU matching, precision/recall, AP."""
from dataclasses import dataclass, field
import math

import numpy as np

from . import kernels


@dataclass
class EvalResult:
    ap: float
    precision: np.ndarray = field(repr=False)
    recall: np.ndarray = field(repr=False)
    tp: int
    fp: int
    n_gt: int


def iou(a, b):
    """IoU of two ``(x1, y1, x2, y2)`` boxes."""
    return float(kernels.iou_matrix(np.asarray(a)[None], np.asarray(b)[None])[0, 0])


def match_detections(dets, gts, iou_thresh=0.5):
    """Rank all detections by score and flag each as TP (True) or FP.

    ``dets[i]`` is ``(boxes [K, 4], scores [K])`` for image ``i`` and
    ``gts[i]`` its ``[M, 4]`` ground truth. A detection is a TP when its
    best-overlapping still-unmatched gt reaches ``iou_thresh``; that gt is
    then consumed. Ties in score keep image order, then within-image order.
    """
    img, idx, sc = [], [], []
    for i, (boxes, scores) in enumerate(dets):
        k = len(scores)
        img.append(np.full(k, i))
        idx.append(np.arange(k))
        sc.append(np.asarray(scores, dtype=np.float64))
    if not sc:
        return np.zeros(0, dtype=bool)
    img, idx, sc = np.concatenate(img), np.concatenate(idx), np.concatenate(sc)
    order = np.argsort(-sc, kind="stable")
    ious = [kernels.iou_matrix(np.asarray(b).reshape(-1, 4), np.asarray(g).reshape(-1, 4))
            for (b, _), g in zip(dets, gts)]
    used = [np.zeros(len(np.asarray(g).reshape(-1, 4)), dtype=bool) for g in gts]
    flags = np.zeros(len(order), dtype=bool)
    for r, o in enumerate(order):
        i, k = img[o], idx[o]
        if not len(used[i]):
            continue
        cand = np.where(used[i], -1.0, ious[i][k])
        g = int(cand.argmax())
        if cand[g] >= iou_thresh:
            used[i][g] = True
            flags[r] = True
    return flags


def pr_curve(flags, n_gt):
    """Cumulative precision and recall at each rank of the flag list."""
    flags = np.asarray(flags, dtype=bool)
    if len(flags) and n_gt <= 0:
        raise ValueError("AP undefined: detections but no ground truth")
    tp = np.cumsum(flags)
    k = np.arange(1, len(flags) + 1)
    return tp / k, tp / max(n_gt, 1)


def average_precision(precision, recall):
    """Area under the monotone precision envelope, summed over recall steps."""
    precision = np.asarray(precision, dtype=np.float64)
    recall = np.asarray(recall, dtype=np.float64)
    if precision.size == 0:
        return 0.0
    env = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.diff(np.concatenate([[0.0], recall]))
    return math.fsum(steps * env)


def evaluate(dets, gts, iou_thresh=0.5):
    """AP and PR arrays over a set of images (see :func:`match_detections`)."""
    n_gt = sum(len(np.asarray(g).reshape(-1, 4)) for g in gts)
    flags = match_detections(dets, gts, iou_thresh)
    if n_gt == 0:
        return EvalResult(0.0, np.zeros(0), np.zeros(0), 0, int(len(flags)), 0)
    p, r = pr_curve(flags, n_gt)
    return EvalResult(average_precision(p, r), p, r, int(flags.sum()), int((~flags).sum()), n_gt)


def format_table(rows, title=None, footer=None):
    """Aligned ``Backbone | Neck | AP(%)`` table from ``(backbone, neck, ap)`` rows."""
    head = ("Backbone", "Neck", "AP(%)")
    body = [(b, n, f"{100 * ap:.2f}" if isinstance(ap, float) else str(ap)) for b, n, ap in rows]
    widths = [max(len(r[c]) for r in [head] + body) for c in range(3)]
    line = lambda r: " | ".join(v.ljust(w) for v, w in zip(r, widths)).rstrip()
    out = [title] if title else []
    out += [line(head), "-+-".join("-" * w for w in widths)] + [line(r) for r in body]
    if footer:
        out += [""] + list(footer)
    return "\n".join(out) + "\n"
