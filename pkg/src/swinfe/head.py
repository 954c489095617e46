"""Anchor-based region-proposal head: anchors, box coding, targets, loss, NMS.

Boxes are ``(x1, y1, x2, y2)`` float arrays in pixel units. Anchors of all
levels are concatenated finest level first; within a level the order is
row-major cell, then scale, then ratio, which is also the channel layout of
the head outputs.
"""
from dataclasses import dataclass
import math

import numpy as np

from . import kernels
from .autodiff import ShapeError
from .backbone import ConfigError
from .nn import ParamStore, conv_params

BBOX_CLIP = math.log(1000.0 / 16)


@dataclass
class HeadConfig:
    scales: tuple = (2.0,)
    ratios: tuple = (0.5, 1.0, 2.0)
    pos_iou: float = 0.7
    neg_iou: float = 0.3
    batch_per_image: int = 256
    pos_fraction: float = 0.5
    smooth_l1_beta: float = 1.0 / 9
    score_thresh: float = 0.05
    pre_nms_top_k: int = 300
    nms_iou: float = 0.5

    def __post_init__(self):
        self.scales = tuple(float(s) for s in self.scales)
        self.ratios = tuple(float(r) for r in self.ratios)
        if not self.scales or not self.ratios:
            raise ConfigError("head needs at least one anchor scale and one ratio")
        if min(self.scales) <= 0 or min(self.ratios) <= 0:
            raise ConfigError("anchor scales and ratios must be positive")
        if not 0 < self.nms_iou < 1:
            raise ConfigError(f"nms_iou {self.nms_iou} outside (0, 1)")

    @property
    def num_anchors(self):
        return len(self.scales) * len(self.ratios)


@dataclass(frozen=True)
class Detection:
    box: tuple
    score: float


# -- anchors -------------------------------------------------------------

def generate_anchors(level_shapes, image_size, scales, ratios):
    """One ``[h*w*A, 4]`` anchor array per level.

    ``ratio`` is height/width; every ratio keeps the area ``(scale*stride)^2``.
    """
    if not len(scales) or not len(ratios):
        raise ConfigError("anchor generation needs non-empty scales and ratios")
    H, W = image_size
    out = []
    for h, w in level_shapes:
        if H % h or W % w or H // h != W // w:
            raise ShapeError(f"level {h}x{w} does not evenly tile image {H}x{W}")
        stride = H // h
        base = []
        for s in scales:
            size = s * stride
            for r in ratios:
                bw = size / math.sqrt(r)
                bh = size * math.sqrt(r)
                base.append((-bw / 2, -bh / 2, bw / 2, bh / 2))
        base = np.asarray(base)
        cy, cx = np.meshgrid((np.arange(h) + 0.5) * stride, (np.arange(w) + 0.5) * stride,
                             indexing="ij")
        ctr = np.stack([cx, cy, cx, cy], axis=-1).reshape(-1, 1, 4)
        out.append((ctr + base[None]).reshape(-1, 4))
    return out


# -- box coding ----------------------------------------------------------

def _cxcywh(b):
    w = b[..., 2] - b[..., 0]
    h = b[..., 3] - b[..., 1]
    return b[..., 0] + 0.5 * w, b[..., 1] + 0.5 * h, w, h


def encode_boxes(gt, anchors):
    """Regression targets ``(tx, ty, tw, th)`` taking ``anchors`` to ``gt``."""
    gt = np.asarray(gt, dtype=np.float64)
    anchors = np.asarray(anchors, dtype=np.float64)
    gx, gy, gw, gh = _cxcywh(gt)
    ax, ay, aw, ah = _cxcywh(anchors)
    return np.stack([(gx - ax) / aw, (gy - ay) / ah, np.log(gw / aw), np.log(gh / ah)], axis=-1)


def decode_boxes(anchors, deltas, image_size=None):
    """Apply ``deltas`` to ``anchors``; clip to ``image_size=(H, W)`` when given."""
    deltas = np.asarray(deltas, dtype=np.float64)
    if not np.isfinite(deltas).all():
        raise FloatingPointError("non-finite box deltas")
    ax, ay, aw, ah = _cxcywh(np.asarray(anchors, dtype=np.float64))
    cx = ax + deltas[..., 0] * aw
    cy = ay + deltas[..., 1] * ah
    w = aw * np.exp(np.minimum(deltas[..., 2], BBOX_CLIP))
    h = ah * np.exp(np.minimum(deltas[..., 3], BBOX_CLIP))
    boxes = np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)
    if image_size is not None:
        H, W = image_size
        boxes[..., 0::2] = np.clip(boxes[..., 0::2], 0, W)
        boxes[..., 1::2] = np.clip(boxes[..., 1::2], 0, H)
    return boxes


# -- targets -------------------------------------------------------------

def assign_targets(anchors, gt_boxes, pos_iou=0.7, neg_iou=0.3):
    """Label anchors 1 (positive), 0 (negative) or -1 (ignore).

    Returns ``(labels, matched)`` where ``matched[i]`` is the gt index of a
    positive anchor (-1 otherwise). Each gt's best anchor (lowest index on
    ties) is positive as long as it overlaps at all.
    """
    n = len(anchors)
    gt_boxes = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    labels = np.full(n, -1, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    if len(gt_boxes) == 0:
        labels[:] = 0
        return labels, matched
    iou = kernels.iou_matrix(anchors, gt_boxes)
    best_gt = iou.argmax(axis=1)
    best_iou = iou[np.arange(n), best_gt]
    labels[best_iou < neg_iou] = 0
    pos = best_iou >= pos_iou
    labels[pos] = 1
    matched[pos] = best_gt[pos]
    for g in range(len(gt_boxes)):
        a = int(iou[:, g].argmax())
        if iou[a, g] > 0:
            labels[a] = 1
            matched[a] = g
    return labels, matched


def sample_anchors(labels, rng, batch_size=256, pos_fraction=0.5):
    """Random subset of labelled anchors: at most ``pos_fraction`` positives.

    Returns ``(pos_idx, neg_idx)``, each sorted.
    """
    pos = np.flatnonzero(labels == 1)
    neg = np.flatnonzero(labels == 0)
    n_pos = min(len(pos), int(batch_size * pos_fraction))
    n_neg = min(len(neg), batch_size - n_pos)
    pos = np.sort(rng.permutation(pos)[:n_pos])
    neg = np.sort(rng.permutation(neg)[:n_neg])
    return pos, neg


# -- network -------------------------------------------------------------

def init_head(cfg, channels, rng, store=None, prefix="head", dtype=np.float32):
    store = ParamStore() if store is None else store
    A = cfg.num_anchors
    conv_params(store, f"{prefix}.conv", rng, channels, channels, 3, dtype=dtype)
    # zero output layers: every anchor starts at score 0.5 and zero deltas
    store.new(f"{prefix}.cls.weight", np.zeros((A, channels, 1, 1), dtype=dtype))
    store.new(f"{prefix}.cls.bias", np.zeros(A, dtype=dtype))
    store.new(f"{prefix}.reg.weight", np.zeros((4 * A, channels, 1, 1), dtype=dtype))
    store.new(f"{prefix}.reg.bias", np.zeros(4 * A, dtype=dtype))
    return store


def head_forward(tape, pyramid, params, prefix="head"):
    """Per level: ``(logits [B, h*w*A], deltas [B, h*w*A, 4])``, weights shared across levels."""
    p = {k[len(prefix) + 1:]: v for k, v in params.items() if k.startswith(prefix + ".")}
    A = p["cls.weight"].shape[0]
    out = []
    for x in pyramid:
        B, _, h, w = x.shape
        t = tape.relu(tape.conv2d(x, p["conv.weight"], pad=1, bias=p["conv.bias"], tag="head"))
        logits = tape.conv2d(t, p["cls.weight"], bias=p["cls.bias"], tag="head")
        deltas = tape.conv2d(t, p["reg.weight"], bias=p["reg.bias"], tag="head")
        logits = tape.reshape(tape.permute(logits, (0, 2, 3, 1)), (B, h * w * A))
        deltas = tape.reshape(tape.permute(deltas, (0, 2, 3, 1)), (B, h * w * A, 4))
        out.append((logits, deltas))
    return out


def concat_levels(tape, per_level):
    logits = tape.concat([lg for lg, _ in per_level], axis=1)
    deltas = tape.concat([d for _, d in per_level], axis=1)
    return logits, deltas


def rpn_loss(tape, logits, deltas, targets, beta=1.0 / 9):
    """Sampled objectness BCE plus smooth-L1 box loss.

    ``logits [B, N]``, ``deltas [B, N, 4]``; ``targets`` has one
    ``(pos_idx, neg_idx, box_targets[len(pos_idx), 4])`` triple per image.
    The BCE is averaged over all sampled anchors, the box term over the
    positives (0 when there are none). Returns ``(total, cls, reg)``.
    """
    B, N = logits.shape
    flat_logits = tape.reshape(logits, (B * N,))
    flat_deltas = tape.reshape(deltas, (B * N, 4))
    sel, lab, pos_sel, box_t = [], [], [], []
    for b, (pos, neg, bt) in enumerate(targets):
        sel += [b * N + pos, b * N + neg]
        lab += [np.ones(len(pos)), np.zeros(len(neg))]
        pos_sel.append(b * N + pos)
        box_t.append(np.asarray(bt, dtype=np.float64).reshape(-1, 4))
    sel = np.concatenate(sel).astype(np.int64)
    lab = np.concatenate(lab)
    pos_sel = np.concatenate(pos_sel).astype(np.int64)
    box_t = np.concatenate(box_t)
    if len(sel) == 0:
        raise ValueError("no anchors sampled for the loss")
    cls = tape.scale(tape.bce_with_logits_sum(tape.take_rows(flat_logits, sel), lab), 1.0 / len(sel))
    if len(pos_sel):
        reg = tape.smooth_l1_sum(tape.take_rows(flat_deltas, pos_sel), box_t, beta)
        reg = tape.scale(reg, 1.0 / len(pos_sel))
    else:
        reg = tape.const(0.0)
    return tape.add(cls, reg), cls, reg


def build_targets(anchors, gts, cfg, rng):
    """Assign + sample for one image; returns the triple :func:`rpn_loss` expects."""
    labels, matched = assign_targets(anchors, gts, cfg.pos_iou, cfg.neg_iou)
    pos, neg = sample_anchors(labels, rng, cfg.batch_per_image, cfg.pos_fraction)
    if len(pos):
        bt = encode_boxes(np.asarray(gts, dtype=np.float64)[matched[pos]], anchors[pos])
    else:
        bt = np.zeros((0, 4))
    return pos, neg, bt


# -- inference -----------------------------------------------------------

def nms(boxes, scores, iou_thresh=0.5):
    """Greedy non-maximum suppression.

    Returns indices into ``boxes`` of the kept detections, by descending
    score (earlier index first among equal scores).
    """
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = kernels.nms_sorted(boxes[order], iou_thresh)
    return order[keep]


def postprocess(anchors, logits, deltas, image_size, cfg):
    """Boxes and scores for one image: threshold, top-k, drop empty boxes, NMS."""
    logits = np.asarray(logits, dtype=np.float64)
    scores = 0.5 * (np.tanh(0.5 * logits) + 1)
    keep = np.flatnonzero(scores >= cfg.score_thresh)
    keep = keep[np.argsort(-scores[keep], kind="stable")][:cfg.pre_nms_top_k]
    boxes = decode_boxes(anchors[keep], np.asarray(deltas, dtype=np.float64)[keep], image_size)
    scores = scores[keep]
    ok = (boxes[:, 2] > boxes[:, 0]) & (boxes[:, 3] > boxes[:, 1])
    boxes, scores = boxes[ok], scores[ok]
    k = nms(boxes, scores, cfg.nms_iou)
    return boxes[k], scores[k]
