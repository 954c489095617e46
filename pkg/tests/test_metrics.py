import itertools
import math
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from swinfe.metrics import (average_precision, evaluate, format_table, iou, match_detections,
                            pr_curve)


def envelope_oracle(precision, recall):
    """Brute force: at every recall step take the best precision at that or any later rank."""
    p, r = list(map(float, precision)), list(map(float, recall))
    terms, prev = [], 0.0
    for k in range(len(p)):
        terms.append((r[k] - prev) * max(p[k:]))
        prev = r[k]
    return math.fsum(terms)


def exact_ap(flags, n_gt):
    tp, prec = 0, []
    for k, f in enumerate(flags, 1):
        tp += f
        prec.append(Fraction(tp, k))
    return sum((max(prec[k:]) for k, f in enumerate(flags) if f), Fraction(0)) / n_gt


def all_cases(max_len=6):
    for n in range(max_len + 1):
        for flags in itertools.product((False, True), repeat=n):
            tp = sum(flags)
            for n_gt in range(max(tp, 1), tp + 3):
                yield list(flags), n_gt


def test_ap_equals_envelope_oracle_exhaustively():
    count = 0
    for flags, n_gt in all_cases():
        p, r = pr_curve(flags, n_gt)
        ap = average_precision(p, r)
        assert ap == envelope_oracle(p, r), (flags, n_gt)
        assert abs(ap - float(exact_ap(flags, n_gt))) < 1e-12, (flags, n_gt)
        count += 1
    assert count > 300


def test_ap_hand_cases():
    assert average_precision(*pr_curve([True], 1)) == 1.0
    assert average_precision(*pr_curve([True, False], 2)) == 0.5
    assert average_precision(*pr_curve([], 3)) == 0.0


def test_pr_curve_examples():
    p, r = pr_curve([True], 1)
    assert p.tolist() == [1.0] and r.tolist() == [1.0]
    p, r = pr_curve([True, False], 2)
    assert p.tolist() == [1.0, 0.5] and r.tolist() == [0.5, 0.5]
    p, r = pr_curve([False, True], 1)
    assert p.tolist() == [0.0, 0.5] and r.tolist() == [0.0, 1.0]
    with pytest.raises(ValueError):
        pr_curve([True], 0)


def test_iou_examples():
    a = [0.0, 0, 1, 1]
    assert iou(a, a) == 1.0
    assert iou(a, [2.0, 2, 3, 3]) == 0.0
    assert iou(a, [0.5, 0, 1.5, 1]) == pytest.approx(1 / 3)


def test_match_examples():
    gt = [np.array([[0.0, 0, 10, 10]])]
    assert match_detections([(gt[0], np.array([0.9]))], gt).tolist() == [True]
    dets = [(np.array([[0.0, 0, 10, 10], [0, 0, 10, 10]]), np.array([0.8, 0.9]))]
    assert match_detections(dets, gt).tolist() == [True, False]


def greedy_oracle(boxes, scores, gts, thr):
    order = sorted(range(len(scores)), key=lambda i: (-scores[i], i))
    used, flags = set(), []
    for i in order:
        best, bi = -1.0, None
        for g in range(len(gts)):
            if g in used:
                continue
            v = iou(boxes[i], gts[g])
            if v > best:
                best, bi = v, g
        hit = bi is not None and best >= thr
        if hit:
            used.add(bi)
        flags.append(hit)
    return flags


@pytest.mark.parametrize("seed", range(20))
def test_match_matches_greedy_oracle(seed):
    rng = np.random.default_rng(seed)
    gts = rng.uniform(0, 10, (3, 2))
    gts = np.concatenate([gts, gts + rng.uniform(2, 6, (3, 2))], 1)
    dets = gts[rng.integers(0, 3, 6)] + rng.normal(0, 1.0, (6, 4))
    dets[:, 2:] = np.maximum(dets[:, 2:], dets[:, :2] + 0.5)
    scores = rng.random(6)
    got = match_detections([(dets, scores)], [gts], 0.5).tolist()
    assert got == greedy_oracle(dets, scores, gts, 0.5)


def test_evaluate_counts_and_empty():
    gts = [np.array([[0.0, 0, 10, 10]]), np.zeros((0, 4))]
    dets = [(np.array([[0.0, 0, 10, 10]]), np.array([0.9])),
            (np.array([[5.0, 5, 8, 8]]), np.array([0.95]))]
    res = evaluate(dets, gts)
    assert (res.tp, res.fp, res.n_gt) == (1, 1, 1)
    assert res.ap == pytest.approx(0.5)
    empty = evaluate([(np.zeros((0, 4)), np.zeros(0))], [np.zeros((0, 4))])
    assert empty.ap == 0.0


def test_format_table():
    out = format_table([("Swin-T", "FPN", 0.5), ("Swin-T", "FEFPN", 0.625)], title="t",
                       footer=["ref"])
    lines = out.splitlines()
    assert lines[0] == "t"
    assert [c.strip() for c in lines[1].split("|")] == ["Backbone", "Neck", "AP(%)"]
    assert lines[3].split("|")[2].strip() == "50.00"
    assert lines[-1] == "ref"


flag_lists = st.lists(st.booleans(), max_size=30)


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(0, 5))
def test_ap_bounded_and_exact(flags, extra):
    n_gt = max(sum(flags), 1) + extra
    ap = average_precision(*pr_curve(flags, n_gt))
    assert 0.0 <= ap <= 1.0
    assert abs(ap - float(exact_ap(flags, n_gt))) < 1e-12


@settings(max_examples=200, deadline=None)
@given(flag_lists, st.integers(0, 5))
def test_appending_false_positive_never_raises_ap(flags, extra):
    n_gt = max(sum(flags), 1) + extra
    a = average_precision(*pr_curve(flags, n_gt))
    b = average_precision(*pr_curve(flags + [False], n_gt))
    assert b <= a


@settings(max_examples=200, deadline=None)
@given(st.integers(1, 20), st.integers(0, 5))
def test_all_hits_first_gives_recall_ap(tp, extra):
    n_gt = tp + extra
    flags = [True] * tp + [False] * extra
    assert average_precision(*pr_curve(flags, n_gt)) == pytest.approx(tp / n_gt)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.tuples(st.floats(0, 50), st.floats(0, 50), st.floats(0.5, 20), st.floats(0.5, 20)),
                min_size=2, max_size=2))
def test_iou_symmetric_and_bounded(pair):
    (x1, y1, w1, h1), (x2, y2, w2, h2) = pair
    a, b = [x1, y1, x1 + w1, y1 + h1], [x2, y2, x2 + w2, y2 + h2]
    v = iou(a, b)
    assert 0.0 <= v <= 1.0 and v == iou(b, a)
