"""Finite-difference gradient checks at float64.

Each check builds a scalar loss on a fresh tape, back-propagates once, and
compares selected gradient entries with central differences (``h = 1e-5``).
Relative error is ``|analytic - numeric| / max(|analytic|, |numeric|, floor)``;
the floor keeps entries whose true gradient is ~0 from dividing noise by noise.
"""
from dataclasses import dataclass

import numpy as np

from .autodiff import Tape, Tensor, numerical_grad
from .backbone import SwinConfig, init_backbone, swin_block_pair, patch_merging
from .head import HeadConfig, build_targets, rpn_loss
from .model import Detector
from .neck import NeckConfig
from .data import SynthConfig, normalize, synth_sample

H_STEP = 1e-5
REL_FLOOR = 1e-6
OPS_TOL = 1e-4
MODEL_TOL = 1e-3


@dataclass
class CheckResult:
    group: str
    worst: float
    tol: float
    n_checked: int

    @property
    def ok(self):
        return self.worst < self.tol

    def line(self):
        status = "PASS" if self.ok else "FAIL"
        return f"{status}  {self.group:<40s} worst rel err {self.worst:.3e} (tol {self.tol:g}, {self.n_checked} entries)"


def rel_error(a, n, floor=REL_FLOOR):
    a, n = np.asarray(a, dtype=np.float64), np.asarray(n, dtype=np.float64)
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def check_tensors(build_loss, tensors, max_entries=None, rng=None, corrupt=None):
    """Worst relative error over entries of ``tensors`` (``name -> Tensor``).

    ``build_loss(tape)`` must return a scalar tensor. With ``max_entries``
    only that many random entries per tensor are probed.
    """
    tape = Tape(np.float64, corrupt=corrupt)
    loss = build_loss(tape)
    tape.backward(loss, tensors.values())
    analytic = {k: t.grad.copy() for k, t in tensors.items()}

    def f():
        return float(build_loss(Tape(np.float64)).data)

    out = {}
    for k, t in tensors.items():
        n = t.size
        if max_entries is None or n <= max_entries:
            idx = np.arange(n)
        else:
            idx = np.sort(rng.choice(n, size=max_entries, replace=False))
        num = numerical_grad(f, t.data, idx, H_STEP)
        out[k] = (float(rel_error(analytic[k].reshape(-1)[idx], num).max()), len(idx))
    return out


def _leaf(rng, shape, scale=1.0):
    return Tensor(rng.standard_normal(shape) * scale, requires_grad=True)


def op_cases(rng):
    """``name -> (inputs, loss builder)`` for every differentiable primitive."""
    def weighted(tape, out, w):
        return tape.sum(tape.mul(out, w))

    cases = {}
    a, b = _leaf(rng, (3, 4)), _leaf(rng, (4, 2))
    w = rng.standard_normal((3, 2))
    cases["matmul"] = ({"a": a, "b": b}, lambda t: weighted(t, t.matmul(a, b), w))
    ba, bb = _leaf(rng, (2, 3, 4)), _leaf(rng, (4, 5))
    wb = rng.standard_normal((2, 3, 5))
    cases["matmul_batched"] = ({"a": ba, "b": bb}, lambda t: weighted(t, t.matmul(ba, bb), wb))
    x = _leaf(rng, (5,))
    w5 = rng.standard_normal(5)
    cases["softmax"] = ({"x": x}, lambda t: weighted(t, t.softmax_lastdim(x), w5))
    xs = _leaf(rng, (2, 3, 6), 3.0)
    w6 = rng.standard_normal((2, 3, 6))
    cases["softmax_batched"] = ({"x": xs}, lambda t: weighted(t, t.softmax_lastdim(xs), w6))
    xl, g, be = _leaf(rng, (3, 6)), _leaf(rng, (6,)), _leaf(rng, (6,))
    wl = rng.standard_normal((3, 6))
    cases["layer_norm"] = ({"x": xl, "gamma": g, "beta": be},
                           lambda t: weighted(t, t.layer_norm(xl, g, be), wl))
    for k, s, p in ((1, 1, 0), (3, 1, 1), (3, 2, (1, 0))):
        xc, kc = _leaf(rng, (2, 3, 6, 6)), _leaf(rng, (4, 3, k, k))
        bias = _leaf(rng, (4,))
        tmp = Tape(np.float64).conv2d(Tensor(xc.data), Tensor(kc.data), stride=s, pad=p)
        wc = rng.standard_normal(tmp.shape)
        cases[f"conv2d_{k}x{k}_s{s}"] = (
            {"x": xc, "kernel": kc, "bias": bias},
            lambda t, xc=xc, kc=kc, bias=bias, s=s, p=p, wc=wc:
                weighted(t, t.conv2d(xc, kc, stride=s, pad=p, bias=bias), wc))
    xu = _leaf(rng, (1, 2, 3, 3))
    wu = rng.standard_normal((1, 2, 6, 6))
    cases["upsample_nearest_2x"] = ({"x": xu}, lambda t: weighted(t, t.upsample_nearest_2x(xu), wu))
    p1, p2 = _leaf(rng, (2, 3)), _leaf(rng, (2, 3))
    w23 = rng.standard_normal((2, 3))
    cases["add_scaled"] = ({"a": p1, "b": p2}, lambda t: weighted(t, t.add_scaled(p1, p2, 0.37), w23))
    xg = _leaf(rng, (4, 5))
    w45 = rng.standard_normal((4, 5))
    cases["gelu"] = ({"x": xg}, lambda t: weighted(t, t.gelu(xg), w45))
    xr = Tensor(rng.uniform(0.1, 1.0, (4, 5)) * rng.choice([-1, 1], (4, 5)), requires_grad=True)
    cases["relu"] = ({"x": xr}, lambda t: weighted(t, t.relu(xr), w45))
    xe = _leaf(rng, (4, 5), 0.5)
    cases["sigmoid_exp"] = ({"x": xe}, lambda t: weighted(t, t.add(t.sigmoid(xe), t.exp(xe)), w45))
    xb = _leaf(rng, (7,), 2.0)
    yb = (rng.random(7) > 0.5).astype(float)
    cases["bce_with_logits"] = ({"x": xb}, lambda t: t.bce_with_logits_sum(xb, yb))
    xsl = Tensor(rng.standard_normal((6, 4)) * 0.5, requires_grad=True)
    tsl = rng.standard_normal((6, 4)) * 0.5
    cases["smooth_l1"] = ({"x": xsl}, lambda t: t.smooth_l1_sum(xsl, tsl, 1.0 / 9))
    xp = _leaf(rng, (2, 4, 4, 3))
    wp = rng.standard_normal((2, 4, 4, 3))
    cases["roll_permute_reshape"] = (
        {"x": xp}, lambda t: weighted(t, t.reshape(t.permute(t.roll(xp, (-1, -1), (1, 2)), (0, 2, 1, 3)),
                                                   (2, 4, 4, 3)), wp))
    xt = _leaf(rng, (5, 3))
    wt = rng.standard_normal((6, 3))
    cases["take_rows"] = ({"x": xt}, lambda t: weighted(t, t.take_rows(xt, [0, 2, 2, 4, 1, 0]), wt))
    pm = {"norm.weight": _leaf(rng, (12,)), "norm.bias": _leaf(rng, (12,)),
          "reduction.weight": _leaf(rng, (12, 6), 0.3)}
    xm2 = Tensor(rng.standard_normal((2, 4, 4, 3)), requires_grad=True)
    wm = rng.standard_normal((2, 2, 2, 6))
    cases["patch_merging"] = ({"x": xm2, **pm},
                              lambda t: weighted(t, patch_merging(t, xm2, pm), wm))
    return cases


def check_ops(seed=0, corrupt=None):
    rng = np.random.default_rng(seed)
    results = []
    for name, (tensors, build) in op_cases(rng).items():
        errs = check_tensors(build, tensors, corrupt=corrupt)
        worst = max(e for e, _ in errs.values())
        results.append(CheckResult(f"op:{name}", worst, OPS_TOL, sum(n for _, n in errs.values())))
    return results


def _random_params(store, rng, scale=0.1):
    for k, p in store.items():
        if p.data.std() == 0 and "norm" not in k:
            p.data = rng.standard_normal(p.shape) * scale
        p.data = p.data.astype(np.float64)
    return store


def check_block(seed=0, corrupt=None, max_entries=None):
    """Regular + shifted block pair on an 8x8 map, window 4 (masked shift)."""
    rng = np.random.default_rng(seed)
    cfg = SwinConfig(embed_dim=8, depths=(2, 2, 2, 2), heads=(2, 2, 4, 8), window_size=4)
    store = _random_params(init_backbone(cfg, rng, dtype=np.float64), rng)
    pre = "backbone.stages.0.blocks."
    p0 = {k[len(pre) + 2:]: v for k, v in store.items() if k.startswith(pre + "0.")}
    p1 = {k[len(pre) + 2:]: v for k, v in store.items() if k.startswith(pre + "1.")}
    x = Tensor(rng.standard_normal((1, 8, 8, 8)), requires_grad=True)
    w = rng.standard_normal((1, 8, 8, 8))
    tensors = {"x": x, **{f"block0.{k}": v for k, v in p0.items()},
               **{f"block1.{k}": v for k, v in p1.items()}}

    def build(t):
        return t.sum(t.mul(swin_block_pair(t, x, p0, p1, 2, 4), w))
    errs = check_tensors(build, tensors, max_entries, rng, corrupt)
    return _group(errs, "block", MODEL_TOL)


def toy_model_loss(seed=0, neck_kind="fefpn"):
    """Float64 toy detector (C=8, depths 2/2/2/2, 64x64) and a loss builder over fixed targets."""
    rng = np.random.default_rng(seed)
    swin = SwinConfig.toy()
    neck = NeckConfig(kind=neck_kind, channels=8)
    head = HeadConfig(scales=(2.0,), ratios=(0.5, 1.0, 2.0))
    det = Detector.create(swin, neck, head, seed, dtype=np.float64)
    _random_params(det.params, rng, 0.1)
    sample = synth_sample(SynthConfig(image_size=64, seed=seed), 0)
    image = normalize(sample.image)[None]
    anchors = det.anchors((64, 64))
    targets = [build_targets(anchors, sample.gt, head, np.random.default_rng(seed))]

    def build(t):
        logits, deltas = det.forward(t, image)
        return rpn_loss(t, logits, deltas, targets, head.smooth_l1_beta)[0]
    return det, build


def check_model(seed=0, corrupt=None, max_entries=3, neck_kind="fefpn"):
    det, build = toy_model_loss(seed, neck_kind)
    rng = np.random.default_rng(seed + 1)
    errs = check_tensors(build, dict(det.params), max_entries, rng, corrupt)
    return _group(errs, f"model[{neck_kind}]", MODEL_TOL)


def _group(errs, prefix, tol):
    groups = {}
    for k, (e, n) in errs.items():
        key = f"{prefix}:" + ".".join(k.split(".")[:2 if not k.startswith("backbone.stages") else 3])
        w, c = groups.get(key, (0.0, 0))
        groups[key] = (max(w, e), c + n)
    return [CheckResult(k, w, tol, c) for k, (w, c) in groups.items()]


def run(scope, corrupt=None):
    if scope == "ops":
        return check_ops(corrupt=corrupt)
    if scope == "block":
        return check_block(corrupt=corrupt)
    if scope == "model":
        return check_model(corrupt=corrupt)
    raise ValueError(f"unknown gradcheck scope {scope!r}")
