import numpy as np
import pytest

from swinfe.autodiff import ShapeError, Tape, Tensor
from swinfe.backbone import ConfigError
from swinfe.gradcheck import MODEL_TOL, check_tensors
from swinfe.neck import (NeckConfig, fefpn_forward, fpn_forward, init_neck, neck_forward,
                         pafpn_forward, topdown_path)
from swinfe.nn import identity_conv3x3

SIDES = (16, 8, 4, 2)


def pyramid(rng, channels, sides=SIDES, B=1):
    return [rng.standard_normal((B, c, s, s)) for c, s in zip(channels, sides)]


def neck_params(kind, in_ch, C, seed=0, dtype=np.float64):
    store = init_neck(NeckConfig(kind=kind, channels=C), in_ch, np.random.default_rng(seed),
                      dtype=dtype)
    return {k[len("neck."):]: v for k, v in store.items()}


def identity_path(p, path, C):
    for i in range(4):
        p[f"td{path}.{i}.weight"] = Tensor(identity_conv3x3(C))
        p[f"td{path}.{i}.bias"] = Tensor(np.zeros(C))


def run(fn, levels, p, cfg):
    t = Tape(np.float64)
    return [o.data for o in fn(t, [t.const(x) for x in levels], p, cfg)]


def test_topdown_factor_zero_identity_is_noop(rng):
    C = 4
    p = {}
    identity_path(p, 0, C)
    prev = pyramid(rng, [C] * 4)
    t = Tape(np.float64)
    out = topdown_path(t, [t.const(x) for x in prev], p, 0.0, False)
    for a, b in zip(out, prev):
        assert np.array_equal(a.data, b)


def test_topdown_hand_arithmetic():
    # level0 = 1 + 0.5 * up(level1'), level1' = 2 + 0.5 * up(level2') = 2
    C = 2
    p = {}
    identity_path(p, 0, C)
    prev = [np.ones((1, C, 8, 8)), np.full((1, C, 4, 4), 2.0),
            np.zeros((1, C, 2, 2)), np.zeros((1, C, 1, 1))]
    t = Tape(np.float64)
    out = topdown_path(t, [t.const(x) for x in prev], p, 0.5, False)
    assert np.array_equal(out[1].data, prev[1])
    assert np.array_equal(out[0].data, np.full((1, C, 8, 8), 2.0))


def test_topdown_with_matching_is_fpn(rng):
    in_ch = (8, 16, 32, 64)
    cfg = NeckConfig(kind="fpn", channels=8)
    p = neck_params("fpn", in_ch, 8)
    stages = pyramid(rng, in_ch)
    t = Tape(np.float64)
    a = topdown_path(t, [t.const(x) for x in stages], p, 1.0, True)
    b = run(fpn_forward, stages, p, cfg)
    for x, y in zip(a, b):
        assert np.array_equal(x.data, y)


def test_fpn_zero_laterals_give_zero(rng):
    in_ch = (8, 16, 32, 64)
    p = neck_params("fpn", in_ch, 8)
    for i in range(4):
        p[f"lateral.{i}.weight"] = Tensor(np.zeros_like(p[f"lateral.{i}.weight"].data))
    out = run(fpn_forward, pyramid(rng, in_ch), p, NeckConfig(kind="fpn", channels=8))
    assert all(not o.any() for o in out)


def test_fpn_coarsest_equals_lateral(rng):
    C = 4
    p = neck_params("fpn", (C,) * 4, C)
    identity_path(p, 0, C)
    for i in range(4):
        p[f"lateral.{i}.weight"] = Tensor(np.eye(C).reshape(C, C, 1, 1))
    stages = pyramid(rng, (C,) * 4)
    out = run(fpn_forward, stages, p, NeckConfig(kind="fpn", channels=C))
    assert np.array_equal(out[3], stages[3])


def test_swin_t_sized_fpn_shapes():
    in_ch = (96, 192, 384, 768)
    p = neck_params("fpn", in_ch, 256, dtype=np.float32)
    t = Tape(np.float32)
    stages = [t.const(np.zeros((1, c, s, s), np.float32)) for c, s in zip(in_ch, (64, 32, 16, 8))]
    for kind, fn in (("fpn", fpn_forward),):
        out = fn(t, stages, p, NeckConfig(kind=kind, channels=256))
        assert [o.shape for o in out] == [(1, 256, s, s) for s in (64, 32, 16, 8)]


def test_fefpn_residual_doubling(rng):
    in_ch = (8, 16, 32, 64)
    C = 8
    cfg = NeckConfig(kind="fefpn", channels=C, fusion_factors=(1.0, 0.0, 0.0))
    p = neck_params("fefpn", in_ch, C, seed=3)
    identity_path(p, 1, C)
    identity_path(p, 2, C)
    stages = pyramid(rng, in_ch)
    final = run(fefpn_forward, stages, p, cfg)
    p1 = run(fpn_forward, stages, p, cfg)
    for i in range(3):
        assert np.array_equal(final[i], 2 * p1[i])
    assert np.array_equal(final[3], p1[3])


def test_fefpn_topdown_sensitivity(rng):
    in_ch = (8, 16, 32, 64)
    cfg = NeckConfig(kind="fefpn", channels=8)
    p = neck_params("fefpn", in_ch, 8)
    stages = pyramid(rng, in_ch)
    base = run(fefpn_forward, stages, p, cfg)
    stages[3] = stages[3] + rng.standard_normal(stages[3].shape)
    moved = run(fefpn_forward, stages, p, cfg)
    for a, b in zip(base, moved):
        assert np.abs(a - b).max() > 0


def test_fefpn_parameter_audit():
    p = neck_params("fefpn", (96, 192, 384, 768), 256, dtype=np.float32)
    for path in (1, 2):
        convs = {k: v.shape for k, v in p.items() if k.startswith(f"td{path}.") and k.endswith("weight")}
        assert len(convs) == 4
        assert all(s[2:] == (3, 3) and s[:2] == (256, 256) for s in convs.values())
    one_by_one = [k for k, v in p.items() if v.ndim == 4 and v.shape[2:] == (1, 1)]
    assert sorted(one_by_one) == [f"lateral.{i}.weight" for i in range(4)]
    fpn = neck_params("fpn", (96, 192, 384, 768), 256, dtype=np.float32)
    assert set(fpn) < set(p)


def test_pafpn_shapes_and_zero_bottom_up(rng):
    in_ch = (8, 16, 32, 64)
    cfg = NeckConfig(kind="pafpn", channels=8)
    p = neck_params("pafpn", in_ch, 8)
    stages = pyramid(rng, in_ch)
    out = run(pafpn_forward, stages, p, cfg)
    fp = run(fpn_forward, stages, p, cfg)
    assert [o.shape for o in out] == [o.shape for o in fp]
    for i in range(3):
        for name in (f"bu.{i}", f"down.{i}"):
            p[f"{name}.weight"] = Tensor(np.zeros_like(p[f"{name}.weight"].data))
    out = run(pafpn_forward, stages, p, cfg)
    assert np.array_equal(out[0], fp[0])
    assert all(not o.any() for o in out[1:])


@pytest.mark.parametrize("kind", ["pafpn", "fefpn"])
def test_neck_gradients(kind):
    rng = np.random.default_rng(5)
    in_ch = (4, 8, 16, 32)
    cfg = NeckConfig(kind=kind, channels=4)
    store = init_neck(cfg, in_ch, rng, dtype=np.float64)
    for v in store.values():
        v.data = v.data + rng.standard_normal(v.shape) * 0.05
    stages = [Tensor(x) for x in pyramid(rng, in_ch, (8, 4, 2, 1))]
    w = [rng.standard_normal((1, 4, s, s)) for s in (8, 4, 2, 1)]

    def build(t):
        out = neck_forward(t, stages, store, cfg)
        return t.sum(t.concat([t.reshape(t.mul(o, wi), (-1,)) for o, wi in zip(out, w)], 0))
    errs = check_tensors(build, dict(store), max_entries=6, rng=rng)
    assert max(e for e, _ in errs.values()) < MODEL_TOL


def test_config_and_shape_errors(rng):
    with pytest.raises(ConfigError):
        NeckConfig(kind="bifpn")
    with pytest.raises(ConfigError):
        NeckConfig(fusion_factors=(1.0, 0.5))
    p = neck_params("fpn", (8, 16, 32, 64), 8)
    bad = pyramid(rng, (8, 16, 32, 64), (16, 8, 8, 2))
    with pytest.raises(ShapeError):
        run(fpn_forward, bad, p, NeckConfig(kind="fpn", channels=8))
    with pytest.raises(ConfigError):
        run(fpn_forward, pyramid(rng, (8, 16, 32, 32)), p, NeckConfig(kind="fpn", channels=8))
