"""Feature-pyramid necks: FPN, PAFPN and the three-path feature-enhancement FPN.

All necks map the four backbone stages (finest first) onto four maps with a
uniform ``channels`` width at unchanged resolution.
"""
from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError
from .backbone import ConfigError
from .nn import ParamStore, conv_params

KINDS = ("fpn", "pafpn", "fefpn")


@dataclass
class NeckConfig:
    kind: str = "fefpn"
    channels: int = 256
    fusion_factors: tuple = (1.0, 0.5, 0.25)
    residual_levels: tuple = (0, 1, 2)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"neck kind {self.kind!r} not in {KINDS}")
        self.fusion_factors = tuple(float(f) for f in self.fusion_factors)
        self.residual_levels = tuple(sorted(set(int(i) for i in self.residual_levels)))
        if len(self.fusion_factors) != 3:
            raise ConfigError("fusion_factors needs one value per top-down path (3)")
        if not set(self.residual_levels) <= {0, 1, 2, 3}:
            raise ConfigError(f"residual_levels {self.residual_levels} outside 0..3")
        if self.channels <= 0:
            raise ConfigError("neck channels must be positive")


def init_neck(cfg, in_channels, rng, store=None, prefix="neck", dtype=np.float32):
    """Parameters for ``cfg.kind``; ``in_channels`` lists the four stage widths."""
    store = ParamStore() if store is None else store
    C = cfg.channels
    for i, cin in enumerate(in_channels):
        conv_params(store, f"{prefix}.lateral.{i}", rng, cin, C, 1, dtype=dtype)
        conv_params(store, f"{prefix}.td0.{i}", rng, C, C, 3, dtype=dtype)
    if cfg.kind == "fefpn":
        for path in (1, 2):
            for i in range(4):
                conv_params(store, f"{prefix}.td{path}.{i}", rng, C, C, 3, dtype=dtype)
    elif cfg.kind == "pafpn":
        for i in range(3):
            conv_params(store, f"{prefix}.down.{i}", rng, C, C, 3, dtype=dtype)
            conv_params(store, f"{prefix}.bu.{i}", rng, C, C, 3, dtype=dtype)
    return store


def _conv(tape, x, p, name, stride=1):
    k = p[f"{name}.weight"]
    half = k.shape[-1] // 2
    # stride 2 on even maps: the trailing pad row/col would never be read
    pad = (half, half - 1) if stride == 2 and half else half
    return tape.conv2d(x, k, stride=stride, pad=pad, bias=p.get(f"{name}.bias"))


def _check_pyramid(levels, channels=None):
    if len(levels) != 4:
        raise ShapeError(f"pyramid needs 4 levels, got {len(levels)}")
    for i in range(3):
        a, b = levels[i].shape, levels[i + 1].shape
        if a[2] != 2 * b[2] or a[3] != 2 * b[3]:
            raise ShapeError(f"level {i} {a[2:]} is not twice level {i + 1} {b[2:]}")
    if channels is not None:
        for i, x in enumerate(levels):
            if x.shape[1] != channels:
                raise ShapeError(f"level {i} has {x.shape[1]} channels, expected {channels}")


def topdown_path(tape, prev, p, factor, use_channel_match, path=0):
    """One top-down pass, coarse to fine.

    ``out_3 = conv(lat_3)``, ``out_i = conv(lat_i + factor * up2x(out_{i+1}))``
    where ``lat_i`` is ``prev_i`` (or its 1x1 projection when
    ``use_channel_match``). Convs are ``td{path}.{i}``.
    """
    _check_pyramid(prev)
    if use_channel_match:
        lat = [_conv(tape, x, p, f"lateral.{i}") for i, x in enumerate(prev)]
    else:
        lat = list(prev)
    out = [None] * 4
    out[3] = _conv(tape, lat[3], p, f"td{path}.3")
    for i in (2, 1, 0):
        up = tape.upsample_nearest_2x(out[i + 1])
        if up.shape != lat[i].shape:
            raise ShapeError(f"top-down shape mismatch at level {i}: {up.shape} vs {lat[i].shape}")
        out[i] = _conv(tape, tape.add_scaled(lat[i], up, factor), p, f"td{path}.{i}")
    return out


def fpn_forward(tape, stages, p, cfg):
    for i, x in enumerate(stages):
        if p[f"lateral.{i}.weight"].shape[1] != x.shape[1]:
            raise ConfigError(f"stage {i} has {x.shape[1]} channels, lateral conv expects "
                              f"{p[f'lateral.{i}.weight'].shape[1]}")
    out = topdown_path(tape, stages, p, cfg.fusion_factors[0], True, path=0)
    _check_pyramid(out, cfg.channels)
    return out


def fefpn_forward(tape, stages, p, cfg):
    """Three top-down paths (factors ``cfg.fusion_factors``) plus identity
    residuals from path 1 to path 3 on ``cfg.residual_levels``."""
    p1 = fpn_forward(tape, stages, p, cfg)
    p2 = topdown_path(tape, p1, p, cfg.fusion_factors[1], False, path=1)
    p3 = topdown_path(tape, p2, p, cfg.fusion_factors[2], False, path=2)
    out = [tape.add(p3[i], p1[i]) if i in cfg.residual_levels else p3[i] for i in range(4)]
    _check_pyramid(out, cfg.channels)
    return out


def pafpn_forward(tape, stages, p, cfg):
    """FPN followed by a bottom-up path with stride-2 3x3 downsampling convs."""
    fp = fpn_forward(tape, stages, p, cfg)
    out = [fp[0]]
    for i in range(3):
        down = _conv(tape, out[i], p, f"down.{i}", stride=2)
        out.append(_conv(tape, tape.add(fp[i + 1], down), p, f"bu.{i}"))
    _check_pyramid(out, cfg.channels)
    return out


def neck_forward(tape, stages, params, cfg, prefix="neck"):
    pre = prefix + "."
    p = {k[len(pre):]: v for k, v in params.items() if k.startswith(pre)}
    fn = {"fpn": fpn_forward, "pafpn": pafpn_forward, "fefpn": fefpn_forward}[cfg.kind]
    return fn(tape, stages, p, cfg)
