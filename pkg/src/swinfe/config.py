"""Flat ``key = value`` run configuration.

Every key has a default (the toy experiment); a config file and ``--set``
overrides can only change known keys. Values are parsed to the type of the
default; tuple defaults take comma-separated lists.
"""
import numpy as np

from .backbone import ConfigError, SwinConfig
from .data import SynthConfig
from .head import HeadConfig
from .neck import NeckConfig

DEFAULTS = {
    # backbone
    "backbone.embed_dim": 8,
    "backbone.depths": (2, 2, 2, 2),
    "backbone.heads": (1, 2, 4, 8),
    "backbone.window": 4,
    "backbone.patch": 4,
    "backbone.in_channels": 1,
    "backbone.mlp_ratio": 4.0,
    "backbone.rel_pos_bias": False,
    # neck
    "neck.kind": "fefpn",
    "neck.channels": 32,
    "neck.factors": (1.0, 0.5, 0.25),
    "neck.residual_levels": (0, 1, 2),
    # head
    "head.scales": (1.0, 2.0),
    "head.ratios": (0.5, 1.0, 2.0),
    "head.pos_iou": 0.7,
    "head.neg_iou": 0.3,
    "head.batch_per_image": 256,
    "head.pos_fraction": 0.5,
    "head.nms_iou": 0.5,
    "head.score_thresh": 0.05,
    "head.top_k": 300,
    # data
    "data.image_size": 64,
    "data.n_train": 200,
    "data.n_eval": 50,
    "data.ships_min": 1,
    "data.ships_max": 3,
    "data.length_min": 6.0,
    "data.length_max": 20.0,
    "data.aspect_min": 2.0,
    "data.aspect_max": 4.0,
    "data.gain": 4.0,
    # optimizer
    "optim.lr": 1e-4,
    "optim.weight_decay": 0.05,
    "optim.beta1": 0.9,
    "optim.beta2": 0.999,
    "optim.eps": 1e-8,
    # run
    "run.steps": 2000,
    "run.batch_size": 2,
    "run.seed": 42,
    "run.log_every": 1,
    "run.checkpoint_every": 0,
    "run.dtype": "float32",
    # evaluation
    "metrics.iou_thresh": 0.5,
}


def _parse(key, text):
    default = DEFAULTS[key]
    text = text.strip()
    try:
        if isinstance(default, bool):
            low = text.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(text)
            return low in ("true", "1", "yes")
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(v) for v in text.split(",") if v.strip())
        if isinstance(default, int):
            return int(text)
        if isinstance(default, float):
            return float(text)
        return text
    except ValueError:
        raise ConfigError(f"bad value for {key}: {text!r}") from None


def _fmt(v):
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, tuple):
        return ",".join(_fmt(x) for x in v)
    return repr(v) if isinstance(v, float) else str(v)


class RunConfig(dict):
    """Defaults overlaid with file values and overrides, in that order."""

    def __init__(self, values=None):
        super().__init__(DEFAULTS)
        for k, v in (values or {}).items():
            self.set(k, v)

    def set(self, key, value):
        if key not in DEFAULTS:
            raise ConfigError(f"unknown config key: {key}")
        self[key] = _parse(key, value) if isinstance(value, str) else _coerce(key, value)

    @classmethod
    def from_text(cls, text, overrides=()):
        cfg = cls()
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ConfigError(f"line {n}: expected key = value, got {raw!r}")
            k, v = line.split("=", 1)
            cfg.set(k.strip(), v)
        for ov in overrides:
            if "=" not in ov:
                raise ConfigError(f"override {ov!r} is not KEY=VALUE")
            k, v = ov.split("=", 1)
            cfg.set(k.strip(), v)
        return cfg

    @classmethod
    def from_file(cls, path, overrides=()):
        with open(path, encoding="utf-8") as f:
            return cls.from_text(f.read(), overrides)

    def dumps(self):
        return "".join(f"{k} = {_fmt(self[k])}\n" for k in sorted(self))

    # -- typed views -----------------------------------------------------
    @property
    def dtype(self):
        if self["run.dtype"] not in ("float32", "float64"):
            raise ConfigError(f"run.dtype must be float32 or float64, got {self['run.dtype']}")
        return np.dtype(self["run.dtype"])

    def swin(self):
        return SwinConfig(
            embed_dim=self["backbone.embed_dim"], depths=self["backbone.depths"],
            heads=self["backbone.heads"], window_size=self["backbone.window"],
            patch_size=self["backbone.patch"], in_channels=self["backbone.in_channels"],
            mlp_ratio=self["backbone.mlp_ratio"],
            use_relative_position_bias=self["backbone.rel_pos_bias"])

    def neck(self):
        return NeckConfig(kind=self["neck.kind"], channels=self["neck.channels"],
                          fusion_factors=self["neck.factors"],
                          residual_levels=self["neck.residual_levels"])

    def head(self):
        return HeadConfig(
            scales=self["head.scales"], ratios=self["head.ratios"], pos_iou=self["head.pos_iou"],
            neg_iou=self["head.neg_iou"], batch_per_image=self["head.batch_per_image"],
            pos_fraction=self["head.pos_fraction"], score_thresh=self["head.score_thresh"],
            pre_nms_top_k=self["head.top_k"], nms_iou=self["head.nms_iou"])

    def synth(self):
        return SynthConfig(
            image_size=self["data.image_size"], ships_min=self["data.ships_min"],
            ships_max=self["data.ships_max"], length_min=self["data.length_min"],
            length_max=self["data.length_max"], aspect_min=self["data.aspect_min"],
            aspect_max=self["data.aspect_max"], intensity_gain=self["data.gain"],
            seed=self["run.seed"])


def _coerce(key, value):
    default = DEFAULTS[key]
    if isinstance(default, tuple):
        return tuple(type(default[0])(v) for v in value)
    return type(default)(value)
