"""Backbone -> neck -> RPN head assembled into one detector."""
import numpy as np

from .autodiff import Tape
from .backbone import backbone_forward, init_backbone
from .data import normalize
from .head import concat_levels, generate_anchors, head_forward, init_head, postprocess
from .neck import init_neck, neck_forward
from .nn import ParamStore


class Detector:
    def __init__(self, swin_cfg, neck_cfg, head_cfg, params):
        self.swin_cfg = swin_cfg
        self.neck_cfg = neck_cfg
        self.head_cfg = head_cfg
        self.params = params
        self._anchors = {}

    @classmethod
    def create(cls, swin_cfg, neck_cfg, head_cfg, seed, dtype=np.float32):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 0x1A17]))
        store = ParamStore()
        init_backbone(swin_cfg, rng, store, dtype=dtype)
        init_neck(neck_cfg, [swin_cfg.stage_dim(i) for i in range(4)], rng, store, dtype=dtype)
        init_head(head_cfg, neck_cfg.channels, rng, store, dtype=dtype)
        return cls(swin_cfg, neck_cfg, head_cfg, store)

    @classmethod
    def from_run_config(cls, cfg):
        return cls.create(cfg.swin(), cfg.neck(), cfg.head(), cfg["run.seed"], cfg.dtype)

    def astype(self, dtype):
        return Detector(self.swin_cfg, self.neck_cfg, self.head_cfg, self.params.astype(dtype))

    def anchors(self, image_size):
        """All anchors for a square-or-not ``(H, W)`` input, finest level first."""
        key = tuple(image_size)
        if key not in self._anchors:
            H, W = key
            p = self.swin_cfg.patch_size
            shapes = [(H // (p << i), W // (p << i)) for i in range(4)]
            levels = generate_anchors(shapes, key, self.head_cfg.scales, self.head_cfg.ratios)
            self._anchors[key] = np.concatenate(levels)
        return self._anchors[key]

    def forward(self, tape, images):
        """``images [B, Cin, H, W]`` (already normalised) -> ``(logits [B, N], deltas [B, N, 4])``."""
        stages = backbone_forward(tape, images, self.params, self.swin_cfg)
        pyramid = neck_forward(tape, stages, self.params, self.neck_cfg)
        return concat_levels(tape, head_forward(tape, pyramid, self.params))

    def detect(self, images, dtype=None):
        """Post-processed ``(boxes, scores)`` per image for raw intensity images."""
        images = np.asarray(images)
        dtype = dtype or next(iter(self.params.values())).dtype
        batch = np.stack([normalize(im) for im in images]).astype(dtype)
        tape = Tape(dtype)
        logits, deltas = self.forward(tape, batch)
        anchors = self.anchors(images.shape[2:])
        return [postprocess(anchors, logits.data[b], deltas.data[b], images.shape[2:], self.head_cfg)
                for b in range(len(images))]
