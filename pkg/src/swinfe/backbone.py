"""Hierarchical shifted-window transformer backbone.

Inside the stages token maps are kept channels-last, ``[B, H, W, C]``, so
every linear layer is a plain right-multiplication. Stage outputs are
returned channels-first, ``[B, C, H, W]``, for the convolutional neck.
"""
from dataclasses import dataclass
import math

import numpy as np

from .autodiff import ShapeError
from .nn import ParamStore, linear_params, norm_params, trunc_normal

MASK_LARGE = 1e4


class ConfigError(ValueError):
    pass


@dataclass
class SwinConfig:
    embed_dim: int = 96
    depths: tuple = (2, 2, 6, 2)
    heads: tuple = (3, 6, 12, 24)
    window_size: int = 8
    patch_size: int = 4
    in_channels: int = 1
    mlp_ratio: float = 4.0
    use_relative_position_bias: bool = False
    global_attention: bool = False

    def __post_init__(self):
        self.depths = tuple(int(d) for d in self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        if len(self.depths) != 4 or len(self.heads) != 4:
            raise ConfigError("depths and heads need exactly 4 entries")
        for i, (d, h) in enumerate(zip(self.depths, self.heads)):
            if d <= 0 or d % 2:
                raise ConfigError(f"depths[{i}]={d} must be a positive even number")
            if h <= 0 or self.stage_dim(i) % h:
                raise ConfigError(f"heads[{i}]={h} does not divide stage width {self.stage_dim(i)}")
        for name in ("embed_dim", "window_size", "patch_size", "in_channels"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive")
        if self.mlp_ratio <= 0 or int(self.embed_dim * self.mlp_ratio) != self.embed_dim * self.mlp_ratio:
            raise ConfigError(f"mlp_ratio {self.mlp_ratio} must give an integer hidden width")

    @classmethod
    def swin_t(cls, **kw):
        return cls(**kw)

    @classmethod
    def toy(cls, **kw):
        base = dict(embed_dim=8, depths=(2, 2, 2, 2), heads=(1, 2, 4, 8), window_size=4)
        base.update(kw)
        return cls(**base)

    def stage_dim(self, i):
        return self.embed_dim * 2 ** i

    def check_input(self, H, W):
        p, w = self.patch_size, self.window_size
        if H % (p * 8) or W % (p * 8):
            raise ShapeError(f"input {H}x{W} must be divisible by patch_size*8={p * 8}")
        if H % (p * w) or W % (p * w):
            raise ShapeError(f"input {H}x{W} must be divisible by patch_size*window={p * w}")
        for i in range(4):
            self.stage_window(i, H // p >> i, W // p >> i)

    def stage_window(self, i, h, w):
        """(window, shift) actually used by stage ``i`` on an ``h x w`` token map."""
        if self.global_attention:
            if h != w:
                raise ShapeError("global attention mode needs square token maps")
            return h, 0
        win = self.window_size
        if h <= win and w <= win and h == w:
            # the whole map fits in one window: no partition, nothing to shift
            return h, 0
        if h % win or w % win:
            raise ShapeError(f"stage {i} map {h}x{w} not divisible by window {win}")
        return win, win // 2


def init_backbone(cfg, rng, store=None, prefix="backbone", dtype=np.float32):
    store = ParamStore() if store is None else store
    p, C = cfg.patch_size, cfg.embed_dim
    store.new(f"{prefix}.patch_embed.weight",
              trunc_normal(rng, (C, cfg.in_channels, p, p), dtype=dtype))
    store.new(f"{prefix}.patch_embed.bias", np.zeros(C, dtype=dtype))
    for i in range(4):
        dim = cfg.stage_dim(i)
        hidden = int(dim * cfg.mlp_ratio)
        for j in range(cfg.depths[i]):
            b = f"{prefix}.stages.{i}.blocks.{j}"
            norm_params(store, f"{b}.norm1", dim, dtype)
            linear_params(store, f"{b}.attn.qkv", rng, dim, 3 * dim, dtype=dtype)
            linear_params(store, f"{b}.attn.proj", rng, dim, dim, dtype=dtype)
            if cfg.use_relative_position_bias:
                n = (2 * cfg.window_size - 1) ** 2
                store.new(f"{b}.attn.rel_bias_table", trunc_normal(rng, (n, cfg.heads[i]), dtype=dtype))
            norm_params(store, f"{b}.norm2", dim, dtype)
            linear_params(store, f"{b}.mlp.fc1", rng, dim, hidden, dtype=dtype)
            linear_params(store, f"{b}.mlp.fc2", rng, hidden, dim, dtype=dtype)
        if i < 3:
            norm_params(store, f"{prefix}.stages.{i}.merge.norm", 4 * dim, dtype)
            linear_params(store, f"{prefix}.stages.{i}.merge.reduction", rng, 4 * dim, 2 * dim,
                          bias=False, dtype=dtype)
    return store


# -- windows -------------------------------------------------------------

def window_partition(tape, x, w):
    """``[B, H, W, C]`` -> ``[B * H/w * W/w, w*w, C]``, windows and tokens row-major."""
    B, H, W, C = x.shape
    if H % w or W % w:
        raise ShapeError(f"map {H}x{W} not divisible by window {w}")
    x = tape.reshape(x, (B, H // w, w, W // w, w, C))
    x = tape.permute(x, (0, 1, 3, 2, 4, 5))
    return tape.reshape(x, (B * (H // w) * (W // w), w * w, C))


def window_reverse(tape, windows, H, W, w):
    """Inverse of :func:`window_partition`."""
    n, N, C = windows.shape
    if H % w or W % w or N != w * w or n % ((H // w) * (W // w)):
        raise ShapeError(f"{n} windows of {N} tokens do not tile a {H}x{W} map with window {w}")
    B = n // ((H // w) * (W // w))
    x = tape.reshape(windows, (B, H // w, W // w, w, w, C))
    x = tape.permute(x, (0, 1, 3, 2, 4, 5))
    return tape.reshape(x, (B, H, W, C))


def cyclic_shift(tape, x, s):
    """Toroidal roll of a ``[B, H, W, C]`` map by (-s, -s)."""
    if s == 0:
        return x
    H, W = x.shape[1:3]
    if abs(s) >= min(H, W):
        raise ShapeError(f"shift {s} too large for {H}x{W} map")
    return tape.roll(x, (-s, -s), (1, 2))


def _shift_groups(n, w, s):
    # group of each rolled position: which shifted window its source pixel
    # belongs to in the unrolled map (sources wrapped from the far edge get -1)
    if n <= w or s == 0:
        return np.zeros(n, dtype=np.int64)
    src = (np.arange(n) + s) % n
    return (src - s) // w


def build_shift_mask(H, W, w, s):
    """Additive attention bias ``[nW, w*w, w*w]`` for the rolled windows.

    Entries are ``-MASK_LARGE`` between tokens whose source pixels lie in
    different shifted windows of the unrolled map, 0 otherwise.
    """
    if H % w or W % w:
        raise ShapeError(f"map {H}x{W} not divisible by window {w}")
    gy = _shift_groups(H, w, s)
    gx = _shift_groups(W, w, s)
    label = gy[:, None] * (W // w + 2) + gx[None, :]
    lab = label.reshape(H // w, w, W // w, w).transpose(0, 2, 1, 3).reshape(-1, w * w)
    diff = lab[:, :, None] != lab[:, None, :]
    return np.where(diff, -MASK_LARGE, 0.0)


def relative_position_index(window, full=None):
    """Row index into a ``(2*full-1)^2`` bias table for each token pair of a window."""
    full = window if full is None else full
    coords = np.stack(np.meshgrid(np.arange(window), np.arange(window), indexing="ij")).reshape(2, -1)
    rel = coords[:, :, None] - coords[:, None, :] + (full - 1)
    return rel[0] * (2 * full - 1) + rel[1]


# -- attention -----------------------------------------------------------

def window_msa(tape, x, p, heads, mask=None, rel_index=None):
    """Multi-head self-attention inside each window of ``x: [nWB, N, C]``.

    ``p`` holds ``qkv.weight/bias``, ``proj.weight/bias`` (and
    ``rel_bias_table`` when ``rel_index`` is given). ``mask`` is the
    ``[nW, N, N]`` additive bias for shifted windows.
    """
    nwb, N, C = x.shape
    if C % heads:
        raise ConfigError(f"token dim {C} not divisible by {heads} heads")
    d = C // heads
    qkv = tape.linear(x, p["qkv.weight"], p["qkv.bias"], tag="attn_proj")
    qkv = tape.permute(tape.reshape(qkv, (nwb, N, 3, heads, d)), (2, 0, 3, 1, 4))
    q = tape.scale(tape.getitem(qkv, 0), 1.0 / math.sqrt(d))
    k = tape.getitem(qkv, 1)
    v = tape.getitem(qkv, 2)
    attn = tape.matmul(q, tape.permute(k, (0, 1, 3, 2)), tag="attn_core")
    if rel_index is not None:
        bias = tape.take_rows(p["rel_bias_table"], rel_index.reshape(-1))
        bias = tape.permute(tape.reshape(bias, (N, N, heads)), (2, 0, 1))
        attn = tape.add(attn, tape.reshape(bias, (1, heads, N, N)))
    if mask is not None:
        nw = mask.shape[0]
        attn = tape.reshape(attn, (nwb // nw, nw, heads, N, N))
        attn = tape.add(attn, tape.const(mask[None, :, None]))
        attn = tape.reshape(attn, (nwb, heads, N, N))
    attn = tape.softmax_lastdim(attn)
    out = tape.matmul(attn, v, tag="attn_core")
    out = tape.reshape(tape.permute(out, (0, 2, 1, 3)), (nwb, N, C))
    return tape.linear(out, p["proj.weight"], p["proj.bias"], tag="attn_proj")


def mlp(tape, x, p):
    h = tape.gelu(tape.linear(x, p["fc1.weight"], p["fc1.bias"], tag="mlp"))
    return tape.linear(h, p["fc2.weight"], p["fc2.bias"], tag="mlp")


def swin_block(tape, x, p, heads, window, shift, rel_index=None):
    """One pre-norm block on ``[B, H, W, C]``; ``shift > 0`` gives the SW-MSA variant."""
    B, H, W, C = x.shape
    h = tape.layer_norm(x, p["norm1.weight"], p["norm1.bias"])
    h = cyclic_shift(tape, h, shift)
    mask = build_shift_mask(H, W, window, shift) if shift else None
    win = window_partition(tape, h, window)
    win = window_msa(tape, win, _sub(p, "attn"), heads, mask, rel_index)
    h = window_reverse(tape, win, H, W, window)
    h = cyclic_shift(tape, h, -shift)
    x = tape.add(x, h)
    h = mlp(tape, tape.layer_norm(x, p["norm2.weight"], p["norm2.bias"]), _sub(p, "mlp"))
    return tape.add(x, h)


def swin_block_pair(tape, x, p_regular, p_shifted, heads, window, rel_index=None):
    """Regular-window block followed by the shifted-window block (shift = window // 2)."""
    x = swin_block(tape, x, p_regular, heads, window, 0, rel_index)
    return swin_block(tape, x, p_shifted, heads, window, window // 2, rel_index)


def patch_merging(tape, x, p):
    """``[B, H, W, C]`` -> ``[B, H/2, W/2, 2C]``: gather 2x2 neighbourhoods, norm, project."""
    B, H, W, C = x.shape
    if H % 2 or W % 2:
        raise ShapeError(f"patch merging needs even sides, got {H}x{W}")
    x = tape.reshape(x, (B, H // 2, 2, W // 2, 2, C))
    # channel blocks ordered (0,0), (1,0), (0,1), (1,1) in (row, col) offsets
    x = tape.permute(x, (0, 1, 3, 4, 2, 5))
    x = tape.reshape(x, (B, H // 2, W // 2, 4 * C))
    x = tape.layer_norm(x, p["norm.weight"], p["norm.bias"])
    return tape.matmul(x, p["reduction.weight"], tag="merge")


def patch_embed(tape, image, p, cfg):
    """``[B, Cin, H, W]`` -> ``[B, C, H/patch, W/patch]`` via a strided patch projection."""
    H, W = image.shape[2:]
    ps = cfg.patch_size
    if H % ps or W % ps:
        raise ShapeError(f"image {H}x{W} not divisible by patch size {ps}")
    return tape.conv2d(image, p["patch_embed.weight"], stride=ps, bias=p["patch_embed.bias"],
                       tag="patch_embed")


def _sub(p, prefix):
    pre = prefix + "."
    return {k[len(pre):]: v for k, v in p.items() if k.startswith(pre)}


def backbone_forward(tape, image, params, cfg, prefix="backbone"):
    """Run the four stages; returns ``[B, C*2^i, H/(4*2^i), W/(4*2^i)]`` maps, finest first."""
    p = _sub(params, prefix)
    image = tape.const(image) if not hasattr(image, "data") else image
    cfg.check_input(*image.shape[2:])
    x = patch_embed(tape, image, p, cfg)
    x = tape.permute(x, (0, 2, 3, 1))
    outs = []
    for i in range(4):
        h, w = x.shape[1:3]
        window, shift = cfg.stage_window(i, h, w)
        rel_index = None
        if cfg.use_relative_position_bias:
            # clamped windows index the centre of the full-size table
            rel_index = relative_position_index(window, cfg.window_size)
        for j in range(cfg.depths[i]):
            bp = _sub(p, f"stages.{i}.blocks.{j}")
            x = swin_block(tape, x, bp, cfg.heads[i], window, shift if j % 2 else 0, rel_index)
        outs.append(tape.permute(x, (0, 3, 1, 2)))
        if i < 3:
            x = patch_merging(tape, x, _sub(p, f"stages.{i}.merge"))
    return outs


def attention_flops(flops):
    """MACs spent in attention (projections + score/value products)."""
    return flops.get("attn_proj", "attn_core")
