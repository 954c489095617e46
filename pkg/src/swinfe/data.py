"""Synthetic single-look SAR scenes: exponential speckle with bright ship blobs."""
from dataclasses import dataclass

import numpy as np

BACKGROUND_LEVEL = 1.0
MAX_TRIES = 200


class GenerationError(RuntimeError):
    pass


@dataclass
class SynthConfig:
    image_size: int = 64
    ships_min: int = 1
    ships_max: int = 3
    length_min: float = 6.0
    length_max: float = 20.0
    aspect_min: float = 2.0
    aspect_max: float = 4.0
    intensity_gain: float = 4.0
    seed: int = 42

    def __post_init__(self):
        if not 0 <= self.ships_min <= self.ships_max:
            raise ValueError(f"bad ship count range {self.ships_min}..{self.ships_max}")
        if not 0 < self.length_min <= self.length_max < self.image_size:
            raise ValueError(f"bad ship length range {self.length_min}..{self.length_max}")
        if not 0 < self.aspect_min <= self.aspect_max:
            raise ValueError(f"bad aspect range {self.aspect_min}..{self.aspect_max}")
        if self.intensity_gain <= 1:
            raise ValueError("intensity_gain must exceed 1")


@dataclass
class Sample:
    image: np.ndarray   # [1, H, W], non-negative intensities
    gt: np.ndarray      # [K, 4] boxes (x1, y1, x2, y2), pixel-edge coordinates
    ship_mask: np.ndarray


def _rng(cfg, index):
    return np.random.default_rng(np.random.SeedSequence([cfg.seed & (2 ** 64 - 1), index]))


def synth_sample(cfg, index):
    """Deterministic scene number ``index`` of the dataset defined by ``cfg``.

    Ships are rotated filled ellipses at ``intensity_gain`` times the
    background level; the whole image then gets unit-mean exponential speckle.
    """
    rng = _rng(cfg, index)
    S = cfg.image_size
    n_ships = int(rng.integers(cfg.ships_min, cfg.ships_max + 1))
    yy, xx = np.mgrid[0:S, 0:S] + 0.5
    mask = np.zeros((S, S), dtype=bool)
    boxes = []
    for _ in range(n_ships):
        for _ in range(MAX_TRIES):
            length = rng.uniform(cfg.length_min, cfg.length_max)
            width = length / rng.uniform(cfg.aspect_min, cfg.aspect_max)
            theta = rng.uniform(0, np.pi)
            margin = length / 2 + 1
            cx, cy = rng.uniform(margin, S - margin, size=2)
            c, s = np.cos(theta), np.sin(theta)
            u = (xx - cx) * c + (yy - cy) * s
            v = -(xx - cx) * s + (yy - cy) * c
            blob = (u / (length / 2)) ** 2 + (v / (width / 2)) ** 2 <= 1.0
            if not blob.any():
                continue
            rows = np.flatnonzero(blob.any(axis=1))
            cols = np.flatnonzero(blob.any(axis=0))
            box = (cols[0], rows[0], cols[-1] + 1, rows[-1] + 1)
            # one-pixel clearance between ships keeps boxes from touching
            x1, y1, x2, y2 = max(box[0] - 1, 0), max(box[1] - 1, 0), box[2] + 1, box[3] + 1
            if mask[y1:y2, x1:x2].any() or any(_overlap(box, b) for b in boxes):
                continue
            mask |= blob
            boxes.append(box)
            break
        else:
            raise GenerationError(f"could not place {n_ships} non-overlapping ships in a "
                                  f"{S}x{S} image after {MAX_TRIES} tries (seed={cfg.seed}, "
                                  f"index={index})")
    reflect = np.where(mask, BACKGROUND_LEVEL * cfg.intensity_gain, BACKGROUND_LEVEL)
    image = reflect * rng.exponential(1.0, size=(S, S))
    gt = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    return Sample(image[None].astype(np.float32), gt, mask)


def _overlap(a, b):
    return a[0] < b[2] and b[0] < a[2] and a[1] < b[3] and b[1] < a[3]


def normalize(image):
    """Zero-mean, unit-variance copy of one image."""
    image = np.asarray(image, dtype=np.float64)
    sd = image.std()
    return (image - image.mean()) / (sd if sd > 0 else 1.0)


def split_indices(n_train, n_eval):
    """Train and eval index ranges of the generated dataset (train first)."""
    return np.arange(n_train), np.arange(n_train, n_train + n_eval)


def write_pgm(path, image):
    """Min-max scale a 2-D array to 8 bits and write binary PGM (P5)."""
    img = np.asarray(image, dtype=np.float64)
    lo, hi = img.min(), img.max()
    scaled = np.zeros_like(img) if hi <= lo else (img - lo) / (hi - lo) * 255.0
    data = np.round(scaled).astype(np.uint8)
    h, w = data.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(data.tobytes())
