"""Training loop, evaluation and the neck ablation driver."""
from dataclasses import dataclass, field
import logging
import os

import numpy as np

from .autodiff import Tape
from .checkpoint import apply_arrays, load_checkpoint, model_arrays, save_checkpoint
from .data import normalize, split_indices, synth_sample
from .head import build_targets, rpn_loss
from .metrics import evaluate as evaluate_dets
from .model import Detector
from .optim import AdamW

log = logging.getLogger(__name__)

LOG_HEADER = "step\tcls\treg\ttotal\n"


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainResult:
    detector: Detector
    optimizer: AdamW
    log_lines: list = field(default_factory=list)
    checkpoint: str = None


class SampleCache:
    def __init__(self, synth_cfg):
        self.cfg = synth_cfg
        self._cache = {}

    def __getitem__(self, index):
        index = int(index)
        if index not in self._cache:
            self._cache[index] = synth_sample(self.cfg, index)
        return self._cache[index]


def batch_indices(step, batch_size, n_train, seed):
    """Training indices for ``step``: epoch-wise seeded permutations, consumed in order."""
    out = []
    for pos in range(step * batch_size, (step + 1) * batch_size):
        epoch, k = divmod(pos, n_train)
        perm = np.random.default_rng(np.random.SeedSequence([seed, 0xE90C, epoch])).permutation(n_train)
        out.append(int(perm[k]))
    return out


def format_log_line(step, cls, reg, total):
    return f"{step}\t{cls!r}\t{reg!r}\t{total!r}\n"


def train_step(detector, optimizer, samples, step, seed):
    """Forward, loss, backward and one optimizer update; returns the loss parts as floats."""
    hcfg = detector.head_cfg
    dtype = next(iter(detector.params.values())).dtype
    images = np.stack([normalize(s.image) for s in samples]).astype(dtype)
    anchors = detector.anchors(images.shape[2:])
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x5A3B, step]))
    targets = [build_targets(anchors, s.gt, hcfg, rng) for s in samples]
    tape = Tape(dtype)
    logits, deltas = detector.forward(tape, images)
    total, cls, reg = rpn_loss(tape, logits, deltas, targets, hcfg.smooth_l1_beta)
    parts = float(cls.data), float(reg.data), float(total.data)
    if not all(np.isfinite(parts)):
        raise TrainingError(f"non-finite loss at step {step}: cls={parts[0]} reg={parts[1]} "
                            f"total={parts[2]}")
    tape.backward(total, detector.params.values())
    optimizer.step()
    return parts


def train(cfg, out_dir=None, resume=None, steps=None):
    """Train the detector described by ``cfg`` (a :class:`RunConfig`).

    Writes ``loss.tsv``, ``config.txt`` and ``checkpoint.swfe`` into
    ``out_dir`` when given. ``resume`` is a checkpoint path; training then
    continues from its step count up to ``run.steps``.
    """
    steps = cfg["run.steps"] if steps is None else steps
    seed = cfg["run.seed"]
    detector = Detector.from_run_config(cfg)
    optimizer = AdamW(detector.params, lr=cfg["optim.lr"], beta1=cfg["optim.beta1"],
                      beta2=cfg["optim.beta2"], eps=cfg["optim.eps"],
                      weight_decay=cfg["optim.weight_decay"])
    if resume is not None:
        apply_arrays(load_checkpoint(resume), detector.params, optimizer)
    data = SampleCache(cfg.synth())
    train_idx, _ = split_indices(cfg["data.n_train"], cfg["data.n_eval"])
    bs, every = cfg["run.batch_size"], max(cfg["run.log_every"], 1)
    ck_every = cfg["run.checkpoint_every"]
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "config.txt"), "w", encoding="utf-8") as f:
            f.write(cfg.dumps())
    lines = []
    for step in range(optimizer.t, steps):
        idx = batch_indices(step, bs, len(train_idx), seed)
        parts = train_step(detector, optimizer, [data[train_idx[i]] for i in idx], step, seed)
        if step % every == 0 or step == steps - 1:
            lines.append(format_log_line(step, *parts))
            if step % (every * 100) == 0:
                log.info("step %d cls %.4f reg %.4f total %.4f", step, *parts)
        if out_dir is not None and ck_every and (step + 1) % ck_every == 0 and step + 1 < steps:
            save_checkpoint(os.path.join(out_dir, f"checkpoint_{step + 1:06d}.swfe"),
                            model_arrays(detector.params, optimizer))
    ckpt = None
    if out_dir is not None:
        with open(os.path.join(out_dir, "loss.tsv"), "w", encoding="utf-8") as f:
            f.write(LOG_HEADER + "".join(lines))
        ckpt = os.path.join(out_dir, "checkpoint.swfe")
        save_checkpoint(ckpt, model_arrays(detector.params, optimizer))
    return TrainResult(detector, optimizer, lines, ckpt)


def evaluate(detector, cfg, batch=10):
    """AP of ``detector`` on the eval split of the synthetic dataset."""
    data = SampleCache(cfg.synth())
    _, eval_idx = split_indices(cfg["data.n_train"], cfg["data.n_eval"])
    dets, gts = [], []
    for s in range(0, len(eval_idx), batch):
        samples = [data[i] for i in eval_idx[s:s + batch]]
        dets += detector.detect(np.stack([x.image for x in samples]))
        gts += [x.gt for x in samples]
    return evaluate_dets(dets, gts, cfg["metrics.iou_thresh"])


def load_detector(cfg, checkpoint):
    detector = Detector.from_run_config(cfg)
    apply_arrays(load_checkpoint(checkpoint), detector.params)
    return detector
