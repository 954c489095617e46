import os

import numpy as np
import pytest

from swinfe.checkpoint import (CheckpointError, apply_arrays, dump_bytes, load_bytes,
                               load_checkpoint, model_arrays, save_checkpoint)
from swinfe.config import RunConfig
from swinfe.model import Detector
from swinfe.optim import AdamW
from swinfe.train import batch_indices, train


def small_cfg(**kw):
    cfg = RunConfig({"run.steps": 6, "data.n_train": 8, "data.n_eval": 4, "neck.channels": 8})
    for k, v in kw.items():
        cfg.set(k, v)
    return cfg


def test_bytes_round_trip(rng):
    arrays = {"b": rng.standard_normal((2, 3)).astype(np.float32),
              "a": rng.standard_normal(4), "c": np.asarray(3.0)}
    back = load_bytes(dump_bytes(arrays))
    assert list(back) == ["a", "b", "c"]
    for k in arrays:
        assert back[k].dtype == arrays[k].dtype and np.array_equal(back[k], arrays[k])


def test_layout_header():
    raw = dump_bytes({"x": np.zeros((2,), np.float32)})
    assert raw[:4] == b"SWFE"
    assert raw[4:12] == (1).to_bytes(4, "little") + (1).to_bytes(4, "little")
    assert raw[12:14] == (1).to_bytes(2, "little") and raw[14:15] == b"x"
    assert raw[15] == 0 and raw[16] == 1 and raw[17:21] == (2).to_bytes(4, "little")
    assert len(raw) == 21 + 8


@pytest.mark.parametrize("cut", [3, 10, 20, -1])
def test_truncated_rejected(cut):
    raw = dump_bytes({"x": np.arange(6.0).reshape(2, 3), "y": np.ones(2, np.float32)})
    with pytest.raises(CheckpointError, match="corrupt"):
        load_bytes(raw[:cut])


def test_bad_magic_and_version():
    raw = dump_bytes({"x": np.ones(1)})
    with pytest.raises(CheckpointError):
        load_bytes(b"XXXX" + raw[4:])
    with pytest.raises(CheckpointError, match="version"):
        load_bytes(raw[:4] + (2).to_bytes(4, "little") + raw[8:])


def test_model_round_trip_bit_exact(tmp_path):
    det = Detector.from_run_config(small_cfg())
    opt = AdamW(det.params)
    path = tmp_path / "m.swfe"
    save_checkpoint(path, model_arrays(det.params, opt))
    other = Detector.from_run_config(small_cfg(**{"run.seed": "7"}))
    opt2 = AdamW(other.params)
    apply_arrays(load_checkpoint(path), other.params, opt2)
    for k in det.params:
        assert np.array_equal(det.params[k].data, other.params[k].data)
    save_checkpoint(tmp_path / "n.swfe", model_arrays(other.params, opt2))
    assert (tmp_path / "m.swfe").read_bytes() == (tmp_path / "n.swfe").read_bytes()


def test_truncated_file_applies_nothing(tmp_path):
    det = Detector.from_run_config(small_cfg())
    path = tmp_path / "m.swfe"
    save_checkpoint(path, model_arrays(det.params))
    raw = path.read_bytes()
    path.write_bytes(raw[:len(raw) // 2])
    other = Detector.from_run_config(small_cfg(**{"run.seed": "7"}))
    before = {k: v.data.copy() for k, v in other.params.items()}
    with pytest.raises(CheckpointError):
        apply_arrays(load_checkpoint(path), other.params)
    assert all(np.array_equal(before[k], other.params[k].data) for k in before)


def test_toy_into_swin_t_names_first_mismatch():
    toy = Detector.from_run_config(small_cfg())
    big = RunConfig({"backbone.embed_dim": 96, "backbone.depths": "2,2,6,2",
                     "backbone.heads": "3,6,12,24", "backbone.window": 8,
                     "neck.channels": 8, "data.image_size": 256})
    target = Detector.from_run_config(big)
    with pytest.raises(CheckpointError, match="shape mismatch for backbone.patch_embed.bias"):
        apply_arrays(model_arrays(toy.params), target.params)


def test_unknown_and_missing_tensors():
    det = Detector.from_run_config(small_cfg())
    arrays = model_arrays(det.params)
    with pytest.raises(CheckpointError, match="unknown"):
        apply_arrays({**arrays, "param.extra": np.ones(1)}, det.params)
    arrays.pop("param.head.cls.bias")
    with pytest.raises(CheckpointError, match="lacks"):
        apply_arrays(arrays, det.params)


def test_atomic_save_leaves_no_temp(tmp_path):
    save_checkpoint(tmp_path / "a.swfe", {"x": np.ones(2)})
    assert os.listdir(tmp_path) == ["a.swfe"]


# -- training --------------------------------------------------------------

def test_batch_indices_cover_each_epoch():
    seen = [i for s in range(4) for i in batch_indices(s, 2, 8, 42)]
    assert sorted(seen) == list(range(8))
    assert batch_indices(5, 2, 8, 42) == batch_indices(5, 2, 8, 42)


def test_zero_lr_freezes_parameters():
    cfg = small_cfg(**{"optim.lr": "0", "run.steps": "3"})
    before = Detector.from_run_config(cfg).params
    res = train(cfg)
    for k, v in res.detector.params.items():
        assert np.array_equal(v.data, before[k].data)


def test_first_step_classification_loss_is_ln2():
    res = train(small_cfg(**{"run.steps": "1"}))
    cls = float(res.log_lines[0].split("\t")[1])
    assert cls == pytest.approx(np.log(2), abs=1e-6)


def test_training_is_bit_reproducible(tmp_path):
    cfg = small_cfg()
    train(cfg, out_dir=tmp_path / "a")
    train(cfg, out_dir=tmp_path / "b")
    for name in ("loss.tsv", "checkpoint.swfe", "config.txt"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_resume_replays_loss_log(tmp_path):
    cfg = small_cfg(**{"run.checkpoint_every": "3"})
    full = train(cfg, out_dir=tmp_path / "full")
    mid = tmp_path / "full" / "checkpoint_000003.swfe"
    assert mid.exists()
    rest = train(cfg, out_dir=tmp_path / "resumed", resume=mid)
    assert full.log_lines[3:] == rest.log_lines
    assert ((tmp_path / "full" / "checkpoint.swfe").read_bytes()
            == (tmp_path / "resumed" / "checkpoint.swfe").read_bytes())


def test_loss_log_format(tmp_path):
    train(small_cfg(**{"run.steps": "2"}), out_dir=tmp_path)
    lines = (tmp_path / "loss.tsv").read_text().splitlines()
    assert lines[0] == "step\tcls\treg\ttotal"
    step, cls, reg, total = lines[1].split("\t")
    assert step == "0" and float(total) == pytest.approx(float(cls) + float(reg), rel=1e-6)
