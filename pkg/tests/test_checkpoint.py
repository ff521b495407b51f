import struct

import numpy as np
import pytest
import torch

from taprop.checkpoint import (
    CheckpointError,
    CheckpointVersionError,
    load_checkpoint,
    read_container,
    restore_model,
    save_checkpoint,
    write_container,
)
from taprop.model import ModelConfig, build_model
from taprop.training import TrainConfig, make_optimizer, miniature_episode


def test_container_roundtrip(tmp_path):
    arrays = {"a": np.arange(6, dtype=np.float32).reshape(2, 3), "b": np.array([1.5, -2.0]), "c": np.array([3], np.int64)}
    write_container(tmp_path / "x.bin", {"k": [1, 2]}, arrays)
    meta, back = read_container(tmp_path / "x.bin")
    assert meta == {"k": [1, 2]}
    for k, v in arrays.items():
        assert back[k].dtype == v.dtype and np.array_equal(back[k], v)


def test_version_mismatch_names_both(tmp_path):
    path = tmp_path / "x.bin"
    write_container(path, {}, {})
    raw = bytearray(path.read_bytes())
    raw[4:8] = struct.pack("<I", 99)
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointVersionError, match=r"99.*1|1.*99"):
        read_container(path)


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "nope.ckpt")


def test_bad_magic(tmp_path):
    (tmp_path / "x.ckpt").write_bytes(b"nonsense-bytes-here")
    with pytest.raises(CheckpointError):
        load_checkpoint(tmp_path / "x.ckpt")


def test_model_and_optimizer_bit_exact(tmp_path):
    model = build_model(ModelConfig(image_shape=(3, 8, 8)), "double")
    opt = make_optimizer(model, TrainConfig())
    ep = miniature_episode(0)
    for _ in range(2):
        opt.zero_grad()
        model.run_episode(ep, m=1).loss.total.backward()
        opt.step()
    rng = np.random.default_rng(5)
    rng.random()
    save_checkpoint(tmp_path / "m.ckpt", model, opt, episode=2, config={"x": 1}, rng_state=rng.bit_generator.state)
    ck = load_checkpoint(tmp_path / "m.ckpt")
    assert ck.episode == 2 and ck.run_config == {"x": 1}
    back = restore_model(ck)
    for k, v in model.state_dict().items():
        assert back.state_dict()[k].dtype == v.dtype
        assert torch.equal(back.state_dict()[k], v), k
    opt2 = make_optimizer(back, TrainConfig())
    opt2.load_state_dict(ck.optimizer_state)
    s1, s2 = opt.state_dict(), opt2.state_dict()
    for idx in s1["state"]:
        for key in s1["state"][idx]:
            assert torch.equal(torch.as_tensor(s1["state"][idx][key]), torch.as_tensor(s2["state"][idx][key]))
    r2 = np.random.default_rng(0)
    r2.bit_generator.state = ck.rng_state
    assert r2.random() == rng.random()
