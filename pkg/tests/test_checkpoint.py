import struct

import pytest
import torch

from config.settings import clone
from core.errors import BadMagicError, ChecksumError, CheckpointMismatchError, StorageError, TruncatedFileError, VersionMismatchError
from storage.checkpoint import decode_checkpoint, encode_checkpoint, load_checkpoint, read_header, save_checkpoint
from training.train_state import new_train_state
from training.trainer import Trainer


@pytest.fixture
def trained_state(variant_config, tiny_dataset):
    state = new_train_state(variant_config("cam"))
    Trainer(state, tiny_dataset, progress=False).fit(3)
    return state


def test_save_load_save_is_byte_identical(trained_state, tmp_path):
    first = save_checkpoint(trained_state, tmp_path / "a.ckpt").read_bytes()
    loaded = load_checkpoint(tmp_path / "a.ckpt")
    second = save_checkpoint(loaded, tmp_path / "b.ckpt").read_bytes()
    assert first == second


def test_round_trip_restores_state(trained_state):
    loaded = decode_checkpoint(encode_checkpoint(trained_state))
    assert loaded.step == 3
    assert loaded.objective == "cam"
    assert loaded.running == trained_state.running
    assert loaded.model.metadata["train_step"] == 3
    for (name, a), (_, b) in zip(trained_state.model.state_dict().items(), loaded.model.state_dict().items()):
        assert torch.equal(a, b), name
    for p_a, p_b in zip(trained_state.model.parameters(), loaded.model.parameters()):
        slot_a, slot_b = trained_state.optimizer.state[p_a], loaded.optimizer.state[p_b]
        assert torch.equal(slot_a["exp_avg_sq"], slot_b["exp_avg_sq"])
        assert float(slot_a["step"]) == float(slot_b["step"])


@pytest.mark.parametrize("objective", ["cam", "givt_noise"])
def test_resume_matches_uninterrupted_run(variant_config, tiny_dataset, tmp_path, objective):
    cfg = variant_config(objective)
    straight = Trainer(new_train_state(cfg), tiny_dataset, tmp_path / "straight", progress=False).fit(6)

    out = tmp_path / "resumed"
    Trainer(new_train_state(cfg), tiny_dataset, out, progress=False).fit(3)
    resumed_state = load_checkpoint(out / "checkpoint.ckpt", expected=cfg)
    resumed = Trainer(resumed_state, tiny_dataset, out, progress=False).fit(6)

    assert list(resumed["step"]) == list(range(1, 7))
    # rows before the resume point come back from the CSV, rounded
    assert resumed["loss"].tolist()[3:] == straight["loss"].tolist()[3:]
    assert resumed["loss"].tolist()[:3] == pytest.approx(straight["loss"].tolist()[:3], rel=1e-8)


def test_normalization_survives(variant_config, tiny_dataset):
    stats = {"mean": torch.tensor([0.5, 0.0, -1.0, 2.0], dtype=torch.float64),
             "std": torch.tensor([1.0, 2.0, 0.5, 1.5], dtype=torch.float64)}
    state = new_train_state(variant_config("mar_rf"), normalization=stats)
    loaded = decode_checkpoint(encode_checkpoint(state))
    assert torch.equal(loaded.normalization["mean"], stats["mean"])
    assert torch.equal(loaded.normalization["std"], stats["std"])


def test_float64_precision_round_trips(variant_config):
    state = new_train_state(variant_config("cam", precision="float64"))
    loaded = decode_checkpoint(encode_checkpoint(state))
    assert next(loaded.model.parameters()).dtype == torch.float64
    assert encode_checkpoint(loaded) == encode_checkpoint(state)


def test_header_contents(trained_state):
    header, _ = read_header(encode_checkpoint(trained_state))
    assert header["config_hash"] == trained_state.config.config_hash()
    assert header["step"] == 3
    assert header["rng_lineage"] == "0/train"
    names = {t["name"] for t in header["tensors"]}
    assert "model/z_sos" in names
    assert "optim/z_sos/exp_avg" in names


def test_mismatched_architecture(trained_state):
    expected = clone(trained_state.config)
    expected.model.sampler.num_layers += 1
    with pytest.raises(CheckpointMismatchError):
        decode_checkpoint(encode_checkpoint(trained_state), expected=expected)


def test_mismatched_head(trained_state):
    expected = clone(trained_state.config)
    expected.train.objective = "givt"
    expected.train.noise_augmentation = False
    with pytest.raises(CheckpointMismatchError):
        decode_checkpoint(encode_checkpoint(trained_state), expected=expected)


def test_flipped_byte_fails_checksum(trained_state):
    blob = bytearray(encode_checkpoint(trained_state))
    blob[len(blob) // 2] ^= 0x01
    with pytest.raises(ChecksumError) as info:
        decode_checkpoint(bytes(blob))
    assert info.value.offset == len(blob) - 4


def test_bad_magic(trained_state):
    blob = encode_checkpoint(trained_state)
    with pytest.raises(BadMagicError):
        decode_checkpoint(b"XXXX" + blob[4:])


def test_version_mismatch(trained_state):
    blob = encode_checkpoint(trained_state)
    with pytest.raises(VersionMismatchError):
        decode_checkpoint(blob[:4] + struct.pack("<I", 2) + blob[8:])


def test_truncated(trained_state):
    with pytest.raises(TruncatedFileError):
        decode_checkpoint(encode_checkpoint(trained_state)[:10])


def test_missing_file(tmp_path):
    with pytest.raises(StorageError):
        load_checkpoint(tmp_path / "nope.ckpt")
