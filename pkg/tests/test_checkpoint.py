"""The .fuw container: bit-exact round trips and corruption diagnostics."""

import struct

import numpy as np
import pytest

from film_denoise.engine import Tape, Tensor, backward
from film_denoise.engine.ops import mse_loss
from film_denoise.engine.optim import Adam
from film_denoise.model import (
    MAGIC,
    CheckpointError,
    build,
    forward,
    load,
    load_checkpoint,
    save,
    set_trainable,
)


@pytest.fixture
def saved(tiny_model, tmp_path):
    path = tmp_path / "model.fuw"
    save(tiny_model, path, metadata={"seed": 7, "note": "fixture"})
    return path


def probe(model) -> np.ndarray:
    c, h, w = model.config.input_shape
    x = np.random.default_rng(17).random((2, c, h, w)).astype(np.float32)
    cond = np.tile(np.array([0.1, 0.2], dtype=np.float32), (2, 1))
    return forward(model, x, cond).data


def one_step(model) -> Adam:
    opt = Adam(model.trainable_parameters(), lr=0.01)
    c, h, w = model.config.input_shape
    x = np.random.default_rng(5).random((2, c, h, w)).astype(np.float32)
    opt.zero_grad()
    with Tape():
        pred = forward(model, x, np.tile(np.float32([0.1, 0.2]), (2, 1)))
        loss = mse_loss(pred, Tensor(np.zeros_like(x)))
    backward(loss)
    opt.step()
    return opt


def test_round_trip_is_forward_bit_exact(tiny_model, saved):
    restored = load(saved)
    assert probe(restored).tobytes() == probe(tiny_model).tobytes()


def test_round_trip_after_training_step(tiny_config, tmp_path):
    model = build(tiny_config)
    one_step(model)
    path = tmp_path / "trained.fuw"
    save(model, path)
    assert probe(load(path)).tobytes() == probe(model).tobytes()


def test_metadata_and_config_round_trip(saved, tiny_config):
    ckpt = load_checkpoint(saved)
    assert ckpt.metadata == {"seed": 7, "note": "fixture"}
    assert ckpt.config.input_shape == tiny_config.input_shape
    assert ckpt.config.resolved_sites() == tiny_config.resolved_sites()
    assert ckpt.version == 1


def test_records_cover_groups(saved, tiny_model):
    ckpt = load_checkpoint(saved)
    by_name = {name: group for name, group, _ in ckpt.records}
    for p in tiny_model.parameters():
        assert by_name[p.name] == p.group


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointError, match="not found"):
        load_checkpoint(tmp_path / "absent.fuw")


def test_bad_magic(saved):
    blob = bytearray(saved.read_bytes())
    assert bytes(blob[: len(MAGIC)]) == MAGIC
    blob[: len(MAGIC)] = b"NOTAFUW!"
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="not a .fuw checkpoint"):
        load_checkpoint(saved)


def test_version_mismatch(saved):
    blob = bytearray(saved.read_bytes())
    blob[8:12] = struct.pack("<I", 99)
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="version 99, expected 1"):
        load_checkpoint(saved)


@pytest.mark.parametrize("keep", [4, 11, 40, 200])
def test_truncation_reports_offset_and_field(saved, keep):
    blob = saved.read_bytes()
    saved.write_bytes(blob[:keep])
    with pytest.raises(CheckpointError, match=r"truncated checkpoint, needed \d+ byte\(s\) for .* at offset"):
        load_checkpoint(saved)


def test_truncation_mid_data(saved):
    blob = saved.read_bytes()
    saved.write_bytes(blob[: len(blob) - 1])
    with pytest.raises(CheckpointError, match="truncated"):
        load_checkpoint(saved)


def test_trailing_bytes_rejected(saved):
    saved.write_bytes(saved.read_bytes() + b"\x00\x00\x00")
    with pytest.raises(CheckpointError, match=r"3 trailing byte\(s\)"):
        load_checkpoint(saved)


class Layout:
    """Byte offsets of the container sections, recovered by walking the stream."""

    def __init__(self, blob: bytes):
        pos = 8 + 4
        self.cfg_pos = pos + 4
        cfg_len = struct.unpack("<I", blob[pos : pos + 4])[0]
        self.cfg_len = cfg_len
        pos = self.cfg_pos + cfg_len
        meta_len = struct.unpack("<I", blob[pos : pos + 4])[0]
        pos += 4 + meta_len
        self.count_pos = pos
        self.n_records = struct.unpack("<I", blob[pos : pos + 4])[0]
        pos += 4
        self.record_starts: list[int] = []
        self.group_positions: list[int] = []
        for _ in range(self.n_records):
            self.record_starts.append(pos)
            name_len = struct.unpack("<I", blob[pos : pos + 4])[0]
            pos += 4 + name_len
            self.group_positions.append(pos)
            rank = blob[pos + 1]
            pos += 2
            extents = struct.unpack(f"<{rank}I", blob[pos : pos + 4 * rank])
            pos += 4 * rank + 4 * int(np.prod(extents, dtype=np.int64))
        self.records_end = pos
        self.opt_flag_pos = pos


def test_doctored_config_names_first_bad_record(saved, tiny_config):
    """Same-length JSON edit: widen base_channels so stored arrays no longer fit."""
    blob = saved.read_bytes()
    lay = Layout(blob)
    cfg = blob[lay.cfg_pos : lay.cfg_pos + lay.cfg_len]
    wanted = f'"base_channels": {tiny_config.base_channels}'.encode()
    assert wanted in cfg, cfg
    doctored = cfg.replace(
        wanted, f'"base_channels": {tiny_config.base_channels * 2}'.encode(), 1
    )
    assert len(doctored) == len(cfg)  # single digit swap keeps every offset intact
    saved.write_bytes(blob[: lay.cfg_pos] + doctored + blob[lay.cfg_pos + lay.cfg_len :])
    with pytest.raises(CheckpointError, match="'enc0.conv1.weight' has shape"):
        load(saved)


def test_unknown_group_byte(saved):
    blob = bytearray(saved.read_bytes())
    blob[Layout(bytes(blob)).group_positions[0]] = 7
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="unknown group byte 7"):
        load_checkpoint(saved)


def test_optimizer_state_round_trip(tiny_config, tmp_path):
    model = build(tiny_config)
    opt = one_step(model)
    path = tmp_path / "opt.fuw"
    save(model, path, optimizer=opt, metadata={})
    ckpt = load_checkpoint(path)
    assert ckpt.optimizer_t == 1
    state = opt.state_arrays()
    assert set(ckpt.optimizer_state) == set(state)
    for key, arr in state.items():
        # moments survive the float32 container exactly (they are float32 already)
        np.testing.assert_array_equal(ckpt.optimizer_state[key], arr.astype(np.float32))


def test_optimizer_state_partial_coverage(tiny_config, tmp_path):
    """Frozen-group parameters carry no moments; presence bytes mark the gap."""
    model = build(tiny_config)
    set_trainable(model, {"film"})
    opt = one_step(model)
    path = tmp_path / "partial.fuw"
    save(model, path, optimizer=opt)
    ckpt = load_checkpoint(path)
    covered = {k[: -len(".m")] for k in ckpt.optimizer_state if k.endswith(".m")}
    film_names = {p.name for p in model.parameters(["film"])}
    backbone_names = {p.name for p in model.parameters(["backbone"])}
    assert covered == film_names
    assert not (covered & backbone_names)
    set_trainable(model, {"backbone", "film"})


def test_no_optimizer_flag_means_no_state(saved):
    ckpt = load_checkpoint(saved)
    assert ckpt.optimizer_t is None
    assert ckpt.optimizer_state is None


def test_invalid_optimizer_flag(saved):
    blob = bytearray(saved.read_bytes())
    blob[-1] = 5  # fixture has no optimizer, so the flag is the final byte
    saved.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="invalid optimizer flag 5"):
        load_checkpoint(saved)


def test_invalid_presence_byte(tiny_config, tmp_path):
    model = build(tiny_config)
    opt = one_step(model)
    path = tmp_path / "presence.fuw"
    save(model, path, optimizer=opt)
    blob = bytearray(path.read_bytes())
    first_presence = Layout(bytes(blob)).opt_flag_pos + 1 + 8  # flag u8, then t u64
    blob[first_presence] = 9
    path.write_bytes(bytes(blob))
    with pytest.raises(CheckpointError, match="invalid optimizer presence byte 9"):
        load_checkpoint(path)


def test_load_rejects_missing_records(saved):
    """Splice out the final record and decrement the count."""
    blob = saved.read_bytes()
    lay = Layout(blob)
    trimmed = (
        blob[: lay.count_pos]
        + struct.pack("<I", lay.n_records - 1)
        + blob[lay.count_pos + 4 : lay.record_starts[-1]]
        + blob[lay.records_end :]
    )
    saved.write_bytes(trimmed)
    with pytest.raises(CheckpointError, match=r"lacks parameter record\(s\)"):
        load(saved)


def test_resumed_training_matches_uninterrupted(tiny_config, tmp_path):
    """Save/load of model+optimizer continues the trajectory bit-exactly."""

    def drive(model, opt, steps, seed):
        c, h, w = model.config.input_shape
        rng = np.random.default_rng(seed)
        for _ in range(steps):
            x = rng.random((2, c, h, w)).astype(np.float32)
            opt.zero_grad()
            with Tape():
                pred = forward(model, x, np.tile(np.float32([0.1, 0.2]), (2, 1)))
                loss = mse_loss(pred, Tensor(np.zeros_like(x)))
            backward(loss)
            opt.step()

    straight = build(tiny_config)
    opt_a = Adam(straight.trainable_parameters(), lr=0.005)
    drive(straight, opt_a, 4, seed=21)

    resumed = build(tiny_config)
    opt_b = Adam(resumed.trainable_parameters(), lr=0.005)
    rng = np.random.default_rng(21)
    c, h, w = tiny_config.input_shape
    for _ in range(2):
        x = rng.random((2, c, h, w)).astype(np.float32)
        opt_b.zero_grad()
        with Tape():
            pred = forward(resumed, x, np.tile(np.float32([0.1, 0.2]), (2, 1)))
            loss = mse_loss(pred, Tensor(np.zeros_like(x)))
        backward(loss)
        opt_b.step()
    mid = tmp_path / "mid.fuw"
    save(resumed, mid, optimizer=opt_b)

    ckpt = load_checkpoint(mid)
    model_c = load(mid)
    opt_c = Adam(model_c.trainable_parameters(), lr=0.005)
    opt_c.load_state_arrays(ckpt.optimizer_state, t=ckpt.optimizer_t)
    for _ in range(2):
        x = rng.random((2, c, h, w)).astype(np.float32)
        opt_c.zero_grad()
        with Tape():
            pred = forward(model_c, x, np.tile(np.float32([0.1, 0.2]), (2, 1)))
            loss = mse_loss(pred, Tensor(np.zeros_like(x)))
        backward(loss)
        opt_c.step()

    for pa, pc in zip(straight.parameters(), model_c.parameters()):
        assert pa.data.tobytes() == pc.data.tobytes(), pa.name
