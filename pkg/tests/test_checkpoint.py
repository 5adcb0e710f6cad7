import json

import numpy as np
import pytest

from commands.utils import nn_core
from commands.utils.checkpoint import MAGIC, load_checkpoint, save_checkpoint, sidecar_path
from commands.utils.exceptions import CheckpointFormatError, CheckpointVersionError
from commands.utils.losses import PrototypeBank


@pytest.fixture
def bank() -> PrototypeBank:
    return PrototypeBank(np.arange(9, dtype=np.float64).reshape(3, 3) / 7, np.array([4, 5, 6]))


def test_round_trip(tmp_path, tiny_state, bank):
    path = save_checkpoint(tmp_path / 'checkpoint.rpfckpt', tiny_state, bank, {'seed': 3, 'variant': 'rpf'})

    checkpoint = load_checkpoint(path)

    state = checkpoint.state
    for a, b in zip(state.trainable_buffers(), tiny_state.trainable_buffers()):
        assert np.array_equal(a, b)
    assert all(np.array_equal(a, b) for a, b in zip(state.f0.buffers(), tiny_state.f0.buffers()))
    assert np.array_equal(state.h_lp.W, tiny_state.h_lp.W)
    assert state.f.activation == 'tanh'
    assert state.f0.frozen and not state.f.frozen
    assert np.array_equal(checkpoint.bank.prototypes, bank.prototypes)
    assert checkpoint.bank.counts.tolist() == [4, 5, 6]
    assert checkpoint.sidecar == {'format_version': 1, 'seed': 3, 'variant': 'rpf'}


def test_optional_blocks(tmp_path):
    state = nn_core.ModelState(nn_core.init_mlp([2, 3], seed=0), nn_core.init_head(2, 3, seed=0))

    checkpoint = load_checkpoint(save_checkpoint(tmp_path / 'bare.rpfckpt', state))

    assert checkpoint.state.f0 is None and checkpoint.state.h_lp is None
    assert checkpoint.bank is None
    assert checkpoint.state.f.activation == 'relu'


def test_missing_file(tmp_path):
    with pytest.raises(CheckpointFormatError):
        load_checkpoint(tmp_path / 'nothing.rpfckpt')


def test_bad_magic(tmp_path, tiny_state):
    path = save_checkpoint(tmp_path / 'checkpoint.rpfckpt', tiny_state)
    data = bytearray(path.read_bytes())
    data[0] ^= 0xFF
    path.write_bytes(bytes(data))

    with pytest.raises(CheckpointFormatError, match='magic'):
        load_checkpoint(path)


def test_truncated_and_padded_files(tmp_path, tiny_state):
    path = save_checkpoint(tmp_path / 'checkpoint.rpfckpt', tiny_state)
    data = path.read_bytes()

    path.write_bytes(data[:-3])
    with pytest.raises(CheckpointFormatError, match='truncated'):
        load_checkpoint(path)

    path.write_bytes(data + b'\x00' * 8)
    with pytest.raises(CheckpointFormatError, match='trailing'):
        load_checkpoint(path)


def test_version_mismatch(tmp_path, tiny_state):
    path = save_checkpoint(tmp_path / 'checkpoint.rpfckpt', tiny_state)
    data = bytearray(path.read_bytes())
    data[len(MAGIC)] = 9
    path.write_bytes(bytes(data))

    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)


def test_sidecar_version_mismatch(tmp_path, tiny_state):
    path = save_checkpoint(tmp_path / 'checkpoint.rpfckpt', tiny_state)
    sidecar_path(path).write_text(json.dumps({'format_version': 2}))

    with pytest.raises(CheckpointVersionError):
        load_checkpoint(path)
