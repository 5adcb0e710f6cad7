from __future__ import annotations

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import nn_core
from .exceptions import CheckpointFormatError, CheckpointVersionError
from .losses import PrototypeBank

logger = logging.getLogger('rpf.checkpoint')

MAGIC = b'RPFCKPT\x00'
FORMAT_VERSION = 1

# version, activation, n_layers, n_classes, flags
_HEADER = struct.Struct('<IBIII')
_ACTIVATION_CODES = {name: code for code, name in enumerate(nn_core.ACTIVATIONS)}

FLAG_F0 = 1
FLAG_H_LP = 2
FLAG_BANK = 4


@dataclass
class Checkpoint:
    state: nn_core.ModelState
    bank: PrototypeBank | None = None
    sidecar: dict = field(default_factory=dict)


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix('.json')


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int) -> bytes:
        if self.offset + size > len(self.data):
            raise CheckpointFormatError(f'{self.path} is truncated')
        chunk = self.data[self.offset:self.offset + size]
        self.offset += size
        return chunk

    def array(self, shape: tuple[int, ...], dtype: str = '<f8') -> np.ndarray:
        count = int(np.prod(shape))
        raw = self.take(count * np.dtype(dtype).itemsize)
        return np.frombuffer(raw, dtype=dtype).astype(dtype[1:], copy=True).reshape(shape)

    def unpack(self, fmt: struct.Struct) -> tuple:
        return fmt.unpack(self.take(fmt.size))


def _mlp_bytes(params: nn_core.MlpParams) -> bytes:
    return b''.join(np.ascontiguousarray(buffer, dtype='<f8').tobytes() for buffer in params.buffers())


def _head_bytes(h: nn_core.HeadParams) -> bytes:
    return np.ascontiguousarray(h.W, dtype='<f8').tobytes() + np.ascontiguousarray(h.b, dtype='<f8').tobytes()


def save_checkpoint(path: str | Path, state: nn_core.ModelState, bank: PrototypeBank | None = None,
                    sidecar: dict | None = None) -> Path:
    """
    Writes the model state (f, h, f0, h_lp) and the prototype bank as little-endian float64 blocks
    behind a magic/version header, plus a JSON sidecar next to it

    Parameters
    ----------
    path (str | Path): Target file, conventionally checkpoint.rpfckpt
    state (nn_core.ModelState): The model
    bank (PrototypeBank): Prototypes to store alongside
    sidecar (dict): Extra metadata (config_hash, seed, variant, ...)

    Returns
    ----------
    Path: The written checkpoint path
    """

    path = Path(path)
    if state.f0 is not None and state.f0.dims != state.f.dims:
        raise CheckpointFormatError('f0 and f must share an architecture to be stored together')

    flags = (FLAG_F0 if state.f0 is not None else 0) | (FLAG_H_LP if state.h_lp is not None else 0) | \
        (FLAG_BANK if bank is not None else 0)
    widths = [state.f.input_dim, *(weight.shape[0] for weight in state.f.weights)]

    blob = bytearray(MAGIC)
    blob += _HEADER.pack(FORMAT_VERSION, _ACTIVATION_CODES[state.f.activation], len(state.f.weights),
                         state.h.num_classes, flags)
    blob += struct.pack(f'<{len(widths)}I', *widths)
    blob += _mlp_bytes(state.f) + _head_bytes(state.h)
    if state.f0 is not None:
        blob += _mlp_bytes(state.f0)
    if state.h_lp is not None:
        blob += _head_bytes(state.h_lp)
    if bank is not None:
        blob += np.ascontiguousarray(bank.prototypes, dtype='<f8').tobytes()
        blob += np.ascontiguousarray(bank.counts, dtype='<i8').tobytes()

    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(bytes(blob))

    with open(sidecar_path(path), 'w', encoding='utf8') as f:
        json.dump({'format_version': FORMAT_VERSION, **(sidecar or {})}, f, indent=2, sort_keys=True)

    logger.debug(f'Saved checkpoint to {path} ({len(blob)} bytes)')
    return path


def _read_mlp(reader: _Reader, widths: list[int], activation: str) -> nn_core.MlpParams:
    weights, biases = [], []
    for fan_in, fan_out in zip(widths[:-1], widths[1:]):
        weights.append(reader.array((fan_out, fan_in)))
        biases.append(reader.array((fan_out,)))
    return nn_core.MlpParams(weights, biases, activation)


def _read_head(reader: _Reader, num_classes: int, feature_dim: int) -> nn_core.HeadParams:
    return nn_core.HeadParams(reader.array((num_classes, feature_dim)), reader.array((num_classes,)))


def load_checkpoint(path: str | Path) -> Checkpoint:
    """
    Reads a checkpoint written by save_checkpoint

    Raises
    ----------
    CheckpointFormatError: Missing file, bad magic, truncated or trailing data
    CheckpointVersionError: Unsupported format version
    """

    path = Path(path)
    if not path.is_file():
        raise CheckpointFormatError(f'No checkpoint at {path}')

    reader = _Reader(path.read_bytes(), path)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointFormatError(f'{path} is not a checkpoint (bad magic)')

    version, activation_code, num_layers, num_classes, flags = reader.unpack(_HEADER)
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f'{path} has format version {version}, this build reads version {FORMAT_VERSION}')
    if activation_code >= len(nn_core.ACTIVATIONS) or num_layers < 1:
        raise CheckpointFormatError(f'{path} has a corrupt header')

    activation = nn_core.ACTIVATIONS[activation_code]
    widths = list(reader.unpack(struct.Struct(f'<{num_layers + 1}I')))

    f = _read_mlp(reader, widths, activation)
    h = _read_head(reader, num_classes, widths[-1])
    f0 = _read_mlp(reader, widths, activation) if flags & FLAG_F0 else None
    h_lp = _read_head(reader, num_classes, widths[-1]) if flags & FLAG_H_LP else None

    bank = None
    if flags & FLAG_BANK:
        prototypes = reader.array((num_classes, widths[-1]))
        counts = reader.array((num_classes,), '<i8')
        bank = PrototypeBank(prototypes, counts)

    if reader.offset != len(reader.data):
        raise CheckpointFormatError(f'{path} has {len(reader.data) - reader.offset} trailing bytes')

    sidecar = {}
    if sidecar_path(path).is_file():
        with open(sidecar_path(path), 'r', encoding='utf8') as file:
            sidecar = json.load(file)
        if sidecar.get('format_version', FORMAT_VERSION) != FORMAT_VERSION:
            raise CheckpointVersionError(f'Sidecar of {path} has format version {sidecar["format_version"]}')

    return Checkpoint(nn_core.ModelState(f, h, f0=f0, h_lp=h_lp), bank, sidecar)
