"""
Binary checkpoints of a model plus a group-table snapshot.

Layout (little-endian):

    b"FMC1"                   magic; the trailing digit is the format version
    uint32 n, uint32 * n      layer widths
    uint64 m, float64 * m     model values
    uint32                    round of the snapshot
    uint32 g                  number of groups, then per group:
        int32  group id
        int32  created round
        uint32 k, uint32 * k  member device ids
        float64 * m           group model values (same layout)

The whole file is parsed before anything is returned, so a damaged file never
yields a partial state.
"""
import logging
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from learner.exceptions import LearnerError
from learner.utils import ModelParams, parameter_count

logger = logging.getLogger(__name__)

MAGIC = b'FMC1'


class CheckpointError(Exception):
    """Checkpoint could not be written or read back"""


@dataclass(frozen=True, eq=False)
class Checkpoint:
    model: ModelParams
    round_index: int
    groups: tuple  # (group_id, created_round, members, ModelParams)


def _encode(model, round_index, groups):
    dims = np.asarray(model.layer_dims, dtype='<u4')
    parts = [
        MAGIC,
        struct.pack('<I', dims.size), dims.tobytes(),
        struct.pack('<Q', model.values.size), model.values.astype('<f8').tobytes(),
        struct.pack('<I', int(round_index)),
        struct.pack('<I', len(groups)),
    ]
    for group_id, created_round, members, group_model in groups:
        if group_model.layer_dims != model.layer_dims:
            raise CheckpointError(f"group {group_id} model layout {group_model.layer_dims} differs from {model.layer_dims}")
        parts.append(struct.pack('<iiI', int(group_id), int(created_round), len(members)))
        parts.append(np.asarray(members, dtype='<u4').tobytes())
        parts.append(group_model.values.astype('<f8').tobytes())
    return b''.join(parts)


def checkpoint(model, groups, path, round_index=0):
    """Write `model` and the group snapshot to `path` (atomically replaced)"""
    path = Path(path)
    payload = _encode(model, round_index, list(groups))
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        handle, temp_name = tempfile.mkstemp(dir=path.parent, prefix=path.name, suffix='.tmp')
        with os.fdopen(handle, 'wb') as out:
            out.write(payload)
        os.replace(temp_name, path)
    except OSError as e:
        raise CheckpointError(f"{path}: could not write checkpoint: {e}")
    logger.info(f"💾 Saved checkpoint {path} ({len(payload)} bytes, {len(groups)} groups, round {round_index})")
    return path


class _Reader:
    def __init__(self, data, path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size, what):
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"{self.path}: truncated while reading {what}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt, what):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))

    def array(self, dtype, count, what):
        dtype = np.dtype(dtype)
        return np.frombuffer(self.take(dtype.itemsize * count, what), dtype=dtype).astype(dtype.newbyteorder('='))


def restore(path, expected_dims=None):
    """Read a checkpoint back; raises CheckpointError on any damage"""
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as e:
        raise CheckpointError(f"{path}: could not read checkpoint: {e}")

    reader = _Reader(data, path)
    magic = reader.take(len(MAGIC), 'magic')
    if magic != MAGIC:
        if magic[:3] == MAGIC[:3] and magic[3:].isdigit():
            raise CheckpointError(f"{path}: unsupported checkpoint version {magic.decode()} (expected {MAGIC.decode()})")
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")

    (n_dims,) = reader.unpack('<I', 'layer count')
    dims = tuple(int(d) for d in reader.array('<u4', n_dims, 'layer widths'))
    (n_values,) = reader.unpack('<Q', 'value count')
    expected = parameter_count(dims)
    if n_values != expected:
        raise CheckpointError(f"{path}: {n_values} values stored, layer widths {list(dims)} imply {expected}")
    if expected_dims is not None and tuple(expected_dims) != dims:
        raise CheckpointError(f"{path}: checkpoint layout {list(dims)} does not match model layout {list(expected_dims)}")

    try:
        model = ModelParams(dims, reader.array('<f8', n_values, 'model values'))
        (round_index,) = reader.unpack('<I', 'round')
        (n_groups,) = reader.unpack('<I', 'group count')
        groups = []
        for _ in range(n_groups):
            group_id, created_round, n_members = reader.unpack('<iiI', 'group header')
            members = tuple(int(m) for m in reader.array('<u4', n_members, 'group members'))
            group_model = ModelParams(dims, reader.array('<f8', n_values, 'group model'))
            groups.append((group_id, created_round, members, group_model))
    except LearnerError as e:
        raise CheckpointError(f"{path}: invalid model data: {e}")

    if reader.offset != len(data):
        raise CheckpointError(f"{path}: {len(data) - reader.offset} unexpected trailing bytes")

    logger.info(f"Restored checkpoint {path}: layout {list(dims)}, {len(groups)} groups, round {round_index}")
    return Checkpoint(model=model, round_index=round_index, groups=tuple(groups))
