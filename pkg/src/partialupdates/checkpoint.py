"""Binary checkpoint format.

Layout: 8-byte magic, '<u4' format version, '<u8' metadata length, UTF-8 JSON
metadata, then every array of the shape table as '<f8' in table order.
"""

import json
import os
import struct

import numpy as np

from partialupdates.errors import CheckpointError
from partialupdates.utils import write_bytes_atomic

MAGIC = b"PUCKPT\x00\x00"
VERSION = 1
_PREFIX = struct.Struct("<8sIQ")
_PAYLOAD = np.dtype("<f8")


def save_checkpoint(path, metadata, arrays):
    """Write metadata (JSON-serializable dict) and named float arrays atomically."""

    table = [[key, list(np.shape(value))] for key, value in arrays.items()]
    meta = dict(metadata)
    meta["shape_table"] = table
    meta_bytes = json.dumps(meta, sort_keys=True).encode("utf-8")
    payload = b"".join(np.ascontiguousarray(value, dtype=_PAYLOAD).tobytes() for value in arrays.values())
    write_bytes_atomic(path, _PREFIX.pack(MAGIC, VERSION, len(meta_bytes)) + meta_bytes + payload)


def _read_header(raw, path):
    if len(raw) < _PREFIX.size:
        raise CheckpointError("Checkpoint %s is truncated: missing header." % path)
    magic, version, meta_len = _PREFIX.unpack_from(raw)
    if magic != MAGIC:
        raise CheckpointError("File %s is not a checkpoint." % path)
    if version != VERSION:
        raise CheckpointError("Checkpoint %s has unknown version %d (expected %d)." % (path, version, VERSION))
    end = _PREFIX.size + meta_len
    if len(raw) < end:
        raise CheckpointError("Checkpoint %s is truncated: incomplete metadata." % path)
    try:
        metadata = json.loads(raw[_PREFIX.size: end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise CheckpointError("Checkpoint %s has corrupt metadata." % path) from e
    if "shape_table" not in metadata:
        raise CheckpointError("Checkpoint %s has no shape table." % path)
    return version, metadata, end


def _read(path):
    if not os.path.exists(path):
        raise FileNotFoundError("File %s not found." % path)
    with open(path, "rb") as f:
        return f.read()


def load_checkpoint(path):
    """Return (metadata, arrays) of a checkpoint written by save_checkpoint."""

    raw = _read(path)
    _, metadata, offset = _read_header(raw, path)
    arrays = {}
    for key, shape in metadata["shape_table"]:
        count = int(np.prod(shape, dtype=np.int64))
        stop = offset + count * _PAYLOAD.itemsize
        if stop > len(raw):
            raise CheckpointError("Checkpoint %s is truncated: payload ends inside %s." % (path, key))
        arrays[key] = np.frombuffer(raw[offset:stop], dtype=_PAYLOAD).astype(np.float64).reshape(shape)
        offset = stop
    if offset != len(raw):
        raise CheckpointError("Checkpoint %s has %d trailing bytes." % (path, len(raw) - offset))
    metadata.pop("shape_table")
    return metadata, arrays


def inspect_checkpoint(path):
    """Header fields and shape table, without reading arrays into memory."""

    raw = _read(path)
    version, metadata, offset = _read_header(raw, path)
    table = metadata.pop("shape_table")
    expected = offset + sum(int(np.prod(shape, dtype=np.int64)) for _, shape in table) * _PAYLOAD.itemsize
    return {
        "version": version,
        "metadata_bytes": offset - _PREFIX.size,
        "payload_bytes": len(raw) - offset,
        "complete": expected == len(raw),
        "counters": metadata.get("counters", {}),
        "shape_table": table,
    }
