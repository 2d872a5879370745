import struct

import numpy as np
import pytest

import partialupdates.checkpoint as checkpoint
from partialupdates.errors import CheckpointError


@pytest.fixture
def arrays():
    rng = np.random.default_rng(0)
    return {"global/tok_emb": rng.standard_normal((5, 4)), "outer/buf/ln_f.gain": rng.standard_normal(4), "node0/m/x": np.zeros(0)}


@pytest.fixture
def saved(tmp_path, arrays):
    path = str(tmp_path / "checkpoint.bin")
    checkpoint.save_checkpoint(path, {"counters": {"round": 3, "step": 30}, "note": "mondongo"}, arrays)
    return path


def test_round_trip(saved, arrays):
    metadata, loaded = checkpoint.load_checkpoint(saved)
    assert metadata == {"counters": {"round": 3, "step": 30}, "note": "mondongo"}
    assert list(loaded) == list(arrays)
    for key, value in arrays.items():
        assert loaded[key].shape == value.shape
        assert np.array_equal(loaded[key], value)


def test_header_layout(saved):
    with open(saved, "rb") as f:
        raw = f.read()
    magic, version, meta_len = struct.unpack_from("<8sIQ", raw)
    assert magic == checkpoint.MAGIC
    assert version == checkpoint.VERSION
    assert len(raw) == 20 + meta_len + 8 * (20 + 4)


def test_inspect(saved):
    info = checkpoint.inspect_checkpoint(saved)
    assert info["version"] == 1
    assert info["complete"] is True
    assert info["payload_bytes"] == 8 * 24
    assert info["counters"] == {"round": 3, "step": 30}
    assert info["shape_table"] == [["global/tok_emb", [5, 4]], ["outer/buf/ln_f.gain", [4]], ["node0/m/x", [0]]]


def test_missing_file(tmp_path):
    path = str(tmp_path / "nothing.bin")
    with pytest.raises(FileNotFoundError) as exc_info:
        checkpoint.load_checkpoint(path)
    assert exc_info.value.args[0] == "File %s not found." % path


def test_not_a_checkpoint(tmp_path):
    path = tmp_path / "garbage.bin"
    path.write_bytes(b"mondongo for the win, not a checkpoint")
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "File %s is not a checkpoint." % path


def test_unknown_version(tmp_path, saved):
    with open(saved, "rb") as f:
        raw = bytearray(f.read())
    raw[8:12] = struct.pack("<I", 7)
    path = tmp_path / "future.bin"
    path.write_bytes(bytes(raw))
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "Checkpoint %s has unknown version 7 (expected 1)." % path


def test_truncated_payload(tmp_path, saved):
    with open(saved, "rb") as f:
        raw = f.read()
    path = tmp_path / "truncated.bin"
    path.write_bytes(raw[:-8])
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "Checkpoint %s is truncated: payload ends inside outer/buf/ln_f.gain." % path
    assert checkpoint.inspect_checkpoint(str(path))["complete"] is False


@pytest.mark.parametrize("cut, message", [(10, "missing header"), (30, "incomplete metadata")])
def test_truncated_header(tmp_path, saved, cut, message):
    with open(saved, "rb") as f:
        raw = f.read()
    path = tmp_path / "short.bin"
    path.write_bytes(raw[:cut])
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "Checkpoint %s is truncated: %s." % (path, message)


def test_trailing_bytes(tmp_path, saved):
    with open(saved, "rb") as f:
        raw = f.read()
    path = tmp_path / "long.bin"
    path.write_bytes(raw + b"\x00" * 3)
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "Checkpoint %s has 3 trailing bytes." % path


def test_corrupt_metadata(tmp_path):
    meta = b"{not json"
    path = tmp_path / "corrupt.bin"
    path.write_bytes(struct.pack("<8sIQ", checkpoint.MAGIC, 1, len(meta)) + meta)
    with pytest.raises(CheckpointError) as exc_info:
        checkpoint.load_checkpoint(str(path))
    assert exc_info.value.args[0] == "Checkpoint %s has corrupt metadata." % path
