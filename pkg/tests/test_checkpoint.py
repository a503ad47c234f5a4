"""Round-trip and byte-stability checks for the binary checkpoint format."""

import struct

import numpy as np
import pytest

from fewview.checkpoint import MAGIC, load_checkpoint, save_checkpoint
from fewview.errors import CompatibilityError, ShapeError


def sample_tensors():
    rng = np.random.default_rng(5)
    return {
        "head.layer0.weight": rng.normal(size=(3, 4)),
        "head.layer0.bias": rng.normal(size=3),
        "scalar": np.array(2.5),
    }


def test_round_trip(tmp_path):
    path = tmp_path / "model.ckpt"
    tensors = sample_tensors()
    meta = {"world_hash": "abc123", "task": "classification"}
    save_checkpoint(path, tensors, meta)
    loaded, loaded_meta = load_checkpoint(path)
    assert loaded_meta == meta
    assert set(loaded) == set(tensors)
    for name in tensors:
        np.testing.assert_array_equal(loaded[name], np.asarray(tensors[name], dtype=np.float64))
        assert loaded[name].dtype == np.float64


def test_same_content_same_bytes(tmp_path):
    a, b = tmp_path / "a.ckpt", tmp_path / "b.ckpt"
    save_checkpoint(a, sample_tensors(), {"k": 1})
    save_checkpoint(b, sample_tensors(), {"k": 1})
    assert a.read_bytes() == b.read_bytes()


def test_header_is_little_endian_and_magic_first(tmp_path):
    path = tmp_path / "m.ckpt"
    save_checkpoint(path, {"t": np.zeros(2)}, {})
    raw = path.read_bytes()
    assert raw[: len(MAGIC)] == MAGIC
    (hlen,) = struct.unpack("<Q", raw[len(MAGIC) : len(MAGIC) + 8])
    assert 0 < hlen < len(raw)


def test_rejects_foreign_file(tmp_path):
    path = tmp_path / "junk.ckpt"
    path.write_bytes(b"NOTACKPT" + b"\x00" * 32)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path)


def test_rejects_future_version(tmp_path):
    path = tmp_path / "v.ckpt"
    header = b'{"version":99,"meta":{},"tensors":[]}'
    path.write_bytes(MAGIC + struct.pack("<Q", len(header)) + header)
    with pytest.raises(CompatibilityError):
        load_checkpoint(path)


def test_rejects_truncated_payload(tmp_path):
    path = tmp_path / "t.ckpt"
    save_checkpoint(path, {"t": np.arange(8.0)}, {})
    raw = path.read_bytes()
    path.write_bytes(raw[:-8])
    with pytest.raises(ShapeError):
        load_checkpoint(path)


def test_rejects_trailing_bytes(tmp_path):
    path = tmp_path / "x.ckpt"
    save_checkpoint(path, {"t": np.arange(4.0)}, {})
    path.write_bytes(path.read_bytes() + b"\x00")
    with pytest.raises(ShapeError):
        load_checkpoint(path)


def test_no_tmp_file_left_behind(tmp_path):
    path = tmp_path / "clean.ckpt"
    save_checkpoint(path, {"t": np.zeros(1)}, {})
    assert [p.name for p in tmp_path.iterdir()] == ["clean.ckpt"]
