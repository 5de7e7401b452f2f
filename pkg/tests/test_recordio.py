"""Binary record framing shared by checkpoints and dataset caches."""

from collections import OrderedDict

import numpy as np
import pytest

from srea.recordio import MAGIC, RecordFormatError, read_records, write_records


def test_round_trip_bit_exact(tmp_path):
    gen = np.random.default_rng(0)
    records = OrderedDict([
        ("alpha", gen.normal(size=(3, 4)).astype(np.float32)),
        ("beta.gamma", gen.normal(size=7).astype(np.float32)),
        ("scalar", np.array([42.0], dtype=np.float32)),
        ("rank3", gen.normal(size=(2, 3, 2)).astype(np.float32)),
    ])
    path = tmp_path / "r.bin"
    write_records(path, records)
    loaded = read_records(path)
    assert list(loaded) == list(records)
    for name in records:
        assert loaded[name].tobytes() == records[name].tobytes()
        assert loaded[name].shape == records[name].shape


def test_header_layout(tmp_path):
    path = tmp_path / "r.bin"
    write_records(path, {"x": np.zeros(2, np.float32)})
    blob = path.read_bytes()
    assert blob[:4] == MAGIC
    assert int.from_bytes(blob[4:6], "little") == 1  # format version u16


def test_bad_magic_rejected(tmp_path):
    path = tmp_path / "r.bin"
    path.write_bytes(b"NOPE" + b"\x00" * 10)
    with pytest.raises(RecordFormatError, match="magic"):
        read_records(path)


def test_trailing_garbage_rejected(tmp_path):
    path = tmp_path / "r.bin"
    write_records(path, {"x": np.zeros(2, np.float32)})
    path.write_bytes(path.read_bytes() + b"junk")
    with pytest.raises(RecordFormatError, match="trailing"):
        read_records(path)


def test_unicode_names(tmp_path):
    path = tmp_path / "r.bin"
    write_records(path, {"weights/层.1": np.ones(3, np.float32)})
    assert "weights/层.1" in read_records(path)
