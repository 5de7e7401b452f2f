"""Binary record framing shared by model checkpoints and dataset caches.

Layout: magic bytes ``SREA``, format version as little-endian u16, record
count as u32, then per record: name length u32, UTF-8 name, rank u32, one u32
extent per axis, and the float32 payload little-endian. Round-trips are
bit-exact for float32 arrays.
"""

from __future__ import annotations

import struct
from collections import OrderedDict

import numpy as np

MAGIC = b"SREA"
VERSION = 1


class RecordFormatError(ValueError):
    pass


def write_records(path, records):
    """Write an ordered mapping of name -> ndarray (stored as float32)."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", VERSION, len(records)))
        for name, arr in records.items():
            arr = np.ascontiguousarray(arr, dtype="<f4")
            name_b = name.encode("utf-8")
            fh.write(struct.pack("<I", len(name_b)))
            fh.write(name_b)
            fh.write(struct.pack("<I", arr.ndim))
            for extent in arr.shape:
                fh.write(struct.pack("<I", extent))
            fh.write(arr.tobytes())


def read_records(path):
    """Read a record file back into an OrderedDict of float32 arrays."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise RecordFormatError(f"{path}: bad magic {blob[:4]!r}")
    version, count = struct.unpack_from("<HI", blob, 4)
    if version != VERSION:
        raise RecordFormatError(f"{path}: unsupported format version {version}")
    off = 10
    records = OrderedDict()
    for _ in range(count):
        (name_len,) = struct.unpack_from("<I", blob, off)
        off += 4
        name = blob[off : off + name_len].decode("utf-8")
        off += name_len
        (rank,) = struct.unpack_from("<I", blob, off)
        off += 4
        shape = struct.unpack_from(f"<{rank}I", blob, off) if rank else ()
        off += 4 * rank
        size = int(np.prod(shape)) if rank else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(shape)
        off += 4 * size
        records[name] = arr.copy()
    if off != len(blob):
        raise RecordFormatError(f"{path}: {len(blob) - off} trailing bytes")
    return records
