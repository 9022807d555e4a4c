"""``LGSW`` checkpoint files.

Layout (little-endian)::

    magic "LGSW" | u32 version | u32 meta_len | meta (utf-8 JSON)
    | u32 n_records | records

    record: u16 name_len | name (utf-8) | u8 ndim | u64 * ndim shape
            | f64 * prod(shape)

The JSON header carries the model kind, hyperparameters and anything else
that is not an array.
"""
import json
import struct

import numpy as np

from ..errors import FormatError

MAGIC = b"LGSW"
VERSION = 1


def write_arrays(path, arrays: dict, meta: dict) -> None:
    meta_b = json.dumps(meta, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_b)), meta_b, struct.pack("<I", len(arrays))]
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb + struct.pack("<B", a.ndim))
        parts.append(struct.pack(f"<{a.ndim}Q", *a.shape))
        parts.append(a.tobytes())
    with open(path, "wb") as fh:
        fh.write(b"".join(parts))


def read_arrays(path) -> tuple[dict, dict]:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise FormatError(f"{path}: bad magic {blob[:4]!r}")
    try:
        version, meta_len = struct.unpack_from("<II", blob, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        pos = 12
        meta = json.loads(blob[pos:pos + meta_len].decode("utf-8"))
        pos += meta_len
        (count,) = struct.unpack_from("<I", blob, pos)
        pos += 4
        arrays = {}
        for _ in range(count):
            (nl,) = struct.unpack_from("<H", blob, pos)
            pos += 2
            name = blob[pos:pos + nl].decode("utf-8")
            pos += nl
            (ndim,) = struct.unpack_from("<B", blob, pos)
            pos += 1
            shape = struct.unpack_from(f"<{ndim}Q", blob, pos)
            pos += 8 * ndim
            size = int(np.prod(shape, dtype=np.int64))
            if pos + 8 * size > len(blob):
                raise FormatError(f"{path}: truncated record {name!r}")
            arrays[name] = np.frombuffer(blob, dtype="<f8", count=size, offset=pos).reshape(shape).copy()
            pos += 8 * size
    except struct.error as exc:
        raise FormatError(f"{path}: truncated checkpoint ({exc})") from None
    if pos != len(blob):
        raise FormatError(f"{path}: {len(blob) - pos} trailing bytes")
    return arrays, meta
