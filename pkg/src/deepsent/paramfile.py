"""Binary tensor container: magic, JSON header, then raw little-endian float32 tensors.

Layout::

    b"DPSNT1" | uint64 LE header length | UTF-8 JSON header | tensor bytes

The header carries arbitrary JSON metadata plus ``"tensors"``: a list of
``{"name", "shape", "offset", "nbytes"}`` with offsets relative to the start of
the tensor bytes.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

MAGIC = b"DPSNT1"


class ParameterFileError(ValueError):
    pass


def write_container(path, meta: dict, tensors: dict[str, np.ndarray]) -> None:
    index, blobs, offset = [], [], 0
    for name, arr in tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        index.append({"name": name, "shape": list(np.shape(arr)), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    header = dict(meta)
    header["tensors"] = index
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:len(MAGIC)] != MAGIC:
        raise ParameterFileError(f"{path}: bad magic {raw[:len(MAGIC)]!r}")
    pos = len(MAGIC)
    if len(raw) < pos + 8:
        raise ParameterFileError(f"{path}: truncated header")
    (hlen,) = struct.unpack("<Q", raw[pos:pos + 8])
    pos += 8
    try:
        header = json.loads(raw[pos:pos + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParameterFileError(f"{path}: unreadable header") from exc
    data = raw[pos + hlen:]
    tensors = {}
    for t in header.pop("tensors"):
        shape = tuple(t["shape"])
        n = int(np.prod(shape, dtype=np.int64)) * 4
        if t["nbytes"] != n or t["offset"] + n > len(data):
            raise ParameterFileError(f"{path}: tensor {t['name']} is truncated or mis-sized")
        tensors[t["name"]] = np.frombuffer(data, "<f4", count=n // 4, offset=t["offset"]).reshape(shape).copy()
    return header, tensors
