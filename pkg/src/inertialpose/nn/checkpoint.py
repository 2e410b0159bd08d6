"""Self-describing model checkpoints.

Layout::

    INERTIALPOSE-CKPT\\n
    <8-byte little-endian header length>
    <UTF-8 JSON header: version, model config, tensor table>
    <float64 little-endian blob>

The JSON is written with sorted keys, so identical weights give identical
bytes.
"""

from __future__ import annotations

import json
import os
import struct
import tempfile

import numpy as np

from ..errors import ParseError
from .models import FusionModel, ModelConfig

MAGIC = b"INERTIALPOSE-CKPT\n"
VERSION = 1


def to_bytes(model: FusionModel, extra: dict | None = None) -> bytes:
    arrays = model.state_arrays()
    table, chunks, offset = [], [], 0
    for name in sorted(arrays):
        a = np.array(arrays[name], dtype="<f8", order="C")
        table.append({"name": name, "shape": list(a.shape), "offset": offset, "count": int(a.size)})
        chunks.append(a.tobytes())
        offset += a.size
    header = {
        "version": VERSION,
        "model": model.cfg.to_dict(),
        "normalizer": ["normalizer.mean", "normalizer.std"],
        "tensors": table,
        "extra": extra or {},
    }
    hb = json.dumps(header, sort_keys=True, separators=(",", ":")).encode()
    return MAGIC + struct.pack("<Q", len(hb)) + hb + b"".join(chunks)


def from_bytes(data: bytes):
    """Return ``(model, header)``."""
    if not data.startswith(MAGIC):
        raise ParseError("not an inertialpose checkpoint (bad magic)")
    pos = len(MAGIC)
    if len(data) < pos + 8:
        raise ParseError("truncated checkpoint header")
    (n,) = struct.unpack("<Q", data[pos : pos + 8])
    pos += 8
    try:
        header = json.loads(data[pos : pos + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"corrupt checkpoint header: {exc}") from None
    if header.get("version") != VERSION:
        raise ParseError(f"unsupported checkpoint version {header.get('version')}")
    blob = np.frombuffer(data[pos + n :], dtype="<f8")
    arrays = {}
    for t in header["tensors"]:
        end = t["offset"] + t["count"]
        if end > blob.size:
            raise ParseError(f"checkpoint blob truncated at tensor {t['name']!r}")
        arrays[t["name"]] = blob[t["offset"] : end].reshape(t["shape"]).astype(float)
    model = FusionModel(ModelConfig(**header["model"]))
    try:
        model.load_arrays(arrays)
    except KeyError as exc:
        raise ParseError(f"checkpoint lacks tensor {exc}") from None
    return model, header


def save(path, model, extra=None):
    data = to_bytes(model, extra)
    d = os.path.dirname(os.path.abspath(path))
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".ckpt-")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def load(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())
