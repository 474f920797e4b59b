"""Parameter checkpoints: magic, JSON header, flat little-endian float32 payload.

Layout::

    b"SDFCKPT1" | uint32 header length | UTF-8 JSON header | float32[] payload

The header records array names/shapes in payload order plus a SHA-256 of the
payload, so truncation or bit flips are caught on load.
"""

from __future__ import annotations

import hashlib
import json
import struct
from pathlib import Path

import numpy as np

from ..errors import CheckpointError

MAGIC = b"SDFCKPT1"


def save_checkpoint(path, arrays: dict, header: dict) -> None:
    names = list(arrays)
    payload = b"".join(np.asarray(arrays[n], dtype="<f4").tobytes() for n in names)
    hdr = dict(header)
    hdr["arrays"] = [{"name": n, "shape": list(np.shape(arrays[n]))} for n in names]
    hdr["sha256"] = hashlib.sha256(payload).hexdigest()
    raw = json.dumps(hdr, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(raw)))
        fh.write(raw)
        fh.write(payload)


def load_checkpoint(path):
    """Returns (arrays as float64, header). Raises CheckpointError on any mismatch."""
    data = Path(path).read_bytes()
    if not data.startswith(MAGIC) or len(data) < len(MAGIC) + 4:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (n,) = struct.unpack_from("<I", data, len(MAGIC))
    start = len(MAGIC) + 4
    try:
        header = json.loads(data[start:start + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header ({exc})") from None
    payload = data[start + n:]
    if hashlib.sha256(payload).hexdigest() != header.get("sha256"):
        raise CheckpointError(f"{path}: checksum mismatch")
    flat = np.frombuffer(payload, dtype="<f4")
    arrays, off = {}, 0
    for spec in header["arrays"]:
        size = int(np.prod(spec["shape"], dtype=np.int64))
        arrays[spec["name"]] = flat[off:off + size].astype(np.float64).reshape(spec["shape"])
        off += size
    if off != flat.size:
        raise CheckpointError(f"{path}: payload length does not match header")
    return arrays, header
