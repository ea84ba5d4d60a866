"""ATKPT1 checkpoint container.

Layout::

    b"ATKPT1\\n"
    uint64 little-endian header length
    UTF-8 JSON header {"params": [{"name", "dtype", "shape", "offset"}...], "config": {...}}
    little-endian fp32 payloads, back to back, offsets relative to payload start

The header is serialized with sorted keys and fixed separators, so saving a
loaded checkpoint reproduces the original bytes.
"""
from __future__ import annotations

import json
import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from .errors import FormatError

MAGIC = b"ATKPT1\n"
_LEN = struct.Struct("<Q")


def _as_state(source):
    if hasattr(source, "state_dict"):
        return source.state_dict()
    return source


def encode_checkpoint(source, config=None):
    state = _as_state(source)
    entries, chunks, offset = [], [], 0
    for name, value in state.items():
        arr = np.ascontiguousarray(np.asarray(value), dtype="<f4")
        entries.append({"name": name, "dtype": "fp32", "shape": list(arr.shape), "offset": offset})
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    header = {"params": entries}
    if config is not None:
        header["config"] = config
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(chunks)


def decode_checkpoint(raw):
    """Parse checkpoint bytes into ``(state, config)``."""
    if not raw.startswith(MAGIC):
        raise FormatError("Not an ATKPT1 checkpoint (bad magic)")
    start = len(MAGIC)
    if len(raw) < start + _LEN.size:
        raise FormatError("Checkpoint truncated inside the header length")
    (length,) = _LEN.unpack_from(raw, start)
    body = start + _LEN.size
    try:
        header = json.loads(raw[body:body + length].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise FormatError(f"Failed to parse checkpoint header: {e}")
    payload = memoryview(raw)[body + length:]
    state = OrderedDict()
    for entry in header.get("params", []):
        if entry.get("dtype") != "fp32":
            raise FormatError(f"Unsupported dtype {entry.get('dtype')!r} for {entry.get('name')}")
        shape = tuple(entry["shape"])
        count = int(np.prod(shape)) if shape else 1
        lo = entry["offset"]
        hi = lo + 4 * count
        if hi > len(payload):
            raise FormatError(f"Payload for {entry['name']} runs past the end of the file")
        arr = np.frombuffer(payload[lo:hi], dtype="<f4").reshape(shape)
        state[entry["name"]] = arr.astype(np.float32)
    return state, header.get("config")


def save_checkpoint(path, source, config=None):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode_checkpoint(source, config))
    return path


def load_checkpoint(path):
    try:
        raw = Path(path).read_bytes()
    except OSError as e:
        raise FormatError(f"Failed to read checkpoint {path}: {e}")
    return decode_checkpoint(raw)
