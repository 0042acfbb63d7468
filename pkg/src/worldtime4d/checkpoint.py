"""Flat named-tensor checkpoints.

Layout: an unsigned little-endian 64-bit header length, a UTF-8 JSON header
``{name: {"shape": [...], "offset": bytes_into_payload}}`` and the payload of
little-endian float64 values, tensors stored back to back in header order.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .autodiff import ParamSet
from .errors import ManifestParseError

_DTYPE = np.dtype("<f8")


def dumps(params):
    header, chunks, offset = {}, [], 0
    for name, value in params.items():
        arr = np.asarray(value, dtype=_DTYPE)
        header[name] = {"shape": list(arr.shape), "offset": offset}
        chunks.append(arr.tobytes())
        offset += arr.nbytes
    head = json.dumps(header).encode("utf-8")
    return struct.pack("<Q", len(head)) + head + b"".join(chunks)


def loads(blob):
    if len(blob) < 8:
        raise ManifestParseError("checkpoint shorter than its length prefix", offset=len(blob))
    (n,) = struct.unpack("<Q", blob[:8])
    if 8 + n > len(blob):
        raise ManifestParseError("checkpoint header is truncated", offset=len(blob))
    try:
        header = json.loads(blob[8:8 + n].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ManifestParseError(f"checkpoint header is not valid JSON: {exc}", offset=8) from exc
    payload = blob[8 + n:]
    out = ParamSet()
    for name, meta in header.items():
        shape = tuple(meta["shape"])
        start = int(meta["offset"])
        stop = start + int(np.prod(shape, dtype=np.int64)) * _DTYPE.itemsize
        if stop > len(payload):
            raise ManifestParseError(f"tensor '{name}' runs past the payload", offset=8 + n + len(payload))
        out[name] = np.frombuffer(payload[start:stop], dtype=_DTYPE).reshape(shape).astype(np.float64)
    return out


def save(path, params):
    with open(path, "wb") as fh:
        fh.write(dumps(params))


def load(path):
    with open(path, "rb") as fh:
        return loads(fh.read())
