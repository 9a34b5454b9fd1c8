"""Reader and writer for the RVOL v1 container.

Layout: one UTF-8 JSON header line terminated by ``\\n``::

    {"magic":"RVOL1","kind":"scalar","dims":[nx,ny,nz],"spacing":[...],"origin":[...]}

followed directly by the little-endian payload in x-fastest order: float32 for
``scalar`` and ``field3`` (xyz interleaved per voxel), uint16 for ``label``.
"""
from __future__ import annotations

import io
import json
import os
from pathlib import Path

import numpy as np

from .errors import RvolFormatError
from .volume import DisplacementField, Geometry, LabelMap, Volume

MAGIC = "RVOL1"
_KINDS = {
    "scalar": (Volume, "<f4", ()),
    "label": (LabelMap, "<u2", ()),
    "field3": (DisplacementField, "<f4", (3,)),
}


def _kind_of(obj) -> str:
    for kind, (cls, _, _) in _KINDS.items():
        if isinstance(obj, cls):
            return kind
    raise TypeError(f"cannot serialize {type(obj).__name__} as RVOL")


def to_bytes(obj: Volume | LabelMap | DisplacementField) -> bytes:
    kind = _kind_of(obj)
    _, dtype, _ = _KINDS[kind]
    g = obj.geometry
    header = {
        "magic": MAGIC,
        "kind": kind,
        "dims": list(g.dims),
        "spacing": list(g.spacing),
        "origin": list(g.origin),
    }
    line = json.dumps(header, separators=(",", ":")).encode("utf-8") + b"\n"
    return line + np.ascontiguousarray(obj.data, dtype=dtype).tobytes()


def from_bytes(buf: bytes):
    nl = buf.find(b"\n")
    if nl < 0:
        raise RvolFormatError("missing header line")
    try:
        header = json.loads(buf[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise RvolFormatError(f"unreadable header: {exc}") from exc
    if not isinstance(header, dict) or header.get("magic") != MAGIC:
        raise RvolFormatError(f"bad magic: {header.get('magic') if isinstance(header, dict) else header!r}")
    kind = header.get("kind")
    if kind not in _KINDS:
        raise RvolFormatError(f"unknown kind {kind!r}")
    try:
        geometry = Geometry(tuple(header["dims"]), tuple(header["spacing"]), tuple(header["origin"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise RvolFormatError(f"invalid geometry in header: {exc}") from exc
    cls, dtype, tail = _KINDS[kind]
    shape = geometry.shape + tail
    payload = buf[nl + 1:]
    expected = int(np.prod(shape)) * np.dtype(dtype).itemsize
    if len(payload) != expected:
        raise RvolFormatError(f"payload has {len(payload)} bytes, expected {expected}")
    data = np.frombuffer(payload, dtype=dtype).reshape(shape)
    return cls(geometry, data)


def write(path, obj) -> None:
    """Write atomically: the payload goes to a temp file that is then renamed."""
    path = Path(path)
    tmp = path.with_name(path.name + ".part")
    with open(tmp, "wb") as fh:
        fh.write(to_bytes(obj))
    os.replace(tmp, path)


def read(path):
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def read_header(path) -> dict:
    with open(path, "rb") as fh:
        line = io.BufferedReader(fh).readline()
    header = json.loads(line.decode("utf-8"))
    if header.get("magic") != MAGIC:
        raise RvolFormatError(f"bad magic in {path}")
    return header
