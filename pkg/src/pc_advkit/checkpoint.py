"""Versioned binary container for model parameters.

Layout: magic, format version, a length-prefixed JSON header (kind,
shapes, seed, arbitrary metadata) and the flat little-endian float64
parameter block.  Writing is fully deterministic: identical models
produce identical bytes.
"""

import json
import struct

import numpy as np

from .errors import InvalidInputError

_MAGIC = b"PCAK"
_VERSION = 1


def write_container(path, kind, header, params):
    """Serialize a parameter list under the given kind tag."""
    header = dict(header)
    header["kind"] = kind
    header["shapes"] = [list(p.shape) for p in params]
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(_MAGIC)
        fh.write(struct.pack("<II", _VERSION, len(blob)))
        fh.write(blob)
        for p in params:
            fh.write(np.ascontiguousarray(p, dtype="<f8").tobytes())


def read_container(path):
    """Read back (header, params); raises InvalidInputError on bad files."""
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != _MAGIC:
        raise InvalidInputError(f"{path}: not a pc-advkit checkpoint")
    version, hlen = struct.unpack("<II", data[4:12])
    if version != _VERSION:
        raise InvalidInputError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[12 : 12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise InvalidInputError(f"{path}: corrupt checkpoint header: {exc}") from exc
    offset = 12 + hlen
    params = []
    for shape in header["shapes"]:
        count = int(np.prod(shape)) if shape else 1
        end = offset + 8 * count
        if end > len(data):
            raise InvalidInputError(f"{path}: truncated parameter block")
        params.append(
            np.frombuffer(data[offset:end], dtype="<f8").astype(np.float64).reshape(shape)
        )
        offset = end
    return header, params
