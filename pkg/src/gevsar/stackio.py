"""Single-file persistence for field stacks.

Payload layout matches the dataset format: little-endian float32,
row-major d x d x r.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError
from .lattice import FieldStack
from .storage import read_container, write_container

STACK_MAGIC = b"GSFS"
STACK_VERSION = 1


def save_stack(stack: FieldStack, path) -> None:
    values = np.ascontiguousarray(stack.values, dtype="<f4")
    meta = {}
    for key in ("seed", "params"):
        if key in stack.meta:
            v = stack.meta[key]
            meta[key] = list(v.as_array()) if hasattr(v, "as_array") else v
    header = {
        "d": stack.grid_dim,
        "r": stack.replicates,
        "payload_bytes": values.nbytes,
        "meta": meta,
    }
    write_container(path, STACK_MAGIC, STACK_VERSION, header, values.tobytes())


def load_stack(path) -> FieldStack:
    header, payload = read_container(path, STACK_MAGIC, STACK_VERSION)
    d, r = header["d"], header["r"]
    buf = np.frombuffer(payload, dtype="<f4")
    if buf.size != d * d * r:
        raise FormatError(f"{path}: payload holds {buf.size} floats, expected {d * d * r}")
    values = buf.reshape(d, d, r).astype(float)
    return FieldStack(values, meta=dict(header.get("meta", {})))
