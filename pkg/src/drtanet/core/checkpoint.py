"""Checkpoint file format.

Layout::

    drtanet-checkpoint 1
    <count>
    <name> <dim0>x<dim1>x... <byte offset>
    ...
    <blank line>
    <raw little-endian float32 blob>

Offsets are relative to the start of the blob. Scalars use shape ``-``.
"""

from __future__ import annotations

from collections import OrderedDict
from pathlib import Path
from typing import Mapping

import numpy as np

MAGIC = "drtanet-checkpoint 1"
_DTYPE = np.dtype("<f4")


def _fmt_shape(shape) -> str:
    return "x".join(str(d) for d in shape) if shape else "-"


def _parse_shape(text: str) -> tuple[int, ...]:
    return () if text == "-" else tuple(int(d) for d in text.split("x"))


def save_checkpoint(path, arrays: Mapping[str, np.ndarray]) -> None:
    lines = [MAGIC, str(len(arrays))]
    blobs = []
    offset = 0
    for name, arr in arrays.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"parameter name {name!r} contains whitespace")
        a = np.ascontiguousarray(arr, dtype=_DTYPE)
        lines.append(f"{name} {_fmt_shape(a.shape)} {offset}")
        blobs.append(a.tobytes())
        offset += a.nbytes
    header = ("\n".join(lines) + "\n\n").encode("ascii")
    Path(path).write_bytes(header + b"".join(blobs))


def load_checkpoint(path) -> "OrderedDict[str, np.ndarray]":
    raw = Path(path).read_bytes()
    sep = raw.find(b"\n\n")
    if sep < 0:
        raise ValueError(f"{path}: not a checkpoint (missing header terminator)")
    header = raw[:sep].decode("ascii").split("\n")
    blob = raw[sep + 2 :]
    if header[0] != MAGIC:
        raise ValueError(f"{path}: bad magic line {header[0]!r}")
    count = int(header[1])
    if len(header) != count + 2:
        raise ValueError(f"{path}: header lists {len(header) - 2} entries, expected {count}")
    out: OrderedDict[str, np.ndarray] = OrderedDict()
    for line in header[2:]:
        name, shape_s, off_s = line.split(" ")
        shape = _parse_shape(shape_s)
        off = int(off_s)
        n = int(np.prod(shape, dtype=np.int64))
        end = off + n * _DTYPE.itemsize
        if end > len(blob):
            raise ValueError(f"{path}: entry {name!r} runs past the end of the data blob")
        out[name] = np.frombuffer(blob[off:end], dtype=_DTYPE).reshape(shape).copy()
    return out
