"""Checkpoint files: a text header followed by concatenated LIFT tensor dumps.

Layout::

    LIFCKPT 1
    [config]
    key=value            (model config)
    [meta]
    key=value            (training state, normalisation constants, ...)
    [tensors]
    name dtype shape offset nbytes
    [end]
    <binary section: one LIFT dump per tensor, offsets relative to its start>

Shapes are comma-separated and kept exactly; LIFT dumps pad lower-rank
arrays with trailing unit axes.
"""
from __future__ import annotations

import io
import os
from dataclasses import dataclass, field

import numpy as np

from .tensor import read_tensor, write_tensor

__all__ = ["Checkpoint", "save_checkpoint", "load_checkpoint"]

MAGIC = "LIFCKPT 1"


@dataclass
class Checkpoint:
    config: dict[str, str] = field(default_factory=dict)
    meta: dict[str, str] = field(default_factory=dict)
    tensors: dict[str, np.ndarray] = field(default_factory=dict)


def _as4(a: np.ndarray) -> np.ndarray:
    if a.ndim > 4:
        raise ValueError(f"cannot store rank-{a.ndim} array")
    return a.reshape(a.shape + (1,) * (4 - a.ndim))


def _check_kv(section: str, kv: dict[str, str]) -> None:
    for k, v in kv.items():
        if "=" in k or "\n" in k or "\n" in str(v):
            raise ValueError(f"[{section}] entry {k!r}: keys may not contain '=' or newlines, values no newlines")


def save_checkpoint(path: str | os.PathLike, ckpt: Checkpoint) -> None:
    blob = io.BytesIO()
    lines = [MAGIC, "[config]"]
    _check_kv("config", ckpt.config)
    _check_kv("meta", ckpt.meta)
    lines += [f"{k}={v}" for k, v in ckpt.config.items()]
    lines.append("[meta]")
    lines += [f"{k}={v}" for k, v in ckpt.meta.items()]
    lines.append("[tensors]")
    for name, arr in ckpt.tensors.items():
        if any(ch.isspace() for ch in name):
            raise ValueError(f"tensor name {name!r} contains whitespace")
        offset = blob.tell()
        nbytes = write_tensor(blob, _as4(np.ascontiguousarray(arr)))
        shape = ",".join(str(s) for s in arr.shape) or "-"
        lines.append(f"{name} {arr.dtype.name} {shape} {offset} {nbytes}")
    lines.append("[end]")
    header = ("\n".join(lines) + "\n").encode("utf-8")
    tmp = f"{os.fspath(path)}.tmp"
    with open(tmp, "wb") as f:
        f.write(header)
        f.write(blob.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"\n[end]\n")
    if not data.startswith(MAGIC.encode()) or end < 0:
        raise ValueError(f"{path}: not a checkpoint file")
    header = data[:end].decode("utf-8").split("\n")
    body = data[end + len(b"\n[end]\n"):]
    ckpt = Checkpoint()
    section = None
    manifest = []
    for line in header[1:]:
        if line in ("[config]", "[meta]", "[tensors]"):
            section = line[1:-1]
            continue
        if section in ("config", "meta"):
            key, sep, value = line.partition("=")
            if not sep:
                raise ValueError(f"{path}: malformed header line {line!r}")
            getattr(ckpt, section)[key] = value
        elif section == "tensors":
            manifest.append(line.split(" "))
        else:
            raise ValueError(f"{path}: header line outside any section: {line!r}")
    for name, dtype, shape, offset, nbytes in manifest:
        offset, nbytes = int(offset), int(nbytes)
        if offset + nbytes > len(body):
            raise ValueError(f"{path}: tensor {name} extends past end of file")
        arr = read_tensor(io.BytesIO(body[offset:offset + nbytes]))
        dims = () if shape == "-" else tuple(int(s) for s in shape.split(","))
        if arr.dtype.name != dtype:
            raise ValueError(f"{path}: tensor {name} dtype {arr.dtype.name} != manifest {dtype}")
        ckpt.tensors[name] = arr.reshape(dims)
    return ckpt
