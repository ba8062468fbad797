"""Self-describing checkpoint container: config header plus named tensors.

Layout (all integers little-endian):

    magic b"FGCP" | u32 version | u32 header length | header utf8
    u32 tensor count
    per tensor:
      u16 name length | name utf8
      u8 dtype tag (0=f32, 1=f64, 2=i64) | u8 ndim | u32 dims...
      u64 byte length | raw little-endian data

The header is the same `key: value` text used everywhere else; writing the
same state twice yields byte-identical files.
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
import torch

from . import config as cfgfmt

MAGIC = b"FGCP"
VERSION = 1

_DTYPE_TAGS = {torch.float32: 0, torch.float64: 1, torch.int64: 2}
_TAG_NUMPY = {0: "<f4", 1: "<f8", 2: "<i8"}
_TAG_TORCH = {0: torch.float32, 1: torch.float64, 2: torch.int64}


class CheckpointError(ValueError):
    pass


def save_checkpoint(path: str | Path, state: dict[str, torch.Tensor],
                    header: dict) -> None:
    chunks = [MAGIC, struct.pack("<I", VERSION)]
    head_b = cfgfmt.dumps(header).encode("utf-8")
    chunks.append(struct.pack("<I", len(head_b)))
    chunks.append(head_b)
    chunks.append(struct.pack("<I", len(state)))
    for name, tensor in state.items():
        t = tensor.detach().cpu().contiguous()
        if t.dtype not in _DTYPE_TAGS:
            raise CheckpointError(f"tensor {name!r} has unsupported dtype {t.dtype}")
        tag = _DTYPE_TAGS[t.dtype]
        name_b = name.encode("utf-8")
        if len(name_b) > 0xFFFF:
            raise CheckpointError(f"tensor name too long: {name[:32]!r}...")
        raw = np.ascontiguousarray(t.numpy()).astype(_TAG_NUMPY[tag], copy=False)
        data = raw.tobytes()
        chunks.append(struct.pack("<H", len(name_b)))
        chunks.append(name_b)
        chunks.append(struct.pack("<BB", tag, t.dim()))
        chunks.append(struct.pack(f"<{t.dim()}I", *t.shape))
        chunks.append(struct.pack("<Q", len(data)))
        chunks.append(data)
    Path(path).write_bytes(b"".join(chunks))


def load_checkpoint(path: str | Path) -> tuple[dict, dict[str, torch.Tensor]]:
    blob = Path(path).read_bytes()
    off = 0

    def take(n: int, what: str) -> bytes:
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint while reading {what}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(4, "magic") != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    (head_len,) = struct.unpack("<I", take(4, "header length"))
    header = cfgfmt.loads(take(head_len, "header").decode("utf-8"))
    (count,) = struct.unpack("<I", take(4, "tensor count"))
    state: dict[str, torch.Tensor] = {}
    for i in range(count):
        (name_len,) = struct.unpack("<H", take(2, f"tensor {i} name length"))
        name = take(name_len, f"tensor {i} name").decode("utf-8")
        tag, ndim = struct.unpack("<BB", take(2, f"tensor {name!r} meta"))
        if tag not in _TAG_NUMPY:
            raise CheckpointError(f"tensor {name!r} has unknown dtype tag {tag}")
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim, f"tensor {name!r} dims"))
        (nbytes,) = struct.unpack("<Q", take(8, f"tensor {name!r} size"))
        raw = take(nbytes, f"tensor {name!r} data")
        arr = np.frombuffer(raw, dtype=_TAG_NUMPY[tag])
        expect = int(np.prod(dims)) if ndim else 1
        if arr.size != expect:
            raise CheckpointError(
                f"tensor {name!r} data size {arr.size} does not match shape {dims}"
            )
        state[name] = torch.from_numpy(arr.reshape(dims).copy()).to(_TAG_TORCH[tag])
    if off != len(blob):
        raise CheckpointError(f"{len(blob) - off} trailing bytes after last tensor")
    return header, state
