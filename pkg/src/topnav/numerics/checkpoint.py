"""TNAV1 checkpoint format.

Layout: magic ``b"TNAV1"``, then for every tensor in lexicographic name order:
u32 name length, UTF-8 name, u32 rank, rank x u64 dims, little-endian float64
payload. All integers little-endian. The file ends after the last tensor.
"""

from __future__ import annotations

import os
import struct
from pathlib import Path

import numpy as np

from .nn import ParamSet

MAGIC = b"TNAV1"


class CheckpointError(ValueError):
    pass


def encode_tensors(tensors: dict[str, np.ndarray]) -> bytes:
    chunks = [MAGIC]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name], dtype="<f8", order="C")
        raw = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(raw)))
        chunks.append(raw)
        chunks.append(struct.pack("<I", arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        chunks.append(arr.tobytes(order="C"))
    return b"".join(chunks)


def decode_tensors(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:5] != MAGIC:
        raise CheckpointError("bad magic; not a TNAV1 checkpoint")
    pos = 5
    out: dict[str, np.ndarray] = {}
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            dims = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            count = int(np.prod(dims)) if rank else 1
            nbytes = 8 * count
            if pos + nbytes > len(buf):
                raise CheckpointError(f"truncated payload for {name!r}")
            arr = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims)
            pos += nbytes
            if name in out:
                raise CheckpointError(f"duplicate tensor {name!r}")
            out[name] = arr.astype(np.float64)
    except struct.error as exc:
        raise CheckpointError("truncated checkpoint") from exc
    return out


def save_checkpoint(path: str | os.PathLike, params: ParamSet | dict[str, np.ndarray]) -> None:
    tensors = params.state() if isinstance(params, ParamSet) else params
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(encode_tensors(tensors))
    os.replace(tmp, path)


def load_checkpoint(path: str | os.PathLike) -> dict[str, np.ndarray]:
    return decode_tensors(Path(path).read_bytes())
