"""Self-describing binary checkpoint container.

Layout: magic "LDCK", u32 format version, u32 header length, UTF-8 JSON
header (model config, precision, step, anything else structured), then for
each tensor: u32 name length, name bytes, u32 rank, u64 dims, raw
little-endian IEEE-754 payload. Round trips are bit-exact.
"""

from __future__ import annotations

import json
import struct
from typing import Dict, Tuple

import numpy as np

__all__ = ["save_checkpoint", "load_checkpoint", "FORMAT_VERSION"]

MAGIC = b"LDCK"
FORMAT_VERSION = 1

_DTYPE_CODES = {"f32": np.dtype("<f4"), "f64": np.dtype("<f8")}


def _dtype_code(arr: np.ndarray) -> str:
    if arr.dtype == np.float32:
        return "f32"
    if arr.dtype == np.float64:
        return "f64"
    raise ValueError(f"unsupported tensor dtype {arr.dtype}")


def save_checkpoint(path: str, header: dict,
                    tensors: Dict[str, np.ndarray]) -> None:
    header = dict(header)
    header["tensor_dtypes"] = {k: _dtype_code(v) for k, v in tensors.items()}
    blob = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fp:
        fp.write(MAGIC)
        fp.write(struct.pack("<II", FORMAT_VERSION, len(blob)))
        fp.write(blob)
        for name in sorted(tensors):
            arr = tensors[name]
            shape = arr.shape  # np.ascontiguousarray promotes 0-d to 1-d
            arr = np.ascontiguousarray(arr)
            nb = name.encode("utf-8")
            fp.write(struct.pack("<I", len(nb)))
            fp.write(nb)
            fp.write(struct.pack("<I", len(shape)))
            fp.write(struct.pack(f"<{len(shape)}Q", *shape))
            fp.write(arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes())


def load_checkpoint(path: str) -> Tuple[dict, Dict[str, np.ndarray]]:
    with open(path, "rb") as fp:
        magic = fp.read(4)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint (bad magic {magic!r})")
        version, hlen = struct.unpack("<II", fp.read(8))
        if version != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {version}")
        header = json.loads(fp.read(hlen).decode("utf-8"))
        dtypes = header.get("tensor_dtypes", {})
        tensors: Dict[str, np.ndarray] = {}
        while True:
            raw = fp.read(4)
            if not raw:
                break
            (nlen,) = struct.unpack("<I", raw)
            name = fp.read(nlen).decode("utf-8")
            (rank,) = struct.unpack("<I", fp.read(4))
            shape = struct.unpack(f"<{rank}Q", fp.read(8 * rank))
            dt = _DTYPE_CODES[dtypes.get(name, "f32")]
            count = int(np.prod(shape, dtype=np.int64))
            payload = fp.read(count * dt.itemsize)
            tensors[name] = np.frombuffer(payload, dtype=dt).reshape(shape).copy()
    return header, tensors
