"""Binary checkpoint records.

Each record is laid out little-endian as::

    u32 name_len | name (utf8) | u8 dtype | u8 rank | u64 * rank shape | raw data

dtype codes: 0 = f32, 1 = f64, 2 = u8.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

_CODES = {np.dtype("<f4"): 0, np.dtype("<f8"): 1, np.dtype("u1"): 2}
_DTYPES = {v: k for k, v in _CODES.items()}
META_KEY = "__meta__"


class CheckpointError(ValueError):
    pass


def save_checkpoint(path, tensors: dict, meta: dict | None = None) -> None:
    """Write named arrays (and optional JSON metadata stored as a u8 record)."""
    items = list(tensors.items())
    if meta is not None:
        items.insert(0, (META_KEY, np.frombuffer(json.dumps(meta, sort_keys=True).encode(), dtype=np.uint8)))
    with open(path, "wb") as f:
        for name, arr in items:
            arr = np.asarray(getattr(arr, "data", arr))
            dt = arr.dtype.newbyteorder("<") if arr.dtype.itemsize > 1 else arr.dtype
            if dt not in _CODES:
                raise CheckpointError(f"unsupported dtype {arr.dtype} for {name!r}")
            raw = name.encode("utf8")
            f.write(struct.pack("<I", len(raw)))
            f.write(raw)
            f.write(struct.pack("<BB", _CODES[dt], arr.ndim))
            f.write(struct.pack(f"<{arr.ndim}Q", *arr.shape))
            f.write(np.ascontiguousarray(arr, dtype=dt).tobytes())


def load_checkpoint(path) -> tuple[dict, dict | None]:
    """Return ``(arrays, meta)``."""
    buf = Path(path).read_bytes()
    pos, out, meta = 0, {}, None
    try:
        while pos < len(buf):
            (n,) = struct.unpack_from("<I", buf, pos)
            pos += 4
            name = buf[pos:pos + n].decode("utf8")
            pos += n
            code, rank = struct.unpack_from("<BB", buf, pos)
            pos += 2
            shape = struct.unpack_from(f"<{rank}Q", buf, pos)
            pos += 8 * rank
            dt = _DTYPES[code]
            count = int(np.prod(shape)) if rank else 1
            nbytes = count * dt.itemsize
            if pos + nbytes > len(buf):
                raise CheckpointError("truncated record")
            arr = np.frombuffer(buf, dtype=dt, count=count, offset=pos).reshape(shape).copy()
            pos += nbytes
            if name == META_KEY:
                meta = json.loads(arr.tobytes().decode())
            else:
                out[name] = arr
    except (struct.error, KeyError, UnicodeDecodeError) as e:
        raise CheckpointError(f"corrupt checkpoint {path}: {e}") from None
    return out, meta
