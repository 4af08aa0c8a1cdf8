"""PNG / PFM / JSONL writers with byte-stable output."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
from PIL import Image


def to_uint8(img: np.ndarray) -> np.ndarray:
    return (np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)


def write_png(path, img) -> None:
    """Write an ``(H, W)`` or ``(H, W, 3)`` image in ``[0, 1]`` as 8-bit PNG; values are clamped here."""
    arr = to_uint8(img)
    Image.fromarray(arr).save(path, format="PNG", optimize=False)


def read_png(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im, dtype=np.float64) / 255.0


def write_pfm(path, data) -> None:
    """Little-endian PFM (scale -1.0), rows stored bottom to top."""
    arr = np.asarray(data, dtype="<f4")
    if arr.ndim == 2:
        header = b"Pf"
    elif arr.ndim == 3 and arr.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError(f"PFM needs (H, W) or (H, W, 3), got {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n")
        f.write(f"{w} {h}\n".encode())
        f.write(b"-1.0\n")
        f.write(np.ascontiguousarray(arr[::-1]).tobytes())


def read_pfm(path) -> np.ndarray:
    with open(path, "rb") as f:
        kind = f.readline().strip()
        w, h = (int(v) for v in f.readline().split())
        scale = float(f.readline())
        channels = 3 if kind == b"PF" else 1
        dtype = "<f4" if scale < 0 else ">f4"
        data = np.frombuffer(f.read(), dtype=dtype, count=w * h * channels)
    shape = (h, w, 3) if channels == 3 else (h, w)
    return data.reshape(shape)[::-1].astype(np.float32)


def append_jsonl(path, record: dict) -> None:
    with open(path, "a") as f:
        f.write(json.dumps(record, sort_keys=True) + "\n")


def read_jsonl(path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text().splitlines() if line.strip()]


def write_json(path, obj) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
