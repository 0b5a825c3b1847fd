"""PNG (8-bit sRGB-encoded) and PFM (linear float) image files."""
from __future__ import annotations

import re
from pathlib import Path

import numpy as np
from PIL import Image


class DataError(ValueError):
    """Input files are missing, malformed or inconsistent."""


def read_png(path, channels: int = 3) -> np.ndarray:
    """Decode an 8-bit PNG to float64 in [0, 1] (values stay sRGB encoded)."""
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing image file: {path}")
    try:
        with Image.open(path) as im:
            im.load()
            if channels == 1:
                arr = np.asarray(im.convert("L"))
            else:
                arr = np.asarray(im.convert("RGB"))
    except (OSError, SyntaxError, ValueError) as exc:
        raise DataError(f"cannot decode {path}: {exc}") from exc
    return arr.astype(np.float64) / 255.0


def read_mask(path) -> np.ndarray:
    return read_png(path, channels=1) >= 0.5


def to_uint8(img: np.ndarray) -> np.ndarray:
    return np.round(np.clip(np.asarray(img, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img) -> None:
    arr = to_uint8(img)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[..., 0]
    Image.fromarray(arr).save(path, optimize=False)


def write_mask(path, mask) -> None:
    write_png(path, np.asarray(mask, dtype=np.float64))


def write_pfm(path, img) -> None:
    img = np.asarray(img, dtype=np.float32)
    if not np.isfinite(img).all():
        raise DataError("refusing to write non-finite values to PFM")
    if img.ndim == 2 or (img.ndim == 3 and img.shape[2] == 1):
        header, data = b"Pf", img.reshape(img.shape[0], img.shape[1])
    elif img.ndim == 3 and img.shape[2] == 3:
        header, data = b"PF", img
    else:
        raise DataError(f"PFM needs 1 or 3 channels, got shape {img.shape}")
    h, w = data.shape[:2]
    with open(path, "wb") as f:
        f.write(header + b"\n" + f"{w} {h}\n".encode() + b"-1.0\n")
        f.write(np.flipud(data).astype("<f4").tobytes())


_PFM_DIMS = re.compile(rb"^(\d+)\s+(\d+)$")


def read_pfm(path) -> np.ndarray:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing PFM file: {path}")
    with open(path, "rb") as f:
        kind = f.readline().strip()
        dims = _PFM_DIMS.match(f.readline().strip())
        try:
            scale = float(f.readline().strip())
        except ValueError:
            scale = 0.0
        body = f.read()
    if kind not in (b"PF", b"Pf") or dims is None or scale == 0.0:
        raise DataError(f"malformed PFM header in {path}")
    w, h = int(dims.group(1)), int(dims.group(2))
    c = 3 if kind == b"PF" else 1
    dtype = "<f4" if scale < 0 else ">f4"
    if len(body) != w * h * c * 4:
        raise DataError(f"PFM payload size mismatch in {path}")
    data = np.flipud(np.frombuffer(body, dtype=dtype).reshape(h, w, c) if c == 3
                     else np.frombuffer(body, dtype=dtype).reshape(h, w)).astype(np.float64)
    if not np.isfinite(data).all():
        raise DataError(f"PFM {path} contains NaN or infinite values")
    return data
