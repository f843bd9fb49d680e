"""Binary PGM (P5) / PPM (P6) codec, 8-bit only."""
from __future__ import annotations

import os
import re

import numpy as np

from .errors import FormatError

_HEADER = re.compile(rb"^(P[56])\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s+(?:#[^\n]*\n\s*)*(\d+)\s")


def read_pnm(path) -> np.ndarray:
    """Decode to a uint8 array of shape ``channels x height x width``."""
    with open(path, "rb") as fh:
        raw = fh.read()
    m = _HEADER.match(raw)
    if m is None:
        raise FormatError(f"{path}: not a binary PGM/PPM (P5/P6) file")
    magic, w, h, maxval = m.group(1), int(m.group(2)), int(m.group(3)), int(m.group(4))
    if maxval != 255:
        raise FormatError(f"{path}: only 8-bit images (maxval 255) are supported, got {maxval}")
    c = 1 if magic == b"P5" else 3
    body = raw[m.end():]
    if len(body) < w * h * c:
        raise FormatError(f"{path}: truncated pixel data")
    pix = np.frombuffer(body[: w * h * c], dtype=np.uint8)
    return pix.reshape(h, w, c).transpose(2, 0, 1).copy()


def write_pnm(path, pixels: np.ndarray) -> None:
    """Encode ``h x w`` / ``1 x h x w`` as P5 or ``3 x h x w`` as P6."""
    arr = np.asarray(pixels)
    if arr.ndim == 2:
        arr = arr[None]
    if arr.ndim != 3 or arr.shape[0] not in (1, 3):
        raise FormatError(f"cannot encode array of shape {arr.shape} as PGM/PPM")
    if arr.dtype != np.uint8:
        raise FormatError("pixels must be uint8")
    c, h, w = arr.shape
    magic = b"P5" if c == 1 else b"P6"
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(b"%s\n%d %d\n255\n" % (magic, w, h))
        fh.write(np.ascontiguousarray(arr.transpose(1, 2, 0)).tobytes())
