"""Binary PPM (P6, maxval 255) reading and writing."""
from __future__ import annotations

import re

import numpy as np

from ..errors import DecodeError

_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\d+)")


def decode_ppm(buf: bytes):
    """Bytes of a P6 file -> float32 array 3 x H x W with values byte/255."""
    if not buf.startswith(b"P6"):
        raise DecodeError("not a binary PPM (missing P6 magic)")
    pos, vals = 2, []
    for _ in range(3):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DecodeError("malformed PPM header")
        vals.append(int(m.group(1)))
        pos = m.end()
    if pos >= len(buf) or buf[pos:pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise DecodeError("malformed PPM header: missing separator before pixel data")
    pos += 1
    w, h, maxval = vals
    if w <= 0 or h <= 0:
        raise DecodeError(f"invalid PPM size {w}x{h}")
    if maxval != 255:
        raise DecodeError(f"unsupported PPM maxval {maxval} (only 8-bit is supported)")
    need = w * h * 3
    if len(buf) - pos < need:
        raise DecodeError(f"truncated PPM payload: {len(buf) - pos} of {need} bytes")
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=pos).reshape(h, w, 3)
    return px.transpose(2, 0, 1).astype(np.float32) / np.float32(255.0)


def decode_image(path):
    with open(path, "rb") as fh:
        return decode_ppm(fh.read())


def to_bytes(img):
    """3 x H x W floats in [0, 1] -> uint8 H x W x 3 (round half to even)."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[0] != 3:
        raise ValueError(f"expected 3 x H x W image, got shape {img.shape}")
    return np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8).transpose(1, 2, 0)


def encode_ppm(img):
    px = to_bytes(img)
    h, w, _ = px.shape
    return b"P6\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(px).tobytes()


def encode_image(path, img):
    with open(path, "wb") as fh:
        fh.write(encode_ppm(img))
