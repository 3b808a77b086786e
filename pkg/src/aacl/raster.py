"""Dense raster types and binary netpbm I/O.

Images are ``(H, W, 3)`` float arrays in ``[0, 1]``, masks are ``(H, W)``
uint8 arrays holding class indices or :data:`IGNORE`, probability maps and
logits are ``(..., H, W, C)`` float arrays. Conversion to bytes only happens
at the file boundary.
"""

from __future__ import annotations

import os

import numpy as np

IGNORE = 255


class RasterFormatError(ValueError):
    """Raised for malformed or unsupported netpbm files."""


def check_image(image):
    image = np.asarray(image)
    if image.ndim != 3 or image.shape[2] != 3:
        raise ValueError(f"expected an (H, W, 3) image, got shape {image.shape}")
    if not np.all(np.isfinite(image)) or image.min() < 0.0 or image.max() > 1.0:
        raise ValueError("image values must lie in [0, 1]")
    return image


def check_mask(mask, num_classes=None):
    mask = np.asarray(mask)
    if mask.ndim != 2:
        raise ValueError(f"expected an (H, W) mask, got shape {mask.shape}")
    if num_classes is not None:
        bad = (mask >= num_classes) & (mask != IGNORE)
        if bad.any():
            raise ValueError(
                f"mask holds class {int(mask[bad].max())} outside [0, {num_classes - 1}]"
            )
    return mask


def to_u8(image):
    """Quantize a [0, 1] image to bytes by rounding."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def from_u8(data):
    return np.asarray(data, dtype=np.float64) / 255.0


def softmax(logits, axis=-1):
    """Numerically stable softmax over the class axis.

    Rejects non-finite logits instead of propagating NaN.
    """
    logits = np.asarray(logits)
    if not np.all(np.isfinite(logits)):
        raise ValueError("softmax received non-finite logits")
    shifted = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits, axis=-1):
    logits = np.asarray(logits)
    shifted = logits - logits.max(axis=axis, keepdims=True)
    return shifted - np.log(np.exp(shifted).sum(axis=axis, keepdims=True))


def _parse_header(buf, magic):
    """Return ``(width, height, maxval, payload_offset)`` for a P5/P6 header."""
    if buf[:2] != magic:
        raise RasterFormatError(f"expected magic {magic!r}, got {buf[:2]!r}")
    fields = []
    pos = 2
    n = len(buf)
    while len(fields) < 3:
        # whitespace and comments between tokens
        while pos < n and (buf[pos : pos + 1].isspace() or buf[pos : pos + 1] == b"#"):
            if buf[pos : pos + 1] == b"#":
                while pos < n and buf[pos : pos + 1] not in (b"\n", b"\r"):
                    pos += 1
            else:
                pos += 1
        start = pos
        while pos < n and buf[pos : pos + 1].isdigit():
            pos += 1
        if start == pos:
            raise RasterFormatError("malformed header")
        fields.append(int(buf[start:pos]))
    if pos >= n or not buf[pos : pos + 1].isspace():
        raise RasterFormatError("header must end with a single whitespace byte")
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise RasterFormatError(f"bad dimensions {width}x{height}")
    if maxval != 255:
        raise RasterFormatError(f"only maxval 255 is supported, got {maxval}")
    return width, height, maxval, pos + 1


def _read_payload(path, magic, channels):
    with open(path, "rb") as f:
        buf = f.read()
    width, height, _, offset = _parse_header(buf, magic)
    expected = width * height * channels
    payload = buf[offset:]
    if len(payload) < expected:
        raise RasterFormatError(
            f"truncated payload in {os.fspath(path)}: {len(payload)} of {expected} bytes"
        )
    arr = np.frombuffer(payload[:expected], dtype=np.uint8)
    shape = (height, width, channels) if channels > 1 else (height, width)
    return arr.reshape(shape).copy()


def _write(path, magic, data):
    height, width = data.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, width, height)
    with open(path, "wb") as f:
        f.write(header)
        f.write(np.ascontiguousarray(data, dtype=np.uint8).tobytes())


def read_ppm(path):
    """Read a binary P6 file into a float image in [0, 1]."""
    return from_u8(_read_payload(path, b"P6", 3))


def write_ppm(image, path):
    _write(path, b"P6", to_u8(check_image(image)))


def read_pgm(path, num_classes=None):
    """Read a binary P5 label mask.

    Byte values are class indices, 255 is :data:`IGNORE`. When
    ``num_classes`` is given, any other byte ``>= num_classes`` is rejected.
    """
    mask = _read_payload(path, b"P5", 1)
    try:
        check_mask(mask, num_classes)
    except ValueError as err:
        raise RasterFormatError(f"{os.fspath(path)}: {err}") from None
    return mask


def write_pgm(mask, path):
    mask = check_mask(mask)
    if mask.min() < 0 or mask.max() > 255:
        raise ValueError("mask values must fit in a byte")
    _write(path, b"P5", mask.astype(np.uint8))
