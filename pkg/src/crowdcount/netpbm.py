"""Minimal binary PGM (P5) / PPM (P6) reader and writer.

Only 8-bit maxval-255 files are supported; that is all the annotation
format references.  Grayscale images round-trip as (H, W) uint8 arrays,
color as (H, W, 3).
"""

from __future__ import annotations

import numpy as np

from .errors import ParseError


def write_pgm(path, pixels: np.ndarray) -> None:
    """Write a (H, W) uint8 array as binary PGM."""
    if pixels.ndim != 2:
        raise ParseError(f"PGM needs a 2D array, got shape {pixels.shape}")
    _write(path, b"P5", pixels)


def write_ppm(path, pixels: np.ndarray) -> None:
    """Write a (H, W, 3) uint8 array as binary PPM."""
    if pixels.ndim != 3 or pixels.shape[2] != 3:
        raise ParseError(f"PPM needs a (H, W, 3) array, got shape {pixels.shape}")
    _write(path, b"P6", pixels)


def _write(path, magic: bytes, pixels: np.ndarray) -> None:
    h, w = pixels.shape[:2]
    header = b"%s\n%d %d\n255\n" % (magic, w, h)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(np.ascontiguousarray(pixels, dtype=np.uint8).tobytes())


def read_image(path) -> np.ndarray:
    """Read a binary PGM or PPM file.

    Returns uint8 (H, W) for PGM, (H, W, 3) for PPM.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:2] == b"P5":
        channels = 1
    elif blob[:2] == b"P6":
        channels = 3
    else:
        raise ParseError(f"{path}: not a binary PGM/PPM file")

    # header = magic, width, height, maxval as whitespace-separated
    # tokens; '#' starts a comment that runs to end of line.
    tokens: list[int] = []
    pos = 2
    while len(tokens) < 3:
        if pos >= len(blob):
            raise ParseError(f"{path}: truncated header")
        ch = blob[pos : pos + 1]
        if ch == b"#":
            eol = blob.find(b"\n", pos)
            pos = len(blob) if eol < 0 else eol + 1
        elif ch.isspace():
            pos += 1
        elif ch.isdigit():
            end = pos
            while end < len(blob) and blob[end : end + 1].isdigit():
                end += 1
            tokens.append(int(blob[pos:end]))
            pos = end
        else:
            raise ParseError(f"{path}: unexpected byte {ch!r} in header")
    width, height, maxval = tokens
    if maxval != 255:
        raise ParseError(f"{path}: only maxval 255 is supported, got {maxval}")
    pos += 1  # single whitespace byte after maxval
    expected = width * height * channels
    data = blob[pos : pos + expected]
    if len(data) != expected:
        raise ParseError(
            f"{path}: expected {expected} pixel bytes, found {len(data)}"
        )
    pixels = np.frombuffer(data, dtype=np.uint8)
    if channels == 1:
        return pixels.reshape(height, width).copy()
    return pixels.reshape(height, width, 3).copy()
