"""Bit-exact binary netpbm I/O: PPM (P6) images and PGM (P5) masks/maps.

Values map as v = round(x * 255) on write and x = v / 255 on read, so
write(read(f)) reproduces f byte for byte.  Parse failures raise
FormatError carrying the byte offset of the offending token.
"""

from __future__ import annotations

import numpy as np

from .errors import FormatError, IoError, ShapeError

_MAXVAL = 255


class _Scanner:
    """Whitespace/comment-aware tokenizer that tracks its byte offset."""

    def __init__(self, blob: bytes):
        self.blob = blob
        self.pos = 0

    def _skip_separators(self) -> None:
        blob = self.blob
        while self.pos < len(blob):
            c = blob[self.pos : self.pos + 1]
            if c.isspace():
                self.pos += 1
            elif c == b"#":
                while self.pos < len(blob) and blob[self.pos : self.pos + 1] != b"\n":
                    self.pos += 1
            else:
                return

    def token(self, what: str) -> bytes:
        self._skip_separators()
        start = self.pos
        blob = self.blob
        while self.pos < len(blob) and not blob[self.pos : self.pos + 1].isspace():
            self.pos += 1
        if self.pos == start:
            raise FormatError(f"missing {what}", start)
        return blob[start : self.pos]

    def integer(self, what: str) -> int:
        start_after_sep = None
        self._skip_separators()
        start_after_sep = self.pos
        tok = self.token(what)
        if not tok.isdigit():
            raise FormatError(f"malformed {what} {tok!r}", start_after_sep)
        return int(tok)


def _read_blob(path) -> bytes:
    try:
        with open(path, "rb") as fh:
            return fh.read()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc


def _parse(blob: bytes, magic: bytes, channels: int) -> np.ndarray:
    sc = _Scanner(blob)
    got = sc.token("magic number")
    if got != magic:
        raise FormatError(f"expected magic {magic.decode()} got {got!r}", 0)
    width = sc.integer("width")
    height = sc.integer("height")
    maxval = sc.integer("maxval")
    if maxval != _MAXVAL:
        raise FormatError(f"unsupported maxval {maxval}", sc.pos - len(str(maxval)))
    # Exactly one whitespace byte separates the header from the raster.
    if sc.pos >= len(blob) or not blob[sc.pos : sc.pos + 1].isspace():
        raise FormatError("missing raster separator", sc.pos)
    sc.pos += 1
    expected = width * height * channels
    raster = blob[sc.pos : sc.pos + expected]
    if len(raster) < expected:
        raise FormatError(
            f"truncated raster: expected {expected} bytes, got {len(raster)}",
            len(blob),
        )
    values = np.frombuffer(raster, dtype=np.uint8).astype(np.float64) / _MAXVAL
    if channels == 1:
        return values.reshape(1, height, width)
    return values.reshape(height, width, channels).transpose(2, 0, 1)


def read_ppm(path) -> np.ndarray:
    """Read a binary P6 image into a [3,H,W] float array in [0,1]."""
    return _parse(_read_blob(path), b"P6", 3)


def read_pgm(path) -> np.ndarray:
    """Read a binary P5 map into a [1,H,W] float array in [0,1]."""
    return _parse(_read_blob(path), b"P5", 1)


def _quantize(arr: np.ndarray) -> np.ndarray:
    # Values are clamped to [0,1] before the documented rounding rule.
    return np.rint(np.clip(arr, 0.0, 1.0) * _MAXVAL).astype(np.uint8)


def _write_blob(path, blob: bytes) -> None:
    try:
        with open(path, "wb") as fh:
            fh.write(blob)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def write_ppm(path, arr: np.ndarray) -> None:
    """Write a [3,H,W] float array in [0,1] as a binary P6 file."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim != 3 or arr.shape[0] != 3:
        raise ShapeError(f"write_ppm: expected [3,H,W], got {arr.shape}")
    _, h, w = arr.shape
    header = f"P6\n{w} {h}\n{_MAXVAL}\n".encode("ascii")
    _write_blob(path, header + _quantize(arr).transpose(1, 2, 0).tobytes())


def write_pgm(path, arr: np.ndarray) -> None:
    """Write a [1,H,W] or [H,W] float array in [0,1] as a binary P5 file."""
    arr = np.asarray(arr, dtype=np.float64)
    if arr.ndim == 3 and arr.shape[0] == 1:
        arr = arr[0]
    if arr.ndim != 2:
        raise ShapeError(f"write_pgm: expected [1,H,W] or [H,W], got {arr.shape}")
    h, w = arr.shape
    header = f"P5\n{w} {h}\n{_MAXVAL}\n".encode("ascii")
    _write_blob(path, header + _quantize(arr).tobytes())
