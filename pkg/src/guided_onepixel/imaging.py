"""Image container and binary PGM/PPM (P5/P6) reading and writing."""

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import FormatError


@dataclass(frozen=True, eq=False)
class Image:
    """An H x W x C intensity array with values in [0, 1].

    ``label`` is the ground-truth class when the image comes from a corpus.
    """

    data: np.ndarray
    label: Optional[int] = None

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim == 2:
            data = data[:, :, None]
        if data.ndim != 3 or data.shape[2] not in (1, 3):
            raise ValueError(f"image data must be HxWx1 or HxWx3, got shape {data.shape}")
        if data.size == 0:
            raise ValueError("image has no pixels")
        if not np.all((data >= 0.0) & (data <= 1.0)):
            raise ValueError("image intensities must lie in [0, 1]")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)

    @property
    def height(self):
        return self.data.shape[0]

    @property
    def width(self):
        return self.data.shape[1]

    @property
    def channels(self):
        return self.data.shape[2]

    @property
    def shape(self):
        return self.data.shape

    def with_data(self, data):
        return Image(data, self.label)


def _read_token(buf, pos):
    """Return (token, next_pos), skipping whitespace and '#' comments."""
    n = len(buf)
    while pos < n:
        c = buf[pos:pos + 1]
        if c == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
        elif c.isspace():
            pos += 1
        else:
            break
    start = pos
    while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
        pos += 1
    if start == pos:
        raise FormatError("unexpected end of header", start)
    return buf[start:pos], pos


def decode_pnm(buf):
    """Decode P5 (grayscale) or P6 (RGB) bytes into a float array in [0, 1]."""
    magic = buf[:2]
    if magic not in (b"P5", b"P6"):
        raise FormatError(f"bad magic {magic!r}, expected b'P5' or b'P6'", 0)
    channels = 1 if magic == b"P5" else 3
    pos = 2
    fields = []
    for _ in range(3):
        start = pos
        tok, pos = _read_token(buf, pos)
        try:
            fields.append(int(tok))
        except ValueError:
            raise FormatError(f"non-integer header field {tok!r}", start) from None
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise FormatError(f"bad dimensions {width}x{height}", 2)
    if not 0 < maxval < 65536:
        raise FormatError(f"bad maxval {maxval}", pos)
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise FormatError("missing whitespace after header", pos)
    pos += 1
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    count = width * height * channels
    need = count * dtype.itemsize
    if len(buf) - pos < need:
        raise FormatError(f"truncated pixel data: need {need} bytes, have {len(buf) - pos}", len(buf))
    raw = np.frombuffer(buf, dtype=dtype, count=count, offset=pos)
    return raw.reshape(height, width, channels).astype(np.float64) / maxval


def read_pnm(path, label=None):
    with open(path, "rb") as fh:
        buf = fh.read()
    return Image(decode_pnm(buf), label)


def encode_pnm(data):
    """Encode an HxWxC array in [0, 1] as 8-bit P5 (C=1) or P6 (C=3)."""
    arr = np.asarray(data, dtype=np.float64)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    h, w, c = arr.shape
    magic = {1: b"P5", 3: b"P6"}[c]
    pixels = np.floor(np.clip(arr, 0.0, 1.0) * 255.0 + 0.5).astype(np.uint8)
    return magic + f"\n{w} {h}\n255\n".encode("ascii") + pixels.tobytes()


def write_pnm(path, image):
    data = image.data if isinstance(image, Image) else image
    with open(path, "wb") as fh:
        fh.write(encode_pnm(data))
