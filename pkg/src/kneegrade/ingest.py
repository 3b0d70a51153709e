"""Image container, PGM and DICOM-lite I/O, and intensity normalization.

DICOM support is deliberately narrow: explicit VR little endian,
uncompressed, single frame, MONOCHROME1/MONOCHROME2.  Anything else is
rejected with :class:`Unsupported`; malformed input raises :class:`Corrupt`.
"""

from __future__ import annotations

import re
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

SOURCES = ("synthetic", "dicom", "crop")


@dataclass
class GrayImage:
    """Single-channel raster, row-major ``pixels`` of shape (height, width)."""

    pixels: np.ndarray
    bit_depth: int = 8
    source: str = "synthetic"

    def __post_init__(self):
        if self.bit_depth not in (8, 16):
            raise ValueError(f"bit_depth must be 8 or 16, got {self.bit_depth}")
        if self.source not in SOURCES:
            raise ValueError(f"unknown source {self.source!r}")
        px = np.asarray(self.pixels)
        if px.ndim != 2 or px.shape[0] < 1 or px.shape[1] < 1:
            raise ValueError(f"pixels must be a non-empty 2-D array, got shape {px.shape}")
        if px.size and (px.min() < 0 or px.max() >= 2 ** self.bit_depth):
            raise ValueError(f"pixel values must lie in [0, {2 ** self.bit_depth})")
        self.pixels = px.astype(np.uint8 if self.bit_depth == 8 else np.uint16, copy=False)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]

    def __eq__(self, other):
        if not isinstance(other, GrayImage):
            return NotImplemented
        return (self.bit_depth == other.bit_depth and self.source == other.source
                and np.array_equal(self.pixels, other.pixels))


# ------------------------------------------------------------------ PGM

class PgmError(ValueError):
    pass


def write_pgm(img: GrayImage, path=None) -> bytes:
    """Encode as binary PGM (P5); 16-bit samples are big-endian per the format."""
    maxval = 255 if img.bit_depth == 8 else 65535
    header = f"P5\n{img.width} {img.height}\n{maxval}\n".encode("ascii")
    body = img.pixels.astype(">u2").tobytes() if img.bit_depth == 16 else img.pixels.tobytes()
    blob = header + body
    if path is not None:
        Path(path).write_bytes(blob)
    return blob


_PGM_TOKEN = re.compile(rb"(?:\s|#[^\n]*\n)*(\S+)")


def read_pgm(data, source: str = "synthetic") -> GrayImage:
    """Decode a P5 PGM from bytes or a path."""
    if not isinstance(data, (bytes, bytearray)):
        data = Path(data).read_bytes()
    pos, tokens = 0, []
    for _ in range(4):
        m = _PGM_TOKEN.match(data, pos)
        if not m:
            raise PgmError("truncated PGM header")
        tokens.append(m.group(1))
        pos = m.end()
    if tokens[0] != b"P5":
        raise PgmError(f"not a binary PGM (magic {tokens[0][:8]!r})")
    try:
        width, height, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise PgmError("malformed PGM header") from exc
    if width < 1 or height < 1 or not 0 < maxval < 65536:
        raise PgmError(f"invalid PGM dimensions {width}x{height} maxval {maxval}")
    pos += 1  # single whitespace byte after maxval
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    need = width * height * np.dtype(dtype).itemsize
    if len(data) - pos < need:
        raise PgmError("truncated PGM pixel data")
    px = np.frombuffer(data, dtype=dtype, count=width * height, offset=pos).reshape(height, width)
    return GrayImage(px.astype(np.uint8 if maxval < 256 else np.uint16), 8 if maxval < 256 else 16, source)


# ------------------------------------------------------------------ DICOM

class DicomError(ValueError):
    pass


class NotDicom(DicomError):
    pass


class Unsupported(DicomError):
    pass


class Corrupt(DicomError):
    pass


EXPLICIT_VR_LE = "1.2.840.10008.1.2.1"
TRANSFER_SYNTAX_NAMES = {
    "1.2.840.10008.1.2": "Implicit VR Little Endian",
    "1.2.840.10008.1.2.1": "Explicit VR Little Endian",
    "1.2.840.10008.1.2.2": "Explicit VR Big Endian",
    "1.2.840.10008.1.2.1.99": "Deflated Explicit VR Little Endian",
    "1.2.840.10008.1.2.4.50": "JPEG Baseline",
    "1.2.840.10008.1.2.4.70": "JPEG Lossless",
    "1.2.840.10008.1.2.4.90": "JPEG 2000 Lossless",
    "1.2.840.10008.1.2.4.91": "JPEG 2000",
    "1.2.840.10008.1.2.5": "RLE Lossless",
}

# VRs whose length field is 4 bytes preceded by two reserved bytes
_LONG_VRS = {b"OB", b"OD", b"OF", b"OL", b"OV", b"OW", b"SQ", b"SV", b"UC", b"UN", b"UR", b"UT", b"UV"}
_STRING_VRS = {b"AE", b"AS", b"CS", b"DA", b"DS", b"DT", b"IS", b"LO", b"LT", b"PN", b"SH",
               b"ST", b"TM", b"UC", b"UI", b"UR", b"UT"}
_UNDEFINED = 0xFFFFFFFF
_MAX_SQ_DEPTH = 8

KEYWORDS = {
    (0x0002, 0x0010): "TransferSyntaxUID",
    (0x0008, 0x0060): "Modality",
    (0x0010, 0x0020): "PatientID",
    (0x0028, 0x0002): "SamplesPerPixel",
    (0x0028, 0x0004): "PhotometricInterpretation",
    (0x0028, 0x0008): "NumberOfFrames",
    (0x0028, 0x0010): "Rows",
    (0x0028, 0x0011): "Columns",
    (0x0028, 0x0100): "BitsAllocated",
    (0x0028, 0x0101): "BitsStored",
    (0x0028, 0x0103): "PixelRepresentation",
}
PIXEL_DATA = (0x7FE0, 0x0010)


@dataclass
class DicomElement:
    group: int
    element: int
    vr: str
    length: int
    value: bytes = field(repr=False)

    @property
    def tag(self) -> tuple[int, int]:
        return (self.group, self.element)


def _decode(vr: bytes, value: bytes) -> Any:
    if vr in _STRING_VRS:
        return value.decode("latin-1").rstrip("\x00 ").strip()
    if vr == b"US":
        vals = struct.unpack(f"<{len(value) // 2}H", value[: len(value) // 2 * 2])
        return vals[0] if len(vals) == 1 else list(vals)
    if vr == b"UL":
        vals = struct.unpack(f"<{len(value) // 4}I", value[: len(value) // 4 * 4])
        return vals[0] if len(vals) == 1 else list(vals)
    return value


def _skip_undefined(data: bytes, pos: int, depth: int) -> int:
    """Return the offset just past a sequence delimitation item."""
    if depth > _MAX_SQ_DEPTH:
        raise Unsupported("sequence nesting too deep")
    while pos + 8 <= len(data):
        group, elem, length = struct.unpack_from("<HHI", data, pos)
        pos += 8
        if (group, elem) == (0xFFFE, 0xE0DD):
            return pos
        if (group, elem) != (0xFFFE, 0xE000):
            raise Corrupt(f"unexpected tag ({group:04X},{elem:04X}) inside sequence")
        if length == _UNDEFINED:
            # item of undefined length: walk its elements until the item delimiter
            while True:
                if pos + 8 > len(data):
                    raise Corrupt("unterminated sequence item")
                g, e = struct.unpack_from("<HH", data, pos)
                if (g, e) == (0xFFFE, 0xE00D):
                    pos += 8
                    break
                _, pos = _read_element(data, pos, depth + 1)
        else:
            if length > len(data) - pos:
                raise Corrupt("sequence item overruns file")
            pos += length
    raise Corrupt("unterminated sequence")


def _read_element(data: bytes, pos: int, depth: int = 0) -> tuple[DicomElement, int]:
    if pos + 8 > len(data):
        raise Corrupt(f"truncated element header at offset {pos}")
    group, elem = struct.unpack_from("<HH", data, pos)
    vr = data[pos + 4:pos + 6]
    if len(vr) != 2 or not vr.isalpha() or not vr.isupper():
        raise Corrupt(f"invalid VR {vr!r} at offset {pos}")
    if vr in _LONG_VRS:
        if pos + 12 > len(data):
            raise Corrupt(f"truncated element header at offset {pos}")
        length = struct.unpack_from("<I", data, pos + 8)[0]
        start = pos + 12
    else:
        length = struct.unpack_from("<H", data, pos + 6)[0]
        start = pos + 8
    if length == _UNDEFINED:
        if (group, elem) == PIXEL_DATA:
            raise Unsupported("encapsulated (compressed) pixel data")
        if vr not in (b"SQ", b"UN"):
            raise Corrupt(f"undefined length on VR {vr.decode()}")
        end = _skip_undefined(data, start, depth + 1)
        return DicomElement(group, elem, vr.decode(), length, b""), end
    if length % 2:
        raise Corrupt(f"odd length {length} for ({group:04X},{elem:04X})")
    if length > len(data) - start:
        raise Corrupt(f"element ({group:04X},{elem:04X}) declares {length} bytes, "
                      f"{len(data) - start} remain")
    return DicomElement(group, elem, vr.decode(), length, bytes(data[start:start + length])), start + length


def read_elements(data: bytes) -> list[DicomElement]:
    """Parse the full element stream after the preamble and magic."""
    if len(data) < 132 or data[128:132] != b"DICM":
        raise NotDicom("missing 'DICM' magic at offset 128")
    pos, last, out = 132, (0, 0), []
    while pos < len(data):
        el, pos = _read_element(data, pos)
        if el.tag < last:
            raise Corrupt(f"tag ({el.group:04X},{el.element:04X}) out of order")
        last = el.tag
        out.append(el)
    return out


def parse_dicom(data) -> tuple[GrayImage, dict]:
    """Decode pixel data from DICOM bytes (or a path) into a GrayImage.

    MONOCHROME1 images are inverted so that larger values are brighter.
    """
    if not isinstance(data, (bytes, bytearray)):
        data = Path(data).read_bytes()
    elements = read_elements(data)
    meta: dict[str, Any] = {}
    values: dict[tuple[int, int], Any] = {}
    pixel: Optional[DicomElement] = None
    for el in elements:
        if el.tag == PIXEL_DATA:
            pixel = el
            continue
        if el.vr == "SQ":
            continue
        decoded = _decode(el.vr.encode(), el.value)
        values[el.tag] = decoded
        if el.tag in KEYWORDS and not isinstance(decoded, bytes):
            meta[KEYWORDS[el.tag]] = decoded

    syntax = values.get((0x0002, 0x0010))
    if syntax is None:
        raise Corrupt("missing TransferSyntaxUID")
    if syntax != EXPLICIT_VR_LE:
        raise Unsupported(f"transfer syntax {TRANSFER_SYNTAX_NAMES.get(syntax, syntax)}")

    def need(tag, name):
        v = values.get(tag)
        if not isinstance(v, int):
            raise Corrupt(f"missing or malformed {name}")
        return v

    rows, cols = need((0x0028, 0x0010), "Rows"), need((0x0028, 0x0011), "Columns")
    bits = need((0x0028, 0x0100), "BitsAllocated")
    stored = values.get((0x0028, 0x0101), bits)
    if not isinstance(stored, int) or not 0 < stored <= bits:
        raise Corrupt(f"invalid BitsStored {stored!r}")
    if bits not in (8, 16):
        raise Unsupported(f"BitsAllocated {bits}")
    if values.get((0x0028, 0x0002), 1) != 1:
        raise Unsupported("multi-sample (color) pixel data")
    if values.get((0x0028, 0x0103), 0) != 0:
        raise Unsupported("signed pixel representation")
    frames = values.get((0x0028, 0x0008), "1")
    if str(frames).strip() not in ("", "1"):
        raise Unsupported(f"multi-frame image ({frames} frames)")
    photometric = values.get((0x0028, 0x0004))
    if photometric not in ("MONOCHROME1", "MONOCHROME2"):
        raise Unsupported(f"photometric interpretation {photometric!r}")
    if rows < 1 or cols < 1:
        raise Corrupt(f"invalid dimensions {rows}x{cols}")
    if pixel is None:
        raise Corrupt("no pixel data element")

    nbytes = rows * cols * (bits // 8)
    if pixel.length < nbytes:
        raise Corrupt(f"pixel data holds {pixel.length} bytes, {nbytes} required")
    dtype = np.uint8 if bits == 8 else np.dtype("<u2")
    px = np.frombuffer(pixel.value, dtype=dtype, count=rows * cols).reshape(rows, cols)
    px = px & ((1 << stored) - 1)
    if photometric == "MONOCHROME1":
        px = ((1 << stored) - 1) - px
    return GrayImage(px.astype(np.uint8 if bits == 8 else np.uint16), bits, "dicom"), meta


def _element(group: int, elem: int, vr: str, value: bytes) -> bytes:
    if len(value) % 2:
        value += b"\x00" if vr in ("UI", "OB") else b" "
    if vr.encode() in _LONG_VRS:
        return struct.pack("<HH2sHI", group, elem, vr.encode(), 0, len(value)) + value
    return struct.pack("<HH2sH", group, elem, vr.encode(), len(value)) + value


def write_dicom(img: GrayImage, photometric: str = "MONOCHROME2",
                transfer_syntax: str = EXPLICIT_VR_LE) -> bytes:
    """Minimal single-frame writer, the inverse of :func:`parse_dicom`."""
    px = img.pixels
    if photometric == "MONOCHROME1":
        px = (2 ** img.bit_depth - 1) - px.astype(np.int64)
    pixel_bytes = px.astype(np.uint8 if img.bit_depth == 8 else "<u2").tobytes()
    us = lambda v: struct.pack("<H", v)  # noqa: E731
    body = b"".join([
        _element(0x0002, 0x0010, "UI", transfer_syntax.encode()),
        _element(0x0008, 0x0060, "CS", b"CR"),
        _element(0x0028, 0x0002, "US", us(1)),
        _element(0x0028, 0x0004, "CS", photometric.encode()),
        _element(0x0028, 0x0010, "US", us(img.height)),
        _element(0x0028, 0x0011, "US", us(img.width)),
        _element(0x0028, 0x0100, "US", us(img.bit_depth)),
        _element(0x0028, 0x0101, "US", us(img.bit_depth)),
        _element(0x0028, 0x0103, "US", us(0)),
        _element(0x7FE0, 0x0010, "OW" if img.bit_depth == 16 else "OB", pixel_bytes),
    ])
    return b"\x00" * 128 + b"DICM" + body


def load_image(path) -> GrayImage:
    """Read a PGM or DICOM file, deciding by content rather than extension."""
    data = Path(path).read_bytes()
    if data[:2] == b"P5":
        return read_pgm(data)
    return parse_dicom(data)[0]


# ------------------------------------------------------------------ transforms

def minmax_normalize(img: GrayImage) -> GrayImage:
    """Affinely rescale to the full 8-bit range; constant images map to zeros."""
    px = img.pixels.astype(np.float64)
    lo, hi = px.min(), px.max()
    if hi == lo:
        out = np.zeros_like(px)
    else:
        # round half up
        out = np.clip(np.floor((px - lo) * 255.0 / (hi - lo) + 0.5), 0, 255)
    return GrayImage(out.astype(np.uint8), 8, img.source)


def crop(img: GrayImage, box: tuple[int, int, int, int]) -> GrayImage:
    """Cut ``box = (x0, y0, x1, y1)`` (half-open, pixels), clamped to the image."""
    x0, y0, x1, y1 = box
    x0, x1 = max(0, int(x0)), min(img.width, int(x1))
    y0, y1 = max(0, int(y0)), min(img.height, int(y1))
    if x1 <= x0 or y1 <= y0:
        raise ValueError(f"box {box} has zero area inside a {img.width}x{img.height} image")
    return GrayImage(img.pixels[y0:y1, x0:x1].copy(), img.bit_depth, "crop")


def _area_matrix(n_in: int, n_out: int) -> np.ndarray:
    """Rows: output cells; entries: fraction of each input cell they cover."""
    edges_out = np.linspace(0.0, n_in, n_out + 1)
    lo, hi = edges_out[:-1, None], edges_out[1:, None]
    k = np.arange(n_in)[None, :]
    overlap = np.clip(np.minimum(hi, k + 1) - np.maximum(lo, k), 0.0, None)
    return overlap / overlap.sum(axis=1, keepdims=True)


def resize_area(pixels: np.ndarray, height: int, width: int) -> np.ndarray:
    """Area-averaging resample of a 2-D array to (height, width), float output."""
    px = np.asarray(pixels, dtype=np.float64)
    return _area_matrix(px.shape[0], height) @ px @ _area_matrix(px.shape[1], width).T
