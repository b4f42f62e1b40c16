"""Readers and writers for images, displacement fields, affines and landmarks.

Images are binary PGM/PPM (maxval <= 255) or 8-bit PNG. Displacement fields
use a small fixed little-endian container::

    b"DF2D" | u32 width | u32 height | f32[w*h] dx | f32[w*h] dy

Every writer goes through a temporary file in the destination directory and
renames it into place, so readers never see a torn file.
"""

from __future__ import annotations

import contextlib
import csv
import os
import struct
import tempfile
from pathlib import Path

import numpy as np

from .core import AffineTransform2D, DisplacementField, LandmarkSet, RgbImage, ScalarImage

FIELD_MAGIC = b"DF2D"
_FIELD_HEADER = struct.Struct("<4sII")
LANDMARK_HEADER = ",X,Y"


class FormatError(ValueError):
    """A file exists but its contents do not follow the expected layout."""


class ImageFormatError(FormatError):
    """Unreadable or unsupported image file."""


class FieldFormatError(FormatError):
    """Malformed displacement field container."""


@contextlib.contextmanager
def atomic_write(path, mode="wb"):
    path = Path(path)
    fd, tmp = tempfile.mkstemp(dir=path.parent or ".", prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, mode) as fh:
            yield fh
        os.replace(tmp, path)
    except BaseException:
        with contextlib.suppress(FileNotFoundError):
            os.unlink(tmp)
        raise


# --- images -----------------------------------------------------------------

def _pnm_tokens(buf: bytes, count: int, pos: int):
    tokens = []
    n = len(buf)
    while len(tokens) < count:
        while pos < n and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < n and buf[pos:pos + 1] == b"#":
            while pos < n and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < n and not buf[pos:pos + 1].isspace() and buf[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise ImageFormatError("corrupt image: truncated header")
        tokens.append(buf[start:pos])
    return tokens, pos


def _read_pnm(buf: bytes):
    magic = buf[:2]
    channels = {b"P5": 1, b"P6": 3}[magic]
    try:
        tokens, pos = _pnm_tokens(buf, 3, 2)
        width, height, maxval = (int(t) for t in tokens)
    except ValueError as exc:
        raise ImageFormatError(f"corrupt image: bad header ({exc})") from None
    if width < 1 or height < 1 or maxval < 1:
        raise ImageFormatError("corrupt image: bad dimensions")
    if maxval > 255:
        raise ImageFormatError(f"unsupported bit depth: maxval {maxval} > 255")
    # exactly one whitespace byte separates the header from the raster
    if pos >= len(buf) or not buf[pos:pos + 1].isspace():
        raise ImageFormatError("corrupt image: truncated header")
    pos += 1
    need = width * height * channels
    payload = buf[pos:pos + need]
    if len(payload) != need:
        raise ImageFormatError("corrupt image: truncated raster")
    raw = np.frombuffer(payload, dtype=np.uint8)
    if maxval != 255:
        raw = np.round(raw.astype(np.float64) * (255.0 / maxval)).astype(np.uint8)
    if channels == 1:
        return ScalarImage(raw.reshape(height, width) / 255.0)
    return RgbImage(raw.reshape(height, width, 3))


def _read_png(path: Path):
    from PIL import Image

    try:
        with Image.open(path) as im:
            im.load()
            mode = im.mode
            if mode in ("I;16", "I;16B", "I;16L", "I", "F"):
                raise ImageFormatError(f"unsupported bit depth: PIL mode {mode}")
            if mode in ("1", "L", "LA", "P") and not (mode == "P" and _palette_is_color(im)):
                arr = np.asarray(im.convert("L"), dtype=np.uint8)
                return ScalarImage(arr / 255.0)
            arr = np.asarray(im.convert("RGB"), dtype=np.uint8)
            return RgbImage(arr)
    except ImageFormatError:
        raise
    except (OSError, SyntaxError, ValueError) as exc:
        raise ImageFormatError(f"corrupt image: {exc}") from None


def _palette_is_color(im) -> bool:
    rgb = np.asarray(im.convert("RGB"))
    return not (np.array_equal(rgb[..., 0], rgb[..., 1]) and np.array_equal(rgb[..., 1], rgb[..., 2]))


def read_image(path) -> RgbImage | ScalarImage:
    """Grayscale files give a ScalarImage scaled to [0, 1]; colour files an RgbImage."""
    path = Path(path)
    buf = path.read_bytes()
    if buf[:2] in (b"P5", b"P6"):
        return _read_pnm(buf)
    if buf[:8] == b"\x89PNG\r\n\x1a\n":
        return _read_png(path)
    if len(buf) < 8 and (buf[:1] == b"P" or b"\x89PNG".startswith(buf[:4])):
        raise ImageFormatError("corrupt image: truncated file")
    raise ImageFormatError(f"corrupt image: unrecognised format in {path}")


def to_uint8(img: ScalarImage) -> np.ndarray:
    return np.round(np.clip(img.data, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_image(path, img: ScalarImage | RgbImage) -> None:
    """Write PGM/PPM, or PNG when the suffix is ``.png``. Scalars are quantized to 8 bits."""
    path = Path(path)
    if isinstance(img, ScalarImage):
        raster, magic = to_uint8(img), b"P5"
    else:
        raster, magic = np.ascontiguousarray(img.data, dtype=np.uint8), b"P6"
    if path.suffix.lower() == ".png":
        from PIL import Image

        with atomic_write(path) as fh:
            Image.fromarray(raster).save(fh, format="PNG")
        return
    header = b"%s\n%d %d\n255\n" % (magic, raster.shape[1], raster.shape[0])
    with atomic_write(path) as fh:
        fh.write(header)
        fh.write(raster.tobytes())


# --- displacement fields ------------------------------------------------------

def field_to_bytes(field: DisplacementField) -> bytes:
    h, w = field.shape
    return (_FIELD_HEADER.pack(FIELD_MAGIC, w, h)
            + field.dx.astype("<f4").tobytes()
            + field.dy.astype("<f4").tobytes())


def field_from_bytes(buf: bytes) -> DisplacementField:
    if len(buf) < _FIELD_HEADER.size:
        raise FieldFormatError("field file shorter than its header")
    magic, w, h = _FIELD_HEADER.unpack_from(buf)
    if magic != FIELD_MAGIC:
        raise FieldFormatError(f"bad field magic {magic!r}")
    if w < 1 or h < 1:
        raise FieldFormatError("field dimensions must be >= 1")
    n = w * h
    if len(buf) != _FIELD_HEADER.size + 8 * n:
        raise FieldFormatError(
            f"field payload is {len(buf) - _FIELD_HEADER.size} bytes, expected {8 * n}")
    data = np.frombuffer(buf, dtype="<f4", offset=_FIELD_HEADER.size)
    return DisplacementField(data[:n].reshape(h, w).astype(np.float64),
                             data[n:].reshape(h, w).astype(np.float64))


def write_field(path, field: DisplacementField) -> None:
    payload = field_to_bytes(field)
    with atomic_write(path) as fh:
        fh.write(payload)


def read_field(path) -> DisplacementField:
    return field_from_bytes(Path(path).read_bytes())


def quantize_field(field: DisplacementField) -> DisplacementField:
    """Round to the float32 precision stored on disk."""
    return DisplacementField(field.dx.astype(np.float32).astype(np.float64),
                             field.dy.astype(np.float32).astype(np.float64))


# --- landmarks ----------------------------------------------------------------

def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or ",".join(c.strip() for c in rows[0]) != LANDMARK_HEADER:
        raise FormatError(f"bad header in landmark file {path}: expected '{LANDMARK_HEADER}'")
    points = []
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != 3:
            raise FormatError(f"{path}:{lineno}: expected 3 fields, got {len(row)}")
        try:
            points.append((float(row[1]), float(row[2])))
        except ValueError:
            raise FormatError(f"{path}:{lineno}: non-numeric coordinate") from None
    return LandmarkSet(np.array(points, dtype=np.float64).reshape(-1, 2))


def write_landmarks(path, landmarks: LandmarkSet) -> None:
    lines = [LANDMARK_HEADER]
    lines += [f"{i},{x:.6f},{y:.6f}" for i, (x, y) in enumerate(landmarks.points)]
    with atomic_write(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


# --- affine transforms --------------------------------------------------------

def _fmt(v: float) -> str:
    v = float(v)
    if v == int(v) and abs(v) < 1e15:
        return str(int(v))
    return repr(v)


def format_affine(A: AffineTransform2D) -> str:
    values = (A.a11, A.a12, A.a21, A.a22, A.tx, A.ty, A.cx, A.cy)
    return " ".join(_fmt(v) for v in values)


def parse_affine(text: str) -> AffineTransform2D:
    tokens = text.split()
    if len(tokens) != 8:
        raise FormatError(f"affine file must hold 8 numbers, found {len(tokens)}")
    try:
        values = [float(t) for t in tokens]
    except ValueError:
        raise FormatError("affine file contains a non-numeric token") from None
    try:
        return AffineTransform2D(*values)
    except ValueError as exc:
        raise FormatError(f"invalid affine: {exc}") from None


def write_affine(path, A: AffineTransform2D) -> None:
    with atomic_write(path, "w") as fh:
        fh.write(format_affine(A) + "\n")


def read_affine(path) -> AffineTransform2D:
    return parse_affine(Path(path).read_text())


# --- key=value sidecars -------------------------------------------------------

def write_kv(path, record: dict) -> None:
    with atomic_write(path, "w") as fh:
        for key, value in record.items():
            fh.write(f"{key}={value}\n")


def read_kv(path) -> dict:
    record = {}
    for line in Path(path).read_text().splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise FormatError(f"{path}: malformed line {line!r}")
        record[key.strip()] = value.strip()
    return record
