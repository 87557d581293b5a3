"""8-bit grayscale image and video I/O (PGM, PNG, Y4M, numbered-PGM directories)."""

from __future__ import annotations

import logging
import re
from pathlib import Path

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".pgm", ".png", ".ppm", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff")


class ImageFormatError(ValueError):
    pass


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """ITU-R BT.601 full-range luma, rounded to uint8."""
    rgb = np.asarray(rgb, dtype=np.float64)
    y = 0.299 * rgb[..., 0] + 0.587 * rgb[..., 1] + 0.114 * rgb[..., 2]
    return np.clip(np.floor(y + 0.5), 0, 255).astype(np.uint8)


def _read_pnm_header(data: bytes) -> tuple[bytes, list[int], int]:
    # tokens: magic, width, height, maxval; '#' comments allowed between tokens
    tokens, pos = [], 0
    while len(tokens) < 4:
        m = re.compile(rb"\s*(#[^\n]*\n\s*)*([^\s#]+)").match(data, pos)
        if m is None:
            raise ImageFormatError("truncated PNM header")
        tokens.append(m.group(2))
        pos = m.end()
    return tokens[0], [int(t) for t in tokens[1:]], pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _read_pnm_header(data)
    if magic != b"P5":
        raise ImageFormatError(f"{path}: expected binary PGM (P5), got {magic!r}")
    if maxval != 255:
        raise ImageFormatError(f"{path}: only 8-bit PGM supported (maxval {maxval})")
    body = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos) if len(data) >= pos + w * h else None
    if body is None:
        raise ImageFormatError(f"{path}: pixel data truncated")
    return body.reshape(h, w).copy()


def write_pgm(path, plane: np.ndarray):
    plane = np.asarray(plane)
    if plane.dtype != np.uint8:
        raise ImageFormatError("write_pgm expects uint8 data")
    h, w = plane.shape
    Path(path).write_bytes(b"P5\n%d %d\n255\n" % (w, h) + np.ascontiguousarray(plane).tobytes())


def read_luma(path) -> np.ndarray:
    """Luma plane (uint8) of a PGM/PNG/other image file; colour is converted with BT.601."""
    path = Path(path)
    if path.suffix.lower() == ".pgm":
        return read_pgm(path)
    with Image.open(path) as im:
        if im.mode in ("L", "I;16", "I", "F"):
            arr = np.asarray(im.convert("L"))
        else:
            arr = rgb_to_luma(np.asarray(im.convert("RGB")))
    return np.ascontiguousarray(arr, dtype=np.uint8)


def to_unit(plane: np.ndarray) -> np.ndarray:
    return np.asarray(plane, dtype=np.float64) / 255.0


def to_uint8(plane01: np.ndarray) -> np.ndarray:
    return np.clip(np.floor(np.asarray(plane01) * 255.0 + 0.5), 0, 255).astype(np.uint8)


def list_images(directory) -> list[Path]:
    return sorted(p for p in Path(directory).iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)


# ---------------------------------------------------------------- video

def read_y4m(path) -> list[np.ndarray]:
    """Luma planes of every frame of a Y4M file (any chroma layout; chroma skipped)."""
    data = Path(path).read_bytes()
    nl = data.find(b"\n")
    if not data.startswith(b"YUV4MPEG2") or nl < 0:
        raise ImageFormatError(f"{path}: not a Y4M file")
    params = {t[:1]: t[1:] for t in data[:nl].split()[1:]}
    w, h = int(params[b"W"]), int(params[b"H"])
    chroma = params.get(b"C", b"420").decode()
    luma = w * h
    if chroma.startswith("mono"):
        extra = 0
    elif chroma.startswith("444"):
        extra = 2 * luma
    elif chroma.startswith("422"):
        extra = 2 * ((w + 1) // 2) * h
    else:
        extra = 2 * ((w + 1) // 2) * ((h + 1) // 2)
    frames, pos = [], nl + 1
    while pos < len(data):
        end = data.find(b"\n", pos)
        if end < 0 or not data.startswith(b"FRAME", pos):
            raise ImageFormatError(f"{path}: bad frame header at byte {pos}")
        pos = end + 1
        if pos + luma + extra > len(data):
            raise ImageFormatError(f"{path}: truncated frame")
        frames.append(np.frombuffer(data, np.uint8, luma, pos).reshape(h, w).copy())
        pos += luma + extra
    return frames


def write_y4m(path, frames, fps: int = 30):
    frames = [np.asarray(f, dtype=np.uint8) for f in frames]
    h, w = frames[0].shape
    parts = [b"YUV4MPEG2 W%d H%d F%d:1 Ip A1:1 Cmono\n" % (w, h, fps)]
    for f in frames:
        parts += [b"FRAME\n", np.ascontiguousarray(f).tobytes()]
    Path(path).write_bytes(b"".join(parts))


def read_video(path) -> list[np.ndarray]:
    """Frames from a .y4m file or a directory of numbered PGM frames."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.pgm"), key=lambda p: [int(t) if t.isdigit() else t
                                                          for t in re.split(r"(\d+)", p.name)])
        if not files:
            raise ImageFormatError(f"{path}: no PGM frames")
        return [read_pgm(f) for f in files]
    return read_y4m(path)


def write_video(path, frames):
    path = Path(path)
    if path.suffix.lower() == ".y4m":
        write_y4m(path, frames)
        return
    path.mkdir(parents=True, exist_ok=True)
    for i, f in enumerate(frames):
        write_pgm(path / f"frame_{i:05d}.pgm", np.asarray(f, dtype=np.uint8))
