"""Motion-compensated temporal filtering over groups of pictures.

Haar temporal lifting along block motion::

    H = odd - MC(even)
    L = even + round(0.5 * IMC(H))

MC samples the reference at ``position + vector`` per 8x8 block with edge
replication; IMC applies the negated vectors on the same block grid.  All
arithmetic is on integers, so the inverse is exact for any motion field.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .codec import decode_plane, encode_plane
from .model import PIXEL_SCALE, PWaveModel

BLOCK = 8
SEARCH = 8
GOP_SIZE = 8
TEMPORAL_LEVELS = 3
MV_BITS = 5  # per component, offset by SEARCH

VIDEO_MAGIC = b"PWVV"
VIDEO_VERSION = 1
_VHEADER = struct.Struct("<4sBIHHBBBB")


class VideoError(ValueError):
    pass


@dataclass
class MotionField:
    vectors: np.ndarray  # (rows, cols, 2) int64, (dy, dx) per block
    block: int = BLOCK
    search: int = SEARCH

    def __post_init__(self):
        self.vectors = np.asarray(self.vectors, dtype=np.int64)
        if self.vectors.ndim != 3 or self.vectors.shape[2] != 2:
            raise ValueError("motion vectors must have shape (rows, cols, 2)")
        if np.abs(self.vectors).max(initial=0) > self.search:
            raise ValueError("motion vector outside the search range")

    @classmethod
    def zeros(cls, shape: tuple[int, int], block: int = BLOCK, search: int = SEARCH) -> "MotionField":
        rows, cols = -(-shape[0] // block), -(-shape[1] // block)
        return cls(np.zeros((rows, cols, 2), np.int64), block, search)

    def per_pixel(self, shape: tuple[int, int]) -> tuple[np.ndarray, np.ndarray]:
        h, w = shape
        v = np.repeat(np.repeat(self.vectors, self.block, 0), self.block, 1)[:h, :w]
        return v[..., 0], v[..., 1]


def _sample(frame: np.ndarray, dy: np.ndarray, dx: np.ndarray) -> np.ndarray:
    h, w = frame.shape
    ys = np.clip(np.arange(h)[:, None] + dy, 0, h - 1)
    xs = np.clip(np.arange(w)[None, :] + dx, 0, w - 1)
    return frame[ys, xs]


def motion_compensate(reference: np.ndarray, motion: MotionField) -> np.ndarray:
    dy, dx = motion.per_pixel(reference.shape)
    return _sample(reference, dy, dx)


def inverse_motion_compensate(plane: np.ndarray, motion: MotionField) -> np.ndarray:
    dy, dx = motion.per_pixel(plane.shape)
    return _sample(plane, -dy, -dx)


def _candidates(search: int) -> list[tuple[int, int]]:
    rest = [(dy, dx) for dy in range(-search, search + 1) for dx in range(-search, search + 1)
            if (dy, dx) != (0, 0)]
    return [(0, 0)] + rest


def motion_estimate(reference, current, block: int = BLOCK, search: int = SEARCH) -> MotionField:
    """Full-search block matching (SAD); ties go to the zero vector, then raster order."""
    reference = np.asarray(reference, dtype=np.int64)
    current = np.asarray(current, dtype=np.int64)
    if reference.shape != current.shape:
        raise ValueError(f"frame sizes differ: {reference.shape} vs {current.shape}")
    h, w = current.shape
    pad = np.pad(reference, search, mode="edge")
    row_starts = np.arange(0, h, block)
    col_starts = np.arange(0, w, block)
    cands = _candidates(search)
    costs = np.empty((len(cands), len(row_starts), len(col_starts)), dtype=np.int64)
    for i, (dy, dx) in enumerate(cands):
        shifted = pad[search + dy:search + dy + h, search + dx:search + dx + w]
        sad = np.abs(current - shifted)
        costs[i] = np.add.reduceat(np.add.reduceat(sad, row_starts, axis=0), col_starts, axis=1)
    best = np.argmin(costs, axis=0)
    vec = np.asarray(cands, dtype=np.int64)[best]
    return MotionField(vec, block, search)


def _half_round(x: np.ndarray) -> np.ndarray:
    # round(0.5 * x) with ties away from zero, on integers
    return np.sign(x) * ((np.abs(x) + 1) // 2)


def temporal_lift(even, odd, motion: MotionField, update: bool = True):
    even = np.asarray(even, dtype=np.int64)
    odd = np.asarray(odd, dtype=np.int64)
    high = odd - motion_compensate(even, motion)
    low = even + _half_round(inverse_motion_compensate(high, motion)) if update else even.copy()
    return low, high


def temporal_unlift(low, high, motion: MotionField, update: bool = True):
    low = np.asarray(low, dtype=np.int64)
    high = np.asarray(high, dtype=np.int64)
    even = low - _half_round(inverse_motion_compensate(high, motion)) if update else low.copy()
    odd = high + motion_compensate(even, motion)
    return even, odd


@dataclass
class TemporalSubbands:
    lowpass: np.ndarray
    highpass: list[list[np.ndarray]] = field(default_factory=list)   # [level][i], level 0 finest
    motion: list[list[MotionField]] = field(default_factory=list)

    def frames(self) -> list[np.ndarray]:
        """Coding order: final lowpass, then highpass frames coarsest level first."""
        out = [self.lowpass]
        for level in reversed(self.highpass):
            out.extend(level)
        return out


Estimator = Callable[[np.ndarray, np.ndarray], MotionField]


def mctf_forward(gop, estimator: Estimator = motion_estimate, update: bool = True) -> TemporalSubbands:
    frames = [np.asarray(f, dtype=np.int64) for f in gop]
    if len(frames) != GOP_SIZE:
        raise ValueError(f"GOP must hold {GOP_SIZE} frames, got {len(frames)}")
    if len({f.shape for f in frames}) != 1:
        raise ValueError("all GOP frames must share dimensions")
    highs, motions = [], []
    for _ in range(TEMPORAL_LEVELS):
        lows, hs, ms = [], [], []
        for even, odd in zip(frames[0::2], frames[1::2]):
            mv = estimator(even, odd)
            lo, hi = temporal_lift(even, odd, mv, update)
            lows.append(lo)
            hs.append(hi)
            ms.append(mv)
        highs.append(hs)
        motions.append(ms)
        frames = lows
    return TemporalSubbands(frames[0], highs, motions)


def mctf_inverse(sub: TemporalSubbands, update: bool = True) -> list[np.ndarray]:
    frames = [np.asarray(sub.lowpass, dtype=np.int64)]
    for hs, ms in zip(reversed(sub.highpass), reversed(sub.motion)):
        nxt = []
        for lo, hi, mv in zip(frames, hs, ms):
            nxt.extend(temporal_unlift(lo, hi, mv, update))
        frames = nxt
    return frames


# ---------------------------------------------------------------- motion payload

def pack_motion(fields: list[MotionField]) -> bytes:
    if not fields:
        return b""
    vals = np.concatenate([f.vectors.ravel() + f.search for f in fields]).astype(np.uint8)
    bits = np.unpackbits(vals[:, None], axis=1)[:, 8 - MV_BITS:]
    return np.packbits(bits.ravel()).tobytes()


def unpack_motion(data: bytes, count: int, grid: tuple[int, int]) -> list[MotionField]:
    n = count * grid[0] * grid[1] * 2
    bits = np.unpackbits(np.frombuffer(data, np.uint8))
    if len(bits) < n * MV_BITS or len(data) != -(-n * MV_BITS // 8):
        raise VideoError("motion payload has the wrong length")
    bits = bits[: n * MV_BITS].reshape(n, MV_BITS)
    vals = (bits.astype(np.int64) << np.arange(MV_BITS - 1, -1, -1)).sum(1) - SEARCH
    if np.abs(vals).max(initial=0) > SEARCH:
        raise VideoError("motion vector outside the search range")
    vecs = vals.reshape(count, grid[0], grid[1], 2)
    return [MotionField(v) for v in vecs]


def _motion_layout() -> list[int]:
    return [GOP_SIZE >> (lvl + 1) for lvl in range(TEMPORAL_LEVELS)]


# ---------------------------------------------------------------- GOP coding

def _to_int(plane01: np.ndarray) -> np.ndarray:
    return np.floor(plane01 * PIXEL_SCALE + 0.5).astype(np.int64)


@dataclass
class CodedGop:
    motion: bytes
    streams: list[bytes]
    reconstruction: list[np.ndarray]
    invocations: int = 0

    @property
    def bits(self) -> int:
        return 8 * (len(self.motion) + sum(len(s) for s in self.streams))


def _rebuild(frames: list[np.ndarray], motions: list[list[MotionField]], update: bool):
    low = frames[0]
    highs, pos = [], 1
    for level in reversed(range(TEMPORAL_LEVELS)):
        n = GOP_SIZE >> (level + 1)
        highs.insert(0, frames[pos:pos + n])
        pos += n
    return mctf_inverse(TemporalSubbands(low, highs, motions), update)


def encode_gop(gop, model_l: PWaveModel, model_h: PWaveModel, lambda_id: int = 0,
               estimator: Estimator = motion_estimate, update: bool = True) -> CodedGop:
    sub = mctf_forward(gop, estimator, update)
    fields = [m for level in sub.motion for m in level]
    streams, decoded, inv = [], [], 0
    for i, frame in enumerate(sub.frames()):
        model = model_l if i == 0 else model_h
        coded = encode_plane(frame / PIXEL_SCALE, model, lambda_id)
        streams.append(coded.bitstream)
        decoded.append(_to_int(coded.reconstruction))
        inv += coded.invocations
    recon = [np.clip(f, 0, 255).astype(np.uint8) for f in _rebuild(decoded, sub.motion, update)]
    return CodedGop(pack_motion(fields), streams, recon, inv)


def decode_gop(motion: bytes, streams: list[bytes], model_l: PWaveModel, model_h: PWaveModel,
               shape: tuple[int, int], update: bool = True) -> list[np.ndarray]:
    if len(streams) != GOP_SIZE:
        raise VideoError(f"expected {GOP_SIZE} subband streams, got {len(streams)}")
    grid = (-(-shape[0] // BLOCK), -(-shape[1] // BLOCK))
    fields = unpack_motion(motion, GOP_SIZE - 1, grid)
    motions, pos = [], 0
    for n in _motion_layout():
        motions.append(fields[pos:pos + n])
        pos += n
    decoded = []
    for i, s in enumerate(streams):
        plane = decode_plane(s, model_l if i == 0 else model_h).plane
        if plane.shape != tuple(shape):
            raise VideoError("subband stream size does not match the video header")
        decoded.append(_to_int(plane))
    return [np.clip(f, 0, 255).astype(np.uint8) for f in _rebuild(decoded, motions, update)]


# ---------------------------------------------------------------- video container

@dataclass
class CodedVideo:
    bitstream: bytes
    reconstruction: list[np.ndarray]
    frame_count: int
    invocations: int = 0

    @property
    def bpp(self) -> float:
        h, w = self.reconstruction[0].shape
        return 8 * len(self.bitstream) / (self.frame_count * h * w)


def encode_video(frames, model_l: PWaveModel, model_h: PWaveModel, lambda_id: int = 0) -> CodedVideo:
    frames = [np.asarray(f, dtype=np.uint8) for f in frames]
    if not frames:
        raise VideoError("no frames to encode")
    h, w = frames[0].shape
    if any(f.shape != (h, w) for f in frames):
        raise VideoError("all frames must share dimensions")
    n = len(frames)
    padded = frames + [frames[-1]] * (-n % GOP_SIZE)
    parts = [_VHEADER.pack(VIDEO_MAGIC, VIDEO_VERSION, n, h, w, GOP_SIZE, TEMPORAL_LEVELS, BLOCK, SEARCH)]
    recon, inv = [], 0
    for g in range(0, len(padded), GOP_SIZE):
        coded = encode_gop(padded[g:g + GOP_SIZE], model_l, model_h, lambda_id)
        parts.append(struct.pack("<I", len(coded.motion)) + coded.motion)
        parts.extend(struct.pack("<I", len(s)) + s for s in coded.streams)
        recon.extend(coded.reconstruction)
        inv += coded.invocations
    return CodedVideo(b"".join(parts), recon[:n], n, inv)


def decode_video(stream: bytes, model_l: PWaveModel, model_h: PWaveModel) -> list[np.ndarray]:
    if len(stream) < _VHEADER.size:
        raise VideoError("stream shorter than video header")
    magic, ver, n, h, w, gop, levels, block, search = _VHEADER.unpack_from(stream)
    if magic != VIDEO_MAGIC:
        raise VideoError("bad magic, not a PWVV stream")
    if ver != VIDEO_VERSION:
        raise VideoError(f"unsupported video version {ver}")
    if (gop, levels, block, search) != (GOP_SIZE, TEMPORAL_LEVELS, BLOCK, SEARCH):
        raise VideoError("unsupported GOP structure in header")
    pos = _VHEADER.size

    def take():
        nonlocal pos
        if pos + 4 > len(stream):
            raise VideoError("truncated video stream")
        (k,) = struct.unpack_from("<I", stream, pos)
        if pos + 4 + k > len(stream):
            raise VideoError("truncated video stream")
        chunk = stream[pos + 4:pos + 4 + k]
        pos += 4 + k
        return chunk

    frames = []
    for _ in range(-(-n // GOP_SIZE)):
        motion = take()
        streams = [take() for _ in range(GOP_SIZE)]
        frames.extend(decode_gop(motion, streams, model_l, model_h, (h, w)))
    if pos != len(stream):
        raise VideoError("trailing bytes after last GOP")
    return frames[:n]
