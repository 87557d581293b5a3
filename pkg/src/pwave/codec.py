"""Image plane encoder/decoder.

Bitstream layout (little-endian)::

    header  "PWVC" u8 version u16 orig_h u16 orig_w u16 pad_h u16 pad_w
            u8 levels u8 context_id u8 lambda_id i16 delta_L_idx i16 delta_H_idx
            u32 model_crc
    13 x    u32 length, then: i16 lo, i16 hi, range-coded symbols

Subbands appear in coding order.  ``lo``/``hi`` bound the subband's symbols;
when they are equal nothing else is stored for that subband.

Encoder and decoder run the same band loops (``_code_four_step`` and
``_code_ar``); the encoder only differs in where symbols come from.  That is
what makes the entropy parameters, and therefore the tables, identical on
both sides.
"""

from __future__ import annotations

import math
import struct
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .entropy import ALPHABET, FourStepFusionNet, PHASES, coded_before, step_mask
from .model import LL_BAND, PIXEL_SCALE, PWaveModel
from .nn import round_half_away, ste_round
from .rangecoder import RangeDecoder, RangeEncoder, build_cdf
from .wavelet import LEVELS, SubbandPyramid, band_shape, coding_order

MAGIC = b"PWVC"
VERSION = 1
_HEADER = struct.Struct("<4sBHHHHBBBhhI")
_BAND = struct.Struct("<hh")
DELTA_STEPS = 256  # delta grid: 2 ** (k / 256)


class BitstreamError(ValueError):
    pass


# ---------------------------------------------------------------- quantisation

def delta_index(delta: float) -> int:
    return int(np.clip(np.round(DELTA_STEPS * math.log2(float(delta))), -32768, 32767))


def delta_value(index: int) -> float:
    return 2.0 ** (index / DELTA_STEPS)


def quantize(subband, delta, training: bool = False):
    """round(y * delta), ties away from zero, clamped to the coder alphabet."""
    lo, hi = ALPHABET
    if isinstance(subband, torch.Tensor):
        r = ste_round(subband * delta) if training else round_half_away(subband * delta)
        return r.clamp(lo, hi)
    y = np.asarray(subband, dtype=np.float64) * delta
    t = np.trunc(y)
    r = t + np.sign(y) * (np.abs(y - t) >= 0.5)
    return np.clip(r, lo, hi)


def dequantize(symbols, delta):
    return symbols / delta


def postprocess(plane: torch.Tensor, model: PWaveModel) -> torch.Tensor:
    """Post-processing on an 8-bit-scale plane: plane + residual CNN."""
    return model.post(plane)


def pad_plane(plane: np.ndarray, multiple: int = 2 ** LEVELS) -> np.ndarray:
    h, w = plane.shape
    ph, pw = -h % multiple, -w % multiple
    if ph or pw:
        plane = np.pad(plane, ((0, ph), (0, pw)), mode="edge")
    return plane


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    mse = float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
    return float("inf") if mse == 0 else 10 * math.log10(peak * peak / mse)


# ---------------------------------------------------------------- band loops

def _code_four_step(net: FourStepFusionNet, ctx, shape, lo, hi, dtype, source):
    """Phase-sequential coding of one subband.

    ``source(phase, positions, mu, sigma)`` returns the symbols of that phase
    in raster order (encoder: look up and encode; decoder: decode).
    """
    h, w = shape
    sym = torch.zeros(1, 1, h, w, dtype=dtype)
    for k in range(PHASES):
        coded = torch.from_numpy(coded_before(k, h, w))[None, None]
        visible = torch.where(coded, sym, torch.zeros((), dtype=dtype))
        mu, sigma = net.step(k, visible, ctx, shape=(1, h, w))
        sel = step_mask(k, h, w)
        if lo == hi:
            vals = np.full(int(sel.sum()), lo, dtype=np.int64)
        else:
            vals = source(k, sel, mu[0, 0].numpy()[sel], sigma[0, 0].numpy()[sel])
        sym[0, 0][torch.from_numpy(sel)] = torch.from_numpy(vals).to(dtype)
    return sym


def _code_ar(net, ctx, shape, lo, hi, dtype, source):
    """Raster-sequential coding; one network invocation per position."""
    h, w = shape
    k = net.kernel_size
    p = k // 2
    point = net.pointwise(ctx)
    buf = np.zeros((h + 2 * p, w + 2 * p), dtype=torch.empty(0, dtype=dtype).numpy().dtype)
    for r in range(h):
        for c in range(w):
            mu, sigma = point(buf[r:r + k, c:c + k], r, c)
            buf[r + p, c + p] = lo if lo == hi else source(r, c, build_cdf(mu, sigma, (lo, hi)))
    point.flush()
    return torch.from_numpy(buf[p:p + h, p:p + w].copy())[None, None]


def _band_loop(model: PWaveModel, dims, ranges, dtype, source_for):
    """Drives every subband in coding order with the long-context recurrence."""
    order = coding_order()
    ph, pw = dims
    shapes = {lbl: band_shape(lbl, ph, pw) for lbl in order}
    state = model.long_context.initial(1, *shapes[order[0]], dtype=dtype)
    decoded = {}
    for i, label in enumerate(order):
        net = model.net_for(label)
        lo, hi = ranges[label]
        use_ctx = label != LL_BAND or isinstance(net, FourStepFusionNet)
        ctx = state.hidden if use_ctx else None
        source = source_for(label)
        if isinstance(net, FourStepFusionNet):
            sym = _code_four_step(net, ctx, shapes[label], lo, hi, dtype, source)
        else:
            sym = _code_ar(net, ctx, shapes[label], lo, hi, dtype, source)
        decoded[label] = sym
        if i + 1 < len(order):
            state = model.long_context.advance(sym, state, shapes[order[i + 1]])
    return decoded


def reconstruct(model: PWaveModel, symbols: dict, delta_l: float, delta_h: float,
                orig: tuple[int, int]) -> np.ndarray:
    """Dequantise, inverse transform, post-process and crop; [0, 1] units."""
    pyr = SubbandPyramid({
        k: torch.as_tensor(v, dtype=model.dtype).reshape(1, 1, *np.shape(v)[-2:])
        / (delta_l if k == LL_BAND else delta_h)
        for k, v in symbols.items()
    })
    x = model.synthesis(pyr)[0, 0].numpy()
    return x[: orig[0], : orig[1]].copy()


# ---------------------------------------------------------------- encode / decode

@dataclass
class CodedPlane:
    bitstream: bytes
    symbols: dict[str, np.ndarray]
    reconstruction: np.ndarray
    original_size: tuple[int, int]
    invocations: int = 0
    band_bits: dict[str, int] = field(default_factory=dict)
    table_bits: float = 0.0
    seconds: float = 0.0

    @property
    def bits(self) -> int:
        return 8 * len(self.bitstream)

    @property
    def bpp(self) -> float:
        return self.bits / (self.original_size[0] * self.original_size[1])


def encode_plane(plane, model: PWaveModel, lambda_id: int = 0) -> CodedPlane:
    """Encode a [0, 1]-valued luma plane of any size."""
    t0 = time.perf_counter()
    plane = np.asarray(plane, dtype=np.float64)
    orig = plane.shape
    padded = pad_plane(plane)
    dims = padded.shape
    dtype = model.dtype
    kl, kh = (delta_index(d.item()) for d in model.deltas())
    dl, dh = delta_value(kl), delta_value(kh)
    model.reset_invocations()
    with torch.inference_mode():
        pyr = model.analysis(torch.as_tensor(padded, dtype=dtype)[None, None])
        symbols = {lbl: quantize(pyr[lbl], dl if lbl == LL_BAND else dh)[0, 0].numpy().astype(np.int64)
                   for lbl in coding_order()}
        ranges = {lbl: (int(s.min()), int(s.max())) for lbl, s in symbols.items()}
        encoders = {lbl: RangeEncoder() for lbl in symbols}
        table_bits = [0.0]

        def source_for(label):
            truth = symbols[label]
            enc = encoders[label]
            lo = ranges[label][0]

            def four_step(k, sel, mu, sigma):
                vals = truth[sel]
                table_bits[0] += enc.encode_laplace(vals, mu, sigma, lo, ranges[label][1])
                return vals

            def ar(r, c, cdf):
                s = int(truth[r, c])
                enc.encode_cdf(s, cdf)
                table_bits[0] -= math.log2(cdf.freq(s) / 65536)
                return s

            return ar if _is_ar(model, label) else four_step

        _band_loop(model, dims, ranges, dtype, source_for)
        recon = reconstruct(model, symbols, dl, dh, orig)

    payloads = []
    for lbl in coding_order():
        lo, hi = ranges[lbl]
        body = encoders[lbl].finish() if lo != hi else b""
        payloads.append(_BAND.pack(lo, hi) + body)
    header = _HEADER.pack(MAGIC, VERSION, orig[0], orig[1], dims[0], dims[1], LEVELS,
                          model.config.context_id, lambda_id, kl, kh, model.fingerprint())
    stream = header + b"".join(struct.pack("<I", len(p)) + p for p in payloads)
    return CodedPlane(stream, symbols, recon, orig, model.invocations(),
                      {lbl: 8 * len(p) for lbl, p in zip(coding_order(), payloads)},
                      table_bits[0], time.perf_counter() - t0)


def _is_ar(model, label):
    return not isinstance(model.net_for(label), FourStepFusionNet)


@dataclass
class Header:
    orig_size: tuple[int, int]
    padded_size: tuple[int, int]
    context_id: int
    lambda_id: int
    delta_l_index: int
    delta_h_index: int
    model_crc: int


def parse_bitstream(stream: bytes) -> tuple[Header, list[bytes]]:
    if len(stream) < _HEADER.size:
        raise BitstreamError("stream shorter than header")
    magic, ver, oh, ow, ph, pw, levels, cid, lid, kl, kh, crc = _HEADER.unpack_from(stream)
    if magic != MAGIC:
        raise BitstreamError("bad magic, not a PWVC stream")
    if ver != VERSION:
        raise BitstreamError(f"unsupported version {ver}")
    if levels != LEVELS:
        raise BitstreamError(f"stream has {levels} levels, decoder supports {LEVELS}")
    if ph % 2 ** LEVELS or pw % 2 ** LEVELS or oh > ph or ow > pw or not oh or not ow:
        raise BitstreamError("inconsistent plane dimensions in header")
    pos = _HEADER.size
    payloads = []
    for _ in range(len(coding_order())):
        if pos + 4 > len(stream):
            raise BitstreamError("truncated stream: missing payload length")
        (n,) = struct.unpack_from("<I", stream, pos)
        pos += 4
        if pos + n > len(stream) or n < _BAND.size:
            raise BitstreamError("truncated stream: payload runs past end")
        payloads.append(stream[pos:pos + n])
        pos += n
    if pos != len(stream):
        raise BitstreamError("trailing bytes after last payload")
    return Header((oh, ow), (ph, pw), cid, lid, kl, kh, crc), payloads


@dataclass
class DecodedPlane:
    plane: np.ndarray
    symbols: dict[str, np.ndarray]
    header: Header
    invocations: int = 0
    seconds: float = 0.0


def decode_plane(stream: bytes, model: PWaveModel) -> DecodedPlane:
    t0 = time.perf_counter()
    header, payloads = parse_bitstream(stream)
    if header.context_id != model.config.context_id:
        raise BitstreamError(
            f"stream uses context model {header.context_id}, model provides {model.config.context_id}"
        )
    if header.model_crc != model.fingerprint():
        raise BitstreamError("model weights do not match the stream (fingerprint mismatch)")
    order = coding_order()
    ranges, decoders = {}, {}
    for lbl, p in zip(order, payloads):
        lo, hi = _BAND.unpack_from(p)
        if lo > hi:
            raise BitstreamError(f"subband {lbl}: empty symbol range")
        ranges[lbl] = (lo, hi)
        decoders[lbl] = RangeDecoder(p[_BAND.size:]) if lo != hi else None
    dl, dh = delta_value(header.delta_l_index), delta_value(header.delta_h_index)
    model.reset_invocations()

    def source_for(label):
        dec = decoders[label]
        lo, hi = ranges[label]
        if _is_ar(model, label):
            return lambda r, c, cdf: dec.decode_cdf(cdf)
        return lambda k, sel, mu, sigma: dec.decode_laplace(mu, sigma, lo, hi)

    with torch.inference_mode():
        decoded = _band_loop(model, header.padded_size, ranges, model.dtype, source_for)
        symbols = {k: v[0, 0].numpy().astype(np.int64) for k, v in decoded.items()}
        plane = reconstruct(model, symbols, dl, dh, header.orig_size)
    return DecodedPlane(plane, symbols, header, model.invocations(), time.perf_counter() - t0)


# ---------------------------------------------------------------- analysis tool

IMPULSE_SIZE = 2 ** LEVELS


def subband_impulse_response(model: PWaveModel, plane) -> dict[str, np.ndarray]:
    """One 16x16 synthesis response per subband, driven by that subband's peak coefficient.

    The signed coefficient of largest magnitude (first occurrence on ties) is
    moved to the matching relative position of an otherwise empty 16x16
    pyramid, dequantised and inverse transformed.
    """
    padded = pad_plane(np.asarray(plane, dtype=np.float64))
    dtype = model.dtype
    kl, kh = (delta_index(d.item()) for d in model.deltas())
    dl, dh = delta_value(kl), delta_value(kh)
    out = {}
    with torch.no_grad():
        pyr = model.analysis(torch.as_tensor(padded, dtype=dtype)[None, None])
        for label in coding_order():
            delta = dl if label == LL_BAND else dh
            q = quantize(pyr[label], delta)[0, 0].numpy()
            h, w = q.shape
            idx = int(np.argmax(np.abs(q)))
            r, c = divmod(idx, w)
            bands = {}
            for lbl in coding_order():
                bh, bw = band_shape(lbl, IMPULSE_SIZE, IMPULSE_SIZE)
                bands[lbl] = torch.zeros(1, 1, bh, bw, dtype=dtype)
            bh, bw = band_shape(label, IMPULSE_SIZE, IMPULSE_SIZE)
            bands[label][0, 0, r * bh // h, c * bw // w] = float(q[r, c]) / delta
            resp = model.transform.inverse(SubbandPyramid(bands))
            out[label] = resp[0, 0].numpy().copy()
    return out
