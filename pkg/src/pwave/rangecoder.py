"""32-bit range coder driven by quantized Laplace CDFs.

Entropy parameters are snapped to a fixed grid before any CDF is formed:
means to multiples of 1/32 and scales to 64 log-spaced values in
[1e-2, 256].  Encoder and decoder therefore derive identical integer CDFs
from the same real-valued (mu, sigma).

Integer CDFs come in closed form.  For an alphabet of ``A`` symbols starting
at ``lo``, the cumulative count below symbol index ``i`` is::

    C(i) = i + round(F(lo + i - 0.5) * (2**16 - A)),   C(0) = 0, C(A) = 2**16

where ``F`` is the continuous Laplace CDF.  Every symbol gets a frequency of
at least one, the tails beyond the alphabet fold into the edge symbols, and
a single symbol's interval costs two exponentials.  Decoding finds the
symbol by bisection on ``C``, so no table is ever materialised for batch
coding.  All CDF values are produced by the same compiled kernel.

The coder is the carry-propagating LZMA-style design: 33-bit ``low``,
32-bit ``range``, byte-wise renormalisation below 2**24.  The leading byte,
which is always zero, is not stored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache

import numba
import numpy as np

from .entropy.laplace import ALPHABET, laplace_pmf_np

PRECISION = 16
TOTAL = 1 << PRECISION
MU_STEPS = 32
SIGMA_GRID = np.geomspace(1e-2, 256.0, 64)
_LOG_SIGMA_MIN = float(np.log(SIGMA_GRID[0]))
_LOG_SIGMA_STEP = float((np.log(SIGMA_GRID[-1]) - _LOG_SIGMA_MIN) / (len(SIGMA_GRID) - 1))
_TOP = 1 << 24
MAX_ALPHABET = TOTAL // 2


class RangeCoderError(ValueError):
    pass


def quantize_mu(mu) -> np.ndarray:
    """Index on the 1/32 grid, nearest point, ties toward the smaller index."""
    x = np.clip(np.asarray(mu, dtype=np.float64), ALPHABET[0], ALPHABET[1]) * MU_STEPS
    return np.ceil(x - 0.5).astype(np.int64)


def quantize_sigma(sigma) -> np.ndarray:
    """Index into ``SIGMA_GRID`` (nearest in log domain, ties toward smaller index)."""
    s = np.maximum(np.asarray(sigma, dtype=np.float64), 1e-300)
    t = (np.log(s) - _LOG_SIGMA_MIN) / _LOG_SIGMA_STEP
    return np.clip(np.ceil(t - 0.5), 0, len(SIGMA_GRID) - 1).astype(np.int64)


def grid_params(mu, sigma) -> tuple[np.ndarray, np.ndarray]:
    """Snap (mu, sigma) to the grid; returns the grid values as float arrays."""
    return (quantize_mu(np.ravel(mu)).astype(np.float64) / MU_STEPS,
            SIGMA_GRID[quantize_sigma(np.ravel(sigma))])


def _check_alphabet(lo: int, hi: int):
    if not lo < hi:
        raise ValueError(f"alphabet needs lo < hi, got [{lo}, {hi}]")
    if hi - lo + 1 > MAX_ALPHABET:
        raise ValueError("alphabet too large for 16-bit frequencies")


# ---------------------------------------------------------------- CDF kernel

@numba.njit(cache=True)
def _cum(i, n, mu, b, lo):
    # cumulative count below symbol index i of an n-symbol alphabet
    if i <= 0:
        return 0
    if i >= n:
        return TOTAL
    x = (lo + i - 0.5) - mu
    if x < 0:
        f = 0.5 * np.exp(x / b)
    else:
        f = 1.0 - 0.5 * np.exp(-x / b)
    return i + np.int64(np.floor(f * (TOTAL - n) + 0.5))


@numba.njit(cache=True)
def _cdf_row(n, mu, b, lo, out):
    for i in range(n + 1):
        out[i] = _cum(i, n, mu, b, lo)


@numba.njit(cache=True)
def _intervals(idx, n, mu, b, lo, starts, freqs):
    for k in range(idx.shape[0]):
        s = _cum(idx[k], n, mu[k], b[k], lo)
        starts[k] = s
        freqs[k] = _cum(idx[k] + 1, n, mu[k], b[k], lo) - s


@dataclass(frozen=True)
class QuantizedCdf:
    lo: int
    cdf: np.ndarray  # length (hi - lo + 2), cdf[0] = 0, cdf[-1] = TOTAL

    @property
    def hi(self) -> int:
        return self.lo + len(self.cdf) - 2

    def freq(self, v: int) -> int:
        i = v - self.lo
        return int(self.cdf[i + 1] - self.cdf[i])


def _grid_index(mu: float, sigma: float) -> tuple[int, int]:
    # scalar twin of quantize_mu / quantize_sigma, used once per position by raster coding
    m = min(max(mu, ALPHABET[0]), ALPHABET[1]) * MU_STEPS
    t = (math.log(max(sigma, 1e-300)) - _LOG_SIGMA_MIN) / _LOG_SIGMA_STEP
    return math.ceil(m - 0.5), min(max(math.ceil(t - 0.5), 0), len(SIGMA_GRID) - 1)


def build_cdf(mu: float, sigma: float, alphabet: tuple[int, int] = ALPHABET) -> QuantizedCdf:
    lo, hi = alphabet
    return QuantizedCdf(lo, _cached_row(*_grid_index(float(mu), float(sigma)), lo, hi))


@lru_cache(maxsize=65536)
def _cached_row(mu_idx: int, sigma_idx: int, lo: int, hi: int) -> np.ndarray:
    _check_alphabet(lo, hi)
    n = hi - lo + 1
    row = np.empty(n + 1, dtype=np.int64)
    _cdf_row(n, mu_idx / MU_STEPS, SIGMA_GRID[sigma_idx], lo, row)
    row.flags.writeable = False
    return row


def build_cdf_tables(mu, sigma, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """Deduplicated full tables for many symbols: (tables[U, A+1], row index per symbol)."""
    _check_alphabet(lo, hi)
    mu_idx = quantize_mu(np.ravel(mu))
    s_idx = quantize_sigma(np.ravel(sigma))
    key = mu_idx * len(SIGMA_GRID) + s_idx
    uniq, rows = np.unique(key, return_inverse=True)
    tables = np.stack([_cached_row(int(k // len(SIGMA_GRID)), int(k % len(SIGMA_GRID)), lo, hi)
                       for k in uniq]) if len(uniq) else np.zeros((0, hi - lo + 2), np.int64)
    return tables, rows.astype(np.int64).ravel()


def laplace_intervals(symbols, mu, sigma, lo: int, hi: int) -> tuple[np.ndarray, np.ndarray]:
    """(start, freq) of each symbol under its grid-quantized Laplace CDF."""
    _check_alphabet(lo, hi)
    idx = np.ravel(np.asarray(symbols, dtype=np.int64)) - lo
    if idx.size and (idx.min() < 0 or idx.max() > hi - lo):
        raise RangeCoderError("symbol outside the alphabet")
    m, b = grid_params(mu, sigma)
    starts = np.empty(idx.size, np.int64)
    freqs = np.empty(idx.size, np.int64)
    _intervals(idx, hi - lo + 1, m, b, lo, starts, freqs)
    return starts, freqs


# ---------------------------------------------------------------- coder core

@numba.njit(cache=True)
def _shift_low(st, out):
    # st: [low, range, cache, cache_size, out_pos, emitted_first]
    low = st[0]
    if low < 0xFF000000 or low >= (1 << 32):
        carry = low >> 32
        temp = st[2]
        while True:
            if st[5]:
                out[st[4]] = (temp + carry) & 0xFF
                st[4] += 1
            else:
                st[5] = 1
            temp = 0xFF
            st[3] -= 1
            if st[3] == 0:
                break
        st[2] = (low >> 24) & 0xFF
    st[3] += 1
    st[0] = (low & 0x00FFFFFF) << 8


@numba.njit(cache=True)
def _encode_batch(starts, freqs, out):
    st = np.zeros(6, dtype=np.int64)
    st[1] = 0xFFFFFFFF
    st[3] = 1
    for i in range(starts.shape[0]):
        r = st[1] >> PRECISION
        st[0] += starts[i] * r
        st[1] = freqs[i] * r
        while st[1] < _TOP:
            st[1] <<= 8
            _shift_low(st, out)
    for _ in range(5):
        _shift_low(st, out)
    return st[4]


@numba.njit(cache=True)
def _decoder_init(st, payload):
    # st: [range, code, pos, status]
    st[0] = 0xFFFFFFFF
    st[1] = 0
    st[2] = 0
    st[3] = 0
    for _ in range(4):
        if st[2] >= payload.shape[0]:
            st[3] = 1
            return
        st[1] = (st[1] << 8) | payload[st[2]]
        st[2] += 1


@numba.njit(cache=True)
def _consume(st, payload, start, freq, r):
    st[1] -= start * r
    st[0] = freq * r
    while st[0] < _TOP:
        if st[2] >= payload.shape[0]:
            st[3] = 1
            return
        st[1] = ((st[1] << 8) | payload[st[2]]) & 0xFFFFFFFF
        st[0] <<= 8
        st[2] += 1


@numba.njit(cache=True)
def _decode_one(st, payload, cdf):
    r = st[0] >> PRECISION
    value = st[1] // r
    n = cdf.shape[0] - 1
    if value >= cdf[n]:
        st[3] = 2
        return 0
    lo = 0
    hi = n
    while hi - lo > 1:
        mid = (lo + hi) >> 1
        if cdf[mid] <= value:
            lo = mid
        else:
            hi = mid
    _consume(st, payload, cdf[lo], cdf[lo + 1] - cdf[lo], r)
    return lo


@numba.njit(cache=True)
def _decode_batch(st, payload, tables, rows, out):
    for i in range(rows.shape[0]):
        out[i] = _decode_one(st, payload, tables[rows[i]])
        if st[3]:
            return


@numba.njit(cache=True)
def _decode_laplace(st, payload, n, mu, b, lo, out):
    for k in range(mu.shape[0]):
        r = st[0] >> PRECISION
        value = st[1] // r
        if value >= TOTAL:
            st[3] = 2
            return
        a = 0
        z = n
        while z - a > 1:
            mid = (a + z) >> 1
            if _cum(mid, n, mu[k], b[k], lo) <= value:
                a = mid
            else:
                z = mid
        s = _cum(a, n, mu[k], b[k], lo)
        _consume(st, payload, s, _cum(a + 1, n, mu[k], b[k], lo) - s, r)
        out[k] = a
        if st[3]:
            return


class RangeEncoder:
    """Collects (start, freq) pairs and emits the payload on ``finish``."""

    def __init__(self):
        self._starts: list[np.ndarray] = []
        self._freqs: list[np.ndarray] = []

    def encode(self, symbols: np.ndarray, tables: np.ndarray, rows: np.ndarray, lo: int):
        idx = np.asarray(symbols, dtype=np.int64).ravel() - lo
        rows = np.asarray(rows, dtype=np.int64).ravel()
        if idx.size and (idx.min() < 0 or idx.max() >= tables.shape[1] - 1):
            raise RangeCoderError("symbol outside the table alphabet")
        start = tables[rows, idx].astype(np.int64)
        self._starts.append(start)
        self._freqs.append(tables[rows, idx + 1].astype(np.int64) - start)

    def encode_laplace(self, symbols, mu, sigma, lo: int, hi: int) -> float:
        """Encode symbols under per-symbol Laplace parameters; returns the CDF rate in bits."""
        starts, freqs = laplace_intervals(symbols, mu, sigma, lo, hi)
        self._starts.append(starts)
        self._freqs.append(freqs)
        return float(-np.log2(freqs / TOTAL).sum())

    def encode_cdf(self, symbol: int, cdf: QuantizedCdf):
        i = symbol - cdf.lo
        if not 0 <= i < len(cdf.cdf) - 1:
            raise RangeCoderError(f"symbol {symbol} outside alphabet [{cdf.lo}, {cdf.hi}]")
        self._starts.append(np.array([cdf.cdf[i]], dtype=np.int64))
        self._freqs.append(np.array([cdf.cdf[i + 1] - cdf.cdf[i]], dtype=np.int64))

    def finish(self) -> bytes:
        starts = np.concatenate(self._starts) if self._starts else np.zeros(0, np.int64)
        freqs = np.concatenate(self._freqs) if self._freqs else np.zeros(0, np.int64)
        out = np.zeros(2 * len(starts) + 16, dtype=np.uint8)
        n = _encode_batch(starts, freqs, out)
        return out[:n].tobytes()


class RangeDecoder:
    def __init__(self, payload: bytes):
        self.payload = np.frombuffer(payload, dtype=np.uint8)
        self.state = np.zeros(4, dtype=np.int64)
        _decoder_init(self.state, self.payload)
        self._check()

    def _check(self):
        if self.state[3] == 1:
            raise RangeCoderError("truncated payload")
        if self.state[3] == 2:
            raise RangeCoderError("corrupt payload: decoded value outside table")

    def decode(self, tables: np.ndarray, rows: np.ndarray, lo: int) -> np.ndarray:
        out = np.zeros(len(rows), dtype=np.int64)
        _decode_batch(self.state, self.payload, np.ascontiguousarray(tables, dtype=np.int64),
                      np.ascontiguousarray(rows, dtype=np.int64), out)
        self._check()
        return out + lo

    def decode_laplace(self, mu, sigma, lo: int, hi: int) -> np.ndarray:
        _check_alphabet(lo, hi)
        m, b = grid_params(mu, sigma)
        out = np.zeros(len(m), dtype=np.int64)
        _decode_laplace(self.state, self.payload, hi - lo + 1, m, b, lo, out)
        self._check()
        return out + lo

    def decode_cdf(self, cdf: QuantizedCdf) -> int:
        s = _decode_one(self.state, self.payload, cdf.cdf)
        self._check()
        return int(s) + cdf.lo


def encode_symbols(symbols, cdf_provider) -> bytes:
    """Encode ``symbols`` where ``cdf_provider(i)`` returns the QuantizedCdf for symbol i."""
    enc = RangeEncoder()
    for i, s in enumerate(symbols):
        enc.encode_cdf(int(s), cdf_provider(i))
    return enc.finish()


def decode_symbols(payload: bytes, count: int, cdf_provider) -> list[int]:
    if count == 0:
        return []
    dec = RangeDecoder(payload)
    return [dec.decode_cdf(cdf_provider(i)) for i in range(count)]


def ideal_rate_bits(symbols, mu, sigma, alphabet: tuple[int, int] = ALPHABET) -> float:
    """Sum of -log2 pmf under the continuous (unquantized) Laplace model."""
    p = laplace_pmf_np(np.asarray(symbols, dtype=np.float64), mu, sigma, *alphabet)
    return float(-np.log2(np.maximum(p, 1e-300)).sum())


def table_rate_bits(symbols, tables: np.ndarray, rows: np.ndarray, lo: int) -> float:
    """Sum of -log2(freq / TOTAL) under the quantized tables actually used for coding."""
    idx = np.asarray(symbols, dtype=np.int64).ravel() - lo
    rows = np.asarray(rows).ravel()
    freq = tables[rows, idx + 1].astype(np.float64) - tables[rows, idx]
    return float(-np.log2(freq / TOTAL).sum())


def cdf_rate_bits(symbols, mu, sigma, lo: int, hi: int) -> float:
    """Ideal rate under the grid-quantized integer CDFs used for coding."""
    _, freqs = laplace_intervals(symbols, mu, sigma, lo, hi)
    return float(-np.log2(freqs / TOTAL).sum())
