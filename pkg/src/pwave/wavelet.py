"""Trainable 2D wavelet transform built from 1D lifting steps.

Each 1D step splits a signal along its last axis into even and odd samples,
predicts the odd samples from the even ones, then updates the even samples
with the prediction residual::

    high = odd - P(even)
    low  = even + U(high)

``P`` and ``U`` are a classical base filter (Haar or CDF 5/3) plus a residual
CNN.  In integer mode the filter outputs are rounded, which makes the inverse
exact for integer input no matter what the CNNs compute.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
from torch import nn

from .nn import Conv, ResidualBlock, leaky_relu, round_half_away

LEVELS = 4
ORIENTATIONS = ("HL", "LH", "HH")
_SQRT2 = math.sqrt(2.0)


def coding_order() -> list[str]:
    """Subband labels, coarse to fine: LL4, HL4, LH4, HH4, HL3, ..., HH1."""
    order = [f"LL{LEVELS}"]
    for level in range(LEVELS, 0, -1):
        order += [f"{o}{level}" for o in ORIENTATIONS]
    return order


def band_level(label: str) -> int:
    return int(label[2:])


def band_shape(label: str, height: int, width: int) -> tuple[int, int]:
    s = 2 ** band_level(label)
    return height // s, width // s


class TransformError(ValueError):
    pass


class ResidualFilter(nn.Module):
    """Small CNN whose output is added to a base lifting filter.

    The output convolution starts at zero, so a fresh filter is exactly the
    base wavelet.
    """

    def __init__(self, width: int = 16, blocks: int = 2):
        super().__init__()
        self.inp = Conv(1, width, 3, padding_mode="replicate")
        self.blocks = nn.ModuleList(ResidualBlock(width, padding_mode="replicate") for _ in range(blocks))
        self.out = Conv(width, 1, 3, zero_init=True, padding_mode="replicate")

    def forward(self, x):
        h = leaky_relu(self.inp(x))
        for b in self.blocks:
            h = b(h)
        return self.out(h)


class LiftingFilterPair(nn.Module):
    def __init__(self, base: str = "haar", width: int = 16, blocks: int = 2):
        super().__init__()
        if base not in ("haar", "cdf53"):
            raise TransformError(f"unknown base wavelet {base!r}")
        self.base = base
        self.p_net = ResidualFilter(width, blocks)
        self.u_net = ResidualFilter(width, blocks)

    def predict(self, even):
        if self.base == "haar":
            base = even
        else:
            nxt = torch.cat([even[..., 1:], even[..., -1:]], dim=-1)
            base = 0.5 * (even + nxt)
        return base + self.p_net(even)

    def update(self, high):
        if self.base == "haar":
            base = 0.5 * high
        else:
            prev = torch.cat([high[..., :1], high[..., :-1]], dim=-1)
            base = 0.25 * (prev + high)
        return base + self.u_net(high)


def lift_forward_1d(x: torch.Tensor, filters: LiftingFilterPair, integer: bool = False,
                    normalize: bool = False) -> tuple[torch.Tensor, torch.Tensor]:
    """Lift along the last axis.  Returns (lowpass, highpass), each half length."""
    n = x.shape[-1]
    if n < 2 or n % 2:
        raise TransformError(f"lifting needs an even length >= 2, got {n}; pad first")
    even, odd = x[..., 0::2], x[..., 1::2]
    p = filters.predict(even)
    if integer:
        p = round_half_away(p)
    high = odd - p
    u = filters.update(high)
    if integer:
        u = round_half_away(u)
    low = even + u
    if normalize:
        low, high = low * _SQRT2, high / _SQRT2
    return low, high


def lift_inverse_1d(low: torch.Tensor, high: torch.Tensor, filters: LiftingFilterPair,
                    integer: bool = False, normalize: bool = False) -> torch.Tensor:
    if low.shape != high.shape:
        raise TransformError(f"lowpass {tuple(low.shape)} and highpass {tuple(high.shape)} differ")
    if normalize:
        low, high = low / _SQRT2, high * _SQRT2
    u = filters.update(high)
    if integer:
        u = round_half_away(u)
    even = low - u
    p = filters.predict(even)
    if integer:
        p = round_half_away(p)
    odd = high + p
    return torch.stack([even, odd], dim=-1).flatten(-2)


def _lift_cols(x, filters, integer, normalize):
    lo, hi = lift_forward_1d(x.transpose(-1, -2), filters, integer, normalize)
    return lo.transpose(-1, -2), hi.transpose(-1, -2)


def _unlift_cols(lo, hi, filters, integer, normalize):
    return lift_inverse_1d(lo.transpose(-1, -2), hi.transpose(-1, -2), filters,
                           integer, normalize).transpose(-1, -2)


@dataclass
class SubbandPyramid:
    """The 13 subbands keyed by label; iteration follows the coding order."""

    bands: dict[str, torch.Tensor]

    def __post_init__(self):
        order = coding_order()
        if set(self.bands) != set(order):
            raise TransformError(f"pyramid must hold exactly {order}, got {sorted(self.bands)}")
        ll = self.bands[f"LL{LEVELS}"]
        h, w = ll.shape[-2] * 2 ** LEVELS, ll.shape[-1] * 2 ** LEVELS
        for label in order:
            if tuple(self.bands[label].shape[-2:]) != band_shape(label, h, w):
                raise TransformError(f"subband {label} has shape {tuple(self.bands[label].shape)}")

    def __getitem__(self, label):
        return self.bands[label]

    def __iter__(self):
        return iter(coding_order())

    def items(self):
        return [(k, self.bands[k]) for k in coding_order()]

    @property
    def plane_size(self) -> tuple[int, int]:
        ll = self.bands[f"LL{LEVELS}"]
        return ll.shape[-2] * 2 ** LEVELS, ll.shape[-1] * 2 ** LEVELS

    def coefficient_count(self) -> int:
        return sum(b.shape[-1] * b.shape[-2] for b in self.bands.values())

    def map(self, fn) -> "SubbandPyramid":
        return SubbandPyramid({k: fn(k, v) for k, v in self.bands.items()})


def dwt2d_forward(plane: torch.Tensor, filters, integer: bool = False,
                  normalize: bool = False) -> SubbandPyramid:
    """Four-level decomposition of a (B, 1, H, W) plane; H and W multiples of 16."""
    if plane.dim() == 2:
        plane = plane[None, None]
    h, w = plane.shape[-2:]
    step = 2 ** LEVELS
    if h % step or w % step or h == 0 or w == 0:
        raise TransformError(
            f"plane {h}x{w} is not a multiple of {step}; replicate-pad at ingestion"
        )
    if len(filters) != LEVELS:
        raise TransformError(f"need {LEVELS} filter pairs, got {len(filters)}")
    bands = {}
    ll = plane
    for level in range(1, LEVELS + 1):
        f = filters[level - 1]
        lo, hi = lift_forward_1d(ll, f, integer, normalize)
        ll, lh = _lift_cols(lo, f, integer, normalize)
        hl, hh = _lift_cols(hi, f, integer, normalize)
        bands[f"HL{level}"], bands[f"LH{level}"], bands[f"HH{level}"] = hl, lh, hh
    bands[f"LL{LEVELS}"] = ll
    return SubbandPyramid(bands)


def dwt2d_inverse(pyramid: SubbandPyramid, filters, integer: bool = False,
                  normalize: bool = False) -> torch.Tensor:
    if not isinstance(pyramid, SubbandPyramid):
        pyramid = SubbandPyramid(dict(pyramid))
    ll = pyramid[f"LL{LEVELS}"]
    for level in range(LEVELS, 0, -1):
        f = filters[level - 1]
        lo = _unlift_cols(ll, pyramid[f"LH{level}"], f, integer, normalize)
        hi = _unlift_cols(pyramid[f"HL{level}"], pyramid[f"HH{level}"], f, integer, normalize)
        ll = lift_inverse_1d(lo, hi, f, integer, normalize)
    return ll


class WaveletTransform(nn.Module):
    """Four per-level lifting filter pairs shared by analysis and synthesis."""

    def __init__(self, base: str = "haar", width: int = 16, blocks: int = 2,
                 integer: bool = False):
        super().__init__()
        self.integer = integer
        self.levels = nn.ModuleList(LiftingFilterPair(base, width, blocks) for _ in range(LEVELS))

    def forward(self, plane):
        return dwt2d_forward(plane, list(self.levels), self.integer)

    def inverse(self, pyramid):
        return dwt2d_inverse(pyramid, list(self.levels), self.integer)
