"""Tensor operations shared by every network in the codec.

Tensors are plain ``torch.Tensor`` objects of shape (batch, channels, height,
width).  Autograd supplies the reverse pass; everything here is a thin,
validated layer over it so that shape errors surface as ``ConfigError`` with a
useful message instead of deep inside a kernel.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

LEAKY_SLOPE = 0.01


class ConfigError(ValueError):
    """Raised for inconsistent layer configuration or tensor shapes."""


@dataclass(frozen=True)
class ConvSpec:
    in_channels: int
    out_channels: int
    kernel_size: int = 3
    stride: int = 1
    padding: int | None = None  # None -> "same" for odd kernels
    groups: int = 1

    def __post_init__(self):
        if self.kernel_size % 2 != 1:
            raise ConfigError(f"kernel_size must be odd, got {self.kernel_size}")
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("channel counts must be positive")
        if self.in_channels % self.groups or self.out_channels % self.groups:
            raise ConfigError(
                f"channels ({self.in_channels}, {self.out_channels}) "
                f"not divisible by groups={self.groups}"
            )

    @property
    def pad(self) -> int:
        return self.kernel_size // 2 if self.padding is None else self.padding

    @property
    def weight_shape(self) -> tuple[int, int, int, int]:
        k = self.kernel_size
        return (self.out_channels, self.in_channels // self.groups, k, k)


def conv2d(x: torch.Tensor, spec: ConvSpec, weight: torch.Tensor,
           bias: torch.Tensor | None = None, padding_mode: str = "zeros") -> torch.Tensor:
    if x.dim() != 4:
        raise ConfigError(f"expected a 4-D tensor, got shape {tuple(x.shape)}")
    if x.shape[1] != spec.in_channels:
        raise ConfigError(f"input has {x.shape[1]} channels, spec expects {spec.in_channels}")
    if tuple(weight.shape) != spec.weight_shape:
        raise ConfigError(f"weight shape {tuple(weight.shape)} != {spec.weight_shape}")
    if bias is not None and tuple(bias.shape) != (spec.out_channels,):
        raise ConfigError(f"bias shape {tuple(bias.shape)} != ({spec.out_channels},)")
    pad = spec.pad
    if pad and padding_mode != "zeros":
        x = F.pad(x, (pad, pad, pad, pad), mode=padding_mode)
        pad = 0
    return F.conv2d(x, weight, bias, stride=spec.stride, padding=pad, groups=spec.groups)


def leaky_relu(x: torch.Tensor) -> torch.Tensor:
    return F.leaky_relu(x, LEAKY_SLOPE)


class Conv(nn.Module):
    """A convolution layer owning its parameters, initialised fan-in uniform."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 3,
                 groups: int = 1, bias: bool = True, zero_init: bool = False,
                 padding: int | None = None, padding_mode: str = "zeros"):
        super().__init__()
        self.spec = ConvSpec(in_channels, out_channels, kernel_size,
                             padding=padding, groups=groups)
        self.padding_mode = padding_mode
        self.weight = nn.Parameter(torch.empty(self.spec.weight_shape))
        self.bias = nn.Parameter(torch.empty(out_channels)) if bias else None
        self.reset_parameters(zero_init)

    def reset_parameters(self, zero: bool = False):
        with torch.no_grad():
            if zero:
                self.weight.zero_()
                if self.bias is not None:
                    self.bias.zero_()
                return
            fan_in = self.weight[0].numel()
            bound = 1.0 / math.sqrt(fan_in)
            self.weight.uniform_(-bound, bound)
            if self.bias is not None:
                self.bias.uniform_(-bound, bound)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return conv2d(x, self.spec, self.weight, self.bias, self.padding_mode)

    def extra_repr(self) -> str:
        s = self.spec
        return f"{s.in_channels}, {s.out_channels}, k={s.kernel_size}, groups={s.groups}"


def round_half_away(x: torch.Tensor) -> torch.Tensor:
    """Nearest integer, ties away from zero.  Exact for every finite input."""
    t = torch.trunc(x)
    frac = x - t
    return t + torch.sign(x) * (frac.abs() >= 0.5).to(x.dtype)


class _SteRound(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x):
        return round_half_away(x)

    @staticmethod
    def backward(ctx, grad):
        return grad


def ste_round(x: torch.Tensor) -> torch.Tensor:
    """Rounding with a straight-through (identity) gradient."""
    return _SteRound.apply(x)


@dataclass
class ConvLSTMState:
    hidden: torch.Tensor
    cell: torch.Tensor

    def __post_init__(self):
        if self.hidden.shape != self.cell.shape:
            raise ConfigError("hidden and cell shapes differ")

    @classmethod
    def zeros(cls, batch: int, channels: int, height: int, width: int,
              dtype=torch.float64, device=None) -> "ConvLSTMState":
        z = torch.zeros(batch, channels, height, width, dtype=dtype, device=device)
        return cls(z, z.clone())

    @property
    def size(self) -> tuple[int, int]:
        return tuple(self.hidden.shape[-2:])


def conv_lstm_step(x: torch.Tensor, state: ConvLSTMState, weight: torch.Tensor,
                   bias: torch.Tensor | None = None) -> tuple[torch.Tensor, ConvLSTMState]:
    """One ConvLSTM update.

    Gates are a single convolution over ``cat([x, hidden])`` producing
    ``4 * hidden_channels`` maps in the order input, forget, output, candidate.
    """
    if x.shape[-2:] != state.hidden.shape[-2:]:
        raise ConfigError(
            f"input spatial size {tuple(x.shape[-2:])} != state size {state.size}; resample first"
        )
    hc = state.hidden.shape[1]
    spec = ConvSpec(x.shape[1] + hc, 4 * hc, weight.shape[-1])
    gates = conv2d(torch.cat([x, state.hidden], dim=1), spec, weight, bias)
    i, f, o, g = torch.split(gates, hc, dim=1)
    cell = torch.sigmoid(f) * state.cell + torch.sigmoid(i) * torch.tanh(g)
    hidden = torch.sigmoid(o) * torch.tanh(cell)
    return hidden, ConvLSTMState(hidden, cell)


class ConvLSTMCell(nn.Module):
    def __init__(self, in_channels: int, hidden_channels: int, kernel_size: int = 3):
        super().__init__()
        self.hidden_channels = hidden_channels
        self.gates = Conv(in_channels + hidden_channels, 4 * hidden_channels, kernel_size)

    def forward(self, x: torch.Tensor, state: ConvLSTMState):
        return conv_lstm_step(x, state, self.gates.weight, self.gates.bias)
