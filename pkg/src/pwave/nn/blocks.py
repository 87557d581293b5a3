import torch
import torch.nn.functional as F
from torch import nn

from .core import Conv, leaky_relu


class ResidualBlock(nn.Module):
    """Two convolutions with a skip connection."""

    def __init__(self, channels: int, kernel_size: int = 3, padding_mode: str = "zeros"):
        super().__init__()
        self.conv1 = Conv(channels, channels, kernel_size, padding_mode=padding_mode)
        self.conv2 = Conv(channels, channels, kernel_size, padding_mode=padding_mode)

    def forward(self, x):
        return x + self.conv2(leaky_relu(self.conv1(x)))


class DepthConvBlock(nn.Module):
    """Depthwise-convolution residual unit followed by a pointwise feed-forward unit.

    The 3x3 convolution in the first unit uses ``groups == channels`` so each
    channel is filtered by its own kernel.
    """

    def __init__(self, channels: int, expansion: int = 2):
        super().__init__()
        self.pw_in = Conv(channels, channels, 1)
        self.depthwise = Conv(channels, channels, 3, groups=channels)
        self.pw_out = Conv(channels, channels, 1)
        self.ffn_in = Conv(channels, channels * expansion, 1)
        self.ffn_out = Conv(channels * expansion, channels, 1)

    def forward(self, x):
        x = x + self.pw_out(self.depthwise(leaky_relu(self.pw_in(x))))
        return x + self.ffn_out(leaky_relu(self.ffn_in(x)))


def causal_mask(kernel_size: int) -> torch.Tensor:
    """Raster-causal mask: taps strictly before the centre in raster order."""
    k = kernel_size
    m = torch.zeros(k, k)
    m[: k // 2, :] = 1
    m[k // 2, : k // 2] = 1
    return m


class MaskedConv(Conv):
    """Convolution whose kernel only sees raster-preceding positions."""

    def __init__(self, in_channels: int, out_channels: int, kernel_size: int = 5):
        super().__init__(in_channels, out_channels, kernel_size)
        self.register_buffer("mask", causal_mask(kernel_size))

    def masked_weight(self):
        return self.weight * self.mask

    def forward(self, x, padding: int | None = None):
        pad = self.spec.pad if padding is None else padding
        return F.conv2d(x, self.masked_weight(), self.bias, padding=pad)
