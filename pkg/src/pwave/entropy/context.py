"""Context models estimating Laplace (mu, sigma) per coefficient.

Two interchangeable models:

* ``ARFusionNet`` -- raster-autoregressive.  A causal 5x5 masked convolution
  followed only by pointwise layers, so the output at a position depends on
  strictly preceding positions and can be evaluated on a 5x5 window.
* ``FourStepFusionNet`` -- four parallel phases.  Phase 0 sees only the long
  context; phases 1-3 also see the coefficients of earlier phases.

Networks consume symbols divided by ``SYMBOL_SCALE`` and emit mu multiplied
by it, keeping activations O(1) for 8-bit-range coefficients.
"""

from __future__ import annotations

import math

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from ..nn.core import LEAKY_SLOPE
from ..nn import Conv, ConvLSTMCell, ConvLSTMState, DepthConvBlock, MaskedConv, ResidualBlock, leaky_relu
from .laplace import SIGMA_FLOOR, sigma_from_raw
from .masks import PHASES, coded_before, step_mask, torch_mask

SYMBOL_SCALE = 16.0


class VisibilityError(RuntimeError):
    """A fusion step was handed coefficients it is not allowed to see yet."""


def _split_head(out: torch.Tensor):
    return out[:, :1] * SYMBOL_SCALE, sigma_from_raw(out[:, 1:2])


class _Branch(nn.Module):
    def __init__(self, in_channels: int, width: int, block):
        super().__init__()
        self.inp = Conv(in_channels, width, 3)
        self.blocks = nn.ModuleList([block(width), block(width)])
        self.head = Conv(width, 2, 3, zero_init=True)

    def forward(self, x):
        h = leaky_relu(self.inp(x))
        for b in self.blocks:
            h = b(h)
        return self.head(h)


class FourStepFusionNet(nn.Module):
    def __init__(self, ctx_channels: int, width: int = 32):
        super().__init__()
        self.ctx_channels = ctx_channels
        self.branches = nn.ModuleList(
            [_Branch(ctx_channels, width, DepthConvBlock)]
            + [_Branch(ctx_channels + 2, width, ResidualBlock) for _ in range(PHASES - 1)]
        )
        self.invocations = 0

    def _ctx(self, long_ctx, ref: torch.Tensor):
        if long_ctx is None:
            b, _, h, w = ref.shape
            return ref.new_zeros(b, self.ctx_channels, h, w)
        return long_ctx

    def step(self, phase: int, visible: torch.Tensor | None, long_ctx: torch.Tensor | None,
             shape: tuple[int, int, int] | None = None, check: bool = True):
        """Entropy parameters for ``phase`` evaluated on the whole grid.

        ``visible`` holds symbols at positions of earlier phases and zeros
        elsewhere; phase 0 ignores it.  Returns full-size (mu, sigma) maps of
        which only the phase's own positions are meaningful.
        """
        self.invocations += 1
        if phase == 0:
            if long_ctx is None:
                b, h, w = shape if shape is not None else (visible.shape[0], *visible.shape[-2:])
                long_ctx = torch.zeros(b, self.ctx_channels, h, w, dtype=self._dtype())
            return _split_head(self.branches[0](long_ctx))
        h, w = visible.shape[-2:]
        coded = torch_mask(coded_before(phase, h, w), visible)[None, None]
        if check and bool((visible * (1 - coded)).ne(0).any()):
            raise VisibilityError(f"phase {phase} input holds values at positions not yet coded")
        ctx = self._ctx(long_ctx, visible)
        x = torch.cat([visible / SYMBOL_SCALE, coded.expand_as(visible), ctx], dim=1)
        return _split_head(self.branches[phase](x))

    def _dtype(self):
        return self.branches[0].head.weight.dtype

    def forward(self, symbols: torch.Tensor, long_ctx: torch.Tensor | None = None):
        """Teacher-forced parameters for every position (training/analysis)."""
        h, w = symbols.shape[-2:]
        mu = sigma = 0
        for k in range(PHASES):
            sel = torch_mask(step_mask(k, h, w), symbols)[None, None]
            visible = symbols * torch_mask(coded_before(k, h, w), symbols)[None, None]
            m, s = self.step(k, visible, long_ctx, shape=(symbols.shape[0], h, w), check=False)
            mu = mu + sel * m
            sigma = sigma + sel * s
        return mu, sigma


class ARFusionNet(nn.Module):
    def __init__(self, ctx_channels: int = 0, width: int = 32, kernel_size: int = 5):
        super().__init__()
        self.kernel_size = kernel_size
        self.ctx_channels = ctx_channels
        self.masked = MaskedConv(1, width, kernel_size)
        self.ctx = Conv(ctx_channels, width, 1, bias=False) if ctx_channels else None
        self.blocks = nn.ModuleList([ResidualBlock(width, 1), ResidualBlock(width, 1)])
        self.head = Conv(width, 2, 1, zero_init=True)
        self.invocations = 0

    def _tail(self, h, ctx):
        if self.ctx is not None and ctx is not None:
            h = h + self.ctx(ctx)
        h = leaky_relu(h)
        for b in self.blocks:
            h = b(h)
        return _split_head(self.head(h))

    def forward(self, symbols: torch.Tensor, long_ctx: torch.Tensor | None = None):
        """All positions at once; valid because the kernel is causal (teacher forcing)."""
        return self._tail(self.masked(symbols / SYMBOL_SCALE), long_ctx)

    def at(self, window: torch.Tensor, ctx: torch.Tensor | None = None):
        """Parameters for the centre of a (1, 1, k, k) window; one network invocation."""
        self.invocations += 1
        return self._tail(self.masked(window / SYMBOL_SCALE, padding=0), ctx)

    def pointwise(self, ctx: torch.Tensor | None = None) -> "PointwiseAR":
        """Per-position evaluator for sequential coding (see ``PointwiseAR``)."""
        return PointwiseAR(self, ctx)


class PointwiseAR:
    """The AR network as numpy matrix-vector products for one position at a time.

    Everything after the masked convolution is pointwise, so a position needs
    only its k x k window and its long-context vector.  Calling torch per
    position costs far more in dispatch than in arithmetic; this evaluator
    snapshots the weights once per subband instead.  Encoder and decoder both
    use it, so they agree bit for bit.  Calls are tallied in ``calls`` and
    added to the network's invocation count by ``flush``.
    """

    def __init__(self, net: ARFusionNet, ctx: torch.Tensor | None = None):
        def arr(t):
            return t.detach().cpu().numpy()

        self.net = net
        self.calls = 0
        width = net.masked.spec.out_channels
        self.w_in = arr(net.masked.masked_weight()).reshape(width, -1) / SYMBOL_SCALE
        self.b_in = arr(net.masked.bias)
        self.ctx = None
        if net.ctx is not None and ctx is not None:
            with torch.no_grad():
                self.ctx = np.ascontiguousarray(arr(net.ctx(ctx))[0].transpose(1, 2, 0))
        self.blocks = [(arr(b.conv1.weight)[:, :, 0, 0], arr(b.conv1.bias),
                        arr(b.conv2.weight)[:, :, 0, 0], arr(b.conv2.bias)) for b in net.blocks]
        self.w_out = arr(net.head.weight)[:, :, 0, 0]
        self.b_out = arr(net.head.bias)

    def __call__(self, window: np.ndarray, r: int, c: int) -> tuple[float, float]:
        self.calls += 1
        h = self.w_in @ window.ravel() + self.b_in
        if self.ctx is not None:
            h = h + self.ctx[r, c]
        h = np.maximum(h, LEAKY_SLOPE * h)
        for w1, b1, w2, b2 in self.blocks:
            t = w1 @ h + b1
            h = h + (w2 @ np.maximum(t, LEAKY_SLOPE * t) + b2)
        mu, raw = self.w_out @ h + self.b_out
        return float(mu) * SYMBOL_SCALE, max(math.exp(min(max(float(raw), -10.0), 10.0)), SIGMA_FLOOR)

    def flush(self):
        self.net.invocations += self.calls
        self.calls = 0


class LongContext(nn.Module):
    """ConvLSTM carrying information from coded subbands to the next one."""

    def __init__(self, channels: int = 16):
        super().__init__()
        self.channels = channels
        self.embed = Conv(1, channels, 3)
        self.cell = ConvLSTMCell(channels, channels)

    def initial(self, batch: int, height: int, width: int, dtype=torch.float64) -> ConvLSTMState:
        return ConvLSTMState.zeros(batch, self.channels, height, width, dtype=dtype)

    def advance(self, decoded: torch.Tensor, state: ConvLSTMState,
                next_size: tuple[int, int]) -> ConvLSTMState:
        h, w = decoded.shape[-2:]
        nh, nw = next_size
        if (nh, nw) == (h, w):
            scale = 1
        elif (nh, nw) == (2 * h, 2 * w):
            scale = 2
        else:
            raise ValueError(f"cannot advance long context from {h}x{w} to {nh}x{nw}")
        x = leaky_relu(self.embed(decoded / SYMBOL_SCALE))
        _, new = self.cell(x, state)
        if scale == 2:
            new = ConvLSTMState(F.interpolate(new.hidden, scale_factor=2, mode="nearest"),
                                F.interpolate(new.cell, scale_factor=2, mode="nearest"))
        return new
