"""The full learned wavelet codec model and its training-mode forward pass."""

from __future__ import annotations

import json
import math
import zlib
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np
import torch
from torch import nn

from .entropy import ALPHABET, ARFusionNet, FourStepFusionNet, LongContext, rate_bits_torch
from .nn import Conv, ResidualBlock, leaky_relu, load_weights, round_half_away, save_weights, ste_round
from .wavelet import LEVELS, SubbandPyramid, WaveletTransform, band_shape, coding_order

PIXEL_SCALE = 255.0
LL_BAND = f"LL{LEVELS}"

# context-model ids stored in bitstream headers
CONTEXT_IDS = {("four-step", "ar"): 0, ("ar", "ar"): 1, ("four-step", "four-step"): 2}
LAMBDAS = (0.007, 0.01, 0.03, 0.05, 0.08)


@dataclass
class ModelConfig:
    context: str = "four-step"        # model for LH/HL/HH subbands: "four-step" or "ar"
    ll_context: str = "ar"            # model for LL4: "ar" or "four-step"
    base_wavelet: str = "haar"
    integer_lifting: bool = False
    lifting_width: int = 16
    lifting_blocks: int = 2
    context_width: int = 32
    long_context_width: int = 16
    post_width: int = 16
    delta_init: float = 1.0
    seed: int = 0
    precision: str = "float64"        # "float32" is meant for benchmarking only

    def __post_init__(self):
        if (self.context, self.ll_context) not in CONTEXT_IDS:
            raise ValueError(f"unsupported context combination {self.context}/{self.ll_context}")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"unsupported precision {self.precision}")

    @property
    def context_id(self) -> int:
        return CONTEXT_IDS[(self.context, self.ll_context)]

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


class PostProcess(nn.Module):
    """Residual CNN on the reconstructed plane; identity while the output conv is zero."""

    def __init__(self, width: int = 16):
        super().__init__()
        self.inp = Conv(1, width, 3, padding_mode="replicate")
        self.block = ResidualBlock(width, padding_mode="replicate")
        self.out = Conv(width, 1, 3, zero_init=True, padding_mode="replicate")

    def forward(self, x):
        # works in [0, 1] units regardless of the 8-bit scale used by the transform
        h = leaky_relu(self.inp(x / PIXEL_SCALE))
        return x + PIXEL_SCALE * self.out(self.block(h))


class PWaveModel(nn.Module):
    def __init__(self, config: ModelConfig | None = None):
        super().__init__()
        self.config = cfg = config or ModelConfig()
        gen_state = torch.random.get_rng_state()
        torch.manual_seed(cfg.seed)
        try:
            self.transform = WaveletTransform(cfg.base_wavelet, cfg.lifting_width,
                                              cfg.lifting_blocks, cfg.integer_lifting)
            self.long_context = LongContext(cfg.long_context_width)
            cw, lw = cfg.context_width, cfg.long_context_width
            if cfg.ll_context == "ar":
                self.ll_net = ARFusionNet(0, cw)
            else:
                self.ll_net = FourStepFusionNet(lw, cw)
            if cfg.context == "ar":
                self.hp_net = ARFusionNet(lw, cw)
            else:
                self.hp_net = FourStepFusionNet(lw, cw)
            self.post = PostProcess(cfg.post_width)
        finally:
            torch.random.set_rng_state(gen_state)
        theta = math.log(cfg.delta_init)
        self.log_delta_l = nn.Parameter(torch.tensor(theta))
        self.log_delta_h = nn.Parameter(torch.tensor(theta))
        self.to(torch.float64 if cfg.precision == "float64" else torch.float32)

    # ------------------------------------------------------------ basics
    @property
    def dtype(self):
        return self.log_delta_l.dtype

    def deltas(self) -> tuple[torch.Tensor, torch.Tensor]:
        return torch.exp(self.log_delta_l), torch.exp(self.log_delta_h)

    def net_for(self, label: str):
        return self.ll_net if label == LL_BAND else self.hp_net

    def reset_invocations(self):
        self.ll_net.invocations = 0
        self.hp_net.invocations = 0

    def invocations(self) -> int:
        return self.ll_net.invocations + self.hp_net.invocations

    def fingerprint(self) -> int:
        """CRC32 over configuration and parameter bytes; ties bitstreams to weights."""
        crc = zlib.crc32(json.dumps(asdict(self.config), sort_keys=True).encode())
        crc = zlib.crc32(str(self.dtype).encode(), crc)
        for name, t in self.state_dict().items():
            crc = zlib.crc32(name.encode(), crc)
            crc = zlib.crc32(t.detach().cpu().numpy().tobytes(), crc)
        return crc & 0xFFFFFFFF

    # ------------------------------------------------------------ io
    def save(self, path, meta: dict | None = None):
        tensors = {k: v for k, v in self.state_dict().items() if not k.endswith(".mask")}
        save_weights(path, tensors, {"config": asdict(self.config), **(meta or {})})

    @classmethod
    def load(cls, path) -> "PWaveModel":
        tensors, meta = load_weights(path)
        model = cls(ModelConfig.from_dict(meta.get("config", {})))
        model.load_tensors(tensors)
        model.meta = meta
        return model

    def load_tensors(self, tensors: dict[str, torch.Tensor]):
        own = {k: v for k, v in self.state_dict().items() if not k.endswith(".mask")}
        missing = set(own) - set(tensors)
        if missing:
            raise ValueError(f"incompatible weights: missing {sorted(missing)[:5]}")
        for k, v in own.items():
            if tuple(tensors[k].shape) != tuple(v.shape):
                raise ValueError(f"incompatible weights: {k} has shape {tuple(tensors[k].shape)}")
        with torch.no_grad():
            for k, v in own.items():
                v.copy_(tensors[k].to(v.dtype))

    # ------------------------------------------------------------ pipeline pieces
    def analysis(self, x01: torch.Tensor) -> SubbandPyramid:
        x = x01 * PIXEL_SCALE
        if self.config.integer_lifting:
            x = round_half_away(x)
        return self.transform(x)

    def synthesis(self, pyramid: SubbandPyramid) -> torch.Tensor:
        """Inverse transform and post-processing; returns [0, 1] units."""
        return self.post(self.transform.inverse(pyramid)) / PIXEL_SCALE

    def band_delta(self, label: str, deltas=None):
        dl, dh = deltas if deltas is not None else self.deltas()
        return dl if label == LL_BAND else dh

    # ------------------------------------------------------------ training forward
    def forward(self, x01: torch.Tensor, round_fn=ste_round) -> dict:
        """Teacher-forced pass: rate from the context models, reconstruction via STE.

        ``round_fn`` replaces the quantiser's rounding (identity is used by
        gradient checks).
        """
        pyr = self.analysis(x01)
        deltas = self.deltas()
        lo, hi = ALPHABET
        symbols = {}
        for label, y in pyr.items():
            q = round_fn(y * self.band_delta(label, deltas))
            symbols[label] = q.clamp(lo, hi)
        params = self.context_params(symbols)
        rate = x01.new_zeros(())
        for label in coding_order():
            mu, sigma = params[label]
            rate = rate + rate_bits_torch(symbols[label], mu, sigma)
        deq = SubbandPyramid({k: v / self.band_delta(k, deltas) for k, v in symbols.items()})
        x_hat = self.synthesis(deq)
        return {"x_hat": x_hat, "rate_bits": rate, "symbols": symbols, "params": params}

    def context_params(self, symbols: dict[str, torch.Tensor]) -> dict:
        """(mu, sigma) for every subband from teacher-forced context models."""
        order = coding_order()
        first = symbols[order[0]]
        b = first.shape[0]
        state = self.long_context.initial(b, *first.shape[-2:], dtype=first.dtype)
        out = {}
        for i, label in enumerate(order):
            s = symbols[label]
            net = self.net_for(label)
            ctx = None if label == LL_BAND else state.hidden
            if label == LL_BAND and isinstance(net, FourStepFusionNet):
                ctx = state.hidden
            out[label] = net(s, ctx)
            if i + 1 < len(order):
                state = self.long_context.advance(s, state, tuple(symbols[order[i + 1]].shape[-2:]))
        return out


def subband_sizes(height: int, width: int) -> dict[str, tuple[int, int]]:
    return {label: band_shape(label, height, width) for label in coding_order()}


def analytic_invocations(config: ModelConfig, height: int, width: int) -> int:
    """Decoder fusion-network invocations for a padded plane of the given size."""
    total = 0
    for label, (h, w) in subband_sizes(height, width).items():
        mode = config.ll_context if label == LL_BAND else config.context
        total += 4 if mode == "four-step" else h * w
    return total
