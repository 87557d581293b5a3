from .blocks import DepthConvBlock, MaskedConv, ResidualBlock, causal_mask
from .core import (
    Conv,
    ConfigError,
    ConvLSTMCell,
    ConvLSTMState,
    ConvSpec,
    conv2d,
    conv_lstm_step,
    leaky_relu,
    round_half_away,
    ste_round,
)
from .optim import AdamW, AdamWHyper, OptimizerState, adamw_step
from .serialize import WeightFileError, dumps_weights, load_weights, loads_weights, save_weights
