"""Learned wavelet image/video codec with a parallel four-step context model."""

from .codec import BitstreamError, decode_plane, dequantize, encode_plane, quantize, subband_impulse_response
from .model import ModelConfig, PWaveModel, analytic_invocations

__all__ = [
    "BitstreamError", "ModelConfig", "PWaveModel", "analytic_invocations", "decode_plane",
    "dequantize", "encode_plane", "quantize", "subband_impulse_response",
]
__version__ = "0.1.0"
