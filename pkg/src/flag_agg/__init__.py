"""Secure federated gradient aggregation where dithered quantization noise
stands in for the LWE error term."""

from .lwe import (
    DecryptionError,
    LweParams,
    ParameterError,
    Seed,
    add_ciphertexts,
    decode_centered,
    decrypt,
    encrypt,
    expand_public_matrix,
    sample_secret,
    validate_params,
)
from .quantizer import DitherSource, QuantConfig, clip, dequantize, quantize

__version__ = "0.1.0"

__all__ = [
    "DecryptionError",
    "DitherSource",
    "LweParams",
    "ParameterError",
    "QuantConfig",
    "Seed",
    "add_ciphertexts",
    "clip",
    "decode_centered",
    "decrypt",
    "dequantize",
    "encrypt",
    "expand_public_matrix",
    "quantize",
    "sample_secret",
    "validate_params",
]
