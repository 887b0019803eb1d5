"""Quantization, entropy models and range coding."""

from .models import (
    LIKELIHOOD_BOUND,
    SIGMA_FLOOR,
    TAIL_MASS,
    FactorizedPrior,
    GaussianConditional,
    factorized_bits,
    gaussian_bits,
    gaussian_cdfs,
    logistic_cdfs,
    quantize_noise,
    quantize_round,
)
from .rangecoder import PRECISION, TOTAL, QuantizedCdf, RangeCoderError, range_decode, range_encode

__all__ = [
    "LIKELIHOOD_BOUND",
    "SIGMA_FLOOR",
    "TAIL_MASS",
    "PRECISION",
    "TOTAL",
    "FactorizedPrior",
    "GaussianConditional",
    "QuantizedCdf",
    "RangeCoderError",
    "factorized_bits",
    "gaussian_bits",
    "gaussian_cdfs",
    "logistic_cdfs",
    "quantize_noise",
    "quantize_round",
    "range_decode",
    "range_encode",
]
