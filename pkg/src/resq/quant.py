"""Uniform integer quantization (round-and-clip) and error metrics.

A tensor ``x`` is mapped to integer codes with ``round((x - z) / s)``
clipped to the code range, and back with ``codes * s + z``. Symmetric
quantization uses ``z = 0`` and ``s = max|x| / (2^(N-1) - 1)``; asymmetric
uses ``z = min(x)`` and ``s = (max(x) - min(x)) / (2^N - 1)``. Rounding is
half-to-even.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

__all__ = [
    "PER_TENSOR",
    "PER_TOKEN",
    "PER_CHANNEL",
    "PER_HEAD",
    "QuantConfig",
    "QuantizedTensor",
    "quantize",
    "dequantize",
    "fake_quant",
    "quant_snr",
    "lemma_coefficient",
    "SNR_CAP_DB",
]

PER_TENSOR = "per-tensor"
PER_TOKEN = "per-token"
PER_CHANNEL = "per-channel"
PER_HEAD = "per-head"
GRANULARITIES = (PER_TENSOR, PER_TOKEN, PER_CHANNEL, PER_HEAD)

PASS_THROUGH_BITS = 16
SNR_CAP_DB = 300.0


@dataclass(frozen=True)
class QuantConfig:
    bits: int = 4
    symmetric: bool = True
    granularity: str = PER_TENSOR
    head_dim: int | None = None

    def __post_init__(self):
        if self.bits != PASS_THROUGH_BITS and not 2 <= self.bits <= 8:
            raise ValueError(f"bits must be in [2, 8] or 16, got {self.bits}")
        if self.granularity not in GRANULARITIES:
            raise ValueError(f"unknown granularity {self.granularity!r}")
        if self.granularity == PER_HEAD and not self.head_dim:
            raise ValueError("per-head granularity needs head_dim")

    @property
    def passthrough(self) -> bool:
        return self.bits == PASS_THROUGH_BITS

    @property
    def qmin(self) -> int:
        return -(2 ** (self.bits - 1) - 1) if self.symmetric else 0

    @property
    def qmax(self) -> int:
        return 2 ** (self.bits - 1) - 1 if self.symmetric else 2**self.bits - 1

    def with_bits(self, bits: int) -> "QuantConfig":
        return replace(self, bits=bits)


@dataclass
class QuantizedTensor:
    """Integer codes plus per-group scales and zero points.

    ``scales`` and ``zero_points`` have the grouped shape: ``(1, 1)`` for
    per-tensor, ``(rows, 1)`` per-token, ``(1, cols)`` per-channel and
    ``(rows, cols // head_dim)`` per-head.
    """

    codes: np.ndarray
    scales: np.ndarray
    zero_points: np.ndarray
    config: QuantConfig
    shape: tuple[int, int]
    dtype: np.dtype = np.dtype(np.float32)


def _code_dtype(cfg: QuantConfig):
    if cfg.symmetric:
        return np.int8
    return np.uint8


def _grouped(x: np.ndarray, cfg: QuantConfig) -> np.ndarray:
    """View ``x`` as (..., group_elems) blocks reduced over axis -1 / keepdims."""
    rows, cols = x.shape
    g = cfg.granularity
    if g == PER_TENSOR:
        return x.reshape(1, 1, rows * cols)
    if g == PER_TOKEN:
        return x.reshape(rows, 1, cols)
    if g == PER_CHANNEL:
        return x.T.reshape(1, cols, rows)
    if cols % cfg.head_dim:
        raise ValueError(f"per-head quantization: {cols} columns not divisible by head_dim={cfg.head_dim}")
    return x.reshape(rows, cols // cfg.head_dim, cfg.head_dim)


def _ungroup(values: np.ndarray, x_shape, cfg: QuantConfig) -> np.ndarray:
    """Broadcast per-group values (G0, G1) back to the element shape."""
    rows, cols = x_shape
    g = cfg.granularity
    if g == PER_TENSOR:
        return np.broadcast_to(values, x_shape)
    if g == PER_TOKEN:
        return np.broadcast_to(values, x_shape)
    if g == PER_CHANNEL:
        return np.broadcast_to(values, x_shape)
    return np.repeat(values, cfg.head_dim, axis=1)


def _params(x: np.ndarray, cfg: QuantConfig):
    blocks = _grouped(x.astype(np.float64, copy=False), cfg)
    if cfg.symmetric:
        amax = np.max(np.abs(blocks), axis=-1)
        scale = amax / cfg.qmax
        zero = np.zeros_like(scale)
        degenerate = amax == 0
    else:
        lo = np.min(blocks, axis=-1)
        hi = np.max(blocks, axis=-1)
        scale = (hi - lo) / cfg.qmax
        zero = lo
        degenerate = hi == lo
    scale = np.where(degenerate, 1.0, scale).astype(np.float32)
    # a positive scale that underflows float32 would divide by zero below
    scale = np.where(scale == 0, np.float32(1.0), scale)
    zero = zero.astype(np.float32)
    return scale, zero


def quantize(x, cfg: QuantConfig) -> QuantizedTensor:
    """Quantize a 2-D array group-wise according to ``cfg``."""
    x = np.asarray(x)
    if x.ndim != 2:
        raise ValueError(f"quantize expects a 2-D array, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("quantize: input contains NaN or Inf")
    if cfg.passthrough:
        raise ValueError("bits=16 is pass-through; use fake_quant")
    dtype = x.dtype if np.issubdtype(x.dtype, np.floating) else np.dtype(np.float64)
    scale, zero = _params(x, cfg)
    s = _ungroup(scale.astype(np.float64), x.shape, cfg)
    z = _ungroup(zero.astype(np.float64), x.shape, cfg)
    codes = np.rint((x.astype(np.float64) - z) / s)
    codes = np.clip(codes, cfg.qmin, cfg.qmax).astype(_code_dtype(cfg))
    return QuantizedTensor(codes, scale, zero, cfg, tuple(x.shape), np.dtype(dtype))


def dequantize(q: QuantizedTensor, dtype=None) -> np.ndarray:
    s = _ungroup(q.scales.astype(np.float64), q.shape, q.config)
    z = _ungroup(q.zero_points.astype(np.float64), q.shape, q.config)
    out = q.codes.astype(np.float64) * s + z
    return out.astype(dtype or q.dtype)


def fake_quant(x, cfg: QuantConfig) -> np.ndarray:
    """``dequantize(quantize(x, cfg))``; identity when ``cfg.bits == 16``."""
    x = np.asarray(x)
    if cfg.passthrough:
        return x
    return dequantize(quantize(x, cfg))


def quant_snr(x, xq) -> float:
    """Signal-to-quantization-noise ratio in dB: 20 log10(||x|| / ||x - xq||).

    Returns ``SNR_CAP_DB`` for zero error and ``-inf`` when ``x`` is zero but
    the error is not.
    """
    x = np.asarray(x, dtype=np.float64)
    xq = np.asarray(xq, dtype=np.float64)
    if x.shape != xq.shape:
        raise ValueError(f"shape mismatch {x.shape} vs {xq.shape}")
    err = np.linalg.norm(x - xq)
    if err == 0:
        return SNR_CAP_DB
    sig = np.linalg.norm(x)
    if sig == 0:
        return float("-inf")
    return float(min(20.0 * np.log10(sig / err), SNR_CAP_DB))


def lemma_coefficient(size: int, bits: int) -> float:
    """sqrt(pi * ln(size)) / (2^(bits-1) - 1): expected relative error bound for Gaussian data."""
    return float(np.sqrt(np.pi * np.log(size)) / (2 ** (bits - 1) - 1))
