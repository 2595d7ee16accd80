"""Mixed-precision matrix multiply.

With an orthogonal basis split ``U = [U_l | U_h]`` the layer output
``X W = (X U)(U^T W)`` separates into two same-precision products:

    Q_L(X U_l) Q_L(U_l^T W) + Q_H(X U_h) Q_H(U_h^T W)

There is no low x high cross term because the column groups are sliced
apart before quantization. Two evaluation paths are provided: the
reference path dequantizes then multiplies in floating point, the integer
path multiplies codes with a simulated 32-bit accumulator and rescales.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import OpCounter, as_matrix
from .projection import ProjectionBasis
from .quant import (
    PER_CHANNEL,
    PER_TENSOR,
    PER_TOKEN,
    QuantConfig,
    QuantizedTensor,
    dequantize,
    fake_quant,
    quantize,
)

__all__ = [
    "AccumulatorOverflow",
    "OpCountRecord",
    "mixed_matmul",
    "int_matmul",
    "op_count",
    "instrumented_mixed_matmul",
]

INT32_MIN = -(2**31)
INT32_MAX = 2**31 - 1

DEFAULT_ACT = QuantConfig(4, symmetric=True, granularity=PER_TOKEN)
DEFAULT_WT = QuantConfig(4, symmetric=True, granularity=PER_CHANNEL)


class AccumulatorOverflow(ArithmeticError):
    pass


def int_matmul(qx: QuantizedTensor, qw: QuantizedTensor) -> np.ndarray:
    """Integer GEMM followed by rescaling.

    Activations may be per-tensor or per-token, symmetric or asymmetric;
    weights must be symmetric, per-tensor or per-channel. The zero-point
    term of asymmetric activations is added after accumulation as
    ``z_x * (1^T C_w) * s_w``.
    """
    if qx.config.granularity not in (PER_TENSOR, PER_TOKEN):
        raise ValueError(f"integer path: unsupported activation granularity {qx.config.granularity}")
    if qw.config.granularity not in (PER_TENSOR, PER_CHANNEL) or not qw.config.symmetric:
        raise ValueError("integer path: weights must be symmetric per-tensor or per-channel")
    if qx.shape[1] != qw.shape[0]:
        raise ValueError(f"inner dimensions differ: {qx.shape} x {qw.shape}")

    cx = qx.codes.astype(np.int64)
    cw = qw.codes.astype(np.int64)
    acc = cx @ cw
    if acc.size and (acc.min() < INT32_MIN or acc.max() > INT32_MAX):
        raise AccumulatorOverflow("int32 accumulator overflow in integer GEMM")

    sx = qx.scales.astype(np.float64)  # (1,1) or (n,1)
    sw = qw.scales.astype(np.float64)  # (1,1) or (1,m)
    out = (sx * sw) * acc.astype(np.float64)
    if not qx.config.symmetric:
        zx = qx.zero_points.astype(np.float64)
        colsum = cw.sum(axis=0, keepdims=True).astype(np.float64)
        out = out + zx * (colsum * sw)
    return out


def mixed_matmul(
    x,
    w,
    basis: ProjectionBasis,
    bits_low: int,
    bits_high: int,
    act_cfg: QuantConfig = DEFAULT_ACT,
    wt_cfg: QuantConfig = DEFAULT_WT,
    path: str = "reference",
) -> np.ndarray:
    """Output of a linear layer quantized in the basis ``basis``.

    ``path="reference"`` dequantizes each operand and multiplies in floating
    point; ``path="integer"`` accumulates integer codes. Bits of 16 pass the
    operand through unquantized (integer path not available then).
    """
    x = as_matrix(x, dtype=np.float64, name="x")
    w = as_matrix(w, dtype=np.float64, name="w")
    d = basis.dim
    if x.shape[1] != d or w.shape[0] != d:
        raise ValueError(f"shape mismatch: x {x.shape}, w {w.shape}, basis dim {d}")
    u = basis.u.astype(np.float64)
    k = d - basis.rank_high
    xu = x @ u
    wu = u.T @ w

    out = np.zeros((x.shape[0], w.shape[1]))
    # low block first, then high: fixed summation order
    for cols, bits in ((slice(0, k), bits_low), (slice(k, d), bits_high)):
        xs, ws = xu[:, cols], wu[cols, :]
        if xs.shape[1] == 0:
            continue
        if path == "reference":
            out += fake_quant(xs, act_cfg.with_bits(bits)) @ fake_quant(ws, wt_cfg.with_bits(bits))
        elif path == "integer":
            if bits == 16:
                raise ValueError("integer path needs integer bit widths")
            out += int_matmul(quantize(xs, act_cfg.with_bits(bits)), quantize(ws, wt_cfg.with_bits(bits)))
        else:
            raise ValueError(f"unknown path {path!r}")
    return out


@dataclass
class OpCountRecord:
    n: int
    d: int
    m: int
    rank_high: int
    bits_low: int
    bits_high: int
    macs_low: int
    macs_high: int
    projection_flops: int

    @property
    def macs_total(self) -> int:
        return self.macs_low + self.macs_high

    @property
    def high_fraction(self) -> float:
        return self.macs_high / self.macs_total if self.macs_total else 0.0

    def as_dict(self) -> dict:
        return {
            "n": self.n,
            "d": self.d,
            "m": self.m,
            "rank_high": self.rank_high,
            "bits_low": self.bits_low,
            "bits_high": self.bits_high,
            "macs_low": self.macs_low,
            "macs_high": self.macs_high,
            "high_fraction": self.high_fraction,
            "projection_flops": self.projection_flops,
        }


def op_count(
    shape: tuple[int, int, int],
    r: int,
    bits_low: int,
    bits_high: int,
    projection: str = "fused",
) -> OpCountRecord:
    """Multiply-accumulate counts of an (n x d) @ (d x m) mixed GEMM.

    ``projection`` describes the activation projection: ``"fused"`` (folded
    into the previous layer, free), ``"dense"`` (runtime d x d matmul,
    ``2 n d^2`` flops) or ``"hadamard"`` (fast transform, ``n d log2 d``
    additions).
    """
    n, d, m = shape
    if not 0 <= r <= d:
        raise ValueError(f"r={r} outside [0, {d}]")
    if projection == "fused":
        proj = 0
    elif projection == "dense":
        proj = 2 * n * d * d
    elif projection == "hadamard":
        proj = n * d * int(np.log2(d))
    else:
        raise ValueError(f"unknown projection mode {projection!r}")
    return OpCountRecord(n, d, m, r, bits_low, bits_high, n * (d - r) * m, n * r * m, proj)


def instrumented_mixed_matmul(qx_low, qw_low, qx_high, qw_high, counter: OpCounter | None = None):
    """Naive triple-loop over integer codes, tallying MACs by precision.

    Slow; only meant to cross-check ``op_count`` on small shapes. Returns
    ``(acc_low, acc_high, tallies)``.
    """
    tallies = {"low": 0, "high": 0, "cross": 0}
    results = []
    for name, a, b in (("low", qx_low, qw_low), ("high", qx_high, qw_high)):
        n, kk = a.shape
        m = b.shape[1]
        acc = np.zeros((n, m), dtype=np.int64)
        for i in range(n):
            for j in range(m):
                s = 0
                for t in range(kk):
                    s += int(a[i, t]) * int(b[t, j])
                    tallies[name] += 1
                acc[i, j] = s
        results.append(acc)
    if counter is not None:
        counter.muls += tallies["low"] + tallies["high"]
        counter.adds += tallies["low"] + tallies["high"]
    return results[0], results[1], tallies
