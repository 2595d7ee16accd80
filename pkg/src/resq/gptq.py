"""Hessian-aware weight rounding (GPTQ).

Weights are stored input-major, ``W`` of shape (d_in, d_out), so the layer
computes ``X @ W``. Input dimensions are quantized one at a time in natural
order; after rounding row ``i`` its error is pushed onto the not yet
quantized rows through the upper Cholesky factor of ``H^-1``. Scales are
fixed up front from the original weights (per output channel), so with a
diagonal Hessian the result is plain round-to-nearest.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .linalg import as_matrix
from .quant import PER_CHANNEL, QuantConfig, QuantizedTensor, _params, _ungroup, dequantize, quantize

__all__ = [
    "HessianEstimate",
    "hessian_from_inputs",
    "gptq_quantize",
    "gptq_quantize_mixed",
    "rtn_quantize",
    "weighted_error",
    "split_rows",
    "assemble_rows",
]

DEFAULT_DAMP = 0.01
DEFAULT_BLOCK = 128


@dataclass
class HessianEstimate:
    """``h = 2 * sum_t x_t^T x_t`` over calibration rows."""

    h: np.ndarray
    damping: float = DEFAULT_DAMP
    count: int = 0

    @property
    def dim(self) -> int:
        return self.h.shape[0]

    def damped(self) -> np.ndarray:
        h = np.array(self.h, dtype=np.float64)
        dead = np.diag(h) == 0
        h[dead, dead] = 1.0
        mean_diag = float(np.mean(np.diag(h)))
        h[np.diag_indices_from(h)] += self.damping * mean_diag
        return h

    def project(self, u: np.ndarray) -> "HessianEstimate":
        """Hessian of inputs ``X @ u``."""
        return HessianEstimate(u.T @ self.h @ u, self.damping, self.count)


def hessian_from_inputs(x, damping: float = DEFAULT_DAMP) -> HessianEstimate:
    x = np.asarray(x, dtype=np.float64)
    rows = x.reshape(-1, x.shape[-1])
    return HessianEstimate(2.0 * rows.T @ rows, damping, rows.shape[0])


def _inverse_cholesky(hess: HessianEstimate) -> np.ndarray:
    h = hess.damped()
    try:
        lower = np.linalg.cholesky(h)
    except np.linalg.LinAlgError as exc:
        raise ValueError("Hessian is not positive definite after damping") from exc
    eye = np.eye(h.shape[0])
    linv = np.linalg.solve(lower, eye)
    hinv = linv.T @ linv
    try:
        # upper factor U with H^-1 = U^T U
        return np.linalg.cholesky(hinv).T
    except np.linalg.LinAlgError as exc:
        raise ValueError("inverse Hessian is not positive definite") from exc


def _row_quantizer(scale_row: np.ndarray, cfg: QuantConfig, zero_row: np.ndarray):
    s = scale_row.astype(np.float64)
    z = zero_row.astype(np.float64)

    def q(w_row: np.ndarray):
        codes = np.clip(np.rint((w_row - z) / s), cfg.qmin, cfg.qmax)
        return codes, codes * s + z

    return q


def _channel_params(w: np.ndarray, cfg: QuantConfig):
    scale, zero = _params(w, cfg)
    return (
        _ungroup(scale.astype(np.float64), w.shape, cfg)[0].copy(),
        _ungroup(zero.astype(np.float64), w.shape, cfg)[0].copy(),
        scale,
        zero,
    )


def _gptq_core(w: np.ndarray, hess: HessianEstimate, groups, block: int):
    """Run the row-sequential loop over input dimensions.

    ``groups`` is a list of (row_indices, cfg); each group gets its own
    per-channel scales computed from the original weights.
    """
    d_in, d_out = w.shape
    if hess.dim != d_in:
        raise ValueError(f"Hessian dim {hess.dim} != weight input dim {d_in}")
    if block < 1:
        raise ValueError("block must be >= 1")
    hinv = _inverse_cholesky(hess)

    work = w.astype(np.float64).copy()
    dead = np.diag(hess.h) == 0
    work[dead, :] = 0.0

    quantizers = [None] * d_in
    params = []
    for rows, cfg in groups:
        if cfg.granularity != PER_CHANNEL:
            raise ValueError("GPTQ expects per-channel weight quantization")
        if len(rows) == 0:
            params.append((np.ones((1, d_out), np.float32), np.zeros((1, d_out), np.float32)))
            continue
        s_row, z_row, scale, zero = _channel_params(work[rows], cfg)
        params.append((scale, zero))
        q = _row_quantizer(s_row, cfg, z_row)
        for i in rows:
            quantizers[i] = q
    if any(q is None for q in quantizers):
        raise ValueError("row groups do not cover every input dimension")

    codes = np.zeros((d_in, d_out))
    for b0 in range(0, d_in, block):
        b1 = min(b0 + block, d_in)
        wb = work[b0:b1].copy()
        errs = np.zeros_like(wb)
        hb = hinv[b0:b1, b0:b1]
        for j in range(b1 - b0):
            row = wb[j]
            c, qrow = quantizers[b0 + j](row)
            codes[b0 + j] = c
            err = (row - qrow) / hb[j, j]
            wb[j + 1 :] -= np.outer(hb[j, j + 1 :], err)
            errs[j] = err
        # lazy update of the rows after the block
        work[b1:] -= hinv[b0:b1, b1:].T @ errs
    return codes, params


def _tensor(codes, rows, scale, zero, cfg, dtype) -> QuantizedTensor:
    ctype = np.int8 if cfg.symmetric else np.uint8
    part = codes[rows]
    return QuantizedTensor(part.astype(ctype), scale, zero, cfg, tuple(part.shape), np.dtype(dtype))


def gptq_quantize(
    w,
    hess: HessianEstimate,
    cfg: QuantConfig,
    block: int = DEFAULT_BLOCK,
) -> QuantizedTensor:
    """Quantize ``w`` (d_in x d_out) with Hessian error compensation."""
    w = as_matrix(w, name="w")
    dtype = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64
    rows = np.arange(w.shape[0])
    codes, params = _gptq_core(w, hess, [(rows, cfg)], block)
    return _tensor(codes, rows, *params[0], cfg, dtype)


def split_rows(d_in: int, rank_high: int = 0, high_rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Low/high input-row index sets: explicit ``high_rows`` or the last ``rank_high`` rows."""
    mask = np.zeros(d_in, dtype=bool)
    if high_rows is not None:
        mask[np.asarray(high_rows, dtype=np.int64)] = True
    elif rank_high:
        mask[d_in - rank_high :] = True
    return np.flatnonzero(~mask), np.flatnonzero(mask)


def gptq_quantize_mixed(
    w,
    hess: HessianEstimate | None,
    cfg_low: QuantConfig,
    cfg_high: QuantConfig,
    rank_high: int = 0,
    block: int = DEFAULT_BLOCK,
    high_rows=None,
) -> tuple[QuantizedTensor, QuantizedTensor]:
    """GPTQ over projected weights ``U^T W`` with some input rows at high precision.

    High rows are the last ``rank_high`` rows unless ``high_rows`` lists
    them explicitly. Rows are still visited in natural order, so error from
    low rows propagates into later high rows and vice versa. With
    ``hess=None`` this is plain round-to-nearest on the same split.
    """
    w = as_matrix(w, name="w")
    dtype = w.dtype if np.issubdtype(w.dtype, np.floating) else np.float64
    low, high = split_rows(w.shape[0], rank_high, high_rows)
    if hess is None:
        q_low = quantize(w[low], cfg_low)
        q_high = quantize(w[high], cfg_high) if len(high) else _empty(w.shape[1], cfg_high, dtype)
        return q_low, q_high
    codes, params = _gptq_core(w, hess, [(low, cfg_low), (high, cfg_high)], block)
    q_low = _tensor(codes, low, *params[0], cfg_low, dtype)
    q_high = _tensor(codes, high, *params[1], cfg_high, dtype) if len(high) else _empty(w.shape[1], cfg_high, dtype)
    return q_low, q_high


def _empty(cols: int, cfg: QuantConfig, dtype) -> QuantizedTensor:
    return QuantizedTensor(
        np.zeros((0, cols), np.int8), np.ones((1, cols), np.float32), np.zeros((1, cols), np.float32),
        cfg, (0, cols), np.dtype(dtype),
    )


def assemble_rows(q_low: QuantizedTensor, q_high: QuantizedTensor, d_in: int, rank_high: int = 0, high_rows=None):
    """Dequantize a low/high pair back into a (d_in, d_out) matrix."""
    low, high = split_rows(d_in, rank_high, high_rows)
    out = np.zeros((d_in, q_low.shape[1]), dtype=q_low.dtype)
    out[low] = dequantize(q_low)
    if len(high):
        out[high] = dequantize(q_high)
    return out


def rtn_quantize(w, cfg: QuantConfig) -> QuantizedTensor:
    return quantize(np.asarray(w), cfg)


def weighted_error(w, w_q, h) -> float:
    """``tr((W - W_q)^T H (W - W_q))``."""
    delta = np.asarray(w, dtype=np.float64) - np.asarray(w_q, dtype=np.float64)
    return float(np.sum(delta * (np.asarray(h, dtype=np.float64) @ delta)))
