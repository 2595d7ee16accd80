"""End-to-end helpers: calibrated float model -> fused, quantized model."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .calib import CalibBundle, derive
from .model import ModelWeights, QuantMode, fold_norms, fuse_projections, perplexity, quantize_model
from .projection import RESQ, ProjectionSet


@dataclass
class QuantizedModel:
    weights: ModelWeights
    proj: ProjectionSet
    mode: QuantMode

    def perplexity(self, tokens, batch: int = 16) -> float:
        quant = None if _is_float(self.mode) else self.mode
        return perplexity(tokens, self.weights, self.proj, quant, batch=batch)


def _is_float(mode: QuantMode) -> bool:
    return mode.wbits == 16 and mode.abits == 16 and mode.kvbits == 16


def build(
    model: ModelWeights,
    bundle: CalibBundle | None,
    mode: QuantMode,
    kind: str = RESQ,
    seed: int = 0,
    rank_frac: float = 0.125,
    ranks: dict | None = None,
    use_gptq: bool = True,
    drop: tuple = (),
    proj: ProjectionSet | None = None,
) -> QuantizedModel:
    """Fold norms, derive and fuse projections, then quantize weights.

    ``drop`` lists sites (``"u_a"``, ``"u_b"``, ``"u_c"``, ``"u_d"``) to
    replace with identity, for ablations. A ready ``proj`` skips derivation.
    """
    if proj is None:
        if bundle is None:
            raise ValueError("calibration statistics are required to derive projections")
        proj = derive(bundle, model.config.n_layers, rank_frac=rank_frac, ranks=ranks, seed=seed, kind=kind)
    if drop:
        proj = proj.replace_sites(**{k: True for k in drop})
    fused = fuse_projections(fold_norms(model), proj)
    hess = bundle.hessians if (bundle is not None and use_gptq) else None
    q = quantize_model(fused, proj, mode, hess, use_gptq=use_gptq)
    return QuantizedModel(q, proj, mode)


def logit_mse(a, b) -> float:
    return float(np.mean((np.asarray(a, np.float64) - np.asarray(b, np.float64)) ** 2))
