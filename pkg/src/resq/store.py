"""Mapping between in-memory objects and archive tensors.

Tensor name prefixes: ``model.`` float weights, ``calib.`` statistics and
Hessians, ``proj.`` projection bases, ``q.`` fused quantized model.
"""

from __future__ import annotations

import hashlib

import numpy as np

from .archive import Archive, PackedInt4
from .calib import CalibBundle, hessian_names, site_names
from .gptq import HessianEstimate, assemble_rows
from .model import LINEAR_NAMES, DecoderConfig, LayerWeights, ModelWeights, QuantMode, weight_layout
from .projection import CalibStats, LayerProjections, ProjectionBasis, ProjectionSet
from .quant import PER_CHANNEL, QuantConfig, QuantizedTensor

SCHEMA = 1


class ShapeMismatch(ValueError):
    pass


class MissingCalibration(ValueError):
    pass


# -- float model ---------------------------------------------------------------


def put_model(arc: Archive, w: ModelWeights) -> None:
    for name, t in w.tensors():
        arc.tensors[f"model.{name}"] = np.asarray(t, dtype=np.float32)
    arc.meta["config"] = w.config.as_dict()
    arc.meta["model_digest"] = model_digest(arc)


def model_digest(arc: Archive) -> str:
    h = hashlib.sha256()
    for n in sorted(arc.names("model.")):
        h.update(n.encode())
        h.update(np.ascontiguousarray(arc.tensors[n]).tobytes())
    return h.hexdigest()[:16]


def _expect(arc: Archive, name: str, shape) -> np.ndarray:
    if name not in arc.tensors:
        raise KeyError(f"archive has no tensor {name!r}")
    t = np.asarray(arc.tensors[name])
    if t.shape != tuple(shape):
        raise ShapeMismatch(f"tensor {name!r} has shape {t.shape}, expected {tuple(shape)}")
    return t


def get_config(arc: Archive) -> DecoderConfig:
    if "config" not in arc.meta:
        raise KeyError("archive metadata has no model config")
    return DecoderConfig(**arc.meta["config"])


def get_model(arc: Archive) -> ModelWeights:
    c = get_config(arc)
    d, f = c.d_h, c.d_ffn
    shapes = {
        "q_proj": (d, c.n_heads * c.d_head),
        "k_proj": (d, c.n_kv_heads * c.d_head),
        "v_proj": (d, c.n_kv_heads * c.d_head),
        "o_proj": (c.n_heads * c.d_head, d),
        "gate_proj": (d, f),
        "up_proj": (d, f),
        "down_proj": (f, d),
        "attn_norm": (d,),
        "ffn_norm": (d,),
    }
    layers = []
    for i in range(c.n_layers):
        layers.append(LayerWeights(**{k: _expect(arc, f"model.layer.{i}.{k}", s) for k, s in shapes.items()}))
    return ModelWeights(
        c,
        _expect(arc, "model.embed", (c.vocab, d)),
        layers,
        _expect(arc, "model.final_norm", (d,)),
        _expect(arc, "model.lm_head", (d, c.vocab)),
    )


# -- calibration -----------------------------------------------------------------


def put_bundle(arc: Archive, b: CalibBundle) -> None:
    counts = {}
    for k, s in b.stats.items():
        arc.tensors[f"calib.stats.{k}.sum_outer"] = s.sum_outer.astype(np.float64)
        arc.tensors[f"calib.stats.{k}.max_abs"] = s.max_abs.astype(np.float64)
        counts[k] = int(s.count)
    hcounts = {}
    for k, h in b.hessians.items():
        arc.tensors[f"calib.hessian.{k}"] = h.h.astype(np.float64)
        hcounts[k] = int(h.count)
    arc.meta["calibration"] = dict(b.meta, stat_counts=counts, hessian_counts=hcounts)


def get_bundle(arc: Archive) -> CalibBundle:
    if "calibration" not in arc.meta:
        raise MissingCalibration("archive has no calibration statistics; run `calibrate` first")
    c = get_config(arc)
    meta = arc.meta["calibration"]
    stats = {}
    for k in site_names(c.n_layers):
        so = np.asarray(arc[f"calib.stats.{k}.sum_outer"])
        stats[k] = CalibStats(so.shape[0], so, np.asarray(arc[f"calib.stats.{k}.max_abs"]), meta["stat_counts"][k])
    hess = {k: HessianEstimate(np.asarray(arc[f"calib.hessian.{k}"]), count=meta["hessian_counts"][k]) for k in hessian_names(c.n_layers)}
    m = {k: v for k, v in meta.items() if k not in ("stat_counts", "hessian_counts")}
    return CalibBundle(stats, hess, m.get("n_samples", 0), m.get("n_hessian", 0), m)


# -- projections ---------------------------------------------------------------


def put_proj(arc: Archive, proj: ProjectionSet, prefix: str = "proj") -> None:
    info = {}
    for name, b in proj.bases():
        arc.tensors[f"{prefix}.{name}"] = b.u.astype(np.float64)
        info[name] = {"rank": int(b.rank_high), "kind": b.kind, "hadamard": bool(b.is_hadamard)}
    arc.meta[prefix] = info


def get_proj(arc: Archive, prefix: str = "proj") -> ProjectionSet:
    if prefix not in arc.meta:
        raise MissingCalibration(f"archive has no projection set under {prefix!r}")
    info = arc.meta[prefix]
    c = get_config(arc)

    def basis(name, dim):
        u = _expect(arc, f"{prefix}.{name}", (dim, dim))
        i = info[name]
        return ProjectionBasis(np.asarray(u), i["rank"], i["kind"], is_hadamard=i["hadamard"])

    layers = [
        LayerProjections(
            basis(f"layer.{i}.U_B", c.d_head), basis(f"layer.{i}.U_C", c.d_head), basis(f"layer.{i}.U_D", c.d_ffn)
        )
        for i in range(c.n_layers)
    ]
    return ProjectionSet(basis("U_A", c.d_h), layers)


# -- quantized model -------------------------------------------------------------


def _codes_entry(q: QuantizedTensor):
    if q.config.bits <= 4:
        return PackedInt4(q.codes.astype(np.int8))
    return q.codes.astype(np.int8)


def put_quantized(arc: Archive, w: ModelWeights, proj: ProjectionSet, mode: QuantMode, info: dict) -> None:
    put_proj(arc, proj, prefix="qproj")
    arc.tensors["q.embed"] = w.embed.astype(np.float32)
    arc.tensors["q.lm_head"] = w.lm_head.astype(np.float32)
    for i, lw in enumerate(w.layers):
        for name in LINEAR_NAMES:
            key = f"layer.{i}.{name}"
            if key in w.quantized:
                for part, q in zip(("low", "high"), w.quantized[key]):
                    arc.tensors[f"q.{key}.{part}.codes"] = _codes_entry(q)
                    arc.tensors[f"q.{key}.{part}.scales"] = q.scales.astype(np.float32)
            else:
                arc.tensors[f"q.{key}"] = getattr(lw, name).astype(np.float32)
    arc.meta["quant"] = dict(info, mode=mode.as_dict())


def get_quantized(arc: Archive) -> tuple[ModelWeights, ProjectionSet, QuantMode]:
    if "quant" not in arc.meta:
        raise MissingCalibration("archive holds no quantized model; run `quantize` first")
    c = get_config(arc)
    proj = get_proj(arc, prefix="qproj")
    mode = QuantMode(**arc.meta["quant"]["mode"])
    float_model = get_model(arc)
    layers = []
    qstore = {}
    lo_cfg = QuantConfig(mode.wbits, True, PER_CHANNEL) if mode.wbits != 16 else None
    hi_cfg = QuantConfig(mode.high(mode.wbits), True, PER_CHANNEL) if mode.wbits != 16 else None
    for i, flw in enumerate(float_model.layers):
        new = {}
        for name in LINEAR_NAMES:
            key = f"layer.{i}.{name}"
            ref = getattr(flw, name)
            if f"q.{key}" in arc:
                new[name] = _expect(arc, f"q.{key}", ref.shape)
                continue
            layout = weight_layout(c, proj, i, name)
            parts = []
            for part, cfg in (("low", lo_cfg), ("high", hi_cfg)):
                codes = arc[f"q.{key}.{part}.codes"]
                codes = codes.values if isinstance(codes, PackedInt4) else codes
                scales = np.asarray(arc[f"q.{key}.{part}.scales"])
                parts.append(
                    QuantizedTensor(codes, scales, np.zeros_like(scales), cfg, tuple(codes.shape), np.dtype(np.float32))
                )
            qstore[key] = tuple(parts)
            w = assemble_rows(parts[0], parts[1], ref.shape[0], layout["rank_high"], layout["high_rows"])
            if w.shape != ref.shape:
                raise ShapeMismatch(f"quantized tensor {key!r} has shape {w.shape}, expected {ref.shape}")
            new[name] = w.astype(np.float32)
        ones = np.ones(c.d_h, dtype=np.float32)
        layers.append(LayerWeights(**new, attn_norm=ones, ffn_norm=ones.copy()))
    weights = ModelWeights(
        c,
        _expect(arc, "q.embed", (c.vocab, c.d_h)),
        layers,
        np.ones(c.d_h, dtype=np.float32),
        _expect(arc, "q.lm_head", (c.d_h, c.vocab)),
        norms_folded=True,
        fused=True,
        quantized=qstore,
    )
    return weights, proj, mode
