"""Calibration: run the float model over token streams, gather second-moment
statistics at every projection site plus GPTQ Hessians, and turn them into
a ``ProjectionSet``.

Sites:

* ``U_A``: inputs of both normed block boundaries (attention and FFN) of
  every layer, pooled by summation over tokens.
* ``layer.{i}.key``: post-RoPE keys, pooled over kv heads.
* ``layer.{i}.value``: values, pooled over kv heads.
* ``layer.{i}.ffn_hidden``: FFN hidden state (only used when ``U_D`` cannot
  be a Hadamard matrix).

Hessians (``layer.{i}.qkv|o|upgate|down``) are gathered in the same pass
from the first ``n_hessian`` samples only.
"""

from __future__ import annotations

import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .gptq import HessianEstimate
from .linalg import is_hadamard_size, random_orthogonal
from .model import ModelWeights, ffn_rotation, fold_norms, forward
from .projection import (
    IDENTITY,
    KINDS,
    RESQ,
    ROTATION,
    CalibStats,
    LayerProjections,
    ProjectionBasis,
    ProjectionSet,
    accumulate,
    build_baseline_basis,
    default_rank,
    merge,
)

__all__ = ["CalibBundle", "collect", "empty_bundle", "derive", "merge_bundles", "site_names", "select_samples"]

N_PROJ_SAMPLES = 512
N_HESSIAN_SAMPLES = 128
SHARD = 8  # sequences per shard; fixed so results do not depend on thread count


def site_names(n_layers: int) -> list[str]:
    names = ["U_A"]
    for i in range(n_layers):
        names += [f"layer.{i}.key", f"layer.{i}.value", f"layer.{i}.ffn_hidden"]
    return names


def hessian_names(n_layers: int) -> list[str]:
    return [f"layer.{i}.{s}" for i in range(n_layers) for s in ("qkv", "o", "upgate", "down")]


@dataclass
class CalibBundle:
    stats: dict[str, CalibStats]
    hessians: dict[str, HessianEstimate]
    n_samples: int = 0
    n_hessian_samples: int = 0
    meta: dict = field(default_factory=dict)


def _site_dims(c) -> dict[str, int]:
    dims = {"U_A": c.d_h}
    for i in range(c.n_layers):
        dims[f"layer.{i}.key"] = c.d_head
        dims[f"layer.{i}.value"] = c.d_head
        dims[f"layer.{i}.ffn_hidden"] = c.d_ffn
    return dims


def _hessian_dims(c) -> dict[str, int]:
    out = {}
    for i in range(c.n_layers):
        out[f"layer.{i}.qkv"] = c.d_h
        out[f"layer.{i}.o"] = c.d_h
        out[f"layer.{i}.upgate"] = c.d_h
        out[f"layer.{i}.down"] = c.d_ffn
    return out


def empty_bundle(config) -> CalibBundle:
    """Zero statistics for every site; enough to derive data-free bases (identity, rotation)."""
    stats = {k: CalibStats(d) for k, d in _site_dims(config).items()}
    hess = {k: HessianEstimate(np.zeros((d, d))) for k, d in _hessian_dims(config).items()}
    return CalibBundle(stats, hess)


def _shard_stats(model: ModelWeights, tokens: np.ndarray, with_hessian: bool) -> CalibBundle:
    out = empty_bundle(model.config)
    hess_sum = {k: np.zeros_like(v.h) for k, v in out.hessians.items()}
    hess_cnt = {k: 0 for k in out.hessians}

    def add_h(name, x):
        rows = np.asarray(x, dtype=np.float64).reshape(-1, x.shape[-1])
        hess_sum[name] += 2.0 * rows.T @ rows
        hess_cnt[name] += rows.shape[0]

    def capture(site, layer, x):
        pre = f"layer.{layer}."
        if site in ("attn_in", "ffn_in"):
            out.stats["U_A"] = accumulate(out.stats["U_A"], x)
            if with_hessian:
                add_h(pre + ("qkv" if site == "attn_in" else "upgate"), x)
        elif site == "key":
            out.stats[pre + "key"] = accumulate(out.stats[pre + "key"], x)
        elif site == "value":
            out.stats[pre + "value"] = accumulate(out.stats[pre + "value"], x)
        elif site == "ffn_hidden":
            out.stats[pre + "ffn_hidden"] = accumulate(out.stats[pre + "ffn_hidden"], x)
            if with_hessian:
                add_h(pre + "down", x)
        elif site == "attn_out" and with_hessian:
            add_h(pre + "o", x)

    forward(tokens, model, capture=capture)
    out.hessians = {k: HessianEstimate(hess_sum[k], count=hess_cnt[k]) for k in hess_sum}
    out.n_samples = tokens.shape[0]
    out.n_hessian_samples = tokens.shape[0] if with_hessian else 0
    return out


def merge_bundles(a: CalibBundle, b: CalibBundle) -> CalibBundle:
    """Sum statistics of two bundles gathered on disjoint samples."""
    if a.stats.keys() != b.stats.keys() or a.hessians.keys() != b.hessians.keys():
        raise ValueError("cannot merge calibration bundles of different architectures")
    stats = {k: merge(a.stats[k], b.stats[k]) for k in a.stats}
    hess = {
        k: HessianEstimate(a.hessians[k].h + b.hessians[k].h, a.hessians[k].damping, a.hessians[k].count + b.hessians[k].count)
        for k in a.hessians
    }
    return CalibBundle(stats, hess, a.n_samples + b.n_samples, a.n_hessian_samples + b.n_hessian_samples, dict(a.meta))


def select_samples(n_available: int, n: int, seed: int) -> np.ndarray:
    """Random sample indices (without replacement) in a seed-determined order."""
    rng = np.random.default_rng(seed)
    return rng.permutation(n_available)[: min(n, n_available)]


def _threads() -> int:
    try:
        return max(1, int(os.environ.get("RESQ_THREADS", "1")))
    except ValueError:
        return 1


def collect(
    model: ModelWeights,
    streams,
    n_samples: int = N_PROJ_SAMPLES,
    n_hessian: int = N_HESSIAN_SAMPLES,
    seed: int = 0,
    threads: int | None = None,
) -> CalibBundle:
    """Gather projection statistics and Hessians from ``streams`` (N, T).

    ``n_samples`` sequences are drawn at random (seeded); the first
    ``n_hessian`` of them also feed the Hessians. The model must be in float
    form; norm gains are folded here if they are not already.
    """
    if model.fused or model.quantized:
        raise ValueError("calibration needs the float (unfused, unquantized) model")
    toks = np.asarray(streams)
    if toks.ndim != 2 or toks.shape[0] == 0 or toks.shape[1] == 0:
        raise ValueError("calibration streams must be a non-empty (N, T) token array")
    folded = fold_norms(model)
    idx = select_samples(toks.shape[0], n_samples, seed)
    chosen = toks[idx]
    n_h = min(n_hessian, chosen.shape[0])

    shards = []
    for s in range(0, chosen.shape[0], SHARD):
        e = min(s + SHARD, chosen.shape[0])
        # split shards at the Hessian boundary so only the first n_h samples contribute
        if s < n_h < e:
            shards.append((s, n_h, True))
            shards.append((n_h, e, False))
        else:
            shards.append((s, e, s < n_h))

    def run(job):
        s, e, with_h = job
        return _shard_stats(folded, chosen[s:e], with_h)

    n_threads = threads or _threads()
    if n_threads > 1:
        with ThreadPoolExecutor(n_threads) as pool:
            parts = list(pool.map(run, shards))
    else:
        parts = [run(j) for j in shards]

    # deterministic merge order: shard index
    bundle = parts[0]
    for p in parts[1:]:
        bundle = merge_bundles(bundle, p)
    bundle.meta = {"seed": int(seed), "n_samples": int(chosen.shape[0]), "n_hessian": int(n_h), "seq_len": int(toks.shape[1])}
    return bundle


def _site_seed(seed: int, k: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed), k])


def derive(
    bundle: CalibBundle,
    n_layers: int,
    rank_frac: float = 0.125,
    ranks: dict | None = None,
    seed: int = 0,
    kind: str = RESQ,
) -> ProjectionSet:
    """Build ``U_A`` and per-layer ``U_B``, ``U_C``, ``U_D`` from calibration stats.

    Args:
        bundle: output of ``collect``.
        n_layers: number of decoder layers expected.
        rank_frac: high-precision fraction per site when ``ranks`` is absent.
        ranks: optional overrides keyed by ``"U_A"``, ``"U_B"``, ``"U_C"``.
        seed: seed for every random rotation; same seed gives the same set.
        kind: basis family for ``U_A``/``U_B``/``U_C`` (one of ``KINDS``).
    """
    if kind not in KINDS:
        raise ValueError(f"unknown basis kind {kind!r}")
    ranks = ranks or {}
    for name in site_names(n_layers):
        if name not in bundle.stats:
            raise ValueError(f"missing calibration statistics for site {name!r}")

    def rank(site, dim):
        return int(ranks.get(site, default_rank(dim, rank_frac)))

    def basis(stats, site, k):
        dim = stats.dim
        return build_baseline_basis(kind, stats, dim, rank(site, dim), seed=_site_seed(seed, k))

    u_a = basis(bundle.stats["U_A"], "U_A", 0)
    layers = []
    for i in range(n_layers):
        s_v = bundle.stats[f"layer.{i}.value"]
        s_k = bundle.stats[f"layer.{i}.key"]
        s_f = bundle.stats[f"layer.{i}.ffn_hidden"]
        u_b = basis(s_v, "U_B", 3 * i + 1)
        u_c = basis(s_k, "U_C", 3 * i + 2)
        if kind == IDENTITY:
            u_d = ProjectionBasis(np.eye(s_f.dim), 0, IDENTITY)
        elif is_hadamard_size(s_f.dim):
            u_d = ffn_rotation(s_f.dim)
        else:
            warnings.warn(f"no Hadamard matrix of order {s_f.dim}; using a random orthogonal U_D", stacklevel=2)
            u_d = ProjectionBasis(random_orthogonal(s_f.dim, _site_seed(seed, 3 * i + 3)), 0, ROTATION)
        layers.append(LayerProjections(u_b, u_c, u_d))
    return ProjectionSet(u_a, layers).check()
