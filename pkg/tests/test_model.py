import warnings
from dataclasses import replace

import numpy as np
import pytest

from resq.linalg import random_orthogonal
from resq.model import (
    DecoderConfig,
    KVCache,
    QuantMode,
    ffn_rotation,
    fold_norms,
    forward,
    fuse_projections,
    identity_projections,
    init_toy_model,
    perplexity,
    perplexity_from_logits,
)
from resq.pipeline import build, logit_mse
from resq.projection import ROTATION, LayerProjections, ProjectionBasis, ProjectionSet

SMALL = DecoderConfig(d_h=32, n_heads=4, n_kv_heads=2, d_ffn=64, n_layers=2, vocab=50)
FLOAT = QuantMode(wbits=16, abits=16, kvbits=16, uc_bits=16)


@pytest.fixture(scope="module")
def small():
    return init_toy_model(SMALL, seed=3, dtype=np.float64)


@pytest.fixture(scope="module")
def tokens():
    return np.random.default_rng(0).integers(0, SMALL.vocab, size=(3, 20))


def rot(n, r, seed):
    return ProjectionBasis(random_orthogonal(n, seed), r, ROTATION)


def random_set(config, seed=0):
    ident = identity_projections(config)
    layers = [
        LayerProjections(
            rot(config.d_head, 1, seed + 10 * i + 1),
            rot(config.d_head, 1, seed + 10 * i + 2),
            rot(config.d_ffn, 0, seed + 10 * i + 3),
        )
        for i in range(config.n_layers)
    ]
    return ProjectionSet(rot(config.d_h, ident.u_a.rank_high, seed), layers)


@pytest.mark.parametrize("site", ["u_a", "u_b", "u_c", "u_d", "all"])
def test_projection_invariance(small, tokens, site):
    folded = fold_norms(small)
    ref = forward(tokens, small)
    np.testing.assert_allclose(forward(tokens, folded), ref, atol=1e-10)
    full = random_set(SMALL)
    if site == "all":
        proj = full
    else:
        others = [s for s in ("u_a", "u_b", "u_c", "u_d") if s != site]
        proj = full.replace_sites(**{s: True for s in others})
    out = forward(tokens, fuse_projections(folded, proj), proj)
    assert np.max(np.abs(out - ref)) <= 1e-9


def test_hadamard_ffn_invariance(small, tokens):
    proj = identity_projections(SMALL)
    proj.layers = [replace(lp, u_d=ffn_rotation(SMALL.d_ffn)) for lp in proj.layers]
    out = forward(tokens, fuse_projections(fold_norms(small), proj), proj)
    assert np.max(np.abs(out - forward(tokens, small))) <= 1e-9


def test_identity_bases_leave_weights_unchanged(small):
    folded = fold_norms(small)
    fused = fuse_projections(folded, identity_projections(SMALL))
    for (na, a), (nb, b) in zip(folded.tensors(), fused.tensors()):
        assert na == nb and np.array_equal(a, b)


def test_u_c_preserves_scores():
    rng = np.random.default_rng(1)
    q, k = rng.standard_normal((10, 16)), rng.standard_normal((12, 16))
    u = random_orthogonal(16, 4)
    assert np.max(np.abs((q @ u) @ (k @ u).T - q @ k.T)) <= 1e-10


def test_fuse_errors(small):
    proj = random_set(SMALL)
    with pytest.raises(ValueError, match="fold"):
        fuse_projections(small, proj)
    fused = fuse_projections(fold_norms(small), proj)
    with pytest.raises(ValueError, match="already fused"):
        fuse_projections(fused, proj)
    bad = ProjectionSet(ProjectionBasis(2 * np.eye(SMALL.d_h), 4, ROTATION), proj.layers)
    with pytest.raises(ValueError, match="not orthogonal"):
        fuse_projections(fold_norms(small), bad)
    with pytest.raises(ValueError, match="fused"):
        forward(np.zeros(3, int), fold_norms(small), proj)


def test_causality(small):
    toks = np.random.default_rng(2).integers(0, SMALL.vocab, size=16)
    other = toks.copy()
    other[10:] = (other[10:] + 7) % SMALL.vocab
    a, b = forward(toks, small), forward(other, small)
    np.testing.assert_array_equal(a[:10], b[:10])
    assert not np.allclose(a[10:], b[10:])


def test_rejects_bad_tokens(small):
    with pytest.raises(ValueError, match="out of range"):
        forward(np.array([0, SMALL.vocab]), small)


def test_float_quant_mode_equals_plain_forward(small, tokens):
    proj = random_set(SMALL)
    fused = fuse_projections(fold_norms(small), proj)
    np.testing.assert_array_equal(forward(tokens, fused, proj, FLOAT), forward(tokens, fused, proj))


def test_kv16_equals_unquantized_cache(small, tokens):
    proj = random_set(SMALL)
    fused = fuse_projections(fold_norms(small), proj)
    a = forward(tokens, fused, proj, QuantMode(abits=4, kvbits=16, uc_bits=16))
    b = forward(tokens, fused, proj, QuantMode(abits=4, kvbits=16, uc_bits=16, page_len=5))
    np.testing.assert_array_equal(a, b)
    c = forward(tokens, fused, proj, QuantMode(abits=4, kvbits=4, uc_bits=16))
    assert not np.array_equal(a, c)


@pytest.mark.parametrize("quant", [None, QuantMode(), QuantMode(page_len=3)])
def test_incremental_decoding_matches_full(small, tokens, quant):
    proj = random_set(SMALL)
    fused = fuse_projections(fold_norms(small), proj)
    full = forward(tokens, fused, proj, quant)
    cache = KVCache(SMALL.n_layers, quant.page_len if quant else 64)
    steps = [forward(tokens[:, :7], fused, proj, quant, cache)]
    for t in range(7, tokens.shape[1]):
        steps.append(forward(tokens[:, t : t + 1], fused, proj, quant, cache))
    np.testing.assert_allclose(np.concatenate(steps, axis=1), full, atol=1e-10)


def test_grouped_query_matches_expanded_kv(small, tokens):
    # expanding kv heads into full multi-head attention changes nothing
    cfg = replace(SMALL, n_kv_heads=SMALL.n_heads)
    reps = SMALL.group
    dh = SMALL.d_head

    def expand(w):
        blocks = [w[:, h * dh : (h + 1) * dh] for h in range(SMALL.n_kv_heads) for _ in range(reps)]
        return np.concatenate(blocks, axis=1)

    layers = [replace(lw, k_proj=expand(lw.k_proj), v_proj=expand(lw.v_proj)) for lw in small.layers]
    mha = replace(small, config=cfg, layers=layers)
    np.testing.assert_allclose(forward(tokens, mha), forward(tokens, small), atol=1e-12)


def test_perplexity_oracles():
    toks = np.array([[1, 2, 3, 4, 0]])
    assert perplexity_from_logits(np.zeros((1, 5, 7)), toks) == pytest.approx(7.0)
    sharp = np.full((1, 5, 7), -50.0)
    for t in range(4):
        sharp[0, t, toks[0, t + 1]] = 50.0
    assert perplexity_from_logits(sharp, toks) == pytest.approx(1.0, abs=1e-12)


def test_perplexity_rejects_empty(small):
    with pytest.raises(ValueError):
        perplexity(np.zeros((0, 5), int), small)
    with pytest.raises(ValueError):
        perplexity(np.zeros((2, 1), int), small)


def test_perplexity_batching_invariant(small, tokens):
    assert perplexity(tokens, small, batch=1) == pytest.approx(perplexity(tokens, small, batch=16), rel=1e-12)


def test_resq_w4a4kv4_closer_than_identity(toy_model, toy_bundle, toy_streams):
    evals = toy_streams[1][:4]
    ref = forward(evals, toy_model)
    mode = QuantMode()
    out = {}
    for kind in ("resq", "identity"):
        qm = build(toy_model, toy_bundle, mode, kind=kind)
        out[kind] = logit_mse(forward(evals, qm.weights, qm.proj, mode), ref)
    assert out["resq"] < out["identity"]


def test_ffn_rotation_fallback_warns():
    with pytest.warns(UserWarning, match="Hadamard"):
        b = ffn_rotation(28, seed=1)
    assert b.orthogonality_error() < 1e-10
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        assert ffn_rotation(64).is_hadamard
