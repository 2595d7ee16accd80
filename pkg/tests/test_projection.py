import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resq.linalg import eigh_symmetric, random_orthogonal
from resq.projection import (
    IDENTITY,
    KINDS,
    OUTLIER,
    PCA,
    RESQ,
    ROTATION,
    CalibStats,
    ProjectionBasis,
    RankDeficiencyWarning,
    accumulate,
    build_baseline_basis,
    build_resq_basis,
    default_rank,
    merge,
    mixed_fake_quant,
    theorem1_bound,
)
from resq.quant import PER_TENSOR, PER_TOKEN, QuantConfig, fake_quant, lemma_coefficient, quant_snr


def aniso(n, d, seed, outliers=()):
    rng = np.random.default_rng(seed)
    spec = 1.0 / np.arange(1, d + 1)
    q = random_orthogonal(d, seed + 1000)
    x = (rng.standard_normal((n, d)) * np.sqrt(spec * d / spec.sum())) @ q.T
    x[:, list(outliers)] *= 20
    return x


def stats_of(x):
    return accumulate(CalibStats(x.shape[1]), x)


def test_accumulate_zero_and_single_row():
    s = accumulate(CalibStats(3), np.zeros((4, 3)))
    assert s.count == 4 and not s.sum_outer.any()
    x = np.array([[1.0, 2.0, 3.0]])
    np.testing.assert_array_equal(accumulate(CalibStats(3), x).sum_outer, x.T @ x)


def test_accumulate_batches_equal_concatenation():
    x = np.random.default_rng(0).standard_normal((100, 8))
    a = accumulate(accumulate(CalibStats(8), x[:37]), x[37:])
    b = stats_of(x)
    np.testing.assert_allclose(a.sum_outer, b.sum_outer, rtol=1e-8)
    assert a.count == b.count == 100


def test_accumulate_does_not_mutate_and_checks_dim():
    s = CalibStats(4)
    accumulate(s, np.ones((2, 4)))
    assert s.count == 0
    with pytest.raises(ValueError):
        accumulate(s, np.ones((2, 5)))
    with pytest.raises(ValueError):
        accumulate(s, np.full((1, 4), np.inf))


def test_merge_associative_commutative():
    rng = np.random.default_rng(1)
    parts = [stats_of(rng.standard_normal((20, 6))) for _ in range(3)]
    ab_c = merge(merge(parts[0], parts[1]), parts[2])
    a_bc = merge(parts[0], merge(parts[1], parts[2]))
    cb_a = merge(merge(parts[2], parts[1]), parts[0])
    for other in (a_bc, cb_a):
        np.testing.assert_allclose(ab_c.sum_outer, other.sum_outer, rtol=1e-8)
        np.testing.assert_array_equal(ab_c.max_abs, other.max_abs)
        assert ab_c.count == other.count


def test_diagonal_covariance_picks_last_axes():
    d = 6
    x = np.diag(np.sqrt(np.arange(1, d + 1, dtype=float)))
    b = build_resq_basis(stats_of(x), 2, identity_rotation=True)
    hi = b.u_high
    np.testing.assert_allclose(np.abs(hi[:4]), 0, atol=1e-12)
    np.testing.assert_allclose(np.abs(hi[4:]).sum(axis=0), 1.0, atol=1e-12)


def test_identity_rotation_gives_p():
    x = aniso(64, 8, 0)
    b = build_resq_basis(stats_of(x), 1, identity_rotation=True)
    p = eigh_symmetric(stats_of(x).second_moment).eigenvectors
    np.testing.assert_array_equal(b.u, p)
    assert b.kind == PCA


def test_high_energy_equals_top_eigenvalues():
    x = np.random.default_rng(3).standard_normal((128, 16))
    b = build_resq_basis(stats_of(x), 2, seed=4)
    top = np.sort(np.linalg.eigvalsh(x.T @ x))[-2:].sum()
    assert np.linalg.norm(x @ b.u_high) ** 2 == pytest.approx(top, rel=1e-6)


def test_resq_deterministic_and_orthogonal():
    s = stats_of(aniso(200, 32, 1))
    a = build_resq_basis(s, 4, seed=9)
    b = build_resq_basis(s, 4, seed=9)
    assert np.array_equal(a.u, b.u)
    assert a.orthogonality_error() < 1e-10
    np.testing.assert_allclose(a.u_high @ a.u_high.T + a.u_low @ a.u_low.T, np.eye(32), atol=1e-10)


def test_resq_rank_checks_and_warning():
    s = stats_of(aniso(10, 16, 2))
    with pytest.raises(ValueError):
        build_resq_basis(s, 0)
    with pytest.raises(ValueError):
        build_resq_basis(s, 16)
    with pytest.warns(RankDeficiencyWarning):
        b = build_resq_basis(s, 2)
    assert b.orthogonality_error() < 1e-10


def test_resq_hadamard_blocks():
    s = stats_of(aniso(300, 64, 3))
    b = build_resq_basis(s, 8, use_hadamard=True)
    assert b.orthogonality_error() < 1e-10


def test_baselines():
    s = stats_of(aniso(300, 32, 4))
    assert np.array_equal(build_baseline_basis(IDENTITY, None, 32, 4).u, np.eye(32))
    rot = build_baseline_basis(ROTATION, None, 32, 4)
    assert rot.is_hadamard and np.allclose(np.abs(rot.u), 1 / np.sqrt(32))
    dense = build_baseline_basis(ROTATION, None, 24, 4, use_hadamard=False)
    assert dense.orthogonality_error() < 1e-10
    for kind in KINDS:
        b = build_baseline_basis(kind, s, 32, 4, seed=1)
        assert b.kind == kind and b.orthogonality_error() < 1e-10
    with pytest.raises(ValueError):
        build_baseline_basis("nope", s, 32, 4)
    with pytest.raises(ValueError):
        build_baseline_basis(OUTLIER, None, 32, 4)


def test_outlier_basis_moves_channels_to_high_slots():
    x = np.random.default_rng(5).standard_normal((200, 16))
    x[:, [3, 7]] *= 20
    b = build_baseline_basis(OUTLIER, stats_of(x), 16, 2, seed=0)
    # rows 3 and 7 of U carry all weight in the high-precision columns
    np.testing.assert_allclose(np.linalg.norm(b.u_high[[3, 7]], axis=1), 1.0, atol=1e-12)
    np.testing.assert_allclose(np.delete(b.u_high, [3, 7], axis=0), 0, atol=1e-12)


def test_basis_validation():
    with pytest.raises(ValueError):
        ProjectionBasis(np.eye(4), 4)
    with pytest.raises(ValueError):
        ProjectionBasis(np.ones((3, 4)), 1)
    with pytest.raises(ValueError, match="not orthogonal"):
        ProjectionBasis(2 * np.eye(4), 1).check()
    assert default_rank(128) == 16 and default_rank(512) == 64


def test_bound_zero_high_energy():
    d, r = 16, 2
    x = np.zeros((4, d))
    x[:, :5] = np.random.default_rng(6).standard_normal((4, 5))
    b = ProjectionBasis(np.eye(d), r, IDENTITY)
    expected = lemma_coefficient(d - r, 4) * np.linalg.norm(x)
    assert theorem1_bound(x, b, 4, 8) == pytest.approx(expected, rel=1e-12)


def test_bound_direct_formula():
    # ||X|| = 1 and ||X P_h|| = 0.5 with d=16, r=2
    d, r = 16, 2
    x = np.zeros((1, d))
    x[0, 0] = np.sqrt(0.75)
    x[0, -1] = 0.5
    b = ProjectionBasis(np.eye(d), r, IDENTITY)
    c_l = np.sqrt(np.pi * np.log(14)) / 7
    c_h = np.sqrt(np.pi * np.log(2)) / 127
    assert theorem1_bound(x, b, 4, 8) == pytest.approx(c_l * 1.0 - (c_l - c_h) * 0.5, rel=1e-12)


def test_bound_prefers_top_subspace():
    x = aniso(256, 32, 7)
    s = stats_of(x)
    top = build_resq_basis(s, 4, identity_rotation=True)
    bottom = ProjectionBasis(top.u[:, ::-1].copy(), 4, PCA)
    assert theorem1_bound(x, bottom, 4, 8) > theorem1_bound(x, top, 4, 8)


def test_bound_rejects_degenerate_rank():
    x = np.ones((2, 8))
    with pytest.raises(ValueError, match="r >= 2"):
        theorem1_bound(x, ProjectionBasis(np.eye(8), 1, IDENTITY), 4, 8)
    with pytest.raises(ValueError):
        theorem1_bound(x, ProjectionBasis(np.eye(8), 2, IDENTITY), 8, 4)


def test_mixed_fake_quant_passthrough_and_identity():
    x = aniso(40, 16, 8)
    b = build_resq_basis(stats_of(x), 2)
    out = mixed_fake_quant(x, b, 16, 16)
    np.testing.assert_allclose(out, x @ b.u)
    assert np.linalg.norm(out) == pytest.approx(np.linalg.norm(x), rel=1e-5)
    cfg = QuantConfig(4, symmetric=False, granularity=PER_TENSOR)
    ident = ProjectionBasis(np.eye(16), 2, IDENTITY)
    got = mixed_fake_quant(x, ident, 4, 4, cfg)
    np.testing.assert_array_equal(got[:, :14], fake_quant(x[:, :14], cfg))
    np.testing.assert_array_equal(got[:, 14:], fake_quant(x[:, 14:], cfg))
    with pytest.raises(ValueError):
        mixed_fake_quant(x[:, :8], b, 4, 8)


def test_resq_snr_beats_identity_with_outliers():
    x = aniso(512, 64, 9, outliers=(3, 17, 30, 50))
    calib = aniso(512, 64, 9, outliers=(3, 17, 30, 50))
    s = stats_of(calib)
    cfg = QuantConfig(4, symmetric=False, granularity=PER_TOKEN)
    resq = build_resq_basis(s, 8, seed=0)
    ident = build_baseline_basis(IDENTITY, s, 64, 8)
    snr_r = quant_snr(x @ resq.u, mixed_fake_quant(x, resq, 4, 8, cfg))
    snr_i = quant_snr(x, mixed_fake_quant(x, ident, 4, 8, cfg))
    assert snr_r > snr_i


@settings(max_examples=30, deadline=None)
@given(st.integers(4, 24), st.integers(0, 2**31 - 1), st.sampled_from([RESQ, ROTATION, OUTLIER, PCA]))
def test_energy_split_and_orthogonality(d, seed, kind):
    x = np.random.default_rng(seed).standard_normal((3 * d, d))
    r = max(1, d // 4)
    b = build_baseline_basis(kind, stats_of(x), d, r, seed=seed)
    assert b.orthogonality_error() <= 1e-10
    total = np.linalg.norm(x) ** 2
    split = np.linalg.norm(x @ b.u_low) ** 2 + np.linalg.norm(x @ b.u_high) ** 2
    assert split == pytest.approx(total, rel=1e-4)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_pca_high_energy_beats_random_subspaces(seed):
    x = aniso(200, 24, seed % 1000)
    b = build_resq_basis(stats_of(x), 3, seed=seed)
    best = np.linalg.norm(x @ b.u_high)
    rng = np.random.default_rng(seed)
    for _ in range(10):
        q = np.linalg.qr(rng.standard_normal((24, 3)))[0]
        assert np.linalg.norm(x @ q) <= best * (1 + 1e-6)


def test_rank_deficiency_warning_is_silent_with_enough_rows():
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        build_resq_basis(stats_of(aniso(64, 16, 10)), 2)
