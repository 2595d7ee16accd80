import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from resq.linalg import OpCounter
from resq.mpgemm import (
    DEFAULT_ACT,
    DEFAULT_WT,
    AccumulatorOverflow,
    instrumented_mixed_matmul,
    int_matmul,
    mixed_matmul,
    op_count,
)
from resq.projection import IDENTITY, CalibStats, ProjectionBasis, accumulate, build_resq_basis
from resq.quant import PER_CHANNEL, PER_TENSOR, PER_TOKEN, QuantConfig, dequantize, fake_quant, quantize

pytestmark = pytest.mark.filterwarnings("ignore::resq.projection.RankDeficiencyWarning")


def outlier_data(n, d, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, d))
    x[:, 1] *= 30
    return x


def resq_basis(x, r, seed=0):
    return build_resq_basis(accumulate(CalibStats(x.shape[1]), x), r, seed=seed)


def test_passthrough_equals_float_product():
    rng = np.random.default_rng(0)
    x, w = rng.standard_normal((8, 16)), rng.standard_normal((16, 5))
    b = resq_basis(x, 2)
    out = mixed_matmul(x, w, b, 16, 16)
    np.testing.assert_allclose(out, x @ w, rtol=1e-4, atol=1e-10)


def test_identity_weight_identity_basis():
    x = np.random.default_rng(1).standard_normal((6, 8))
    b = ProjectionBasis(np.eye(8), 2, IDENTITY)
    out = mixed_matmul(x, np.eye(8), b, 4, 4)
    k = 6
    ref = np.hstack(
        [
            fake_quant(x[:, :k], DEFAULT_ACT) @ fake_quant(np.eye(8)[:k, :k], DEFAULT_WT),
            fake_quant(x[:, k:], DEFAULT_ACT) @ fake_quant(np.eye(8)[k:, k:], DEFAULT_WT),
        ]
    )
    np.testing.assert_allclose(out, ref, atol=1e-12)


def test_resq_beats_uniform_identity_on_outliers():
    x = outlier_data(32, 16, 2)
    w = np.random.default_rng(3).standard_normal((16, 16))
    ref = x @ w
    resq = mixed_matmul(x, w, resq_basis(x, 2), 4, 8)
    ident = mixed_matmul(x, w, ProjectionBasis(np.eye(16), 2, IDENTITY), 4, 4)
    assert np.linalg.norm(resq - ref) < np.linalg.norm(ident - ref)


def test_cross_term_absent_structurally():
    # full projected operands quantized group-wise, contracted with a block-diagonal mask
    rng = np.random.default_rng(4)
    x, w = rng.standard_normal((10, 12)), rng.standard_normal((12, 7))
    b = resq_basis(x, 3, seed=1)
    k = 9
    xu, wu = x @ b.u, b.u.T @ w
    xq = np.hstack([fake_quant(xu[:, :k], DEFAULT_ACT), fake_quant(xu[:, k:], DEFAULT_ACT.with_bits(8))])
    wq = np.vstack([fake_quant(wu[:k], DEFAULT_WT), fake_quant(wu[k:], DEFAULT_WT.with_bits(8))])
    low = xq[:, :k] @ wq[:k]
    high = xq[:, k:] @ wq[k:]
    out = mixed_matmul(x, w, b, 4, 8)
    np.testing.assert_array_equal(out, np.zeros_like(low) + low + high)


@pytest.mark.parametrize("act_sym", [True, False])
@pytest.mark.parametrize("act_gran", [PER_TENSOR, PER_TOKEN])
@pytest.mark.parametrize("wt_gran", [PER_TENSOR, PER_CHANNEL])
def test_integer_path_matches_reference(act_sym, act_gran, wt_gran):
    rng = np.random.default_rng(5)
    x, w = rng.standard_normal((9, 16)), rng.standard_normal((16, 6))
    b = resq_basis(x, 2, seed=3)
    act = QuantConfig(4, act_sym, act_gran)
    wt = QuantConfig(4, True, wt_gran)
    ref = mixed_matmul(x, w, b, 4, 8, act, wt, path="reference")
    got = mixed_matmul(x, w, b, 4, 8, act, wt, path="integer")
    np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-12 * np.abs(ref).max())


def test_int_matmul_symmetric_per_tensor_close_to_dequantize_first():
    rng = np.random.default_rng(6)
    cfg = QuantConfig(8, True, PER_TENSOR)
    qx, qw = quantize(rng.standard_normal((5, 7)), cfg), quantize(rng.standard_normal((7, 3)), cfg)
    ref = dequantize(qx, np.float64) @ dequantize(qw, np.float64)
    np.testing.assert_allclose(int_matmul(qx, qw), ref, rtol=1e-13, atol=1e-14)


def test_int_matmul_overflow():
    cfg = QuantConfig(8, True, PER_TENSOR)
    n = 140_000
    qx = quantize(np.ones((1, n)), cfg)
    qw = quantize(np.ones((n, 1)), cfg)
    with pytest.raises(AccumulatorOverflow):
        int_matmul(qx, qw)


def test_integer_path_rejects_bad_configs():
    x = np.ones((2, 4))
    b = ProjectionBasis(np.eye(4), 1, IDENTITY)
    with pytest.raises(ValueError):
        mixed_matmul(x, np.ones((4, 2)), b, 16, 16, path="integer")
    with pytest.raises(ValueError):
        mixed_matmul(x, np.ones((4, 2)), b, 4, 8, path="fast")
    with pytest.raises(ValueError):
        mixed_matmul(x, np.ones((3, 2)), b, 4, 8)
    with pytest.raises(ValueError):
        int_matmul(quantize(x, QuantConfig(4, True, PER_CHANNEL)), quantize(np.ones((4, 2)), DEFAULT_WT))


def test_op_count_shares():
    rec = op_count((1, 512, 512), 64, 4, 8)
    assert rec.high_fraction == pytest.approx(0.125)
    rec0 = op_count((3, 64, 32), 0, 4, 8)
    assert rec0.macs_high == 0 and rec0.macs_low == 3 * 64 * 32
    assert op_count((2, 64, 8), 8, 4, 8, projection="hadamard").projection_flops == 2 * 64 * 6
    assert op_count((2, 64, 8), 8, 4, 8, projection="dense").projection_flops == 2 * 2 * 64 * 64
    with pytest.raises(ValueError):
        op_count((1, 8, 8), 9, 4, 8)


def test_op_count_matches_instrumented_multiply():
    rng = np.random.default_rng(7)
    n, d, m, r = 1, 64, 4, 8
    x, w = rng.standard_normal((n, d)), rng.standard_normal((d, m))
    k = d - r
    parts = []
    for cols, bits in ((slice(0, k), 4), (slice(k, d), 8)):
        parts.append(quantize(x[:, cols], DEFAULT_ACT.with_bits(bits)).codes)
        parts.append(quantize(w[cols], DEFAULT_WT.with_bits(bits)).codes)
    counter = OpCounter()
    acc_l, acc_h, tallies = instrumented_mixed_matmul(*parts, counter=counter)
    rec = op_count((n, d, m), r, 4, 8)
    assert tallies == {"low": rec.macs_low, "high": rec.macs_high, "cross": 0}
    assert counter.muls == rec.macs_total
    np.testing.assert_array_equal(acc_l, parts[0].astype(np.int64) @ parts[1].astype(np.int64))
    np.testing.assert_array_equal(acc_h, parts[2].astype(np.int64) @ parts[3].astype(np.int64))


def test_error_non_increasing_in_rank():
    x = outlier_data(256, 32, 8)
    w = np.random.default_rng(9).standard_normal((32, 32))
    stats = accumulate(CalibStats(32), x)
    errs = []
    for r in (2, 4, 8, 16):
        b = build_resq_basis(stats, r, seed=0)
        errs.append(np.linalg.norm(mixed_matmul(x, w, b, 4, 8) - x @ w))
    assert all(b <= a * 1.02 for a, b in zip(errs, errs[1:]))
    assert errs[-1] < errs[0]


@settings(max_examples=40, deadline=None)
@given(
    st.integers(1, 12),
    st.integers(2, 20),
    st.integers(1, 6),
    st.integers(2, 6),
    st.booleans(),
    st.integers(0, 2**31 - 1),
)
def test_integer_reference_agree_property(n, d, m, bits, act_sym, seed):
    rng = np.random.default_rng(seed)
    x, w = rng.standard_normal((n, d)), rng.standard_normal((d, m))
    r = int(rng.integers(1, d))
    b = ProjectionBasis(np.linalg.qr(rng.standard_normal((d, d)))[0], r, "rotation-only")
    act = QuantConfig(bits, act_sym, PER_TOKEN)
    ref = mixed_matmul(x, w, b, bits, 8, act, DEFAULT_WT, path="reference")
    got = mixed_matmul(x, w, b, bits, 8, act, DEFAULT_WT, path="integer")
    assert np.linalg.norm(got - ref) <= 1e-10 * max(np.linalg.norm(ref), 1e-30)
