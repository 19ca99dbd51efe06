import csv
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rzfprecode._rng import complex_normal
from rzfprecode.errors import ConfigError, DimensionError, NumericalError
from rzfprecode.precoder import (
    PowerAllocation,
    UplinkInverse,
    beta_zf,
    cholesky_solve,
    complexity_grid,
    complexity_report,
    gram,
    optimize_powers,
    predicted_sinr,
    rzf_precode_bin,
    rzf_precode_full,
    write_complexity_csv,
    zf_precode_bin,
)
from rzfprecode.scalars import WishartSpec, compute_beta_rzf, compute_lambda_beta


def random_bin(seed, M=8, K=3, batch=()):
    rng = np.random.default_rng(seed)
    A = complex_normal(rng, batch + (M, K))
    s = complex_normal(rng, batch + (K,))
    p = rng.uniform(0.5, 5.0, size=K)
    return A, s, p


def test_beta_zf():
    assert beta_zf(64, 16) == pytest.approx(6.9282, abs=1e-4)
    assert beta_zf(64, 16) == math.sqrt(48)
    with pytest.raises(ConfigError):
        beta_zf(4, 4)


def test_zf_rank_one_hand_case():
    A = np.array([[1.0], [1.0]], dtype=complex)
    s = np.array([0.3 - 0.4j])
    alloc = PowerAllocation.unoptimized([2.0])
    x = zf_precode_bin(A, s, alloc, 3.0)
    np.testing.assert_allclose(x, 3.0 * A[:, 0].conj() / 2 * math.sqrt(2.0) * s[0], atol=1e-15)
    np.testing.assert_allclose(A.T @ x, 3.0 * math.sqrt(2.0) * s, atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 6), st.integers(0, 6))
def test_zf_cancels_interference(seed, K, extra):
    M = K + 1 + extra
    A, s, p = random_bin(seed, M, K)
    alloc = PowerAllocation.unoptimized(p)
    beta = beta_zf(M, K)
    x = zf_precode_bin(A, s, alloc, beta)
    out = (A.T @ x) / np.sqrt(p) / beta
    cond = np.linalg.cond(A)
    assert np.max(np.abs(out - s)) < 1e-9 * max(1.0, cond**2)


def test_zf_batched_equals_per_bin():
    A, s, p = random_bin(1, 8, 3, batch=(5,))
    alloc = PowerAllocation.unoptimized(p)
    X = zf_precode_bin(A, s, alloc, 2.0)
    for n in range(5):
        np.testing.assert_allclose(X[n], zf_precode_bin(A[n], s[n], alloc, 2.0), atol=1e-13)


def test_zf_singular_gram_reports_condition():
    A = np.ones((4, 2), dtype=complex)
    with pytest.raises(NumericalError, match="condition"):
        zf_precode_bin(A, np.ones(2), PowerAllocation.unoptimized([1.0, 1.0]), 1.0)


def test_shape_mismatch():
    A, s, p = random_bin(0)
    with pytest.raises(DimensionError):
        zf_precode_bin(A, s[:2], PowerAllocation.unoptimized(p), 1.0)
    with pytest.raises(DimensionError):
        rzf_precode_bin(A, s, PowerAllocation.unoptimized(p[:2]), 1.0, 1.0)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_inversion_lemma_equivalence(seed, s2):
    A, s, p = random_bin(seed)
    alloc = PowerAllocation.unoptimized(p)
    small = rzf_precode_bin(A, s, alloc, s2, 1.7)
    big = rzf_precode_full(A, s, alloc, s2, 1.7)
    assert np.linalg.norm(small - big) <= 1e-9 * np.linalg.norm(big)


def test_rzf_tends_to_zf_as_regularizer_vanishes():
    A, s, p = random_bin(4)
    alloc = PowerAllocation.unoptimized(p)
    zf = zf_precode_bin(A, s, alloc, 2.0)
    rzf = rzf_precode_bin(A, s, alloc, 1e-12, 2.0)
    assert np.linalg.norm(rzf - zf) <= 1e-6 * np.linalg.norm(zf)


def test_rzf_tends_to_matched_filter_at_large_regularizer():
    A, s, p = random_bin(6)
    alloc = PowerAllocation.unoptimized(p)
    x = rzf_precode_bin(A, s, alloc, 1e6, 1.0)
    mf = A.conj() @ (np.sqrt(p) * s)
    cos = abs(np.vdot(x, mf)) / (np.linalg.norm(x) * np.linalg.norm(mf))
    assert cos > 1 - 1e-6


def test_uplink_factor_is_conjugate_of_downlink_matrix():
    A, _, _ = random_bin(8, 16, 5, batch=(3,))
    inv = UplinkInverse.from_channel(A, 0.7)
    ul = np.swapaxes(A, -1, -2).conj() @ A + 0.7 * np.eye(5)  # A^H A + s2 I
    np.testing.assert_allclose(inv.chol @ np.swapaxes(inv.chol, -1, -2).conj(), ul, atol=1e-12)
    dl = gram(A) + 0.7 * np.eye(5)
    np.testing.assert_allclose(dl, ul.conj(), atol=1e-12)
    b = complex_normal(np.random.default_rng(0), (3, 5))
    np.testing.assert_allclose(inv.solve_downlink(b), np.linalg.solve(dl, b[..., None])[..., 0], atol=1e-12)


def test_uplink_inverse_checks():
    A, s, p = random_bin(2)
    with pytest.raises(ConfigError):
        UplinkInverse.from_channel(A, 0.0)
    inv = UplinkInverse.from_channel(A, 1.0)
    with pytest.raises(ConfigError):
        rzf_precode_bin(A, s, PowerAllocation.unoptimized(p), 2.0, 1.0, inverse=inv)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 8))
def test_cholesky_solve_matches_dense_solve(seed, K):
    rng = np.random.default_rng(seed)
    B = complex_normal(rng, (4, K + 2, K))
    H = np.swapaxes(B, -1, -2).conj() @ B + 0.1 * np.eye(K)
    b = complex_normal(rng, (4, K))
    x = cholesky_solve(np.linalg.cholesky(H), b)
    ref = np.linalg.solve(H, b[..., None])[..., 0]
    np.testing.assert_allclose(x, ref, atol=1e-9 * max(1.0, np.max(np.abs(ref))))


def test_rzf_transmit_power_conserved_with_tabulated_beta():
    M, K, s2, bins = 64, 16, 1.0, 400
    beta = compute_beta_rzf(compute_lambda_beta(WishartSpec(M, K), s2))
    rng = np.random.default_rng(12)
    A = complex_normal(rng, (bins, M, K))
    s = complex_normal(rng, (bins, K))
    alloc = PowerAllocation.unoptimized(np.ones(K))
    x = rzf_precode_bin(A, s, alloc, s2, beta)
    assert np.mean(np.sum(np.abs(x) ** 2, axis=-1)) == pytest.approx(alloc.p_total, rel=0.03)


def test_power_allocation_validation():
    with pytest.raises(ConfigError):
        PowerAllocation([1.0, 2.0], [1.0, 1.0])
    with pytest.raises(ConfigError):
        PowerAllocation([1.0, -1.0], [1.0, -1.0])
    with pytest.raises(DimensionError):
        PowerAllocation([1.0, 2.0], [3.0])
    alloc = PowerAllocation.unoptimized([1.0, 3.0])
    assert alloc.K == 2 and alloc.p_total == 4.0
    with pytest.raises(ValueError):
        alloc.q[0] = 5.0


def test_optimize_equal_losses_is_fixed_point():
    alloc = optimize_powers(np.full(8, 0.5), 0.01, 7.0, 1.0)
    np.testing.assert_allclose(alloc.q, 0.5, rtol=1e-14)


def test_optimize_limits():
    p = np.array([1.0, 4.0, 10.0])
    np.testing.assert_allclose(optimize_powers(p, 0.02, 7.0, 1e-14).q, p.sum() / 3, rtol=1e-9)
    np.testing.assert_allclose(optimize_powers(p, 0.0, 7.0, 1.0).q, p, rtol=1e-14)


def test_optimize_degenerate():
    with pytest.raises(ConfigError):
        optimize_powers([1.0, 2.0], 0.0, 7.0, 0.0)
    with pytest.raises(ConfigError):
        optimize_powers([1.0, 0.0], 0.1, 7.0, 1.0)
    with pytest.raises(ConfigError):
        optimize_powers([1.0, 2.0], -0.1, 7.0, 1.0)


@settings(max_examples=60, deadline=None)
@given(
    st.lists(st.floats(1.0, 100.0), min_size=2, max_size=32),
    st.floats(1e-5, 0.1),
    st.floats(0.5, 50.0),
    st.floats(1e-3, 1e3),
    st.floats(1.0, 10.0),
)
def test_optimized_powers_equalize_predicted_sinr(p, sod, beta, s2, alpha):
    alloc = optimize_powers(p, sod, beta, s2)
    assert alloc.q.sum() == pytest.approx(sum(p), rel=1e-10)
    assert np.all(alloc.q > 0)
    g = predicted_sinr(alloc, alpha, beta, sod, s2)
    np.testing.assert_allclose(g, g[0], rtol=1e-10)


@pytest.mark.parametrize(
    "M,K,zf,rzf", [(64, 16, 21760, 1280), (128, 1, 258, 129), (32, 31, 31**2 + 31 * 32 + 31**3 + 31**2 * 32, 1953)]
)
def test_complexity_counts(M, K, zf, rzf):
    r = complexity_report(M, K)
    assert (r.zf_multiplies_per_bin, r.rzf_multiplies_per_bin) == (zf, rzf)
    assert isinstance(r.zf_multiplies_per_bin, int)


def test_complexity_ratio_grows_with_k():
    for M in (32, 64, 128):
        ratios = [complexity_report(M, K).ratio for K in range(1, M)]
        assert all(b > a for a, b in zip(ratios, ratios[1:]))
    assert complexity_report(64, 16).ratio == 17


def test_complexity_rejects_bad_input():
    for M, K in [(4, 4), (4, 0), (4.5, 2)]:
        with pytest.raises(ConfigError):
            complexity_report(M, K)


def test_complexity_grid_and_csv(tmp_path):
    reports = complexity_grid()
    assert {r.M for r in reports} == {32, 64, 128}
    assert sum(r.M == 32 for r in reports) == 31
    assert sum(r.M == 128 for r in reports) == 64
    path = write_complexity_csv(reports, tmp_path / "c.csv")
    rows = list(csv.DictReader(path.open()))
    assert list(rows[0]) == ["M", "K", "zf", "rzf"]
    row = next(r for r in rows if r["M"] == "64" and r["K"] == "16")
    assert (row["zf"], row["rzf"]) == ("21760", "1280")
