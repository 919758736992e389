import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import integrate

from condebias import fairness_tests as ft
from condebias import kernel_stats as ks
from condebias.autodiff import Tensor
from helpers import naive_bandwidth, naive_hsic, naive_rbf

rng0 = np.random.default_rng


# --- bandwidth and Gram -----------------------------------------------------


def test_bandwidth_two_points():
    assert ks.bandwidth_heuristic(np.array([[0.0], [2.0]])) == pytest.approx(0.5, abs=1e-15)


def test_bandwidth_three_points():
    assert ks.bandwidth_heuristic(np.array([0.0, 1.0, 2.0])) == pytest.approx(1 / 3, abs=1e-15)


def test_bandwidth_matches_naive_and_scales_linearly():
    X = rng0(1).normal(size=(9, 3))
    s2 = ks.bandwidth_heuristic(X)
    assert s2 == pytest.approx(naive_bandwidth(X), rel=1e-13)
    assert ks.bandwidth_heuristic(3.5 * X) == pytest.approx(3.5 * s2, rel=1e-13)


def test_bandwidth_squared_switch():
    X = np.array([[0.0], [2.0]])
    assert ks.bandwidth_heuristic(X, squared=True) == pytest.approx(1.0)


def test_bandwidth_degenerate():
    with pytest.raises(ks.DegenerateBatchError, match="degenerate batch"):
        ks.bandwidth_heuristic(np.ones((5, 2)))
    with pytest.raises(ValueError):
        ks.bandwidth_heuristic(np.ones((1, 2)))


def test_rbf_closed_form():
    X = np.array([[0.0, 0.0], [1.0, 1.0]])
    K = ks.rbf_gram(X, 1.0)
    assert K[0, 1] == pytest.approx(np.exp(-1.0), abs=1e-15)
    np.testing.assert_array_equal(np.diag(K), 1.0)


def test_rbf_matches_naive_and_is_psd():
    X = rng0(2).normal(size=(10, 4))
    K = ks.rbf_gram(X, 0.7)
    np.testing.assert_allclose(K, naive_rbf(X, 0.7), atol=1e-14)
    np.testing.assert_allclose(K, K.T, atol=1e-12)
    assert np.linalg.eigvalsh(K).min() >= -1e-8


def test_rbf_decays_with_distance():
    vals = [ks.rbf_gram(np.array([[0.0], [d]]), 1.0)[0, 1] for d in (0.5, 1, 2, 4, 8)]
    assert all(a > b for a, b in zip(vals, vals[1:]))
    assert vals[-1] < 1e-13


def test_rbf_rejects_bad_bandwidth():
    with pytest.raises(ValueError):
        ks.rbf_gram(np.zeros((3, 1)), 0.0)


def test_centering_matrix_m2():
    np.testing.assert_allclose(ks.centering_matrix(2), [[0.5, -0.5], [-0.5, 0.5]])


def test_center_all_ones_is_zero():
    np.testing.assert_allclose(ks.center_gram(np.ones((5, 5))), 0.0, atol=1e-15)


def test_centered_sums_vanish():
    X = rng0(3).normal(size=(6, 2))
    G = ks.center_gram(ks.rbf_gram(X, 1.0))
    assert np.abs(G.sum(axis=0)).max() <= 1e-10
    assert np.abs(G.sum(axis=1)).max() <= 1e-10


def test_center_rejects_non_square():
    with pytest.raises(ValueError):
        ks.center_gram(np.ones((3, 4)))


# --- HSIC ---------------------------------------------------------------------


@pytest.mark.parametrize("seed", range(10))
def test_hsic_trace_equals_double_sum(seed):
    rng = rng0(seed)
    m = int(rng.integers(4, 13))
    X, Y = rng.normal(size=(m, 2)), rng.normal(size=(m, 3))
    Kx = naive_rbf(X, naive_bandwidth(X))
    Ky = naive_rbf(Y, naive_bandwidth(Y))
    assert ks.hsic(X, Y) == pytest.approx(naive_hsic(Kx, Ky), abs=1e-12)


def test_hsic_zero_when_gram_centers_to_zero():
    X = rng0(4).normal(size=(8, 1))
    assert ks.hsic(X, np.ones((8, 1)), allow_degenerate=True) == pytest.approx(0.0, abs=1e-15)
    with pytest.raises(ks.DegenerateBatchError):
        ks.hsic(X, np.ones((8, 1)))


def test_hsic_needs_four_samples():
    with pytest.raises(ValueError):
        ks.hsic(np.arange(3.0), np.arange(3.0))


def test_hsic_identical_exceeds_permutation_quantile():
    rng = rng0(5)
    X = rng.normal(size=(64, 1))
    stat = ks.hsic(X, X)
    null = [ks.hsic(X, X[rng.permutation(64)]) for _ in range(200)]
    assert stat > np.quantile(null, 0.99)


def test_hsic_loss_mode_returns_tensor():
    X = Tensor(rng0(6).normal(size=(8, 2)), requires_grad=True)
    out = ks.hsic(X, rng0(7).normal(size=(8, 1)))
    assert isinstance(out, Tensor)
    out.backward()
    assert X.grad.shape == (8, 2)


# --- conditional HSIC --------------------------------------------------------


def test_label_regularizer_constant_labels_is_identity():
    np.testing.assert_allclose(ks.label_regularizer(np.zeros(10)), np.eye(10), atol=1e-14)


def test_label_regularizer_is_inverse():
    L = rng0(8).integers(0, 2, 12).astype(float)
    G = ks.center_gram(ks.rbf_gram(L.reshape(-1, 1), ks.bandwidth_heuristic(L)))
    S = ks.label_regularizer(L)
    np.testing.assert_allclose(S @ (np.eye(12) + G / 12), np.eye(12), atol=1e-12)


def test_cond_hsic_constant_label_reduces_to_unconditional():
    rng = rng0(9)
    R, B = rng.normal(size=(16, 2)), rng.normal(size=(16, 1))
    Gr = ks.center_gram(ks.rbf_gram(R, ks.bandwidth_heuristic(R)))
    Gb = ks.center_gram(ks.rbf_gram(B, ks.bandwidth_heuristic(B)))
    assert ks.cond_hsic(R, B, np.ones(16)) == pytest.approx(np.trace(Gr @ Gb), abs=1e-10)
    assert ks.cond_hsic(R, B, np.ones(16)) == pytest.approx(15**2 * ks.hsic(R, B), rel=1e-12)


def test_cond_hsic_needs_eight():
    with pytest.raises(ValueError):
        ks.cond_hsic(np.arange(7.0), np.arange(7.0), np.arange(7.0) % 2)


def _stratified_quantile(R, B, L, rng, n=200):
    strata = ft.stratum_ids(L)
    null = [ks.cond_hsic(R, B[ft.stratified_permutation(strata, rng)], L) for _ in range(n)]
    return np.quantile(null, 0.99)


def test_cond_hsic_conditionally_independent_below_quantile():
    rng = rng0(10)
    hits = 0
    for _ in range(20):
        L = np.repeat([0.0, 1.0], 32)
        R = L[:, None] + rng.normal(size=(64, 1))
        B = 2 * L[:, None] + rng.normal(size=(64, 1))
        hits += ks.cond_hsic(R, B, L) <= _stratified_quantile(R, B, L, rng, 100)
    assert hits >= 18


def test_cond_hsic_dependent_above_quantile():
    rng = rng0(11)
    hits = 0
    for _ in range(20):
        R = rng.normal(size=(64, 1))
        L = rng.integers(0, 2, 64).astype(float)
        hits += ks.cond_hsic(R, R, L) > _stratified_quantile(R, R, L, rng, 100)
    assert hits >= 19


@settings(max_examples=30, deadline=None)
@given(arrays(np.float64, (10, 2), elements=st.floats(-5, 5)), st.integers(0, 2**31))
def test_hsic_non_negative_and_permutation_invariant(X, seed):
    rng = rng0(seed)
    Y = rng.normal(size=(10, 1))
    L = np.repeat([0.0, 1.0], 5)
    if np.ptp(X, axis=0).max() == 0:
        return
    h, c = ks.hsic(X, Y, allow_degenerate=True), ks.cond_hsic(X, Y, L)
    assert h >= -1e-9 and c >= -1e-9
    p = rng.permutation(10)
    assert ks.hsic(X[p], Y[p], allow_degenerate=True) == pytest.approx(h, abs=1e-12)
    assert ks.cond_hsic(X[p], Y[p], L[p]) == pytest.approx(c, abs=1e-12)


# --- KDE and MI ----------------------------------------------------------------


def test_kde_single_point():
    assert ks.kde_density(np.zeros((1, 1)), np.zeros((1, 1)), 1.0)[0] == pytest.approx(1 / np.sqrt(2 * np.pi))


def test_kde_integrates_to_one():
    pts = rng0(12).normal(size=(20, 1))
    val, _ = integrate.quad(lambda q: ks.kde_density(pts, np.array([[q]]), 0.3)[0], -12, 12, limit=200)
    assert val == pytest.approx(1.0, abs=0.01)


def test_kde_far_query_vanishes():
    assert ks.kde_density(np.zeros((3, 1)), np.array([[50.0]]), 1.0)[0] < 1e-300


def test_kde_rejects_bad_bandwidth():
    with pytest.raises(ValueError):
        ks.kde_density(np.zeros((3, 1)), np.zeros((1, 1)), -1.0)


def test_mi_independent_small():
    rng = rng0(13)
    assert abs(ks.mutual_information(rng.normal(size=256), rng.normal(size=256))) <= 0.05


def test_mi_identical_binary_near_log2():
    b = rng0(14).integers(0, 2, 256).astype(float)
    assert ks.mutual_information(b, b) == pytest.approx(np.log(2), rel=0.15)


def test_mi_symmetric():
    rng = rng0(15)
    r, b = rng.normal(size=40), rng.normal(size=40)
    assert ks.mutual_information(r, b) == ks.mutual_information(b, r)


def test_mi_errors():
    with pytest.raises(ValueError):
        ks.mutual_information(np.arange(5.0), np.arange(5.0))
    with pytest.raises(ks.DegenerateBatchError):
        ks.mutual_information(np.ones(10), np.arange(10.0))


def test_mi_finite_on_far_outlier():
    x = np.r_[np.zeros(9), 1e6] + rng0(16).normal(size=10) * 1e-3
    assert np.isfinite(ks.mutual_information(x, np.arange(10.0)))


def test_cmi_label_copies_near_zero():
    rng = rng0(17)
    L = rng.integers(0, 2, 128).astype(float)
    R = L + 1e-3 * rng.normal(size=128)
    B = L + 1e-3 * rng.normal(size=128)
    assert abs(ks.conditional_mutual_information(R, B, L)) <= 0.05


def test_cmi_independent_bias_small():
    # plug-in KDE bias is about 0.05 at 128 per stratum, so use 256 per stratum
    rng = rng0(18)
    vals = []
    for _ in range(10):
        L = rng.integers(0, 2, 512).astype(float)
        R = L + rng.normal(size=512)
        vals.append(ks.conditional_mutual_information(R, rng.normal(size=512), L))
    assert np.mean(vals) <= 0.05


def test_cmi_equal_variables_close_to_unconditional():
    rng = rng0(19)
    b = rng.integers(0, 2, 256).astype(float)
    L = rng.integers(0, 2, 256).astype(float)
    mi = ks.mutual_information(b, b)
    assert ks.conditional_mutual_information(b, b, L) == pytest.approx(mi, rel=0.15)


def test_cmi_small_stratum_names_label():
    L = np.r_[np.zeros(10), np.ones(3)]
    with pytest.raises(ks.StratumTooSmallError, match="1.0"):
        ks.conditional_mutual_information(np.arange(13.0), np.arange(13.0), L)


def test_mi_loss_mode_gradient_is_finite():
    R = Tensor(rng0(20).normal(size=(16, 2)), requires_grad=True)
    out = ks.conditional_mutual_information(R, rng0(21).normal(size=16), np.repeat([0, 1], 8))
    out.backward()
    assert np.isfinite(R.grad).all()


# --- correlation ----------------------------------------------------------------


def test_correlation_affine():
    x = rng0(22).normal(size=50)
    assert ks.correlation(x, 2 * x + 3) == pytest.approx(1.0, abs=1e-12)
    assert ks.correlation(x, -x) == pytest.approx(-1.0, abs=1e-12)


def test_correlation_independent_small():
    rng = rng0(23)
    assert abs(ks.correlation(rng.normal(size=10_000), rng.normal(size=10_000))) <= 0.05


def test_correlation_zero_variance():
    with pytest.raises(ValueError, match="zero variance"):
        ks.correlation(np.ones(5), np.arange(5.0))


def _with_correlations(rho, m=2000, seed=0):
    """Three samples whose sample correlation matrix is exactly ``rho``."""
    rng = rng0(seed)
    Z = rng.normal(size=(m, 3))
    Z -= Z.mean(axis=0)
    # whiten, then colour with the Cholesky factor of the target matrix
    W = Z @ np.linalg.inv(np.linalg.cholesky(Z.T @ Z / m)).T
    return W @ np.linalg.cholesky(rho).T


def test_partial_correlation_one_third():
    X = _with_correlations(np.array([[1, 0.5, 0.5], [0.5, 1, 0.5], [0.5, 0.5, 1.0]]))
    assert ks.partial_correlation(X[:, 0], X[:, 1], X[:, 2]) == pytest.approx(1 / 3, abs=1e-12)
    assert ks.partial_correlation_closed_form(0.5, 0.5, 0.5) == pytest.approx(1 / 3, abs=1e-15)


def test_partial_correlation_matches_closed_form():
    rng = rng0(24)
    x, z = rng.normal(size=300), rng.normal(size=300)
    y = x + z + rng.normal(size=300)
    c = np.corrcoef([x, y, z])
    expected = ks.partial_correlation_closed_form(c[0, 1], c[0, 2], c[1, 2])
    assert ks.partial_correlation(x, y, z) == pytest.approx(expected, abs=1e-12)


def test_partial_correlation_degenerate_flag():
    z = rng0(25).normal(size=30)
    value, flag = ks.partial_correlation(z, rng0(26).normal(size=30), z, with_flag=True)
    assert flag and value == 0.0


def test_partial_correlation_theorem_configuration():
    rng = rng0(27)
    m = 2000
    s, bstar = rng.normal(size=m), rng.normal(size=m)
    x = 1.5 * s + 1e-3 * rng.normal(size=m)
    y = 0.8 * s + 0.6 * bstar
    assert abs(ks.partial_correlation(x, y, 1.5 * s)) <= 2 / np.sqrt(m)


def test_partial_correlation_uncorrelated_z_equals_correlation():
    rng = rng0(28)
    x, y, z = rng.normal(size=(3, 100))
    D = np.column_stack([np.ones(100), x, y])
    z = z - D @ np.linalg.lstsq(D, z, rcond=None)[0]
    assert ks.partial_correlation(x, y, z) == pytest.approx(ks.correlation(x, y), abs=1e-12)


def test_partial_correlation_one_hot_labels():
    rng = rng0(29)
    lab = rng.integers(0, 3, 90)
    onehot = np.eye(3)[lab]
    x, y = rng.normal(size=90) + lab, rng.normal(size=90) + lab
    direct = ks.partial_correlation(x, y, onehot)
    assert -1 <= direct <= 1
    assert abs(direct) < abs(ks.correlation(x, y))


@pytest.mark.parametrize("fn", ["mi", "cmi", "pc"])
def test_joint_permutation_invariance(fn):
    rng = rng0(30)
    r, b = rng.normal(size=24), rng.normal(size=24)
    L = np.repeat([0.0, 1.0], 12)
    f = {
        "mi": lambda r, b, L: ks.mutual_information(r, b),
        "cmi": ks.conditional_mutual_information,
        "pc": ks.partial_correlation,
    }[fn]
    p = rng.permutation(24)
    assert f(r[p], b[p], L[p]) == pytest.approx(f(r, b, L), abs=1e-12)


def test_cond_hsic_scale_behaviour_of_bandwidth_readings():
    rng = rng0(40)
    L = np.repeat([0.0, 1.0], 16)
    R, B = rng.normal(size=(32, 2)) + L[:, None], rng.normal(size=32) + L
    sq = ks.cond_hsic(R, B, L, squared_bw=True)
    assert ks.cond_hsic(1e-3 * R, B, L, squared_bw=True) == pytest.approx(sq, rel=1e-9)
    # sigma^2 grows only linearly with scale, so a shrinking R flattens its Gram matrix
    dist = [ks.cond_hsic(s * R, B, L) for s in (1.0, 1e-1, 1e-2, 1e-3)]
    assert all(a > b for a, b in zip(dist, dist[1:]))
