import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnet import autodiff as ad
from tsnet.dpm import (EPS_DIST, DensityCalibration, DensityNetParams, augment_features, calibrate,
                       density_net_forward, density_scores, density_targets, k_d, kd_from_scores,
                       kl_from_scores, kl_loss, knn_density, knn_raw_scores)
from tsnet.errors import ContractError, ShapeError


def softmax_ref(v):
    e = np.exp(np.asarray(v) - np.max(v))
    return e / e.sum()


def test_two_points_uniform():
    f = knn_density(np.array([[3.0, -1.0], [7.5, 2.0]]), 1)
    assert f.rho.tolist() == [0.5, 0.5]


def test_three_point_hand_case():
    f = knn_density(np.array([0.0, 1.0, 3.0]), 1)
    raw = np.array([1 / (1 + EPS_DIST), 1 / (1 + EPS_DIST), 1 / (4 + EPS_DIST)])
    assert np.abs(f.raw - raw).max() <= 1e-12
    assert np.abs(f.rho - softmax_ref(raw)).max() <= 1e-12
    # e / (2e + e^0.25) and e^0.25 / (2e + e^0.25)
    np.testing.assert_allclose(f.rho, [0.40447, 0.40447, 0.19106], atol=1e-5)


def test_knn_matches_brute_force():
    rng = np.random.default_rng(0)
    P = rng.normal(size=(40, 3))
    K = 4
    ref = []
    for i in range(40):
        d2 = sorted(((P[i] - P[j]) ** 2).sum() for j in range(40) if j != i)
        ref.append(sum(1 / (d + EPS_DIST) for d in d2[:K]))
    np.testing.assert_allclose(knn_raw_scores(P, K, chunk=7), ref, rtol=1e-12)


def test_reference_subset_keeps_queries_out():
    P = np.array([[0.0], [1.0], [0.5]])
    raw = knn_raw_scores(P, 1, n_reference=2)
    # the third point is only a query: its nearest reference is at distance 0.5
    assert raw[2] == pytest.approx(1 / (0.25 + EPS_DIST), rel=1e-14)
    assert raw[0] == pytest.approx(1 / (1 + EPS_DIST), rel=1e-14)


def test_duplicates_stay_finite():
    f = knn_density(np.zeros((4, 2)), 2)
    assert np.all(np.isfinite(f.raw)) and np.all(np.isfinite(f.rho))
    assert f.rho.sum() == pytest.approx(1.0, abs=1e-9)


def test_k_too_large():
    with pytest.raises(ContractError):
        knn_density(np.zeros((3, 1)), 3)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-100, 100), st.floats(-100, 100))
def test_translation_invariance(seed, dx, dy):
    P = np.random.default_rng(seed).normal(size=(12, 2))
    a = knn_density(P, 3).rho
    b = knn_density(P + np.array([dx, dy]), 3).rho
    np.testing.assert_allclose(a, b, rtol=1e-6)
    assert abs(a.sum() - 1) <= 1e-9


def test_proportional_targets():
    rho = density_targets(np.array([1.0, 1.0, 2.0]), "proportional")
    assert rho.tolist() == [0.25, 0.25, 0.5]
    np.testing.assert_allclose(density_targets(np.log([1.0, 3.0]), "softmax"), [0.25, 0.75],
                               rtol=1e-15)
    with pytest.raises(ContractError):
        density_targets(np.ones(2), "rank")


def test_augment_rows_and_zero_scale():
    X = np.random.default_rng(1).normal(size=(5, 2))
    A = augment_features(X, 0.0, np.random.default_rng(2))
    assert A.shape == (10, 2)
    assert np.all(A[:5] == X) and np.all(A[5:] == X)


def test_augment_std():
    rng = np.random.default_rng(3)
    X = rng.normal(size=(10_000, 2)) * np.array([1.0, 4.0])
    A = augment_features(X, 0.1, rng)
    sigma = 0.1 * X.std(axis=0)
    np.testing.assert_allclose((A[10_000:] - X).std(axis=0), sigma, rtol=0.05)


def test_augment_constant_feature():
    X = np.column_stack([np.arange(4.0), np.full(4, 2.0)])
    A = augment_features(X, 0.5, np.random.default_rng(4))
    d = A[4:, 1] - 2.0
    assert np.all(np.abs(d) < 0.5 * 1e-3 * 6)


def test_density_net_singleton():
    dnp = DensityNetParams.init(3, np.random.default_rng(5))
    assert density_net_forward(dnp, np.ones((1, 3))).data.tolist() == [1.0]


def test_density_net_permutation_and_sum():
    rng = np.random.default_rng(6)
    dnp = DensityNetParams.init(2, rng)
    X = rng.normal(size=(9, 2))
    perm = rng.permutation(9)
    k = density_net_forward(dnp, X).data
    kp = density_net_forward(dnp, X[perm]).data
    np.testing.assert_allclose(kp, k[perm], rtol=1e-13)
    assert abs(k.sum() - 1) <= 1e-9


def test_density_net_shape_check():
    dnp = DensityNetParams.init(2, np.random.default_rng(7))
    with pytest.raises(ShapeError):
        density_scores(dnp, np.zeros((3, 4)))


def test_density_net_gradients():
    rng = np.random.default_rng(8)
    dnp = DensityNetParams.init(2, rng, embed_dim=4, head_hidden=3)
    X = rng.normal(size=(5, 2))
    rho = softmax_ref(rng.normal(size=5))
    assert ad.finite_difference_check(lambda *_: kl_from_scores(density_scores(dnp, X), rho),
                                      dnp.stores()) <= 1e-4


def test_kl_hand_case():
    v = kl_loss(np.array([0.5, 0.5]), np.array([0.9, 0.1]))
    ref = 0.5 * np.log(0.5 / 0.9) + 0.5 * np.log(0.5 / 0.1)
    assert abs(v - ref) <= 1e-12
    assert abs(v - 0.5108) < 1e-4


def test_kl_equal_and_zero_mass():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_loss(p, p) == 0.0
    assert kl_loss(np.array([1.0, 0.0]), np.array([0.5, 0.5])) == pytest.approx(np.log(2), rel=1e-15)
    with pytest.raises(ShapeError):
        kl_loss(p, p[:2])


@settings(max_examples=50)
@given(st.integers(0, 10_000))
def test_kl_nonnegative(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.dirichlet(np.ones(6)), rng.dirichlet(np.ones(6))
    assert kl_loss(a, b) >= 0
    s = ad.Tensor(np.log(a))
    assert float(kl_from_scores(s, b).data) == pytest.approx(kl_loss(a, b), rel=1e-10, abs=1e-14)


def test_kd_endpoints_and_midpoint():
    cal = DensityCalibration(-2.0, 4.0)
    kd = kd_from_scores(np.array([-2.0, 4.0, 1.0, -9.0, 9.0]), cal)
    assert kd[0] == 0.0
    assert abs(kd[1] - 1.0) <= 1e-12
    assert abs(kd[2] - 0.5) <= 1e-12
    assert kd[3] == 0.0 and kd[4] == 1.0


def test_kd_degenerate_calibration_is_zero():
    assert kd_from_scores(np.array([3.0, -1.0]), DensityCalibration(1.0, 1.0)).tolist() == [0.0, 0.0]


def test_kd_from_network_in_unit_interval_and_monotone():
    rng = np.random.default_rng(9)
    dnp = DensityNetParams.init(1, rng)
    X = rng.normal(size=(50, 1))
    cal = calibrate(dnp, X)
    grid = np.linspace(-6, 6, 200)[:, None]
    kd = k_d(dnp, cal, grid)
    assert np.all((kd >= 0) & (kd <= 1))
    s = density_scores(dnp, grid).data
    order = np.argsort(s, kind="stable")
    assert np.all(np.diff(kd[order]) >= 0)
    assert isinstance(k_d(dnp, cal, X[0]), float)
    with pytest.raises(ContractError):
        k_d(dnp, None, X[0])
