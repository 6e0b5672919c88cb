import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsnet import autodiff as ad
from tsnet.autodiff import MLPSpec, ParamStore
from tsnet.dtb import (VAR_FLOOR, DTBParams, GaussianDiag, dtb_forward, dtb_parts,
                       taylor_variance_mc_check, variance_head)
from tsnet.errors import ContractError, NumericError, ShapeError


def linear_dtb(w, s_raw, so_raw):
    """Mean net with a linear scalar output; variance heads with constant outputs."""
    m = len(w)
    spec_mu = MLPSpec((m, 1), activation="identity")
    mu = ParamStore.from_arrays(spec_mu, [np.array([w], dtype=float)], [np.zeros(1)])
    spec_si = MLPSpec((m, 2, m))
    si = ParamStore.init(spec_si, np.random.default_rng(0))
    si.weights[-1].data[:] = 0.0
    si.biases[-1].data[:] = s_raw
    spec_so = MLPSpec((m, 2, 1))
    so = ParamStore.init(spec_so, np.random.default_rng(1))
    so.weights[-1].data[:] = 0.0
    so.biases[-1].data[:] = so_raw
    return DTBParams(spec_mu, mu, spec_si, si, spec_so, so)


def test_variance_head_examples():
    assert variance_head(np.array([0.0]))[0] == 1.0 + 1e-6
    np.testing.assert_allclose(variance_head(np.array([-40.0])), np.exp(-12.0) + 1e-6, rtol=1e-15)
    assert abs(variance_head(np.array([-40.0]))[0] - 7.14e-6) < 1e-8


def test_variance_head_rejects_nan():
    with pytest.raises(NumericError):
        variance_head(np.array([np.nan]))


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_variance_head_monotone(a, b):
    lo, hi = sorted((a, b))
    v = variance_head(np.array([lo, hi]))
    assert v[0] <= v[1]
    assert v[0] >= VAR_FLOOR


def test_linear_mean_hand_case():
    # var = 1^2 * 0.25 + 2^2 * 0.01 + 0.04 = 0.33, minus the variance floors baked into the heads
    s = np.array([0.25, 0.01])
    d = linear_dtb([1.0, 2.0], np.log(s - VAR_FLOOR), np.log(0.04 - VAR_FLOOR))
    g = dtb_forward(d, np.array([0.7, -0.3]))
    np.testing.assert_allclose(g.var.data, [0.33], rtol=1e-12)
    np.testing.assert_allclose(g.mean.data, [0.7 - 0.6], rtol=1e-12)


def test_zero_jacobian_gives_system_noise_only():
    d = DTBParams.init(3, 2, np.random.default_rng(2), (4,), (4,))
    d.params_mu.weights[-1].data[:] = 0.0
    x = np.array([0.1, 0.2, -0.5])
    parts = dtb_parts(d, x)
    so = variance_head(ad.mlp_forward(d.spec_so, d.params_so, x).data)
    assert np.all(parts["var"].data == so)


def test_floor_propagation():
    d = linear_dtb([3.0, -1.0], -40.0, -40.0)
    g = dtb_forward(d, np.zeros(2))
    floor = np.exp(-12.0) + VAR_FLOOR
    np.testing.assert_allclose(g.var.data, floor * (1 + 9 + 1), rtol=1e-12)


def test_batched_forward_matches_per_point():
    rng = np.random.default_rng(3)
    d = DTBParams.init(3, 2, rng, (5,), (4,))
    X = rng.normal(size=(6, 3))
    gb = dtb_forward(d, X)
    for n in range(6):
        g = dtb_forward(d, X[n])
        np.testing.assert_allclose(gb.mean.data[n], g.mean.data, atol=1e-15)
        np.testing.assert_allclose(gb.var.data[n], g.var.data, atol=1e-15)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 10_000), st.floats(-20, 20))
def test_variance_strictly_positive(seed, scale):
    rng = np.random.default_rng(seed)
    d = DTBParams.init(2, 1, rng, (3,), (3,))
    g = dtb_forward(d, scale * rng.normal(size=(4, 2)))
    assert np.all(g.var.data > 0)


def test_dtb_gradients_match_fd():
    rng = np.random.default_rng(4)
    d = DTBParams.init(2, 2, rng, (3, 3), (3,))
    X = rng.normal(size=(2, 2))

    def loss(a, b, c):
        g = dtb_forward(d, X)
        return ad.tsum(g.mean * g.mean) + ad.tsum(ad.log(g.var))

    assert ad.finite_difference_check(loss, d.stores()) <= 1e-4


def test_shape_validation():
    rng = np.random.default_rng(5)
    spec_mu = MLPSpec((3, 4, 1))
    bad_si = MLPSpec((3, 4, 2))
    with pytest.raises(ShapeError):
        DTBParams(spec_mu, ParamStore.init(spec_mu, rng), bad_si, ParamStore.init(bad_si, rng),
                  MLPSpec((3, 4, 1)), ParamStore.init(MLPSpec((3, 4, 1)), rng))
    d = DTBParams.init(3, 1, rng, (4,), (4,))
    with pytest.raises(ShapeError):
        dtb_forward(d, np.zeros(2))


def test_gaussian_diag_validate():
    with pytest.raises(ContractError):
        GaussianDiag(np.zeros(1), np.array([1e-9])).validate()
    with pytest.raises(NumericError):
        GaussianDiag(np.zeros(1), np.array([np.nan])).validate()
    g = GaussianDiag(np.arange(4.0).reshape(2, 2), np.ones((2, 2)))
    assert len(g.points()) == 2


def test_mc_identity():
    a, e = taylor_variance_mc_check(lambda x: x, 0.0, 0.01, 0.04, 1_000_000,
                                    np.random.default_rng(0))
    assert a == pytest.approx(0.05, abs=1e-15)
    assert abs(e - a) / a < 0.02


def test_mc_sine():
    a, e = taylor_variance_mc_check(ad.sin, 0.3, 0.01, 0.04, 1_000_000, np.random.default_rng(1))
    oracle = np.cos(0.3) ** 2 * 0.01 + 0.04
    assert a == pytest.approx(oracle, rel=1e-12)
    assert abs(oracle - 0.049127) < 1e-6
    assert abs(e - oracle) / oracle < 0.02


def test_mc_numpy_function_falls_back_to_fd():
    a, _ = taylor_variance_mc_check(np.sin, 0.3, 0.01, 0.04, 100_000, np.random.default_rng(2))
    assert a == pytest.approx(np.cos(0.3) ** 2 * 0.01 + 0.04, rel=1e-8)


def test_mc_zero_noise():
    a, e = taylor_variance_mc_check(ad.sin, 0.3, 0.0, 0.0, 100_000, np.random.default_rng(3))
    assert a == 0.0 and e == 0.0


def test_mc_linear_converges():
    oracle = 4.0 * 0.02 + 0.01
    errs = []
    for n in (10_000, 1_000_000):
        _, e = taylor_variance_mc_check(lambda x: 2.0 * x + 1.0, 1.0, 0.02, 0.01, n,
                                        np.random.default_rng(4))
        errs.append(abs(e - oracle) / oracle)
    assert errs[1] < 0.02
