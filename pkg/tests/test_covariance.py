import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import multivariate_normal

from stlgcp.covariance import (
    CovParams,
    DenseSqrt,
    LatentMoments,
    build_sigma0,
    build_temporal,
    dense_objective,
    gaussian_gradients,
    gaussian_loglik,
    kron_log_det,
    kron_quadratic_form,
    semivariogram,
)
from stlgcp.errors import ConfigError, DuplicateSiteError


def test_kernel_values():
    c = np.array([[0.0, 0.0], [0.3, 0.4]])
    S = build_sigma0(c, CovParams(2.0, 0.25))
    assert S[0, 1] == pytest.approx(2.0 * math.exp(-2.0))
    S = build_sigma0(c, CovParams(2.0, 0.5, kernel="squared_exponential"))
    assert S[0, 1] == pytest.approx(2.0 * math.exp(-1.0))  # (0.5 / 0.5)^2
    assert S[0, 0] == pytest.approx(2.0 * (1 + 1e-8))


def test_parameter_validation():
    with pytest.raises(ConfigError):
        CovParams(-1.0, 1.0)
    with pytest.raises(ConfigError):
        CovParams(1.0, 1.0, rho=1.0)
    with pytest.raises(ConfigError):
        CovParams(1.0, 1.0, kernel="matern52")
    with pytest.raises(DuplicateSiteError):
        build_sigma0(np.zeros((2, 2)), CovParams(1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.floats(-0.95, 0.95), st.integers(1, 6))
def test_ar1_closed_forms(rho, T):
    P = build_temporal(rho, T)
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    oracle = rho ** lag.astype(float)
    assert np.allclose(P.P, oracle, atol=1e-12)
    assert np.allclose(P.R @ P.R.T, oracle, atol=1e-12)
    assert np.allclose(P.Pinv @ oracle, np.eye(T), atol=1e-8)
    sign, ld = np.linalg.slogdet(oracle)
    assert ld == pytest.approx(P.logdet, abs=1e-10)


def test_temporal_derivatives_finite_difference():
    T, rho, h = 4, 0.37, 1e-6
    for name in ("P", "R", "Pinv"):
        hi = getattr(build_temporal(rho + h, T), name)
        lo = getattr(build_temporal(rho - h, T), name)
        fd = (hi - lo) / (2 * h)
        an = {"P": build_temporal(rho, T).dP, "R": build_temporal(rho, T).dR,
              "Pinv": build_temporal(rho, T).dPinv}[name]()
        assert np.allclose(an, fd, atol=1e-6), name


def test_gaussian_loglik_matches_scipy(rng):
    coords = rng.random((5, 2))
    params = CovParams(0.8, 0.3, rho=0.4)
    V = rng.normal(size=(3, 5, 3))
    S0 = build_sigma0(coords, params)
    P = build_temporal(0.4, 3)
    cov = np.kron(P.P, S0)
    oracle = np.mean([multivariate_normal(np.zeros(15), cov).logpdf(v.T.ravel()) for v in V])
    assert gaussian_loglik(V, S0, P) == pytest.approx(oracle, rel=1e-10)
    # moment-based objective agrees
    assert dense_objective(LatentMoments(V), coords, params) == pytest.approx(oracle, rel=1e-10)


def test_dense_objective_gradient_matches_direct(rng):
    coords = rng.random((6, 2))
    params = CovParams(0.8, 0.3, rho=-0.2)
    V = rng.normal(size=(4, 6, 2))
    w = rng.dirichlet(np.ones(4))
    _, g = dense_objective(LatentMoments(V, w), coords, params, grad=True)
    assert np.allclose(g, gaussian_gradients(V, coords, params, w), rtol=1e-9)


def test_kron_helpers_small(rng):
    S0 = build_sigma0(rng.random((3, 2)), CovParams(1.2, 0.4))
    P = build_temporal(0.3, 2)
    z = rng.normal(size=6)
    full = np.kron(P.P, S0)
    assert kron_quadratic_form(z, S0, P) == pytest.approx(z @ np.linalg.solve(full, z), rel=1e-10)
    ld0 = np.linalg.slogdet(S0)[1]
    assert kron_log_det(ld0, P, 3, 2) == pytest.approx(np.linalg.slogdet(full)[1], rel=1e-10)


def test_dense_sqrt_derivative(rng):
    coords = rng.random((5, 2))
    X = rng.normal(size=(5, 2))
    h = 1e-6
    op = DenseSqrt(coords, CovParams(0.7, 0.4))
    for p, (a, b) in {"sigma_sq": ((0.7 + h, 0.4), (0.7 - h, 0.4)), "phi": ((0.7, 0.4 + h), (0.7, 0.4 - h))}.items():
        fd = (DenseSqrt(coords, CovParams(*a)).apply(X) - DenseSqrt(coords, CovParams(*b)).apply(X)) / (2 * h)
        assert np.allclose(op.dapply(X, p), fd, atol=1e-6)


def test_semivariogram_hand_computed():
    coords = np.array([[0.0, 0.0], [1.0, 0.0], [2.0, 0.0]])
    vals = np.array([0.0, 1.0, 3.0])
    sv = semivariogram(coords, vals, n_bins=2, max_dist=2.0)
    # distance 1 pairs: (0,1), (1,2) -> (1 + 4) / (2 * 2); distance 2 pair: 9 / 2
    assert sv.n_pairs.tolist() == [2, 1]
    assert sv.semivariance.tolist() == pytest.approx([1.25, 4.5])
    assert sv.bin_centres.tolist() == pytest.approx([0.5, 1.5])
