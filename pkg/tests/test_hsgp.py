import math

import numpy as np
import pytest
from scipy import integrate

from stlgcp.covariance import CovParams, build_temporal
from stlgcp.hsgp import (
    HsgpSqrt,
    build_basis,
    eigenfunctions_1d,
    eigenvalues_1d,
    hsgp_gradient,
    hsgp_linear_predictor,
    scale_coords,
    spectral_density,
)


def test_eigenfunctions_orthonormal_on_box():
    L, m = 1.7, 5
    x = np.linspace(-L, L, 20001)
    F = eigenfunctions_1d(x, m, L)
    G = integrate.trapezoid(F[:, :, None] * F[:, None, :], x, axis=0)
    assert np.allclose(G, np.eye(m), atol=1e-6)
    # Laplacian eigenvalue: -f'' = lambda f
    h = x[1] - x[0]
    d2 = (F[2:] - 2 * F[1:-1] + F[:-2]) / h**2
    lam = eigenvalues_1d(m, L)
    assert np.allclose(-d2[5000:5005], lam * F[1:-1][5000:5005], atol=1e-4)


def test_squared_exponential_density_inverts_to_kernel():
    # 2-D isotropic Hankel transform: k(r) = (2 pi)^-1 int_0^inf S(w) J0(w r) w dw
    from scipy.special import j0

    s2, phi = 1.3, 0.6
    for r in (0.0, 0.3, 0.9):
        val, _ = integrate.quad(lambda w: spectral_density("squared_exponential", w, s2, phi) * j0(w * r) * w,
                                0, np.inf)
        assert val / (2 * math.pi) == pytest.approx(s2 * math.exp(-((r / phi) ** 2)), rel=1e-7)


def test_exponential_density_closed_form():
    # 2-D Matern-1/2 density: 2 pi kappa s2 / (kappa^2 + w^2)^(3/2); its integral gives k(0) = s2
    s2, phi = 1.3, 0.6
    kappa = 1 / phi
    w = np.linspace(0, 30, 7)
    expected = 2 * math.pi * kappa * s2 / (kappa**2 + w**2) ** 1.5
    assert np.allclose(spectral_density("exponential", w, s2, phi), expected, rtol=1e-12)
    val, _ = integrate.quad(lambda v: spectral_density("exponential", v, s2, phi) * v, 0, np.inf)
    assert val / (2 * math.pi) == pytest.approx(s2, rel=1e-8)


def test_scaling_is_isotropic():
    c = np.array([[0.0, 0.0], [4.0, 1.0]])
    scaled, s = scale_coords(c)
    assert np.allclose(scaled, [[-1.0, -0.25], [1.0, 0.25]])
    assert np.allclose(s.conversion_factors, [2.0, 2.0])


def test_sqrt_and_derivative(rng):
    pts = rng.random((30, 2))
    scaled, s = scale_coords(pts)
    basis = build_basis(scaled, m=6, c=1.5)
    ls = float(s.half_range[0])
    op = HsgpSqrt(basis, CovParams(0.8, 0.3), ls)
    X = rng.normal(size=(36, 2))
    assert np.allclose(op.covariance(), op.dense() @ op.dense().T)
    h = 1e-6
    fd = (HsgpSqrt(basis, CovParams(0.8, 0.3 + h), ls).apply(X) - HsgpSqrt(basis, CovParams(0.8, 0.3 - h), ls).apply(X)) / (2 * h)
    assert np.allclose(op.dapply(X, "phi"), fd, atol=1e-6)


def test_linear_predictor_is_kronecker(rng):
    pts = rng.random((9, 2))
    scaled, s = scale_coords(pts)
    op = HsgpSqrt(build_basis(scaled, 3), CovParams(1.0, 0.5), float(s.half_range[0]))
    P = build_temporal(0.4, 2)
    beta = rng.normal(size=18)
    assert np.allclose(hsgp_linear_predictor(op, P, beta), np.kron(P.R, op.dense()) @ beta)


def test_poisson_gradient_matches_finite_difference(rng):
    pts = rng.random((15, 2))
    scaled, s = scale_coords(pts)
    basis = build_basis(scaled, 4)
    ls = float(s.half_range[0])
    P = build_temporal(0.3, 2)
    beta = rng.normal(size=32)
    y = rng.poisson(2.0, size=(15, 2)).astype(float)

    def ll(s2, phi):
        eta = hsgp_linear_predictor(HsgpSqrt(basis, CovParams(s2, phi), ls), P, beta).reshape(2, 15).T
        return float(np.sum(y * eta - np.exp(eta)))

    op = HsgpSqrt(basis, CovParams(0.5, 0.4), ls)
    lam = np.exp(hsgp_linear_predictor(op, P, beta).reshape(2, 15).T)
    g = hsgp_gradient(y, lam, op, P, beta)
    h = 1e-6
    assert g[0] == pytest.approx((ll(0.5 + h, 0.4) - ll(0.5 - h, 0.4)) / (2 * h), rel=1e-5)
    assert g[1] == pytest.approx((ll(0.5, 0.4 + h) - ll(0.5, 0.4 - h)) / (2 * h), rel=1e-5)
