import numpy as np
import pytest
from scipy.stats import poisson

from stlgcp.errors import ConfigError, UncoveredRegionError, UnknownCovariateError
from stlgcp.geometry import Polygon, build_grid, compute_intersections
from stlgcp.model import (
    LgcpModel,
    ModelSpec,
    build_cstar,
    build_region_design,
    poisson_glm_start,
    poisson_loglik,
    region_intensity,
)

from conftest import simulate_grid


def test_poisson_loglik_matches_scipy(rng):
    y = rng.poisson(3.0, size=(4, 2))
    eta = rng.normal(size=(4, 2))
    assert poisson_loglik(y, eta) == pytest.approx(poisson.logpmf(y, np.exp(eta)).sum())


def test_spec_defaults():
    assert ModelSpec().m == 15
    assert ModelSpec(approximation="hsgp").m == 10
    assert ModelSpec(known_theta=(1.0, 0.2)).known_theta == (1.0, 0.2, 0.0)
    with pytest.raises(ConfigError):
        ModelSpec(approximation="inla")


def test_grid_model_loglik(rng):
    g, Z = simulate_grid(0, cellsize=0.25)
    spec = ModelSpec(covariates=["x"], offset="off")
    m = LgcpModel.from_grid(g, spec)
    gamma = np.array([-0.4, 0.2])
    lam = 20.0 * np.exp(gamma[0] + gamma[1] * g.covariates["x"] + Z)
    assert m.loglik(gamma, Z) == pytest.approx(poisson.logpmf(g.counts, lam).sum(), rel=1e-12)
    stack = np.stack([Z, 0 * Z])
    assert np.allclose(m.loglik(gamma, stack), [m.loglik(gamma, Z), m.loglik(gamma, 0 * Z)])


def test_unknown_covariate(unit_square):
    g = build_grid(unit_square, 0.5)
    with pytest.raises(UnknownCovariateError):
        LgcpModel.from_grid(g, ModelSpec(covariates=["nope"]))


def _two_region_model(rng, T=2):
    g = build_grid(Polygon([(0, 0), (1, 0), (1, 1), (0, 1)]), 0.5)
    left = Polygon([(0, 0), (0.3, 0), (0.3, 1), (0, 1)])
    right = Polygon([(0.3, 0), (1, 0), (1, 1), (0.3, 1)])
    imap = compute_intersections(g, [left, right])
    y = rng.poisson(5.0, size=(2, T))
    off = np.array([[2.0] * T, [3.0] * T])
    cov = {"z": rng.normal(size=(2, T))}
    m = LgcpModel.from_regions(g, imap, y, ModelSpec(region_covariates=["z"]), cov, off)
    return g, imap, m, off, cov


def test_region_intensity_oracle(rng):
    g, imap, m, off, cov = _two_region_model(rng)
    gamma = np.array([0.1, 0.5])
    Z = rng.normal(size=(g.n, 2))
    # hand computation: lambda_j = off_j exp(g0 + g1 z_j) sum_i w_ij exp(Z_i)
    expected = np.zeros((2, 2))
    for c, r, w in zip(imap.cell, imap.region, imap.weight):
        expected[r] += off[r] * np.exp(gamma[0] + gamma[1] * cov["z"][r]) * w * np.exp(Z[c])
    assert np.allclose(m.intensity(gamma, Z), expected)
    # matrix form with C = B'A
    d = m.design
    assert np.allclose(d.C.toarray(), (d.B.T @ d.A).toarray())
    mu_R = off * np.exp(gamma[0] + gamma[1] * cov["z"])
    assert np.allclose(region_intensity(d, mu_R, np.ones((g.n, 2)), np.exp(Z)), expected)
    cstar = build_cstar(d, mu_R, np.ones((g.n, 2)))
    assert np.allclose(cstar[1] @ np.exp(Z[:, 1]), expected[:, 1])


def test_region_latent_gradient_finite_difference(rng):
    g, imap, m, _, _ = _two_region_model(rng)
    gamma = np.array([0.1, 0.5])
    Z = rng.normal(size=(g.n, 2)) * 0.5
    G = m.grad_latent(gamma, Z)
    h = 1e-6
    for i in range(g.n):
        for t in range(2):
            E = np.zeros_like(Z)
            E[i, t] = h
            fd = (m.loglik(gamma, Z + E) - m.loglik(gamma, Z - E)) / (2 * h)
            assert G[i, t] == pytest.approx(fd, rel=1e-6, abs=1e-8)


def test_gamma_terms_finite_difference(rng):
    g, imap, m, _, _ = _two_region_model(rng)
    Zs = rng.normal(size=(3, g.n, 2)) * 0.3
    w = np.array([0.2, 0.3, 0.5])
    gamma = np.array([0.1, -0.2])
    ll, grad, hess = m.gamma_terms(gamma, Zs, w)
    assert ll == pytest.approx(w @ m.loglik(gamma, Zs))
    h = 1e-5
    for k in range(2):
        e = np.eye(2)[k] * h
        lp, gp, _ = m.gamma_terms(gamma + e, Zs, w)
        lm, gm, _ = m.gamma_terms(gamma - e, Zs, w)
        assert grad[k] == pytest.approx((lp - lm) / (2 * h), rel=1e-6)
        assert np.allclose(hess[:, k], (gp - gm) / (2 * h), rtol=1e-5, atol=1e-7)


def test_uncovered_region_rejected(unit_square):
    g = build_grid(unit_square, 0.5)
    far = Polygon([(5, 5), (6, 5), (6, 6), (5, 6)])
    imap = compute_intersections(g, [unit_square, far])
    with pytest.raises(UncoveredRegionError):
        build_region_design(imap, g.n, 2, 1)


def test_glm_start_recovers_intercept(unit_square):
    g = build_grid(unit_square, 0.25)
    g.counts = np.full((g.n, 1), 7)
    m = LgcpModel.from_grid(g, ModelSpec())
    assert poisson_glm_start(m)[0] == pytest.approx(np.log(7.0))
