"""Hilbert-space reduced-rank approximation of the spatial covariance.

Coordinates are mapped to [-1, 1]^2 and the Laplacian eigenproblem is
solved on the box [-L, L]^2 with ``L = c``.  The covariance is then
``Phi diag(S(omega)) Phi'`` where ``Phi`` holds tensor-product sine
eigenfunctions and ``S`` is the kernel's spectral density at the
eigenfrequencies.  ``Phi`` depends only on the geometry; only the
diagonal scaling changes with the covariance parameters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import gammaln

from .covariance import CovParams, TemporalMatrix
from .errors import ConfigError

DEFAULT_BASIS = 15
DEFAULT_BOUNDARY = 2.0


@dataclass(frozen=True)
class CoordScaling:
    centre: np.ndarray
    half_range: np.ndarray

    def transform(self, coords):
        return (np.asarray(coords, float) - self.centre) / self.half_range

    @property
    def conversion_factors(self):
        """Multiply a scaled length by these to get original units, per axis."""
        return self.half_range.copy()


def scale_coords(coords):
    """Centre the coordinates and divide by the larger half-range.

    The longer axis maps onto [-1, 1]; a single scale factor for both axes
    keeps an isotropic kernel isotropic.
    """
    coords = np.asarray(coords, dtype=float)
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    half = float(np.max(hi - lo)) / 2.0
    if not half > 0:
        raise ConfigError("coordinates have zero extent")
    scaling = CoordScaling(centre=(lo + hi) / 2.0, half_range=np.full(coords.shape[1], half))
    return scaling.transform(coords), scaling


def eigenvalues_1d(m, L):
    j = np.arange(1, m + 1)
    return (j * math.pi / (2.0 * L)) ** 2


def eigenfunctions_1d(x, m, L):
    """``(len(x), m)`` matrix of ``L^-1/2 sin(sqrt(lambda_j) (x + L))``."""
    x = np.asarray(x, dtype=float)
    lam = eigenvalues_1d(m, L)
    return np.sin(np.sqrt(lam)[None, :] * (x[:, None] + L)) / math.sqrt(L)


def eigenpairs_1d(m, L):
    lam = eigenvalues_1d(m, L)
    return lam, lambda x: eigenfunctions_1d(x, m, L)


def spectral_density(kernel, omega, sigma_sq, phi, D=2):
    """Spectral density of the package's kernels, ``k(r) = (2 pi)^-D int S e^{i w r}``.

    The squared exponential kernel here is ``exp(-d^2 / phi^2)``, i.e. a
    Gaussian with standard length scale ``phi / sqrt(2)``.  The exponential
    kernel is Matern 1/2 with inverse range ``1 / phi``.
    """
    omega = np.asarray(omega, dtype=float)
    if kernel == "squared_exponential":
        return sigma_sq * math.pi ** (D / 2) * phi**D * np.exp(-(phi**2) * omega**2 / 4.0)
    if kernel == "exponential":
        kappa = 1.0 / phi
        logc = D * math.log(2.0) + (D - 1) / 2 * math.log(math.pi) + gammaln((D + 1) / 2)
        return sigma_sq * math.exp(logc) * kappa * (kappa**2 + omega**2) ** (-(D + 1) / 2)
    raise ConfigError(f"unknown kernel {kernel!r}")


def spectral_density_dphi(kernel, omega, sigma_sq, phi, D=2):
    S = spectral_density(kernel, omega, sigma_sq, phi, D)
    omega = np.asarray(omega, dtype=float)
    if kernel == "squared_exponential":
        return S * (D / phi - phi * omega**2 / 2.0)
    return S * (-1.0 / phi + (D + 1) / (phi * (1.0 + phi**2 * omega**2)))


@dataclass(frozen=True)
class HsgpBasis:
    """Tensor eigenfunctions evaluated at scaled coordinates.

    Column ``k`` corresponds to the index pair ``index[k] = (j1, j2)``
    (1-based, ``j1`` major).  ``sqrt_lambda[k]`` holds the per-axis
    square-root eigenvalues and ``omega[k]`` their Euclidean norm.
    """

    Phi: np.ndarray
    sqrt_lambda: np.ndarray
    omega: np.ndarray
    index: np.ndarray
    m: int
    L: float

    @property
    def n_basis(self):
        return self.Phi.shape[1]

    def diagnostics(self):
        return {
            "m": self.m,
            "L": self.L,
            "index": self.index.tolist(),
            "omega": self.omega.tolist(),
        }


def build_basis(scaled_coords, m: int = DEFAULT_BASIS, c: float = DEFAULT_BOUNDARY) -> HsgpBasis:
    if m < 1:
        raise ConfigError("number of basis functions must be at least 1")
    if not c > 1:
        raise ConfigError("boundary factor c must exceed 1")
    pts = np.asarray(scaled_coords, dtype=float)
    L = float(c)
    fx = eigenfunctions_1d(pts[:, 0], m, L)
    fy = eigenfunctions_1d(pts[:, 1], m, L)
    Phi = (fx[:, :, None] * fy[:, None, :]).reshape(pts.shape[0], m * m)
    sl = np.sqrt(eigenvalues_1d(m, L))
    j1, j2 = np.meshgrid(np.arange(m), np.arange(m), indexing="ij")
    sqrt_lambda = np.column_stack([sl[j1.ravel()], sl[j2.ravel()]])
    index = np.column_stack([j1.ravel() + 1, j2.ravel() + 1])
    return HsgpBasis(
        Phi=Phi,
        sqrt_lambda=sqrt_lambda,
        omega=np.hypot(sqrt_lambda[:, 0], sqrt_lambda[:, 1]),
        index=index,
        m=m,
        L=L,
    )


class HsgpSqrt:
    """Low-rank square root ``Phi Lambda^(1/2)`` of Sigma0."""

    kind = "hsgp"

    def __init__(self, basis: HsgpBasis, params: CovParams, length_scale: float = 1.0):
        # ``params.phi`` is in original units; the basis lives in scaled
        # coordinates where lengths are divided by ``length_scale``.
        self.basis = basis
        self.params = params
        phi = params.phi / length_scale
        spec = spectral_density(params.kernel, basis.omega, params.sigma_sq, phi)
        self.sqrt_spec = np.sqrt(spec)
        self.M = basis.Phi * self.sqrt_spec[None, :]
        dphi = spectral_density_dphi(params.kernel, basis.omega, params.sigma_sq, phi) / length_scale
        self.dsqrt = {
            "sigma_sq": self.sqrt_spec / (2.0 * params.sigma_sq),
            "phi": 0.5 * dphi / self.sqrt_spec,
        }

    @property
    def n(self):
        return self.M.shape[0]

    @property
    def dim(self):
        return self.M.shape[1]

    def apply(self, X):
        return self.M @ X

    def apply_t(self, G):
        return self.M.T @ G

    def dapply(self, X, param):
        return (self.basis.Phi * self.dsqrt[param][None, :]) @ X

    def dense(self):
        return self.M

    def covariance(self):
        return self.M @ self.M.T


def _beta_matrix(beta, k, T):
    beta = np.asarray(beta, dtype=float)
    if beta.ndim == 2:
        return beta
    if beta.size != k * T:
        raise ConfigError(f"beta has length {beta.size}, expected {k * T}")
    return beta.reshape(T, k).T


def hsgp_linear_predictor(sqrt_op: HsgpSqrt, P: TemporalMatrix, beta):
    """``kron(R, Phi Lambda^1/2) beta`` as a time-major vector."""
    B = _beta_matrix(beta, sqrt_op.dim, P.T)
    return (sqrt_op.apply(B) @ P.R.T).T.ravel()


def hsgp_gradient(y, lam, sqrt_op: HsgpSqrt, P: TemporalMatrix, beta):
    """Derivative of the Poisson log-likelihood in ``(sigma_sq, phi)`` through Lambda^1/2.

    ``y`` and ``lam`` are ``(n, T)``; ``beta`` is one coefficient draw.
    """
    resid = np.asarray(y, float) - np.asarray(lam, float)
    B = _beta_matrix(beta, sqrt_op.dim, P.T)
    BR = B @ P.R.T
    return tuple(float(np.sum(resid * sqrt_op.dapply(BR, p))) for p in ("sigma_sq", "phi"))
