"""Spatial kernels, the AR(1) temporal correlation matrix and the
Kronecker-structured Gaussian log-density built from them.

Conventions: a latent field over ``n`` cells and ``T`` periods is held as
an ``(n, T)`` array ``V`` whose column ``t`` is the field in period ``t``.
The equivalent stacked vector is time-major, ``z = V.T.ravel()``, and its
covariance is ``kron(P, Sigma0)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular
from scipy.spatial.distance import cdist, pdist

from .errors import ConfigError, DuplicateSiteError, FactorisationError

KERNELS = ("exponential", "squared_exponential")
JITTER = 1e-8
LOG2PI = math.log(2 * math.pi)


@dataclass(frozen=True)
class CovParams:
    sigma_sq: float
    phi: float
    rho: float = 0.0
    kernel: str = "exponential"

    def __post_init__(self):
        if self.kernel not in KERNELS:
            raise ConfigError(f"unknown kernel {self.kernel!r}; expected one of {KERNELS}")
        if not (self.sigma_sq > 0 and np.isfinite(self.sigma_sq)):
            raise ConfigError("sigma_sq must be positive")
        if not (self.phi > 0 and np.isfinite(self.phi)):
            raise ConfigError("phi must be positive")
        if not abs(self.rho) < 1:
            raise ConfigError("rho must lie in (-1, 1)")


def _check_kernel(kernel):
    if kernel not in KERNELS:
        raise ConfigError(f"unknown kernel {kernel!r}")


def cov_value(kernel, d, sigma_sq, phi):
    """sigma^2 * h(d; phi) for the exponential or squared exponential kernel."""
    _check_kernel(kernel)
    d = np.asarray(d, dtype=float)
    if kernel == "exponential":
        return sigma_sq * np.exp(-d / phi)
    return sigma_sq * np.exp(-((d / phi) ** 2))


def cov_dphi(kernel, d, sigma_sq, phi):
    """Derivative of :func:`cov_value` with respect to the length scale."""
    d = np.asarray(d, dtype=float)
    c = cov_value(kernel, d, sigma_sq, phi)
    if kernel == "exponential":
        return c * d / phi**2
    return c * 2.0 * d**2 / phi**3


def distance_matrix(coords, other=None):
    coords = np.asarray(coords, dtype=float)
    return cdist(coords, coords if other is None else np.asarray(other, float))


def check_distinct(coords):
    coords = np.asarray(coords, dtype=float)
    if coords.shape[0] > 1 and np.min(pdist(coords)) == 0.0:
        raise DuplicateSiteError("two sites share the same coordinates")


def build_sigma0(coords, params: CovParams, check=True):
    """Dense single-period covariance with a ``1e-8 * sigma^2`` diagonal nugget."""
    if check:
        check_distinct(coords)
    S = cov_value(params.kernel, distance_matrix(coords), params.sigma_sq, params.phi)
    S[np.diag_indices_from(S)] += JITTER * params.sigma_sq
    return S


def cov_derivatives(coords, params: CovParams):
    """Elementwise ``(dSigma0/dsigma_sq, dSigma0/dphi)``."""
    d = distance_matrix(coords)
    d_sig = cov_value(params.kernel, d, 1.0, params.phi)
    d_sig[np.diag_indices_from(d_sig)] += JITTER
    return d_sig, cov_dphi(params.kernel, d, params.sigma_sq, params.phi)


@dataclass(frozen=True)
class TemporalMatrix:
    """AR(1) correlation ``P[s, t] = rho**|s - t|`` with closed-form pieces."""

    rho: float
    T: int
    P: np.ndarray
    R: np.ndarray
    Pinv: np.ndarray
    logdet: float

    def dP(self):
        return temporal_derivative(self.rho, self.T)

    def dR(self):
        """Derivative of the Cholesky factor with respect to rho."""
        T, rho = self.T, self.rho
        out = np.zeros((T, T))
        s = math.sqrt(1.0 - rho * rho)
        for t in range(T):
            out[t, 0] = t * rho ** (t - 1) if t > 0 else 0.0
            for u in range(1, t + 1):
                k = t - u
                dk = k * rho ** (k - 1) if k > 0 else 0.0
                out[t, u] = dk * s - rho**k * rho / s
        return out

    def dPinv(self):
        c = 1.0 / (1.0 - self.rho**2)
        dc = 2.0 * self.rho * c * c
        eye, J, K = tridiagonal_parts(self.T)
        return dc * (eye + self.rho**2 * J - self.rho * K) + c * (2.0 * self.rho * J - K)


def tridiagonal_parts(T):
    """Return (I, J, K) with ``Pinv = (I + rho^2 J - rho K) / (1 - rho^2)``."""
    eye = np.eye(T)
    J = np.eye(T)
    if T >= 1:
        J[0, 0] = 0.0
        J[-1, -1] = 0.0
    K = np.eye(T, k=1) + np.eye(T, k=-1)
    return eye, J, K


def build_temporal(rho: float, T: int) -> TemporalMatrix:
    if not abs(rho) < 1:
        raise ConfigError("rho must lie in (-1, 1)")
    if T < 1:
        raise ConfigError("T must be at least 1")
    idx = np.arange(T)
    lag = np.abs(idx[:, None] - idx[None, :])
    P = float(rho) ** lag.astype(float)
    s = math.sqrt(1.0 - rho * rho)
    R = np.zeros((T, T))
    for t in range(T):
        R[t, 0] = rho**t
        for u in range(1, t + 1):
            R[t, u] = rho ** (t - u) * s
    if T == 1:
        Pinv = np.ones((1, 1))
    else:
        eye, J, K = tridiagonal_parts(T)
        Pinv = (eye + rho * rho * J - rho * K) / (1.0 - rho * rho)
    logdet = (T - 1) * math.log(1.0 - rho * rho)
    return TemporalMatrix(rho=rho, T=T, P=P, R=R, Pinv=Pinv, logdet=logdet)


def temporal_derivative(rho: float, T: int):
    """``dP/drho`` with entries ``|s-t| rho^(|s-t|-1)``."""
    idx = np.arange(T)
    lag = np.abs(idx[:, None] - idx[None, :])
    out = np.zeros((T, T))
    nz = lag > 0
    out[nz] = lag[nz] * rho ** (lag[nz] - 1.0)
    return out


def _as_solver(sigma0_solve):
    if callable(sigma0_solve):
        return sigma0_solve
    cf = cho_factor(np.asarray(sigma0_solve), lower=True)
    return lambda b: cho_solve(cf, b)


def kron_quadratic_form(z, sigma0_solve, P: TemporalMatrix) -> float:
    """``z' kron(P, Sigma0)^-1 z`` without forming the Kronecker product.

    ``sigma0_solve`` is either Sigma0 itself or a callable returning
    ``Sigma0^-1 b`` for a matrix ``b``.
    """
    z = np.asarray(z, dtype=float)
    T = P.T
    if z.size % T:
        raise ConfigError("latent vector length is not a multiple of T")
    V = z.reshape(T, -1).T
    Vt = V @ P.Pinv
    return float(np.sum(V * _as_solver(sigma0_solve)(Vt)))


def kron_log_det(sigma0_log_det: float, P: TemporalMatrix, n: int, T: int) -> float:
    return n * P.logdet + T * sigma0_log_det


class DenseSqrt:
    """Exact Cholesky square root of Sigma0 with its parameter derivatives."""

    kind = "none"

    def __init__(self, coords, params: CovParams):
        self.coords = np.asarray(coords, dtype=float)
        self.params = params
        self.sigma0 = build_sigma0(self.coords, params)
        try:
            self.L = np.linalg.cholesky(self.sigma0)
        except np.linalg.LinAlgError as exc:
            raise FactorisationError(f"Sigma0 is not positive definite: {exc}") from exc
        self._dL_phi = None

    @property
    def n(self):
        return self.L.shape[0]

    @property
    def dim(self):
        return self.L.shape[0]

    @property
    def log_det(self):
        return 2.0 * float(np.sum(np.log(np.diag(self.L))))

    def apply(self, X):
        return self.L @ X

    def apply_t(self, G):
        return self.L.T @ G

    def dapply(self, X, param):
        if param == "sigma_sq":
            return (self.L @ X) / (2.0 * self.params.sigma_sq)
        if self._dL_phi is None:
            _, dS = cov_derivatives(self.coords, self.params)
            Li_dS = solve_triangular(self.L, dS, lower=True)
            inner = solve_triangular(self.L, Li_dS.T, lower=True).T
            phi_low = np.tril(inner)
            phi_low[np.diag_indices_from(phi_low)] *= 0.5
            self._dL_phi = self.L @ phi_low
        return self._dL_phi @ X

    def dense(self):
        return self.L


def gaussian_loglik(V, sigma0, P: TemporalMatrix, weights=None) -> float:
    """Weighted mean over draws of log N(vec(V); 0, kron(P, Sigma0)).

    ``V`` has shape ``(S, n, T)`` (or ``(n, T)`` for a single draw).
    """
    V = np.asarray(V, float)
    if V.ndim == 2:
        V = V[None]
    S, n, T = V.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
    cf = cho_factor(sigma0, lower=True)
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    quad = 0.0
    for s in range(S):
        quad += w[s] * np.sum(V[s] * cho_solve(cf, V[s] @ P.Pinv))
    return -0.5 * (n * T * LOG2PI + kron_log_det(logdet0, P, n, T) + quad)


def gaussian_gradients(V, coords, params: CovParams, weights=None):
    """Exact gradient of :func:`gaussian_loglik` in ``(sigma_sq, phi, rho)``."""
    V = np.asarray(V, float)
    if V.ndim == 2:
        V = V[None]
    S, n, T = V.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
    P = build_temporal(params.rho, T)
    sigma0 = build_sigma0(coords, params)
    cf = cho_factor(sigma0, lower=True)
    Sinv = cho_solve(cf, np.eye(n))
    dPinv = P.dPinv()
    G = np.zeros((n, n))
    Hrho = 0.0
    for s in range(S):
        W = cho_solve(cf, V[s])
        G += w[s] * (W @ P.Pinv @ W.T)
        Hrho += w[s] * np.sum(V[s] * (W @ dPinv))
    out = []
    for dS in cov_derivatives(coords, params):
        out.append(-0.5 * T * np.sum(Sinv * dS) + 0.5 * np.sum(G * dS))
    dP = P.dP()
    out.append(-0.5 * n * np.trace(P.Pinv @ dP) - 0.5 * Hrho)
    return tuple(float(g) for g in out)


class LatentMoments:
    """Weighted second-moment statistics of latent draws.

    For draws ``V_s`` with weights ``w_s`` this stores ``M0 = sum w V V'``,
    ``MJ = sum w V J V'`` and ``MK = sum w V K V'`` so that
    ``sum w V Pinv(rho) V'`` is available for any rho in O(n^2).
    """

    def __init__(self, V, weights=None):
        V = np.asarray(V, float)
        if V.ndim == 2:
            V = V[None]
        S, n, T = V.shape
        w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
        self.n, self.T = n, T
        self.total_weight = float(w.sum())
        Vw = V * np.sqrt(w)[:, None, None]
        flat = Vw.transpose(1, 0, 2).reshape(n, S * T)
        self.M0 = flat @ flat.T
        if T > 1:
            inner = Vw[:, :, 1:-1].transpose(1, 0, 2).reshape(n, -1)
            self.MJ = inner @ inner.T
            a = Vw[:, :, :-1].transpose(1, 0, 2).reshape(n, -1)
            b = Vw[:, :, 1:].transpose(1, 0, 2).reshape(n, -1)
            ab = a @ b.T
            self.MK = ab + ab.T
        else:
            self.MJ = np.zeros((n, n))
            self.MK = np.zeros((n, n))

    def weighted(self, rho):
        if self.T == 1:
            return self.M0
        c = 1.0 / (1.0 - rho * rho)
        return c * (self.M0 + rho * rho * self.MJ - rho * self.MK)

    def dweighted(self, rho):
        if self.T == 1:
            return np.zeros_like(self.M0)
        c = 1.0 / (1.0 - rho * rho)
        dc = 2.0 * rho * c * c
        return dc * (self.M0 + rho * rho * self.MJ - rho * self.MK) + c * (2.0 * rho * self.MJ - self.MK)


def dense_objective(moments: LatentMoments, coords, params: CovParams, grad=False):
    """Averaged Gaussian log-density (and optionally its gradient) from moments."""
    n, T = moments.n, moments.T
    sigma0 = build_sigma0(coords, params, check=False)
    try:
        cf = cho_factor(sigma0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorisationError(f"Sigma0 is not positive definite: {exc}") from exc
    logdet0 = 2.0 * float(np.sum(np.log(np.diag(cf[0]))))
    P = build_temporal(params.rho, T)
    Sw = moments.weighted(params.rho)
    SinvSw = cho_solve(cf, Sw)
    ll = -0.5 * (n * T * LOG2PI + kron_log_det(logdet0, P, n, T) + np.trace(SinvSw))
    if not grad:
        return ll
    Sinv = cho_solve(cf, np.eye(n))
    G = SinvSw @ Sinv
    g = []
    for dS in cov_derivatives(coords, params):
        g.append(-0.5 * T * np.sum(Sinv * dS) + 0.5 * np.sum(G * dS))
    dP = P.dP()
    g.append(-0.5 * n * np.trace(P.Pinv @ dP) - 0.5 * np.sum(Sinv * moments.dweighted(params.rho)))
    return ll, np.array(g)


@dataclass
class Semivariogram:
    bin_centres: np.ndarray
    semivariance: np.ndarray
    n_pairs: np.ndarray

    def to_csv(self, path):
        with open(path, "w") as fh:
            fh.write("bin_center,semivariance,n_pairs\n")
            for c, g, k in zip(self.bin_centres, self.semivariance, self.n_pairs):
                fh.write(f"{c:.17g},{g:.17g},{int(k)}\n")


def semivariogram(coords, values, n_bins=10, max_dist=None) -> Semivariogram:
    """Matheron estimator over equal-width distance bins.

    The default cutoff is half the largest pairwise distance, but never
    below the smallest one, so at least one pair is always binned.
    """
    coords = np.asarray(coords, float)
    values = np.asarray(values, float)
    if coords.shape[0] < 2:
        raise ConfigError("semivariogram needs at least two sites")
    d = pdist(coords)
    sq = pdist(values[:, None], "sqeuclidean")
    if max_dist is None:
        max_dist = max(d.max() / 2.0, d[d > 0].min() if np.any(d > 0) else d.max())
    edges = np.linspace(0.0, max_dist, n_bins + 1)
    keep = (d > 0) & (d <= max_dist)
    b = np.clip(np.searchsorted(edges, d[keep], side="left") - 1, 0, n_bins - 1)
    counts = np.bincount(b, minlength=n_bins)
    sums = np.bincount(b, weights=sq[keep], minlength=n_bins)
    with np.errstate(invalid="ignore", divide="ignore"):
        gamma = np.where(counts > 0, sums / (2.0 * counts), np.nan)
    return Semivariogram(0.5 * (edges[:-1] + edges[1:]), gamma, counts)


def empirical_semivariogram(grid, column, n_bins=10, period=0) -> Semivariogram:
    vals = grid.values(column)[:, period]
    return semivariogram(grid.centres, vals, n_bins)
