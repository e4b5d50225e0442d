"""Poisson observation model on the grid or on aggregated regions.

Both model types share one representation.  Each "intersection" ``k``
links a grid cell ``cell[k]`` to an observation unit ``unit[k]`` and
carries a log-linear predictor

    eta[k, t] = log_exposure[k, t] + X[k, t] @ gamma + Z[cell[k], t]

and each unit's intensity is the sum of ``exp(eta)`` over its
intersections.  For grid data there is one intersection per cell and the
exposure is the offset; for region data the exposure is the region
offset times the area weight ``w_ij``, and ``X`` concatenates the region
covariates (intercept first) with the cell covariates.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.special import gammaln

from .errors import ConfigError, NumericError, UncoveredRegionError, UnknownCovariateError

ETA_CLAMP = 50.0


@dataclass
class ModelSpec:
    covariates: list = field(default_factory=list)
    region_covariates: list = field(default_factory=list)
    offset: str | None = None
    approximation: str = "nngp"
    kernel: str = "exponential"
    m: int | None = None
    c: float = 2.0
    known_theta: tuple | None = None

    def __post_init__(self):
        if self.approximation not in ("nngp", "hsgp", "none"):
            raise ConfigError(f"unknown approximation {self.approximation!r}")
        if self.m is None:
            self.m = 10 if self.approximation == "hsgp" else 15
        if self.known_theta is not None:
            self.known_theta = tuple(float(v) for v in self.known_theta)
            if len(self.known_theta) == 2:
                self.known_theta = self.known_theta + (0.0,)


def poisson_loglik(y, eta) -> float:
    """``sum(y * eta - exp(eta) - log(y!))``."""
    y = np.asarray(y, dtype=float)
    eta = np.asarray(eta, dtype=float)
    if not np.all(np.isfinite(eta)):
        raise NumericError("non-finite linear predictor")
    return float(np.sum(y * eta - np.exp(eta) - gammaln(y + 1.0)))


@dataclass
class RegionDesign:
    """Sparse region/intersection/grid incidence matrices.

    ``A`` is q x r (intersection to region), ``B`` is q x n (intersection
    to cell), ``w`` the area weights and ``C = B' A`` (n x r).
    """

    A: sp.csr_matrix
    B: sp.csr_matrix
    w: np.ndarray
    C: sp.csr_matrix
    T: int

    @property
    def weighted_C(self):
        return (self.B.T @ sp.diags(self.w) @ self.A).tocsr()


def build_region_design(imap, n: int, r: int, T: int) -> RegionDesign:
    q = imap.q
    present = np.bincount(imap.region, minlength=r)
    if np.any(present == 0):
        missing = np.flatnonzero(present == 0).tolist()
        raise UncoveredRegionError(f"regions with no grid intersection: {missing}")
    ones = np.ones(q)
    A = sp.csr_matrix((ones, (np.arange(q), imap.region)), shape=(q, r))
    B = sp.csr_matrix((ones, (np.arange(q), imap.cell)), shape=(q, n))
    design = RegionDesign(A=A, B=B, w=np.asarray(imap.weight, float), C=(B.T @ A).tocsr(), T=T)
    if np.any(np.asarray(A.sum(axis=1)).ravel() != 1) or np.any(np.asarray(B.sum(axis=1)).ravel() != 1):
        raise ConfigError("each intersection must map to one region and one cell")
    if np.any(np.abs(A.T @ design.w - 1.0) > 1e-9):
        raise ConfigError("area weights do not sum to one within each region")
    return design


def region_intensity(design: RegionDesign, mu_R, mu_S, mu_Z):
    """``mu_R * (C_w' (mu_S * mu_Z))`` per period, with weights folded into C."""
    mu_R, mu_S, mu_Z = (np.asarray(a, float) for a in (mu_R, mu_S, mu_Z))
    Cw = design.weighted_C
    if mu_S.shape != mu_Z.shape or mu_S.shape[0] != Cw.shape[0] or mu_R.shape[0] != Cw.shape[1]:
        raise ConfigError("intensity components do not match the design")
    return mu_R * (Cw.T @ (mu_S * mu_Z))


def build_cstar(design: RegionDesign, mu_R, mu_S):
    """Per-period sparse ``diag(mu_R[:, t]) C_w' diag(mu_S[:, t])`` (r x n)."""
    Ct = design.weighted_C.T.tocsr()
    mu_R = np.asarray(mu_R, float)
    mu_S = np.asarray(mu_S, float)
    return [(sp.diags(mu_R[:, t]) @ Ct @ sp.diags(mu_S[:, t])).tocsr() for t in range(mu_R.shape[1])]


class LgcpModel:
    """Data and likelihood for a grid or region LGCP.

    Latent fields ``Z`` are ``(n, T)`` arrays or stacks ``(S, n, T)``.
    """

    def __init__(self, y, X, log_exposure, cell, unit, coords, names, n_units, is_region=False, design=None):
        self.y = np.asarray(y, float)
        self.X = np.asarray(X, float)
        self.log_exposure = np.asarray(log_exposure, float)
        self.cell = np.asarray(cell, np.int64)
        self.unit = np.asarray(unit, np.int64)
        self.coords = np.asarray(coords, float)
        self.names = list(names)
        self.n = self.coords.shape[0]
        self.u = int(n_units)
        self.T = self.y.shape[1]
        self.q = self.cell.size
        self.is_region = is_region
        self.design = design
        self.identity = (not is_region) and self.q == self.n and np.array_equal(self.cell, np.arange(self.n))
        if self.identity:
            self.agg = None
            self.cellsum = None
        else:
            ones = np.ones(self.q)
            self.agg = sp.csr_matrix((ones, (self.unit, np.arange(self.q))), shape=(self.u, self.q))
            self.cellsum = sp.csr_matrix((ones, (self.cell, np.arange(self.q))), shape=(self.n, self.q))
        self.lgy = gammaln(self.y + 1.0)
        self.clamp_events = 0
        if self.y.shape != (self.u, self.T):
            raise ConfigError("count matrix does not match the number of units")
        if np.any(self.y < 0) or not np.all(np.isfinite(self.y)):
            raise ConfigError("counts must be finite and non-negative")

    @property
    def n_coef(self):
        return self.X.shape[2]

    @classmethod
    def from_grid(cls, grid, spec: ModelSpec):
        n, T = grid.n, grid.T
        cols = [np.ones((n, T))]
        for name in spec.covariates:
            cols.append(np.broadcast_to(grid.values(name), (n, T)))
        X = np.stack(cols, axis=-1)
        offset = _offset(grid, spec.offset)
        return cls(
            y=grid.counts,
            X=X,
            log_exposure=np.log(offset),
            cell=np.arange(n),
            unit=np.arange(n),
            coords=grid.centres,
            names=["(Intercept)"] + list(spec.covariates),
            n_units=n,
        )

    @classmethod
    def from_regions(cls, grid, imap, counts, spec: ModelSpec, region_covariates=None, region_offset=None):
        """Region model; ``counts`` is ``(r, T)`` and covariates are ``(r, T)`` arrays."""
        counts = np.asarray(counts, float)
        r, T = counts.shape
        region_covariates = region_covariates or {}
        design = build_region_design(imap, grid.n, r, T)
        cols = [np.ones((imap.q, T))]
        for name in spec.region_covariates:
            if name not in region_covariates:
                raise UnknownCovariateError(f"unknown region covariate {name!r}")
            cols.append(np.broadcast_to(np.asarray(region_covariates[name], float), (r, T))[imap.region])
        for name in spec.covariates:
            cols.append(np.broadcast_to(grid.values(name), (grid.n, T))[imap.cell])
        X = np.stack(cols, axis=-1)
        roff = np.ones((r, T)) if region_offset is None else np.broadcast_to(np.asarray(region_offset, float), (r, T))
        if np.any(roff <= 0):
            raise ConfigError("region offset must be positive")
        log_e = np.log(roff)[imap.region] + np.log(imap.weight)[:, None]
        return cls(
            y=counts,
            X=X,
            log_exposure=log_e,
            cell=imap.cell,
            unit=imap.region,
            coords=grid.centres,
            names=["(Intercept)"] + list(spec.region_covariates) + list(spec.covariates),
            n_units=r,
            is_region=True,
            design=design,
        )

    def base_eta(self, gamma):
        """Linear predictor without the latent field, ``(q, T)``."""
        return self.log_exposure + self.X @ np.asarray(gamma, float)

    def _clamp(self, eta):
        over = np.abs(eta) > ETA_CLAMP
        if over.any():
            self.clamp_events += int(over.sum())
            eta = np.clip(eta, -ETA_CLAMP, ETA_CLAMP)
        return eta

    def eta(self, gamma, Z=None, base=None):
        # ``base`` (from :meth:`base_eta`) takes precedence over ``gamma``.
        b = self.base_eta(gamma) if base is None else base
        if Z is None:
            return self._clamp(b)
        Z = np.asarray(Z, float)
        return self._clamp(b + (Z if self.identity else Z[..., self.cell, :]))

    def aggregate(self, E, axis=-2):
        """Sum intersection values into units along ``axis`` (default ``(..., q, T)``)."""
        if self.identity:
            return E
        return _sparse_apply(self.agg, E, axis)

    def to_cells(self, F, axis=-2):
        if self.identity:
            return F
        return _sparse_apply(self.cellsum, F, axis)

    def intensity(self, gamma, Z=None, base=None):
        return self.aggregate(np.exp(self.eta(gamma, Z, base)))

    def loglik(self, gamma, Z=None, base=None):
        """Poisson log-likelihood; a vector over draws if ``Z`` is 3-D."""
        lam = self.intensity(gamma, Z, base)
        with np.errstate(divide="ignore", invalid="ignore"):
            ylog = np.where(self.y > 0, self.y * np.log(lam), 0.0)
        val = ylog - lam - self.lgy
        return val.sum(axis=(-2, -1))

    def grad_latent(self, gamma, Z, base=None):
        """``d loglik / dZ`` with the same shape as ``Z``."""
        E = np.exp(self.eta(gamma, Z, base))
        if self.identity:
            return self.y - E
        lam = self.aggregate(E)
        ratio = self.y / lam
        F = E * (ratio[..., self.unit, :] - 1.0)
        return self.to_cells(F)

    def value_and_grad(self, Z, base):
        """Log-likelihood of one field ``Z`` with ``d/dZ`` and ``d/d eta`` per intersection."""
        E = np.exp(self._clamp(base + (Z if self.identity else Z[self.cell])))
        if self.identity:
            lam = E
            F = self.y - E
        else:
            lam = self.agg @ E
            F = E * ((self.y / lam)[self.unit] - 1.0)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = float(np.sum(np.where(self.y > 0, self.y * np.log(lam), 0.0) - lam - self.lgy))
        return ll, self.to_cells(F), F

    def gamma_terms(self, gamma, Zs, weights):
        """Weighted-average log-likelihood, gradient and Hessian in ``gamma``."""
        E = np.exp(self.eta(gamma, Zs))  # (S, q, T)
        w = np.asarray(weights, float)
        X = self.X
        if self.identity:
            lam = E
            with np.errstate(divide="ignore", invalid="ignore"):
                ll = np.sum(np.where(self.y > 0, self.y * np.log(lam), 0.0) - lam - self.lgy, axis=(1, 2))
            Ebar = np.tensordot(w, E, axes=1)
            grad = np.einsum("qt,qtk->k", self.y * w.sum() - Ebar, X)
            hess = -np.einsum("qt,qtk,qtl->kl", Ebar, X, X)
            return float(w @ ll), grad, hess
        lam = self.aggregate(E)  # (S, u, T)
        with np.errstate(divide="ignore", invalid="ignore"):
            ll = np.sum(np.where(self.y > 0, self.y * np.log(lam), 0.0) - lam - self.lgy, axis=(1, 2))
        ratio = self.y / lam
        F = E * (ratio[:, self.unit, :] - 1.0)
        Fbar = np.tensordot(w, F, axes=1)
        grad = np.einsum("qt,qtk->k", Fbar, X)
        hess = np.einsum("qt,qtk,qtl->kl", Fbar, X, X)
        G = self.aggregate(E[..., None] * X[None], axis=1)  # (S, u, T, k)
        c = w[:, None, None] * self.y[None] / lam**2
        hess -= np.einsum("sut,sutk,sutl->kl", c, G, G)
        return float(w @ ll), grad, hess


def _sparse_apply(M, E, axis=-2):
    """Apply sparse ``M`` along ``axis`` of ``E``."""
    E = np.moveaxis(np.asarray(E), axis, 0)
    shape = E.shape
    out = M @ E.reshape(shape[0], -1)
    return np.moveaxis(np.asarray(out).reshape((M.shape[0],) + shape[1:]), 0, axis)


def _offset(grid, name):
    if name is None:
        return np.ones((grid.n, grid.T))
    off = np.broadcast_to(grid.values(name), (grid.n, grid.T)).astype(float)
    if np.any(off <= 0) or not np.all(np.isfinite(off)):
        raise ConfigError(f"offset column {name!r} must be positive")
    return off


def grid_intensity(model: LgcpModel, gamma, z):
    """``r * exp(X gamma + Z)`` for a grid model; ``z`` is ``(n, T)`` or time-major."""
    Z = np.asarray(z, float)
    if Z.ndim == 1:
        Z = Z.reshape(model.T, -1).T
    return model.intensity(gamma, Z)


def mean_log_offset(model: LgcpModel):
    return float(np.mean(model.log_exposure))


def poisson_glm_start(model: LgcpModel, max_iter=100):
    """Poisson GLM fit ignoring the latent field, used for initial values."""
    gamma = np.zeros(model.n_coef)
    total = model.y.sum()
    expo = model.aggregate(np.exp(model.log_exposure)).sum()
    gamma[0] = math.log(max(total, 0.5) / expo)
    w = np.ones(1)
    for _ in range(max_iter):
        _, g, H = model.gamma_terms(gamma, np.zeros((1, model.n, model.T)), w)
        try:
            step = np.linalg.solve(H, -g)
        except np.linalg.LinAlgError:
            step = -np.linalg.lstsq(H, g, rcond=None)[0]
        gamma = gamma + step
        if np.max(np.abs(step)) < 1e-10:
            break
    else:
        warnings.warn("initial Poisson GLM did not converge")
    return gamma
