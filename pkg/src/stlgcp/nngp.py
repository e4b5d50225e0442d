"""Nearest-neighbour Gaussian process (Vecchia) approximation of Sigma0.

Each site j is regressed on at most ``m`` earlier sites, giving
``z = A z + e`` with ``e ~ N(0, D)`` and so
``Sigma0 ~= (I - A)^-1 D (I - A)^-T``.  Neighbour lists are stored as a
padded ``(n, m)`` index array with a boolean mask; padded entries of
``A`` are zero so that most operations vectorise without masking.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp
from scipy.sparse.linalg import splu

from .covariance import (
    JITTER,
    LOG2PI,
    CovParams,
    TemporalMatrix,
    cov_dphi,
    cov_value,
)
from .errors import ConfigError, FactorisationError

DEFAULT_NEIGHBOURS = 15
PARAMS = ("sigma_sq", "phi")


@dataclass(frozen=True)
class NeighbourSets:
    index: np.ndarray  # (n, m) neighbour indices, ascending, padded with 0
    mask: np.ndarray  # (n, m) True where the slot holds a neighbour
    m: int

    @property
    def n(self):
        return self.index.shape[0]

    @property
    def sizes(self):
        return self.mask.sum(axis=1)

    def of(self, j):
        return self.index[j][self.mask[j]]


def build_neighbour_sets(ordered_coords, m: int = DEFAULT_NEIGHBOURS) -> NeighbourSets:
    """Up to ``m`` nearest earlier sites for each site; ties go to the lower index."""
    if m < 1:
        raise ConfigError("number of neighbours must be at least 1")
    pts = np.asarray(ordered_coords, dtype=float)
    n = pts.shape[0]
    m_eff = max(min(m, n - 1), 1)
    index = np.zeros((n, m_eff), dtype=np.int64)
    mask = np.zeros((n, m_eff), dtype=bool)
    for j in range(1, n):
        d = np.hypot(*(pts[:j] - pts[j]).T)
        k = min(j, m_eff)
        nb = np.sort(np.argsort(d, kind="stable")[:k])
        index[j, :k] = nb
        mask[j, :k] = True
    return NeighbourSets(index=index, mask=mask, m=m_eff)


@dataclass
class NngpFactor:
    """Sparse factors ``A`` (stored row-wise over neighbour slots) and ``D``."""

    sets: NeighbourSets
    A: np.ndarray  # (n, m)
    D: np.ndarray  # (n,)
    params: CovParams
    dA: dict = field(default_factory=dict)
    dD: dict = field(default_factory=dict)

    @property
    def n(self):
        return self.D.size

    def sparse_A(self, values=None):
        vals = self.A if values is None else values
        rows = np.repeat(np.arange(self.n), self.sets.m)
        keep = self.sets.mask.ravel()
        return sp.csr_matrix(
            (vals.ravel()[keep], (rows[keep], self.sets.index.ravel()[keep])),
            shape=(self.n, self.n),
        )

    def lower_apply(self, X, values=None):
        """``values @ X`` for a neighbour-slot matrix (default ``A``)."""
        vals = self.A if values is None else values
        X = np.asarray(X, float)
        gathered = X[self.sets.index]  # (n, m, ...)
        w = vals.reshape(vals.shape + (1,) * (X.ndim - 1))
        return np.sum(w * gathered, axis=1)

    def i_minus_a(self, X):
        return np.asarray(X, float) - self.lower_apply(X)

    def dense(self):
        """Dense reconstruction ``(I - A)^-1 D (I - A)^-T``."""
        Lt = approx_cholesky(self)
        return Lt @ Lt.T


def _local_cov(kernel, pts_a, pts_b, sigma_sq, phi):
    d = np.sqrt(np.sum((pts_a[..., :, None, :] - pts_b[..., None, :, :]) ** 2, axis=-1))
    return d, cov_value(kernel, d, sigma_sq, phi)


def compute_factor(coords, sets: NeighbourSets, params: CovParams, derivatives=False) -> NngpFactor:
    """Solve the per-row conditioning systems for ``A`` and ``D``.

    Rows are batched by neighbour count.  With ``derivatives=True`` the
    differentiated systems are solved as well, filling ``dA``/``dD`` for
    ``sigma_sq`` and ``phi``.
    """
    pts = np.asarray(coords, dtype=float)
    n, m = sets.index.shape
    s2, phi, kern = params.sigma_sq, params.phi, params.kernel
    A = np.zeros((n, m))
    D = np.empty(n)
    dA = {p: np.zeros((n, m)) for p in PARAMS} if derivatives else {}
    dD = {p: np.zeros(n) for p in PARAMS} if derivatives else {}
    diag = s2 * (1.0 + JITTER)
    sizes = sets.sizes
    D[sizes == 0] = diag
    if derivatives:
        dD["sigma_sq"][sizes == 0] = 1.0 + JITTER
    for k in np.unique(sizes[sizes > 0]):
        rows = np.flatnonzero(sizes == k)
        nb = sets.index[rows, :k]
        P_nb = pts[nb]  # (B, k, 2)
        P_j = pts[rows][:, None, :]  # (B, 1, 2)
        dnn, Knn = _local_cov(kern, P_nb, P_nb, s2, phi)
        dnj, knj = _local_cov(kern, P_nb, P_j, s2, phi)
        knj = knj[..., 0]
        dnj = dnj[..., 0]
        offdiag = dnn + np.eye(k) * 1.0
        bad = np.flatnonzero((offdiag.reshape(len(rows), -1).min(axis=1) == 0) | (dnj.min(axis=1) == 0))
        if bad.size:
            j = int(rows[bad[0]])
            raise FactorisationError(f"singular neighbour system at row {j}: coincident sites", row=j)
        Knn = Knn + np.eye(k) * (JITTER * s2)
        try:
            Lc = np.linalg.cholesky(Knn)
        except np.linalg.LinAlgError:
            for b, j in enumerate(rows):
                try:
                    np.linalg.cholesky(Knn[b])
                except np.linalg.LinAlgError:
                    raise FactorisationError(f"neighbour system not positive definite at row {j}", row=int(j)) from None
            raise
        a = _chol_solve(Lc, knj)
        A[rows, :k] = a
        D[rows] = diag - np.sum(a * knj, axis=1)
        if derivatives:
            for p in PARAMS:
                if p == "sigma_sq":
                    dK = Knn / s2
                    dk = knj / s2
                    ddiag = 1.0 + JITTER
                else:
                    dK = cov_dphi(kern, dnn, s2, phi)
                    dk = cov_dphi(kern, dnj, s2, phi)
                    ddiag = 0.0
                rhs = dk - np.einsum("bij,bj->bi", dK, a)
                da = _chol_solve(Lc, rhs)
                dA[p][rows, :k] = da
                dD[p][rows] = ddiag - np.sum(da * knj, axis=1) - np.sum(a * dk, axis=1)
    if np.any(D <= 0):
        j = int(np.flatnonzero(D <= 0)[0])
        raise FactorisationError(f"non-positive conditional variance at row {j}", row=j)
    return NngpFactor(sets=sets, A=A, D=D, params=params, dA=dA, dD=dD)


def _chol_solve(Lc, b):
    # batched solve of (L L') x = b
    y = np.linalg.solve(Lc, b[..., None])
    return np.linalg.solve(np.swapaxes(Lc, -1, -2), y)[..., 0]


def _as_matrix(z, T):
    z = np.asarray(z, dtype=float)
    if z.ndim == 2:
        return z
    if z.size % T:
        raise ConfigError("latent vector length is not a multiple of T")
    return z.reshape(T, -1).T


def nngp_quadratic_form(z, factor: NngpFactor, P: TemporalMatrix) -> float:
    """``sum_t z_t' (I-A)' D^-1 (I-A) vtilde_t`` with ``vtilde = V Pinv``."""
    V = _as_matrix(z, P.T)
    if V.shape[0] != factor.n:
        raise ConfigError("latent field does not match the factor size")
    U = factor.i_minus_a(V)
    W = factor.i_minus_a(V @ P.Pinv)
    return float(np.sum(U * W / factor.D[:, None]))


def nngp_log_det(factor: NngpFactor, P: TemporalMatrix, n: int, T: int) -> float:
    return n * P.logdet + T * float(np.sum(np.log(factor.D)))


def nngp_loglik(V, factor: NngpFactor, P: TemporalMatrix, weights=None) -> float:
    """Weighted mean over draws ``V`` (``(S, n, T)``) of the NNGP log-density."""
    V = np.asarray(V, float)
    if V.ndim == 2:
        V = V[None]
    S, n, T = V.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
    quad = sum(w[s] * nngp_quadratic_form(V[s], factor, P) for s in range(S))
    return -0.5 * (n * T * LOG2PI + nngp_log_det(factor, P, n, T) + quad)


def approx_cholesky(factor: NngpFactor) -> np.ndarray:
    """Dense ``(I - A)^-1 D^(1/2)`` by forward substitution.

    Row ``i`` of the result is ``sqrt(D_i) e_i + sum_k A[i, k] * row(N_ik)``,
    so each row touches only its neighbours' rows.
    """
    n = factor.n
    idx, A = factor.sets.index, factor.A
    sd = np.sqrt(factor.D)
    Lt = np.zeros((n, n))
    for i in range(n):
        row = A[i] @ Lt[idx[i]]
        row[i] += sd[i]
        Lt[i] = row
    return Lt


def nngp_gradients(z_samples, factor: NngpFactor, P: TemporalMatrix, weights=None):
    """Gradient of :func:`nngp_loglik` in ``(sigma_sq, phi, rho)``.

    ``factor`` must have been computed with ``derivatives=True``.
    """
    V = np.asarray(z_samples, float)
    if V.ndim == 2:
        V = V[None]
    S, n, T = V.shape
    w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
    if not factor.dA:
        raise ConfigError("factor was computed without derivatives")
    Dinv = 1.0 / factor.D
    dPinv = P.dPinv() if T > 1 else np.zeros((1, 1))
    quad = {p: 0.0 for p in PARAMS}
    quad_rho = 0.0
    for s in range(S):
        U = factor.i_minus_a(V[s])
        Ut = U @ P.Pinv
        for p in PARAMS:
            dU = -factor.lower_apply(V[s], factor.dA[p])
            quad[p] += w[s] * (
                2.0 * np.sum(dU * Ut * Dinv[:, None])
                - np.sum(U * Ut * (factor.dD[p] * Dinv**2)[:, None])
            )
        quad_rho += w[s] * np.sum(U * (U @ dPinv) * Dinv[:, None])
    out = [-0.5 * (T * np.sum(factor.dD[p] * Dinv) + quad[p]) for p in PARAMS]
    dlogdetP = -2.0 * P.rho * (T - 1) / (1.0 - P.rho**2)
    out.append(-0.5 * (n * dlogdetP + quad_rho))
    return tuple(float(g) for g in out)


class NngpSqrt:
    """Square-root operator ``L = (I - A)^-1 D^(1/2)`` for latent sampling."""

    kind = "nngp"

    def __init__(self, coords, sets: NeighbourSets, params: CovParams):
        self.coords = np.asarray(coords, float)
        self.params = params
        self.factor = compute_factor(self.coords, sets, params, derivatives=True)
        IA = (sp.identity(self.factor.n, format="csr") - self.factor.sparse_A()).tocsc()
        self._lu = splu(IA, permc_spec="NATURAL", diag_pivot_thresh=0.0, options={"SymmetricMode": True})
        self.sqrt_d = np.sqrt(self.factor.D)

    @property
    def n(self):
        return self.factor.n

    @property
    def dim(self):
        return self.factor.n

    @property
    def log_det(self):
        return float(np.sum(np.log(self.factor.D)))

    def _solve(self, B, trans="N"):
        B = np.asarray(B, float)
        out = self._lu.solve(np.ascontiguousarray(B.reshape(B.shape[0], -1)), trans=trans)
        return out.reshape(B.shape)

    def _scale(self, X):
        return self.sqrt_d.reshape((-1,) + (1,) * (np.ndim(X) - 1)) * X

    def apply(self, X):
        return self._solve(self._scale(X))

    def apply_t(self, G):
        return self._scale(self._solve(G, trans="T"))

    def dapply(self, X, param):
        LX = self.apply(X)
        if param == "sigma_sq":
            return LX / (2.0 * self.params.sigma_sq)
        f = self.factor
        half = 0.5 * f.dD[param] / self.sqrt_d
        rhs = f.lower_apply(LX, f.dA[param]) + half.reshape((-1,) + (1,) * (np.ndim(X) - 1)) * X
        return self._solve(rhs)

    def dense(self):
        return approx_cholesky(self.factor)


class NngpMoments:
    """Per-row local second moments of latent draws.

    For row j with local index set ``I_j = (j, N_j)`` this stores the
    ``(m+1) x (m+1)`` blocks of ``sum_s w_s V_s V_s'`` and the two
    tridiagonal companions, so the averaged NNGP quadratic form can be
    re-evaluated for any parameters in O(n m^2).
    """

    def __init__(self, V, sets: NeighbourSets, weights=None, chunk_elems=4_000_000):
        V = np.asarray(V, float)
        if V.ndim == 2:
            V = V[None]
        S, n, T = V.shape
        w = np.full(S, 1.0 / S) if weights is None else np.asarray(weights, float)
        self.n, self.T, self.sets = n, T, sets
        m1 = sets.m + 1
        local = np.concatenate([np.arange(n)[:, None], sets.index], axis=1)
        Vw = V * np.sqrt(w)[:, None, None]
        self.B0 = np.zeros((n, m1, m1))
        self.BJ = np.zeros((n, m1, m1))
        self.BK = np.zeros((n, m1, m1))
        step = max(1, chunk_elems // max(1, S * m1 * T))
        for lo in range(0, n, step):
            G = Vw[:, local[lo:lo + step], :]  # (S, c, m1, T)
            self.B0[lo:lo + step] = np.einsum("scit,scjt->cij", G, G)
            if T > 1:
                Gi = G[..., 1:-1]
                self.BJ[lo:lo + step] = np.einsum("scit,scjt->cij", Gi, Gi)
                ab = np.einsum("scit,scjt->cij", G[..., :-1], G[..., 1:])
                self.BK[lo:lo + step] = ab + np.swapaxes(ab, 1, 2)

    def blocks(self, rho):
        if self.T == 1:
            return self.B0
        c = 1.0 / (1.0 - rho * rho)
        return c * (self.B0 + rho * rho * self.BJ - rho * self.BK)

    def dblocks(self, rho):
        if self.T == 1:
            return np.zeros_like(self.B0)
        c = 1.0 / (1.0 - rho * rho)
        dc = 2.0 * rho * c * c
        return dc * (self.B0 + rho * rho * self.BJ - rho * self.BK) + c * (2.0 * rho * self.BJ - self.BK)


def nngp_objective(moments: NngpMoments, coords, params: CovParams, grad=False):
    """Averaged NNGP log-density (and gradient) from :class:`NngpMoments`."""
    n, T = moments.n, moments.T
    f = compute_factor(coords, moments.sets, params, derivatives=grad)
    e = np.concatenate([np.ones((n, 1)), -f.A], axis=1)
    B = moments.blocks(params.rho)
    Be = np.einsum("nij,nj->ni", B, e)
    q = np.sum(e * Be, axis=1)
    Dinv = 1.0 / f.D
    logdetP = (T - 1) * math.log(1.0 - params.rho**2)
    ll = -0.5 * (n * T * LOG2PI + n * logdetP + T * np.sum(np.log(f.D)) + np.sum(q * Dinv))
    if not grad:
        return ll
    g = []
    for p in PARAMS:
        de = np.concatenate([np.zeros((n, 1)), -f.dA[p]], axis=1)
        dq = 2.0 * np.sum(de * Be, axis=1)
        g.append(-0.5 * (T * np.sum(f.dD[p] * Dinv) + np.sum(dq * Dinv - q * f.dD[p] * Dinv**2)))
    dB = moments.dblocks(params.rho)
    dq = np.einsum("ni,nij,nj->n", e, dB, e)
    dlogdetP = -2.0 * params.rho * (T - 1) / (1.0 - params.rho**2)
    g.append(-0.5 * (n * dlogdetP + np.sum(dq * Dinv)))
    return ll, np.array(g)

