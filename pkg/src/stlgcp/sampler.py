"""MALA sampling of the standardised latent field and full Bayesian fitting.

The latent field is parameterised as ``Z = L Zs R'`` where ``Zs`` has
independent standard normal entries, ``L`` is a square root of Sigma0
(dense Cholesky, NNGP or HSGP) and ``R`` the Cholesky factor of the AR(1)
matrix.  All samplers use the Metropolis-adjusted Langevin algorithm with
dual-averaging step-size adaptation during warmup.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .covariance import CovParams, DenseSqrt, build_temporal
from .errors import ConfigError, SamplerError
from .hsgp import HsgpSqrt, build_basis, scale_coords
from .nngp import NngpSqrt, build_neighbour_sets

TARGET_ACCEPT = 0.574
DEFAULT_WARMUP = 500
MIN_ACCEPT = 0.05
DENSE_METRIC_LIMIT = 2500


class SqrtFactory:
    """Builds the Sigma0 square-root operator for given ``(sigma_sq, phi)``.

    Geometry-only work (neighbour search, HSGP basis) is done once.
    """

    def __init__(self, coords, approximation="nngp", kernel="exponential", m=None, c=2.0):
        self.coords = np.asarray(coords, float)
        self.approximation = approximation
        self.kernel = kernel
        if approximation == "nngp":
            self.m = min(15 if m is None else int(m), self.coords.shape[0] - 1)
            self.sets = build_neighbour_sets(self.coords, self.m)
        elif approximation == "hsgp":
            self.m = 10 if m is None else int(m)
            scaled, self.scaling = scale_coords(self.coords)
            self.basis = build_basis(scaled, self.m, c)
            self.length_scale = float(self.scaling.half_range[0])
        elif approximation == "none":
            self.m = None
        else:
            raise ConfigError(f"unknown approximation {approximation!r}")

    @property
    def dim(self):
        if self.approximation == "hsgp":
            return self.basis.n_basis
        return self.coords.shape[0]

    def __call__(self, sigma_sq, phi):
        params = CovParams(sigma_sq, phi, kernel=self.kernel)
        if self.approximation == "nngp":
            return NngpSqrt(self.coords, self.sets, params)
        if self.approximation == "hsgp":
            return HsgpSqrt(self.basis, params, self.length_scale)
        return DenseSqrt(self.coords, params)


def latent_field(sqrt_op, R, Zs):
    """Map standardised draws to the latent scale.

    ``Zs`` is ``(dim, T)`` or a stack ``(S, dim, T)``; the result has ``n``
    rows in place of ``dim``.
    """
    Zs = np.asarray(Zs, float)
    if Zs.ndim == 2:
        return sqrt_op.apply(Zs) @ R.T
    S, dim, T = Zs.shape
    flat = Zs.transpose(1, 0, 2).reshape(dim, S * T)
    Z = sqrt_op.apply(flat).reshape(-1, S, T) @ R.T
    return Z.transpose(1, 0, 2)


@dataclass(frozen=True)
class SampleBank:
    """Post-warmup draws of the standardised latent field.

    ``draws`` has shape ``(S, dim, T)``; :attr:`matrix` gives the stacked
    time-major layout with one column per draw.
    """

    draws: np.ndarray
    accept_rate: float
    step_size: float
    seed: int | None = None

    def __post_init__(self):
        if self.draws.ndim != 3 or self.draws.shape[0] < 1:
            raise ConfigError("a sample bank needs at least one draw")
        if not np.all(np.isfinite(self.draws)):
            raise SamplerError("non-finite latent draws")

    @property
    def n_draws(self):
        return self.draws.shape[0]

    @property
    def matrix(self):
        S = self.n_draws
        return self.draws.transpose(2, 1, 0).reshape(-1, S)

    def fields(self, sqrt_op, R):
        return latent_field(sqrt_op, R, self.draws)


class DualAveraging:
    """Step-size adaptation towards a target acceptance probability."""

    def __init__(self, step, target=TARGET_ACCEPT, gamma=0.05, t0=10.0, kappa=0.75):
        self.restart(step)
        self.target, self.gamma, self.t0, self.kappa = target, gamma, t0, kappa

    def restart(self, step):
        self.mu = math.log(10.0 * step)
        self.hbar = 0.0
        self.log_step = math.log(step)
        self.log_step_bar = math.log(step)
        self.count = 0

    def update(self, accept_prob):
        self.count += 1
        k = self.count
        w = 1.0 / (k + self.t0)
        self.hbar = (1.0 - w) * self.hbar + w * (self.target - accept_prob)
        self.log_step = self.mu - math.sqrt(k) / self.gamma * self.hbar
        eta = k ** (-self.kappa)
        self.log_step_bar = eta * self.log_step + (1.0 - eta) * self.log_step_bar
        return math.exp(self.log_step)

    @property
    def final_step(self):
        return math.exp(self.log_step_bar)


class DiagonalMetric:
    """Diagonal inverse mass matrix for preconditioned MALA."""

    def __init__(self, inv_mass):
        self.inv_mass = np.asarray(inv_mass, float)
        self.sd = np.sqrt(self.inv_mass)

    def apply_inv(self, g):
        return self.inv_mass * g

    def sample(self, xi):
        return self.sd * xi

    def quad(self, v):
        return float(np.sum(v * v / self.inv_mass))


class DenseMetric:
    """Dense metric given by a precision matrix ``H`` (inverse mass ``H^-1``)."""

    def __init__(self, H):
        self.H = np.asarray(H, float)
        self.chol = np.linalg.cholesky(self.H)

    def apply_inv(self, g):
        return cho_solve((self.chol, True), g)

    def sample(self, xi):
        return solve_triangular(self.chol, xi, lower=True, trans="T")

    def quad(self, v):
        return float(v @ (self.H @ v))


@dataclass
class MalaResult:
    draws: np.ndarray
    accept_rate: float
    step_size: float
    metric: object
    last: np.ndarray
    last_logp: float = field(default=float("nan"))


def mala(logp_grad, x0, n_warmup, n_draws, rng, step=0.1, metric=None, adapt_mass=False, thin=1):
    """Metropolis-adjusted Langevin sampler.

    ``logp_grad(x)`` returns ``(log density, gradient)``.  ``metric`` is a
    :class:`DiagonalMetric` or :class:`DenseMetric` (default identity).
    During warmup the step size is tuned by dual averaging and, if
    ``adapt_mass``, a diagonal inverse mass matrix is estimated from two
    expanding windows.
    """
    x = np.array(x0, dtype=float)
    d = x.size
    metric = DiagonalMetric(np.ones(d)) if metric is None else metric
    lp, g = logp_grad(x)
    if not np.isfinite(lp):
        raise SamplerError("log target is not finite at the initial state", {"state": "initial"})
    da = DualAveraging(step)
    windows = set()
    if adapt_mass and n_warmup >= 100:
        windows = {int(0.45 * n_warmup), int(0.8 * n_warmup)}
        collect_from = int(0.15 * n_warmup)
    collected = []
    out = np.empty((n_draws, d))
    accepted = 0
    total = n_warmup + n_draws * thin
    for it in range(total):
        warm = it < n_warmup
        h = 0.5 * step * step
        mean_fwd = x + h * metric.apply_inv(g)
        prop = mean_fwd + step * metric.sample(rng.standard_normal(d))
        lp_new, g_new = logp_grad(prop)
        if np.isfinite(lp_new):
            mean_bwd = prop + h * metric.apply_inv(g_new)
            log_q_fwd = -metric.quad(prop - mean_fwd) / (2 * step * step)
            log_q_bwd = -metric.quad(x - mean_bwd) / (2 * step * step)
            log_r = lp_new - lp + log_q_bwd - log_q_fwd
            prob = 1.0 if log_r >= 0 else math.exp(log_r)
        else:
            prob = 0.0
        if rng.uniform() < prob:
            x, lp, g = prop, lp_new, g_new
            if not warm:
                accepted += 1
        if warm:
            step = da.update(prob)
            if windows and it >= collect_from:
                collected.append(x.copy())
            if it + 1 in windows and len(collected) > 10:
                arr = np.asarray(collected)
                k = arr.shape[0]
                var = arr.var(axis=0)
                metric = DiagonalMetric((k / (k + 5.0)) * var + 1e-3 * (5.0 / (k + 5.0)))
                collected = []
                da.restart(step)
            if it + 1 == n_warmup:
                step = da.final_step
        else:
            j = it - n_warmup
            if (j + 1) % thin == 0:
                out[j // thin] = x
    rate = accepted / max(1, n_draws * thin)
    return MalaResult(out, rate, step, metric, x, lp)


class LatentTarget:
    """Log posterior of ``Zs`` given ``gamma`` and a fixed covariance."""

    def __init__(self, model, gamma, sqrt_op, temporal):
        self.model = model
        self.sqrt_op = sqrt_op
        self.R = temporal.R
        self.base = model.base_eta(gamma)
        self.shape = (sqrt_op.dim, model.T)

    def __call__(self, x):
        Zs = x.reshape(self.shape)
        Z = self.sqrt_op.apply(Zs) @ self.R.T
        ll, gZ, _ = self.model.value_and_grad(Z, self.base)
        grad = self.sqrt_op.apply_t(gZ @ self.R) - Zs
        return ll - 0.5 * float(np.sum(Zs * Zs)), grad.ravel()

    def jacobian(self):
        """Dense ``d vec(Z) / d vec(Zs)`` for row-major vectorisation."""
        return np.kron(self.sqrt_op.dense(), self.R)

    def curvature(self, x, J):
        """Gauss-Newton precision ``I + J' diag(w) J`` at ``x``.

        ``w`` is the cell-level sum of intensities; this is the exact
        Hessian for grid models and a positive definite approximation for
        region models.
        """
        Z = (J @ x).reshape(self.model.n, self.model.T)
        E = np.exp(self.model.eta(None, Z, self.base))
        w = self.model.to_cells(E).ravel()
        H = J.T @ (J * w[:, None])
        H[np.diag_indices_from(H)] += 1.0
        return H


def laplace_metric(target: LatentTarget, x0, max_iter=20, tol=1e-6):
    """Damped Newton search for the posterior mode and its curvature metric."""
    J = target.jacobian()
    x = np.array(x0, float)
    lp, g = target(x)
    for _ in range(max_iter):
        H = target.curvature(x, J)
        try:
            step = np.linalg.solve(H, g)
        except np.linalg.LinAlgError:
            break
        t = 1.0
        while t > 1e-4:
            lp_new, g_new = target(x + t * step)
            if np.isfinite(lp_new) and lp_new >= lp:
                break
            t *= 0.5
        else:
            break
        x, lp, g = x + t * step, lp_new, g_new
        if np.max(np.abs(t * step)) < tol:
            break
    return x, DenseMetric(target.curvature(x, J))


def latent_gradient(model, gamma, sqrt_op, temporal, z_star):
    """Gradient of the log target in ``z*``.

    ``z_star`` is either ``(dim, T)`` or a stacked time-major vector; the
    gradient is returned in the same layout.
    """
    z = np.asarray(z_star, float)
    dim, T = sqrt_op.dim, model.T
    vec = z.ndim == 1
    Zs = z.reshape(T, dim).T if vec else z
    _, g = LatentTarget(model, gamma, sqrt_op, temporal)(np.ascontiguousarray(Zs).ravel())
    g = g.reshape(dim, T)
    return g.T.ravel() if vec else g


def sample_latent(
    model,
    gamma,
    sqrt_op,
    temporal,
    m_k,
    warmup=DEFAULT_WARMUP,
    seed=None,
    init=None,
    step_size=None,
    thin=1,
    rng=None,
    precondition="auto",
):
    """Draw ``m_k`` samples of ``Zs`` from ``p(Zs | Y, gamma)`` by MALA.

    With ``precondition="laplace"`` (the default for latent dimensions up to
    ``DENSE_METRIC_LIMIT``) the chain starts at the posterior mode and uses
    the Gauss-Newton curvature there as its metric; ``"none"`` uses the
    identity metric.
    """
    if m_k < 1:
        raise ConfigError("m_k must be at least 1")
    rng = np.random.default_rng(seed) if rng is None else rng
    target = LatentTarget(model, gamma, sqrt_op, temporal)
    x0 = np.zeros(target.shape) if init is None else np.asarray(init, float)
    x0 = x0.ravel()
    size = x0.size
    if precondition == "auto":
        precondition = "laplace" if size <= DENSE_METRIC_LIMIT else "none"
    metric = None
    if precondition == "laplace":
        mode, metric = laplace_metric(target, x0)
        if init is None:
            x0 = mode
        step = 1.0 if step_size is None else step_size
    elif precondition == "none":
        step = step_size if step_size is not None else 0.5 / (size ** (1 / 6))
    else:
        raise ConfigError(f"unknown preconditioning {precondition!r}")
    res = mala(target, x0, warmup, m_k, rng, step=step, metric=metric, thin=thin)
    if m_k * thin >= 20 and res.accept_rate < MIN_ACCEPT:
        raise SamplerError(
            f"latent sampler acceptance rate {res.accept_rate:.3f} below {MIN_ACCEPT}",
            {"accept_rate": res.accept_rate, "step_size": res.step_size},
        )
    draws = res.draws.reshape((m_k,) + target.shape)
    return SampleBank(draws=draws, accept_rate=res.accept_rate, step_size=res.step_size, seed=seed)


# ---------------------------------------------------------------------------
# Full Bayesian fitting


@dataclass(frozen=True)
class Priors:
    """``gamma ~ N(mean, sd)``, half-normal ``sigma`` and ``phi``, uniform ``rho``."""

    gamma_mean: float = 0.0
    gamma_sd: float = 5.0
    sigma_scale: float = 0.5
    phi_scale: float = 0.5

    def __post_init__(self):
        if not (self.gamma_sd > 0 and self.sigma_scale > 0 and self.phi_scale > 0):
            raise ConfigError("prior scales must be positive")


class JointTarget:
    """Joint log posterior over ``(gamma, log sigma, log phi, atanh rho, Zs)``.

    The half-normal priors on ``sigma`` and ``phi`` and the uniform prior on
    ``rho`` are expressed on the unconstrained scale with Jacobian terms.
    """

    def __init__(self, model, factory: SqrtFactory, priors: Priors, prior_only=False):
        self.model = model
        self.factory = factory
        self.priors = priors
        self.prior_only = prior_only
        self.k = model.n_coef
        self.temporal = model.T > 1
        self.n_par = self.k + 2 + int(self.temporal)
        self.shape = (factory.dim, model.T)

    def unpack(self, x):
        k = self.k
        gamma = x[:k]
        sigma = math.exp(x[k])
        phi = math.exp(x[k + 1])
        rho = math.tanh(x[k + 2]) if self.temporal else 0.0
        Zs = x[self.n_par:].reshape(self.shape)
        return gamma, sigma, phi, rho, Zs

    def __call__(self, x):
        pr = self.priors
        k = self.k
        gamma, sigma, phi, rho, Zs = self.unpack(x)
        grad = np.zeros_like(x)
        lp = -0.5 * float(np.sum(((gamma - pr.gamma_mean) / pr.gamma_sd) ** 2))
        grad[:k] = -(gamma - pr.gamma_mean) / pr.gamma_sd**2
        lp += -0.5 * (sigma / pr.sigma_scale) ** 2 + x[k]
        grad[k] = -((sigma / pr.sigma_scale) ** 2) + 1.0
        lp += -0.5 * (phi / pr.phi_scale) ** 2 + x[k + 1]
        grad[k + 1] = -((phi / pr.phi_scale) ** 2) + 1.0
        if self.temporal:
            # log(1 - tanh(x)^2), written to stay finite for large |x|
            a = abs(float(x[k + 2]))
            lp += 2.0 * (math.log(2.0) - a - math.log1p(math.exp(-2.0 * a)))
            grad[k + 2] = -2.0 * rho
        lp += -0.5 * float(np.sum(Zs * Zs))
        gz = -Zs.copy()
        if not self.prior_only:
            if not (1e-8 < phi < 1e8 and 1e-8 < sigma < 1e8 and abs(rho) < 1 - 1e-12):
                return -np.inf, grad
            sq = self.factory(sigma * sigma, phi)
            P = build_temporal(rho, self.model.T)
            LZ = sq.apply(Zs)
            Z = LZ @ P.R.T
            base = self.model.base_eta(gamma)
            ll, gZ, F = self.model.value_and_grad(Z, base)
            lp += ll
            grad[:k] += np.einsum("qt,qtk->k", F, self.model.X)
            grad[k] += float(np.sum(gZ * Z))
            grad[k + 1] += phi * float(np.sum(gZ * (sq.dapply(Zs, "phi") @ P.R.T)))
            if self.temporal:
                grad[k + 2] += (1.0 - rho * rho) * float(np.sum(gZ * (LZ @ P.dR().T)))
            gz += sq.apply_t(gZ @ P.R)
        grad[self.n_par:] = gz.ravel()
        return lp, grad


@dataclass
class BayesResult:
    names: list
    gamma: np.ndarray  # (chains, draws, k)
    sigma: np.ndarray  # (chains, draws)
    phi: np.ndarray
    rho: np.ndarray
    zstar: np.ndarray  # (chains, draws, dim, T)
    accept_rate: list
    step_size: list

    def parameter_draws(self):
        out = {name: self.gamma[:, :, j] for j, name in enumerate(self.names)}
        out["sigma"] = self.sigma
        out["phi"] = self.phi
        if np.any(self.rho != 0):
            out["rho"] = self.rho
        return out

    def summary(self):
        rows = {}
        for name, d in self.parameter_draws().items():
            flat = d.ravel()
            rows[name] = {
                "mean": float(flat.mean()),
                "sd": float(flat.std(ddof=1)) if flat.size > 1 else 0.0,
                "q05": float(np.quantile(flat, 0.05)),
                "q95": float(np.quantile(flat, 0.95)),
                "rhat": split_rhat(d),
            }
        return rows

    def sample_bank(self):
        S = self.zstar.shape[0] * self.zstar.shape[1]
        draws = self.zstar.reshape((S,) + self.zstar.shape[2:])
        return SampleBank(draws=draws, accept_rate=float(np.mean(self.accept_rate)), step_size=float(np.mean(self.step_size)))


def split_rhat(draws):
    """Split-chain potential scale reduction factor for ``(chains, draws)``."""
    d = np.asarray(draws, float)
    n = d.shape[1] // 2
    if n < 2:
        return float("nan")
    halves = np.concatenate([d[:, :n], d[:, n:2 * n]], axis=0)
    means = halves.mean(axis=1)
    W = halves.var(axis=1, ddof=1).mean()
    B = n * means.var(ddof=1)
    if W == 0:
        return 1.0 if B == 0 else float("inf")
    var_plus = (n - 1) / n * W + B / n
    return float(math.sqrt(var_plus / W))


def bayes_fit(model, factory: SqrtFactory, priors: Priors | None = None, chains=4, iter_warmup=500,
              iter_sampling=500, seed=1, prior_only=False, init_gamma=None):
    """Joint MALA over covariates, covariance parameters and the latent field."""
    priors = priors or Priors()
    target = JointTarget(model, factory, priors, prior_only)
    streams = np.random.SeedSequence(seed).spawn(chains)
    dim = target.n_par + factory.dim * model.T
    G, Sg, Ph, Rh, Zs, acc, steps = [], [], [], [], [], [], []
    for c in range(chains):
        rng = np.random.default_rng(streams[c])
        x0 = np.zeros(dim)
        if init_gamma is not None and not prior_only:
            x0[:target.k] = init_gamma
        x0[:target.n_par] += rng.uniform(-0.5, 0.5, target.n_par)
        x0[target.k] = math.log(0.5 * priors.sigma_scale) + rng.uniform(-0.3, 0.3)
        x0[target.k + 1] = math.log(0.5 * priors.phi_scale) + rng.uniform(-0.3, 0.3)
        res = mala(target, x0, iter_warmup, iter_sampling, rng, step=0.1, adapt_mass=True)
        if not np.all(np.isfinite(res.draws)):
            raise SamplerError(f"chain {c} diverged", {"chain": c})
        if iter_sampling >= 20 and res.accept_rate < MIN_ACCEPT:
            raise SamplerError(f"chain {c} acceptance rate {res.accept_rate:.3f}", {"chain": c})
        dr = res.draws
        k = target.k
        G.append(dr[:, :k])
        Sg.append(np.exp(dr[:, k]))
        Ph.append(np.exp(dr[:, k + 1]))
        Rh.append(np.tanh(dr[:, k + 2]) if target.temporal else np.zeros(iter_sampling))
        Zs.append(dr[:, target.n_par:].reshape((iter_sampling,) + target.shape))
        acc.append(res.accept_rate)
        steps.append(res.step_size)
    return BayesResult(
        names=model.names,
        gamma=np.asarray(G),
        sigma=np.asarray(Sg),
        phi=np.asarray(Ph),
        rho=np.asarray(Rh),
        zstar=np.asarray(Zs),
        accept_rate=acc,
        step_size=steps,
    )
