"""Monte-Carlo maximum likelihood: MCMC-ML and SAEM outer loops.

Each iteration samples the latent field given the current estimates,
maximises the Monte-Carlo averaged Poisson likelihood over ``gamma``
(Newton) and the averaged latent density over ``(sigma_sq, phi, rho)``
(Nelder-Mead or L-BFGS-B on unconstrained transforms).  SAEM keeps all
past draws with Robbins-Monro weights instead of discarding them.
"""

from __future__ import annotations

import math
import time
import warnings
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve
from scipy.optimize import minimize
from scipy.stats import norm

from .covariance import CovParams, LatentMoments, build_sigma0, build_temporal, dense_objective, gaussian_loglik
from .errors import (
    ConfigError,
    FactorisationError,
    InitialisationError,
    NumericError,
    StepFailureError,
    UnsupportedError,
)
from .model import LgcpModel, ModelSpec, poisson_glm_start
from .nngp import NngpMoments, compute_factor, nngp_loglik, nngp_objective
from .sampler import SqrtFactory, latent_field, sample_latent

STOP_CONTINUE = "continue"
STOP_PARAM = "stop_param_diff"
STOP_CAFFO = "stop_caffo"


@dataclass
class FitOptions:
    algorithm: str = "saem"
    alpha: float = 0.7
    burnin: int = 10
    use_polyak: bool = False
    m_k: int | None = None
    adaptive: bool = False
    growth: float | None = None
    tol: float = 1e-2
    delta: float = 0.05
    epsilon: float = 0.2
    max_iter: int = 50
    min_iter: int = 3
    optimiser: str = "quasi_newton"
    warmup: int = 500
    warmup_iter: int = 100
    thin: int = 5
    m_max: int = 2000
    n_pred: int = 200
    seed: int = 1
    stop_rules: tuple = ("param", "caffo")

    def __post_init__(self):
        if self.algorithm not in ("saem", "mcmcml"):
            raise ConfigError(f"unknown algorithm {self.algorithm!r}")
        if not 0.5 <= self.alpha < 1.0:
            raise ConfigError("alpha must lie in [0.5, 1)")
        if self.optimiser not in ("derivative_free", "quasi_newton"):
            raise ConfigError(f"unknown optimiser {self.optimiser!r}")
        if not (self.tol > 0 and 0 < self.delta < 1 and 0 < self.epsilon < 1):
            raise ConfigError("tolerances must be positive and delta, epsilon in (0, 1)")
        if self.m_k is None:
            self.m_k = 50 if self.algorithm == "saem" else 100
        if self.growth is None:
            self.growth = 1.0 if self.algorithm == "saem" else 1.2
        if self.max_iter < 1 or self.m_k < 1 or self.burnin < 0 or self.thin < 1:
            raise ConfigError("max_iter and m_k must be positive")
        self.stop_rules = tuple(self.stop_rules)


@dataclass
class FitResult:
    names: list
    gamma: np.ndarray
    sigma_sq: float
    phi: float
    rho: float
    se: np.ndarray | None
    trace: list
    converged: bool
    stop_reason: str
    sample_bank: object
    timings: dict
    theta_source: str
    options: FitOptions
    spec: ModelSpec
    lower_bound_hit: bool = False
    clamp_events: int = 0
    mc_se: dict = field(default_factory=dict)

    @property
    def theta(self):
        return (self.sigma_sq, self.phi, self.rho)

    def summary(self):
        out = {
            "gamma": {nm: float(v) for nm, v in zip(self.names, self.gamma)},
            "sigma_sq": float(self.sigma_sq),
            "phi": float(self.phi),
            "rho": float(self.rho),
            "se": None if self.se is None else {nm: float(v) for nm, v in zip(self.names, self.se)},
            "converged": bool(self.converged),
            "stop_reason": self.stop_reason,
            "theta_source": self.theta_source,
            "iterations": len(self.trace),
            "lower_bound_hit": bool(self.lower_bound_hit),
            "clamp_events": int(self.clamp_events),
        }
        return out


# ---------------------------------------------------------------------------
# gamma step


def gamma_step(model: LgcpModel, Z, weights=None, gamma0=None, max_steps=100, tol=1e-8):
    """Newton maximisation of the averaged Poisson log-likelihood in ``gamma``.

    ``Z`` is a stack ``(S, n, T)`` of latent fields with optional weights
    (default uniform).  Raises :class:`StepFailureError` if the iteration does
    not converge or if the linear predictor hits the overflow clamp.
    """
    Z = np.asarray(Z, float)
    if Z.ndim == 2:
        Z = Z[None]
    w = np.full(Z.shape[0], 1.0 / Z.shape[0]) if weights is None else np.asarray(weights, float)
    gamma = poisson_glm_start(model) if gamma0 is None else np.array(gamma0, float)
    clamp_start = model.clamp_events
    ll, g, H = model.gamma_terms(gamma, Z, w)
    for _ in range(max_steps):
        if model.clamp_events > clamp_start:
            raise StepFailureError("linear predictor reached the clamp; the data cannot identify gamma")
        if np.max(np.abs(g)) < tol:
            return gamma
        try:
            step = np.linalg.solve(-H, g)
        except np.linalg.LinAlgError as exc:
            raise StepFailureError(f"singular information matrix: {exc}") from exc
        t = 1.0
        while True:
            cand = gamma + t * step
            ll_c, g_c, H_c = model.gamma_terms(cand, Z, w)
            if np.isfinite(ll_c) and ll_c >= ll - 1e-12 * abs(ll):
                break
            t *= 0.5
            if t < 1e-10:
                raise StepFailureError("line search failed in the gamma step")
        gamma, ll, g, H = cand, ll_c, g_c, H_c
    if model.clamp_events > clamp_start:
        raise StepFailureError("linear predictor reached the clamp; the data cannot identify gamma")
    if np.max(np.abs(g)) < tol:
        return gamma
    raise StepFailureError(f"gamma step did not converge in {max_steps} Newton steps")


# ---------------------------------------------------------------------------
# theta step


def _blend(old, new, alpha):
    if old is None or alpha >= 1.0:
        return new
    for name in ("M0", "MJ", "MK", "B0", "BJ", "BK"):
        if hasattr(new, name):
            setattr(new, name, (1.0 - alpha) * getattr(old, name) + alpha * getattr(new, name))
    return new


class GaussianPathway:
    """Averaged latent log-density for the exact or NNGP covariance."""

    def __init__(self, factory: SqrtFactory):
        self.factory = factory
        self.coords = factory.coords
        self.kernel = factory.kernel
        self.stats = None

    def latent(self, bank, sq, P):
        return bank.fields(sq, P.R)

    def add(self, Z, alpha, weights=None):
        if self.factory.approximation == "nngp":
            new = NngpMoments(Z, self.factory.sets, weights)
        else:
            new = LatentMoments(Z, weights)
        self.stats = _blend(self.stats, new, alpha)

    def objective(self, theta, grad=False):
        params = CovParams(theta[0], theta[1], theta[2], self.kernel)
        if self.factory.approximation == "nngp":
            return nngp_objective(self.stats, self.coords, params, grad)
        return dense_objective(self.stats, self.coords, params, grad)

    def per_draw(self, model, gamma, theta, Z):
        params = CovParams(theta[0], theta[1], theta[2], self.kernel)
        P = build_temporal(theta[2], model.T)
        if self.factory.approximation == "nngp":
            f = compute_factor(self.coords, self.factory.sets, params)
            dens = np.array([nngp_loglik(V, f, P) for V in Z])
        else:
            S0 = build_sigma0(self.coords, params)
            dens = np.array([gaussian_loglik(V, S0, P) for V in Z])
        return model.loglik(gamma, Z) + dens


class HsgpPathway:
    """Averaged Poisson likelihood in ``(sigma_sq, phi, rho)`` for HSGP draws.

    With the HSGP the standardised coefficients have a parameter-free
    prior, so the covariance parameters enter only through the mapping to
    the latent field; the objective is the averaged Poisson likelihood
    with the coefficient draws held fixed.
    """

    def __init__(self, factory: SqrtFactory, model: LgcpModel):
        self.factory = factory
        self.model = model
        self.gamma = None
        self.draws = None
        self.weights = None

    def latent(self, bank, sq, P):
        return bank.draws

    def add(self, B, alpha, weights=None):
        B = np.asarray(B, float)
        w = np.full(B.shape[0], 1.0 / B.shape[0]) if weights is None else np.asarray(weights, float)
        if self.draws is None or alpha >= 1.0:
            self.draws, self.weights = B, w
        else:
            self.draws = np.concatenate([self.draws, B])
            self.weights = np.concatenate([(1.0 - alpha) * self.weights, alpha * w])
            keep = self.weights > 1e-12
            self.draws, self.weights = self.draws[keep], self.weights[keep]
            self.weights /= self.weights.sum()

    def objective(self, theta, grad=False):
        sq = self.factory(theta[0], theta[1])
        P = build_temporal(theta[2], self.model.T)
        Z = latent_field(sq, P.R, self.draws)
        w = self.weights
        ll = float(w @ self.model.loglik(self.gamma, Z))
        if not grad:
            return ll
        gZ = self.model.grad_latent(self.gamma, Z) * w[:, None, None]
        S, dim, T = self.draws.shape
        flat = self.draws.transpose(1, 0, 2).reshape(dim, S * T)
        g = []
        for p in ("sigma_sq", "phi"):
            dZ = sq.dapply(flat, p).reshape(-1, S, T).transpose(1, 0, 2) @ P.R.T
            g.append(float(np.sum(gZ * dZ)))
        LB = sq.apply(flat).reshape(-1, S, T).transpose(1, 0, 2)
        g.append(float(np.sum(gZ * (LB @ P.dR().T))) if self.model.T > 1 else 0.0)
        return ll, np.array(g)

    def per_draw(self, model, gamma, theta, B):
        sq = self.factory(theta[0], theta[1])
        P = build_temporal(theta[2], model.T)
        Z = latent_field(sq, P.R, B)
        return model.loglik(gamma, Z) - 0.5 * np.sum(B * B, axis=(1, 2))


def _theta_bounds(coords):
    d = np.sqrt(((coords[:, None, :] - coords[None, :, :]) ** 2).sum(-1)) if coords.shape[0] <= 3000 else None
    if d is not None:
        d[np.diag_indices_from(d)] = np.inf
        dmin = float(d.min())
    else:
        dmin = float(np.ptp(coords[:, 0]) / math.sqrt(coords.shape[0]))
    lo, hi = coords.min(axis=0), coords.max(axis=0)
    diag = float(np.hypot(*(hi - lo))) or 1.0
    return [(math.log(1e-6), math.log(1e4)), (math.log(0.01 * dmin), math.log(10.0 * diag)), (-3.8, 3.8)]


def optimise_theta(pathway, theta0, optimiser="quasi_newton", estimate_rho=True, bounds=None):
    """Maximise ``pathway.objective`` over ``(log sigma_sq, log phi, atanh rho)``.

    Returns ``(theta_hat, at_lower_bound)``.
    """
    bounds = bounds or _theta_bounds(pathway.factory.coords)
    rho0 = float(theta0[2]) if estimate_rho else 0.0
    u0 = [math.log(theta0[0]), math.log(theta0[1])] + ([math.atanh(rho0)] if estimate_rho else [])
    u0 = np.array([min(max(v, b[0]), b[1]) for v, b in zip(u0, bounds)])
    bnds = bounds[: len(u0)]

    def unpack(u):
        return (math.exp(u[0]), math.exp(u[1]), math.tanh(u[2]) if estimate_rho else 0.0)

    def fun(u):
        try:
            return -pathway.objective(unpack(u))
        except (FactorisationError, np.linalg.LinAlgError, FloatingPointError):
            return np.inf

    def fun_grad(u):
        th = unpack(u)
        try:
            ll, g = pathway.objective(th, grad=True)
        except (FactorisationError, np.linalg.LinAlgError):
            return np.inf, np.zeros_like(u)
        gu = [th[0] * g[0], th[1] * g[1]] + ([(1.0 - th[2] ** 2) * g[2]] if estimate_rho else [])
        return -ll, -np.array(gu)

    f0 = fun(u0)
    if not np.isfinite(f0):
        raise InitialisationError("covariance objective is not finite at the starting values")
    with np.errstate(over="ignore", invalid="ignore"):
        if optimiser == "derivative_free":
            res = minimize(fun, u0, method="Nelder-Mead", bounds=bnds,
                           options={"xatol": 1e-6, "fatol": 1e-9, "maxiter": 2000 * len(u0)})
        else:
            res = minimize(fun_grad, u0, jac=True, method="L-BFGS-B", bounds=bnds,
                           options={"ftol": 1e-13, "gtol": 1e-8, "maxiter": 500})
    u = res.x if np.isfinite(res.fun) and res.fun <= f0 else u0
    at_lower = bool(u[0] <= bnds[0][0] + 1e-6)
    if at_lower:
        warnings.warn("sigma_sq reached its lower bound in the covariance step")
    return unpack(u), at_lower


def theta_step(Z, coords, theta0, approximation="nngp", optimiser="quasi_newton", kernel="exponential",
               m=None, weights=None):
    """Covariance-parameter step for latent fields ``Z`` of shape ``(S, n, T)``.

    Convenience wrapper for the exact and NNGP pathways; returns
    ``((sigma_sq, phi, rho), at_lower_bound)``.
    """
    if approximation == "hsgp":
        raise UnsupportedError("use HsgpPathway with optimise_theta for the HSGP covariance step")
    Z = np.asarray(Z, float)
    if Z.ndim == 2:
        Z = Z[None]
    pathway = GaussianPathway(SqrtFactory(coords, approximation, kernel, m))
    pathway.add(Z, 1.0, weights)
    return optimise_theta(pathway, theta0, optimiser, estimate_rho=Z.shape[2] > 1)


# ---------------------------------------------------------------------------
# stopping and sample-size rules


def saem_alpha(k, options: FitOptions):
    """Step size of SAEM iteration ``k`` (1-based): one during burn-in, then ``j^-alpha``."""
    j = k - options.burnin
    return 1.0 if j <= 1 else float(j) ** (-options.alpha)


def saem_weights(n_batches, alpha, burnin=0):
    """Effective weight of each past batch after ``n_batches`` SAEM updates."""
    opts = FitOptions(alpha=alpha, burnin=burnin)
    a = np.array([saem_alpha(k, opts) for k in range(1, n_batches + 1)])
    w = np.empty(n_batches)
    for j in range(n_batches):
        w[j] = a[j] * np.prod(1.0 - a[j + 1:])
    return w


def caffo_bound(delta_L, sigma_delta, delta=0.05):
    """Upper confidence bound ``delta_L + z_(1-delta) sigma_delta``."""
    return float(delta_L) + float(norm.ppf(1.0 - delta)) * float(sigma_delta)


def adapt_mk(m_k, delta, epsilon, delta_L, loglik, cap=2000):
    """Caffo sample-size update ``max(m_k, |L| (z_d + z_e)^2 / dL^2)``, capped."""
    if delta_L == 0 or not np.isfinite(delta_L):
        return int(m_k)
    z = norm.ppf(1.0 - delta) + norm.ppf(1.0 - epsilon)
    proposal = abs(loglik) * z * z / (delta_L * delta_L)
    return int(min(cap, max(m_k, math.ceil(proposal))))


def _param_vector(entry):
    return np.concatenate([np.asarray(entry["gamma"], float), [entry["sigma_sq"], entry["phi"], entry["rho"]]])


def stopping_check(trace, options: FitOptions):
    """Evaluate the stopping rules on the convergence trace."""
    if len(trace) < 2:
        return STOP_CONTINUE
    if "caffo" in options.stop_rules:
        last = trace[-1]
        dL, sd = last.get("delta_L"), last.get("sigma_delta")
        if dL is not None and sd is not None and caffo_bound(dL, sd, options.delta) < 0:
            return STOP_CAFFO
    if "param" in options.stop_rules:
        diffs = [np.max(np.abs(_param_vector(trace[i]) - _param_vector(trace[i - 1]))) for i in range(1, len(trace))]
        if np.mean(diffs[-3:]) < options.tol:
            return STOP_PARAM
    return STOP_CONTINUE


# ---------------------------------------------------------------------------
# initial values and outer loop


def initial_values(model: LgcpModel):
    """GLM coefficients, residual-based variance, 10% of the extent for phi, rho=0.1."""
    gamma = poisson_glm_start(model)
    mu = model.intensity(gamma)
    resid = (model.y - mu) / np.sqrt(mu)
    sigma_sq = max(0.01, 0.5 * float(np.var(resid)))
    lo, hi = model.coords.min(axis=0), model.coords.max(axis=0)
    phi = 0.1 * float(np.hypot(*(hi - lo))) or 0.1
    rho = 0.1 if model.T > 1 else 0.0
    return gamma, (sigma_sq, phi, rho)


def mcmcml_fit(model: LgcpModel, spec: ModelSpec, options: FitOptions | None = None, init=None,
               compute_se=True):
    """Fit an LGCP by MCMC maximum likelihood or SAEM."""
    options = options or FitOptions()
    timings = {"sampling": 0.0, "gamma": 0.0, "theta": 0.0, "se": 0.0}
    rng = np.random.default_rng(options.seed)
    factory = SqrtFactory(model.coords, spec.approximation, spec.kernel, spec.m, spec.c)
    pathway = HsgpPathway(factory, model) if spec.approximation == "hsgp" else GaussianPathway(factory)
    gamma, theta = initial_values(model) if init is None else (np.asarray(init[0], float), tuple(init[1]))
    fixed = spec.known_theta is not None
    if fixed:
        theta = tuple(spec.known_theta)
        if model.T == 1:
            theta = (theta[0], theta[1], 0.0)
    estimate_rho = model.T > 1
    saem = options.algorithm == "saem"
    clamp0 = model.clamp_events
    trace, history = [], []
    Zhist, Whist = [], []
    m = options.m_k
    state, step = None, None
    prev_theta = None
    lower_hit = False
    reason = "max_iter"
    converged = False
    for k in range(1, options.max_iter + 1):
        t0 = time.perf_counter()
        sq = factory(theta[0], theta[1])
        P = build_temporal(theta[2], model.T)
        bank = sample_latent(model, gamma, sq, P, m, warmup=options.warmup if k == 1 else options.warmup_iter,
                             init=state, step_size=step, thin=options.thin, rng=rng)
        state, step = bank.draws[-1], bank.step_size
        Zk = bank.fields(sq, P.R)
        latent_k = pathway.latent(bank, sq, P)
        timings["sampling"] += time.perf_counter() - t0

        # Caffo statistic: change in complete-data log-likelihood between the
        # two latest estimates, evaluated on the fresh draws.
        delta_L = sigma_delta = None
        if prev_theta is not None:
            cur = pathway.per_draw(model, gamma, theta, latent_k)
            old = pathway.per_draw(model, prev_theta[0], prev_theta[1], latent_k)
            d = cur - old
            delta_L = float(d.mean())
            sigma_delta = float(d.std(ddof=1) / math.sqrt(d.size)) if d.size > 1 else 0.0

        alpha = saem_alpha(k, options) if saem else 1.0
        if saem and Whist:
            Whist = [w * (1.0 - alpha) for w in Whist]
        else:
            Zhist, Whist = [], []
        Zhist.append(Zk)
        Whist.append(np.full(Zk.shape[0], alpha / Zk.shape[0]))

        t0 = time.perf_counter()
        prev_theta = (gamma.copy(), theta)
        Zall = np.concatenate(Zhist) if len(Zhist) > 1 else Zk
        wall = np.concatenate(Whist) if len(Whist) > 1 else Whist[0]
        gamma = gamma_step(model, Zall, wall / wall.sum(), gamma0=gamma)
        timings["gamma"] += time.perf_counter() - t0

        t0 = time.perf_counter()
        if not fixed:
            if isinstance(pathway, HsgpPathway):
                pathway.gamma = gamma
            pathway.add(latent_k, alpha)
            theta, hit = optimise_theta(pathway, theta, options.optimiser, estimate_rho)
            lower_hit = lower_hit or hit
        timings["theta"] += time.perf_counter() - t0

        loglik = float(np.mean(pathway.per_draw(model, gamma, theta, latent_k)))
        entry = {
            "iter": k,
            "gamma": [float(v) for v in gamma],
            "sigma_sq": float(theta[0]),
            "phi": float(theta[1]),
            "rho": float(theta[2]),
            "m_k": int(m),
            "loglik": loglik,
            "delta_L": delta_L,
            "sigma_delta": sigma_delta,
            "accept_rate": float(bank.accept_rate),
            "step_size": float(bank.step_size),
        }
        trace.append(entry)
        history.append((gamma.copy(), theta))
        if k >= options.min_iter + (options.burnin if saem else 0):
            decision = stopping_check(trace, options)
            if decision != STOP_CONTINUE:
                reason, converged = decision, True
                break
        if options.adaptive and delta_L is not None:
            m = adapt_mk(m, options.delta, options.epsilon, delta_L, loglik, options.m_max)
        elif options.growth != 1.0:
            m = int(min(options.m_max, math.ceil(m * options.growth)))

    if not converged:
        warnings.warn(f"fit did not converge in {options.max_iter} iterations")
    tail = history[len(history) // 2:]
    gam_tail = np.array([h[0] for h in tail])
    th_tail = np.array([h[1] for h in tail])
    mc_se = {
        "gamma": (gam_tail.std(axis=0, ddof=1) / math.sqrt(len(tail))).tolist() if len(tail) > 1 else None,
        "theta": (th_tail.std(axis=0, ddof=1) / math.sqrt(len(tail))).tolist() if len(tail) > 1 else None,
    }
    if options.use_polyak:
        gamma = gam_tail.mean(axis=0)
        theta = tuple(float(v) for v in th_tail.mean(axis=0)) if not fixed else theta

    t0 = time.perf_counter()
    sq = factory(theta[0], theta[1])
    P = build_temporal(theta[2], model.T)
    bank = sample_latent(model, gamma, sq, P, options.n_pred, warmup=options.warmup_iter, init=state,
                         step_size=step, thin=max(1, options.thin), rng=rng)
    timings["sampling"] += time.perf_counter() - t0

    se = None
    if compute_se and spec.approximation != "hsgp":
        t0 = time.perf_counter()
        Zhat = bank.fields(sq, P.R).mean(axis=0)
        se = standard_errors(model, gamma, theta, factory, Zhat)
        timings["se"] += time.perf_counter() - t0

    return FitResult(
        names=model.names,
        gamma=np.asarray(gamma, float),
        sigma_sq=float(theta[0]),
        phi=float(theta[1]),
        rho=float(theta[2]),
        se=se,
        trace=trace,
        converged=converged,
        stop_reason=reason,
        sample_bank=bank,
        timings=timings,
        theta_source="fixed" if fixed else "estimated",
        options=options,
        spec=spec,
        lower_bound_hit=lower_hit,
        clamp_events=model.clamp_events - clamp0,
        mc_se=mc_se,
    )


# ---------------------------------------------------------------------------
# standard errors


def sigma0_inverse(factory: SqrtFactory, sigma_sq, phi):
    """Dense inverse of Sigma0 (exact) or of its NNGP approximation."""
    if factory.approximation == "hsgp":
        raise UnsupportedError("standard errors are not available with the HSGP approximation")
    params = CovParams(sigma_sq, phi, kernel=factory.kernel)
    n = factory.coords.shape[0]
    if factory.approximation == "nngp":
        f = compute_factor(factory.coords, factory.sets, params)
        IA = np.eye(n) - f.sparse_A().toarray()
        return IA.T @ (IA / f.D[:, None])
    S0 = build_sigma0(factory.coords, params)
    try:
        cf = cho_factor(S0, lower=True)
    except np.linalg.LinAlgError as exc:
        raise FactorisationError(f"Sigma0 is not positive definite: {exc}") from exc
    return cho_solve(cf, np.eye(n))


def block_tridiagonal_solve(diag_blocks, off_scalars, base, rhs):
    """Solve ``K x = rhs`` where ``K[t, t] = diag_blocks[t]`` and
    ``K[t, t+1] = K[t+1, t] = off_scalars[t] * base``.

    ``rhs`` has shape ``(T, n, k)``; symmetric positive definite blocks are
    assumed (block Thomas algorithm with Cholesky factorisations).
    """
    T = len(diag_blocks)
    C, Y, facs = [], [], []
    for t in range(T):
        D = diag_blocks[t].copy()
        h = rhs[t].copy()
        if t > 0:
            E = off_scalars[t - 1] * base
            sol = cho_solve(facs[-1], np.concatenate([E, Y[-1]], axis=1))
            D -= E @ sol[:, : E.shape[1]]
            h -= E @ sol[:, E.shape[1]:]
        try:
            fac = cho_factor(D, lower=True)
        except np.linalg.LinAlgError as exc:
            raise FactorisationError(f"block {t} of the information system is not positive definite") from exc
        facs.append(fac)
        C.append(D)
        Y.append(h)
    x = [None] * T
    x[T - 1] = cho_solve(facs[T - 1], Y[T - 1])
    for t in range(T - 2, -1, -1):
        x[t] = cho_solve(facs[t], Y[t] - off_scalars[t] * base @ x[t + 1])
    return np.stack(x)


def _information(model, lam_q, Sinv, Pinv):
    """``X' Omega^-1 X`` with ``Omega = W + B (P x Sigma0) B'`` via the block identity."""
    X = model.X  # (q, T, k)
    T = model.T
    lam_cells = model.to_cells(lam_q)  # (n, T)
    H = model.to_cells(lam_q[..., None] * X, axis=0) if not model.identity else lam_q[..., None] * X  # (n, T, k)
    diag = [Pinv[t, t] * Sinv + np.diag(lam_cells[:, t]) for t in range(T)]
    off = [Pinv[t, t + 1] for t in range(T - 1)]
    rhs = H.transpose(1, 0, 2)
    sol = block_tridiagonal_solve(diag, off, Sinv, rhs)
    M = np.einsum("qt,qtk,qtl->kl", lam_q, X, X) - np.einsum("tnk,tnl->kl", rhs, sol)
    return 0.5 * (M + M.T)


def standard_errors(model: LgcpModel, gamma, theta, factory: SqrtFactory, Zhat):
    """Standard errors of ``gamma`` from the marginal quasi-likelihood information.

    ``W`` holds the inverse intensities at the estimates (with the latent
    field set to ``Zhat``); the covariance is ``P x Sigma0`` mapped to the
    observation level.  Grid models are the special case ``B = I``.
    """
    Sinv = sigma0_inverse(factory, theta[0], theta[1])
    P = build_temporal(theta[2], model.T)
    lam_q = np.exp(model.eta(gamma, Zhat))
    M = _information(model, lam_q, Sinv, P.Pinv)
    try:
        cov = np.linalg.inv(M)
    except np.linalg.LinAlgError as exc:
        raise NumericError(f"information matrix is singular: {exc}") from exc
    d = np.diag(cov)
    if np.any(d <= 0):
        raise NumericError("information matrix is not positive definite")
    return np.sqrt(d)


def standard_errors_grid(model: LgcpModel, fit: FitResult, factory: SqrtFactory | None = None):
    if model.is_region:
        raise ConfigError("use standard_errors_region for region models")
    return _se_from_fit(model, fit, factory)


def standard_errors_region(model: LgcpModel, fit: FitResult, factory: SqrtFactory | None = None):
    if not model.is_region:
        raise ConfigError("model is not a region model")
    return _se_from_fit(model, fit, factory)


def _se_from_fit(model, fit, factory):
    if fit.spec.approximation == "hsgp":
        raise UnsupportedError("standard errors are not available with the HSGP approximation")
    factory = factory or SqrtFactory(model.coords, fit.spec.approximation, fit.spec.kernel, fit.spec.m, fit.spec.c)
    sq = factory(fit.sigma_sq, fit.phi)
    P = build_temporal(fit.rho, model.T)
    Zhat = fit.sample_bank.fields(sq, P.R).mean(axis=0)
    return standard_errors(model, fit.gamma, fit.theta, factory, Zhat)


def omega_inverse_block(model: LgcpModel, lam_q, Sinv, Pinv):
    """Full ``Omega^-1`` (intersection level, time-major) by the block identity."""
    q, T = lam_q.shape
    n = Sinv.shape[0]
    Bm = np.zeros((q, n))
    Bm[np.arange(q), model.cell] = 1.0
    Wi = lam_q.T.ravel()  # time-major
    # rhs = B' W^-1 for every column of the identity, arranged (T, n, qT)
    rhs = np.zeros((T, n, q * T))
    for t in range(T):
        rhs[t][:, t * q:(t + 1) * q] = Bm.T * lam_q[:, t][None, :]
    lam_cells = (Bm.T @ lam_q)
    diag = [Pinv[t, t] * Sinv + np.diag(lam_cells[:, t]) for t in range(T)]
    off = [Pinv[t, t + 1] for t in range(T - 1)]
    sol = block_tridiagonal_solve(diag, off, Sinv, rhs)
    BW = rhs.reshape(T * n, q * T)
    return np.diag(Wi) - BW.T @ sol.reshape(T * n, q * T)


def omega_inverse_dense(model: LgcpModel, lam_q, Sigma0, P):
    """Oracle: directly invert ``W + (I x B)(P x Sigma0)(I x B)'``."""
    q, T = lam_q.shape
    n = Sigma0.shape[0]
    Bm = np.zeros((q, n))
    Bm[np.arange(q), model.cell] = 1.0
    Bfull = np.kron(np.eye(T), Bm)
    Omega = np.diag(1.0 / lam_q.T.ravel()) + Bfull @ np.kron(P, Sigma0) @ Bfull.T
    return np.linalg.inv(Omega)


def fit_options_dict(options: FitOptions):
    d = asdict(options)
    d["stop_rules"] = list(d["stop_rules"])
    return d
