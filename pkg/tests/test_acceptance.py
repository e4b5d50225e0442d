"""Acceptance criteria 1-11; each test records one PASS/FAIL line."""

import json
import math
import shutil
import statistics
import time

import numpy as np
import pytest
from scipy.spatial.distance import cdist
from scipy.stats import multivariate_normal, qmc

from stlgcp import cli
from stlgcp.covariance import (
    CovParams,
    LatentMoments,
    build_temporal,
    dense_objective,
    kron_log_det,
    kron_quadratic_form,
)
from stlgcp.estimation import (
    FitOptions,
    adapt_mk,
    caffo_bound,
    mcmcml_fit,
    omega_inverse_block,
    sigma0_inverse,
)
from stlgcp.geometry import MultiPolygon, Polygon, build_grid, compute_intersections
from stlgcp.hsgp import HsgpSqrt, build_basis, hsgp_gradient, hsgp_linear_predictor, scale_coords
from stlgcp.model import LgcpModel, ModelSpec
from stlgcp.nngp import (
    approx_cholesky,
    build_neighbour_sets,
    compute_factor,
    nngp_gradients,
    nngp_log_det,
    nngp_loglik,
    nngp_quadratic_form,
)
from stlgcp.outputs import HotspotQuery, hotspot_prob, predictions_from_fields
from stlgcp.sampler import SqrtFactory

from conftest import UNIT_SQUARE, report, simulate_grid


def _sigma0(coords, s2, phi, kernel="exponential"):
    """Independent dense covariance with the package's 1e-8 relative nugget."""
    d = cdist(coords, coords)
    k = np.exp(-d / phi) if kernel == "exponential" else np.exp(-((d / phi) ** 2))
    return s2 * (k + 1e-8 * np.eye(len(coords)))


def _ar1(rho, T):
    lag = np.abs(np.subtract.outer(np.arange(T), np.arange(T)))
    return rho ** lag.astype(float)


def _rel(a, b):
    return abs(a - b) / abs(b)


# ---------------------------------------------------------------------------


def test_criterion_01_nngp_exact_at_full_rank():
    worst = {"loglik": 0.0, "logdet": 0.0, "quad": 0.0, "chol": 0.0}
    t0 = time.perf_counter()
    for seed in range(20):
        rng = np.random.default_rng(seed)
        n, T = 10, 3
        coords = rng.random((n, 2))
        s2, phi, rho = rng.uniform(0.2, 2.0), rng.uniform(0.05, 1.0), rng.uniform(-0.9, 0.9)
        f = compute_factor(coords, build_neighbour_sets(coords, n - 1), CovParams(s2, phi))
        P = build_temporal(rho, T)
        S0 = _sigma0(coords, s2, phi)
        full = np.kron(_ar1(rho, T), S0)
        V = rng.normal(size=(n, T))
        z = V.T.ravel()  # time-major stacking
        worst["loglik"] = max(worst["loglik"], _rel(nngp_loglik(V, f, P),
                                                    multivariate_normal(np.zeros(n * T), full).logpdf(z)))
        worst["logdet"] = max(worst["logdet"], _rel(nngp_log_det(f, P, n, T), np.linalg.slogdet(full)[1]))
        worst["quad"] = max(worst["quad"], _rel(nngp_quadratic_form(V, f, P), z @ np.linalg.solve(full, z)))
        Lc = np.linalg.cholesky(S0)
        worst["chol"] = max(worst["chol"], np.abs(approx_cholesky(f) - Lc).max() / np.abs(Lc).max())
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-8 and elapsed < 1.0
    report(1, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.2f} s")
    assert ok


def test_criterion_02_kronecker_identities():
    worst_q = worst_d = worst_p = 0.0
    for seed in range(30):
        rng = np.random.default_rng(100 + seed)
        n, T = int(rng.integers(1, 9)), int(rng.integers(1, 5))
        coords = rng.random((n, 2))
        s2, phi, rho = rng.uniform(0.2, 2.0), rng.uniform(0.05, 1.0), rng.uniform(-0.95, 0.95)
        S0 = _sigma0(coords, s2, phi)
        Pm = _ar1(rho, T)
        P = build_temporal(rho, T)
        full = np.kron(Pm, S0)
        z = rng.normal(size=n * T)
        worst_q = max(worst_q, _rel(kron_quadratic_form(z, S0, P), z @ np.linalg.solve(full, z)))
        worst_d = max(worst_d, _rel(kron_log_det(np.linalg.slogdet(S0)[1], P, n, T), np.linalg.slogdet(full)[1]))
        worst_p = max(worst_p, abs(np.linalg.det(Pm) - (1 - rho * rho) ** (T - 1)))
        worst_p = max(worst_p, abs(math.exp(P.logdet) - (1 - rho * rho) ** (T - 1)))
    ok = worst_q < 1e-8 and worst_d < 1e-8 and worst_p < 1e-10
    report(2, ok, f"quad form {worst_q:.1e}, log det {worst_d:.1e}, |P| abs err {worst_p:.1e}")
    assert ok


def _fd_worst(f, grad, x, h=1e-6):
    """Largest relative discrepancy between ``grad`` and central differences of ``f``."""
    worst = 0.0
    for j in range(len(x)):
        e = np.zeros(len(x))
        e[j] = h * max(1.0, abs(x[j]))
        fd = (f(x + e) - f(x - e)) / (2 * e[j])
        worst = max(worst, abs(grad[j] - fd) / max(abs(fd), 1e-6))
    return worst


def test_criterion_03_gradients():
    t0 = time.perf_counter()
    worst = {"full": 0.0, "nngp": 0.0, "hsgp": 0.0}
    base = np.random.default_rng(7)
    coords = base.random((25, 2))
    sets = build_neighbour_sets(coords, 6)
    scaled, scaling = scale_coords(coords)
    basis = build_basis(scaled, 5)
    ls = float(scaling.half_range[0])
    for point in range(10):
        rng = np.random.default_rng(200 + point)
        s2, phi, rho = rng.uniform(0.3, 2.0), rng.uniform(0.1, 0.8), rng.uniform(-0.8, 0.8)
        V = rng.normal(size=(4, 25, 3))
        x = np.array([s2, phi, rho])

        def full(th):
            return dense_objective(LatentMoments(V), coords, CovParams(*th))

        _, g = dense_objective(LatentMoments(V), coords, CovParams(*x), grad=True)
        worst["full"] = max(worst["full"], _fd_worst(full, g, x))

        def nn(th):
            return nngp_loglik(V, compute_factor(coords, sets, CovParams(*th)), build_temporal(th[2], 3))

        g = nngp_gradients(V, compute_factor(coords, sets, CovParams(*x), derivatives=True), build_temporal(rho, 3))
        worst["nngp"] = max(worst["nngp"], _fd_worst(nn, g, x))

        beta = rng.normal(size=25 * 3)
        y = rng.poisson(3.0, size=(25, 3)).astype(float)
        P = build_temporal(rho, 3)

        def hs(th):
            eta = hsgp_linear_predictor(HsgpSqrt(basis, CovParams(*th), ls), P, beta).reshape(3, 25).T
            return float(np.sum(y * eta - np.exp(eta)))

        op = HsgpSqrt(basis, CovParams(s2, phi), ls)
        lam = np.exp(hsgp_linear_predictor(op, P, beta).reshape(3, 25).T)
        worst["hsgp"] = max(worst["hsgp"], _fd_worst(hs, hsgp_gradient(y, lam, op, P, beta), x[:2]))
    elapsed = time.perf_counter() - t0
    ok = max(worst.values()) < 1e-4 and elapsed < 30
    report(3, ok, "max rel err " + ", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f"; {elapsed:.1f} s")
    assert ok


def test_criterion_04_hsgp_fidelity():
    t0 = time.perf_counter()
    g = build_grid(UNIT_SQUARE, 0.1)
    c = g.centres
    exact = _sigma0(c, 1.0, 0.5, "squared_exponential")
    interior = np.flatnonzero((c.min(axis=1) > 0.1) & (c.max(axis=1) < 0.9))
    scaled, scaling = scale_coords(c)
    errs = []
    for m in (5, 10, 25):
        op = HsgpSqrt(build_basis(scaled, m, 2.0), CovParams(1.0, 0.5, kernel="squared_exponential"),
                      float(scaling.half_range[0]))
        block = np.ix_(interior, interior)
        errs.append(float((np.abs(op.covariance() - exact)[block] / exact[block]).max()))
    elapsed = time.perf_counter() - t0
    monotone = all(b <= a for a, b in zip(errs, errs[1:]))
    ok = errs[-1] < 0.05 and monotone and elapsed < 10
    report(4, ok, f"max rel err on interior cells m=5/10/25: {errs[0]:.4f}/{errs[1]:.4f}/{errs[2]:.4f}; "
                  f"monotone={monotone}; {elapsed:.1f} s")
    assert ok


def test_criterion_05_simulation_recovery():
    t0 = time.perf_counter()
    truth = np.array([-0.5, 0.3, 0.36, 0.25, 0.5])
    est = []
    for seed in range(10):
        g, _ = simulate_grid(seed, offset=20.0)
        spec = ModelSpec(covariates=["x"], offset="off", approximation="nngp", m=10)
        fit = mcmcml_fit(LgcpModel.from_grid(g, spec), spec, FitOptions(algorithm="saem", alpha=0.7, seed=seed),
                         compute_se=False)
        est.append([*fit.gamma, fit.sigma_sq, fit.phi, fit.rho])
    med = np.median(est, axis=0)
    rel = np.abs(med - truth) / np.abs(truth)
    elapsed = time.perf_counter() - t0
    ok = rel[:2].max() < 0.25 and rel[2:].max() < 0.5 and elapsed < 600
    names = ["g0", "g1", "s2", "phi", "rho"]
    report(5, ok, "median rel err " + ", ".join(f"{n} {r:.3f}" for n, r in zip(names, rel)) + f"; {elapsed:.0f} s")
    assert ok


def test_criterion_06_region_grid_equivalence():
    t0 = time.perf_counter()
    g, Z = simulate_grid(3, cellsize=0.2, T=2)
    cells = [Polygon([(x, y), (x + 0.2, y), (x + 0.2, y + 0.2), (x, y + 0.2)]) for x, y in zip(g.origin_x, g.origin_y)]
    imap = compute_intersections(g, cells)
    spec = ModelSpec(covariates=["x"], offset="off", m=10)
    mg = LgcpModel.from_grid(g, spec)
    mr = LgcpModel.from_regions(g, imap, g.counts, spec, region_offset=g.covariates["off"])
    assert mr.is_region and not mr.identity
    gamma = np.array([-0.5, 0.3])
    ll_err = _rel(mr.loglik(gamma, Z), mg.loglik(gamma, Z))
    # Monte-Carlo replication: both estimators over the same five seeds
    est = {"grid": [], "region": []}
    for seed in range(5):
        for name, model in (("grid", mg), ("region", mr)):
            fit = mcmcml_fit(model, spec, FitOptions(seed=seed, max_iter=30))
            est[name].append([*fit.gamma, *fit.theta, *fit.se])
    a, b = np.array(est["grid"]), np.array(est["region"])
    mc_se = np.sqrt(a.var(axis=0, ddof=1) / len(a) + b.var(axis=0, ddof=1) / len(b))
    z = np.abs(a.mean(axis=0) - b.mean(axis=0)) / mc_se
    elapsed = time.perf_counter() - t0
    ok = ll_err < 1e-6 and z.max() <= 2.0 and elapsed < 120
    report(6, ok, f"loglik rel diff {ll_err:.1e}; max |diff|/MC se over (gamma, theta, se) {z.max():.2f}; "
                  f"{elapsed:.0f} s")
    assert ok


def test_criterion_07_region_information_block_identity():
    t0 = time.perf_counter()
    worst = 0.0
    for seed, cellsize in enumerate((0.25, 0.2, 0.34)):
        rng = np.random.default_rng(300 + seed)
        g = build_grid(UNIT_SQUARE, cellsize)
        cuts = np.sort(rng.uniform(0.2, 0.8, 2))
        regions = [Polygon([(0, 0), (cuts[0], 0), (cuts[1], 1), (0, 1)]),
                   Polygon([(cuts[0], 0), (1, 0), (1, 0.5), (cuts[1], 1)]),
                   Polygon([(1, 0.5), (1, 1), (cuts[1], 1)])]
        imap = compute_intersections(g, regions)
        assert imap.q <= 40
        model = LgcpModel.from_regions(g, imap, rng.poisson(5, size=(3, 2)), ModelSpec())
        lam = rng.uniform(0.5, 3.0, size=(imap.q, 2))
        s2, phi, rho = 0.6, 0.3, 0.4
        Sinv = sigma0_inverse(SqrtFactory(g.centres, "none"), s2, phi)
        block = omega_inverse_block(model, lam, Sinv, build_temporal(rho, 2).Pinv)
        B = np.zeros((imap.q, g.n))
        B[np.arange(imap.q), imap.cell] = 1.0
        Bt = np.kron(np.eye(2), B)
        Omega = np.diag(1.0 / lam.T.ravel()) + Bt @ np.kron(_ar1(rho, 2), _sigma0(g.centres, s2, phi)) @ Bt.T
        worst = max(worst, float(np.abs(block - np.linalg.inv(Omega)).max()))
    elapsed = time.perf_counter() - t0
    ok = worst < 1e-6 and elapsed < 5
    report(7, ok, f"max abs diff {worst:.1e}; {elapsed:.2f} s")
    assert ok


def test_criterion_08_stopping_arithmetic():
    nd = statistics.NormalDist()
    checks = []
    for dL, sd, delta in [(-2.0, 0.5, 0.05), (0.3, 0.1, 0.1), (-0.01, 2.0, 0.01)]:
        hand = dL + nd.inv_cdf(1 - delta) * sd
        checks.append(abs(caffo_bound(dL, sd, delta) - hand) <= 1e-12 * max(1.0, abs(hand)))
    for m, delta, eps, dL, L in [(50, 0.05, 0.2, 2.0, -400.0), (10, 0.1, 0.1, 0.5, -35.5), (300, 0.05, 0.2, 5.0, -80.0)]:
        z = nd.inv_cdf(1 - delta) + nd.inv_cdf(1 - eps)
        hand = min(2000, max(m, math.ceil(abs(L) * z * z / (dL * dL))))
        checks.append(adapt_mk(m, delta, eps, dL, L) == hand)
    ok = all(checks)
    report(8, ok, f"{sum(checks)}/{len(checks)} scalar checks match")
    assert ok


def test_criterion_09_hotspot_exactness():
    rng = np.random.default_rng(9)
    g, _ = simulate_grid(9, cellsize=0.25, T=3)
    mg = LgcpModel.from_grid(g, ModelSpec(covariates=["x"], offset="off"))
    imap = compute_intersections(g, [Polygon([(0, 0), (0.6, 0), (0.6, 1), (0, 1)]),
                                     Polygon([(0.6, 0), (1, 0), (1, 1), (0.6, 1)])])
    mr = LgcpModel.from_regions(g, imap, rng.poisson(20, size=(2, 3)), ModelSpec())
    cases = [(mg, np.array([-0.5, 0.3]), HotspotQuery(incidence=10.0)),
             (mg, np.array([-0.5, 0.3]), HotspotQuery(incidence=8.0, rr=1.2, irr=1.0, irr_lag=2)),
             (mr, np.array([1.0]), HotspotQuery(incidence=5.0, irr=1.1)),
             (mr, np.array([1.0]), HotspotQuery(rr=1.0))]
    mismatches = 0
    for model, gamma, q in cases:
        Z = rng.normal(size=(57, g.n, 3)) * 0.5
        p = predictions_from_fields(model, gamma, Z, irr_lag=q.irr_lag)
        prob = hotspot_prob(p, q)
        lam = np.stack([model.intensity(gamma, z) for z in Z])
        for u in range(prob.size):
            count = 0
            for s in range(57):
                hit = True
                if q.incidence is not None:
                    hit &= lam[s, u, -1] > q.incidence
                if q.rr is not None:
                    hit &= math.exp(Z[s, u, -1]) > q.rr
                if q.irr is not None:
                    hit &= lam[s, u, -1] / lam[s, u, -1 - q.irr_lag] > q.irr
                count += bool(hit)
            mismatches += prob[u] != count / 57
    ok = mismatches == 0
    report(9, ok, f"{mismatches} mismatches against brute-force counts over {len(cases)} fixtures")
    assert ok


def _pipeline(root, out):
    def run(*args):
        code = cli.main([args[0], "-o", str(out), *args[1:]])
        assert code == 0, args
    run("grid", "--boundary", str(root / "boundary.geojson"), "--cellsize", "0.25", "--events",
        str(root / "events.csv"), "--laglength", "2", "--seed", "3")
    run("fit", "--max-iter", "4", "--m-k", "20", "--warmup", "100", "--n-pred", "20", "--seed", "3")
    run("predict", "--aggregate", str(root / "boundary.geojson"))
    run("hotspot", "--rr", "1.1", "--incidence", "2")
    run("semivariogram", "--period", "2")


def test_criterion_10_cli_determinism(tmp_path):
    (tmp_path / "boundary.geojson").write_text(json.dumps({"type": "FeatureCollection", "features": [
        {"type": "Feature", "properties": {},
         "geometry": {"type": "Polygon", "coordinates": [[[0, 0], [1, 0], [1, 1], [0, 1], [0, 0]]]}}]}))
    rng = np.random.default_rng(10)
    rows = ["x,y,t"] + [f"{x!r},{y!r},{t}" for t in (1, 2) for x, y in rng.random((80, 2)).tolist()]
    (tmp_path / "events.csv").write_text("\n".join(rows) + "\n")
    _pipeline(tmp_path, tmp_path / "a")
    _pipeline(tmp_path, tmp_path / "b")
    names = sorted(p.name for p in (tmp_path / "a").iterdir())
    compared = [n for n in names if n != "timing.json"]
    differ = [n for n in compared if (tmp_path / "a" / n).read_bytes() != (tmp_path / "b" / n).read_bytes()]
    ok = not differ and names == sorted(p.name for p in (tmp_path / "b").iterdir())
    report(10, ok, f"{len(compared)} artifacts compared (timing.json excluded), differing: {differ or 'none'}")
    shutil.rmtree(tmp_path / "a")
    shutil.rmtree(tmp_path / "b")
    assert ok


def test_criterion_11_geometry():
    g = build_grid(Polygon([(0, 0), (1, 0), (1, 1), (0, 1)]), 0.15)
    regions = [
        Polygon([(0, 0), (0.7, 0), (0.7, 0.3), (0.3, 0.3), (0.3, 0.8), (0, 0.8)]),  # concave L
        Polygon([(0.3, 0.3), (1, 0.3), (1, 1), (0.3, 1)], holes=[[(0.5, 0.5), (0.8, 0.5), (0.8, 0.8), (0.5, 0.8)]]),
        MultiPolygon((Polygon([(0.7, 0), (1, 0), (1, 0.3)]), Polygon([(0, 0.8), (0.3, 0.8), (0.15, 1)]))),
        Polygon([(0.55, 0.55), (0.75, 0.6), (0.7, 0.75)]),
    ]
    imap = compute_intersections(g, regions)
    sums = np.bincount(imap.region, weights=imap.weight, minlength=len(regions))
    sum_err = float(np.abs(sums - 1.0).max())
    pts = qmc.Sobol(2, seed=11).random_base2(22)
    col = np.floor(pts[:, 0] / 0.15).astype(int)
    row = np.floor(pts[:, 1] / 0.15).astype(int)
    nx = g.lattice[2]
    lookup = {int(c): i for i, c in enumerate(g.cell_ids)}
    cell_of = np.array([lookup.get(int(r * nx + c), -1) for r, c in zip(row, col)])
    worst = 0.0
    for j, reg in enumerate(regions):
        inside = reg.contains(pts[:, 0], pts[:, 1])
        mc = np.bincount(cell_of[inside & (cell_of >= 0)], minlength=g.n) / pts.shape[0]
        exact = np.zeros(g.n)
        sel = imap.region == j
        exact[imap.cell[sel]] = imap.area[sel]
        worst = max(worst, float(np.abs(mc - exact).max()))
    ok = sum_err < 1e-9 and worst < 1e-3
    report(11, ok, f"weight-sum err {sum_err:.1e}; max |area - quasi-MC area| {worst:.1e}")
    assert ok
