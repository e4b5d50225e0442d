import numpy as np
import pytest

from stlgcp.errors import InvalidQueryError, NoCoverageError
from stlgcp.geometry import Polygon, build_grid, compute_intersections
from stlgcp.model import LgcpModel, ModelSpec
from stlgcp.outputs import (
    HotspotQuery,
    aggregate_output,
    exceedance_draws,
    hotspot_prob,
    predictions_from_fields,
)

from conftest import simulate_grid


@pytest.fixture
def grid_model():
    g, _ = simulate_grid(0, cellsize=0.25, T=3)
    return g, LgcpModel.from_grid(g, ModelSpec(covariates=["x"], offset="off"))


def test_prediction_definitions(grid_model, rng):
    g, m = grid_model
    Z = rng.normal(size=(40, g.n, 3)) * 0.3
    gamma = np.array([-0.5, 0.3])
    p = predictions_from_fields(m, gamma, Z, irr_lag=2, popdens=g.covariates["off"])
    lam = 20 * np.exp(-0.5 + 0.3 * g.covariates["x"] + Z)
    assert np.allclose(p.samples["pred"], lam)
    assert np.allclose(p.samples["pred_pc"], lam / 20)
    assert np.allclose(p.samples["rr"], np.exp(Z))
    assert np.allclose(p.samples["irr"], lam[:, :, 2] / lam[:, :, 0])
    assert np.allclose(p.mean("rr"), np.exp(Z).mean(axis=0))
    assert np.allclose(p.sd("rr"), np.exp(Z).std(axis=0, ddof=1))


def test_per_draw_coefficients(grid_model, rng):
    g, m = grid_model
    Z = rng.normal(size=(5, g.n, 3))
    G = rng.normal(size=(5, 2))
    p = predictions_from_fields(m, G, Z, types=["pred"])
    for s in range(5):
        assert np.allclose(p.samples["pred"][s], m.intensity(G[s], Z[s]))


def test_hotspot_equals_brute_force_count(grid_model, rng):
    g, m = grid_model
    Z = rng.normal(size=(101, g.n, 3))
    p = predictions_from_fields(m, np.array([-0.5, 0.3]), Z)
    q = HotspotQuery(incidence=12.0, rr=1.1, irr=1.0, irr_lag=1)
    prob = hotspot_prob(p, q)
    lam = p.samples["pred"]
    for i in range(g.n):
        hits = sum(
            1 for s in range(101)
            if lam[s, i, -1] > 12.0 and np.exp(Z[s, i, -1]) > 1.1 and lam[s, i, 2] / lam[s, i, 1] > 1.0
        )
        assert prob[i] == hits / 101


def test_threshold_is_strict(grid_model):
    g, m = grid_model
    Z = np.zeros((4, g.n, 3))
    p = predictions_from_fields(m, np.zeros(2), Z, types=["rr"])
    assert np.all(hotspot_prob(p, HotspotQuery(rr=1.0)) == 0.0)
    assert np.all(hotspot_prob(p, HotspotQuery(rr=0.999)) == 1.0)


def test_query_validation(grid_model):
    with pytest.raises(InvalidQueryError):
        HotspotQuery()
    g, m = grid_model
    p = predictions_from_fields(m, np.zeros(2), np.zeros((2, g.n, 3)), types=["rr"])
    with pytest.raises(InvalidQueryError):
        exceedance_draws(p, HotspotQuery(incidence=1.0))


def test_region_rr_cannot_mix_with_region_thresholds(unit_square, rng):
    g = build_grid(unit_square, 0.5)
    imap = compute_intersections(g, [unit_square])
    m = LgcpModel.from_regions(g, imap, np.array([[10.0, 12.0]]), ModelSpec())
    p = predictions_from_fields(m, np.zeros(1), rng.normal(size=(3, g.n, 2)), types=["pred", "rr"])
    assert p.samples["pred"].shape == (3, 1, 2)
    with pytest.raises(InvalidQueryError):
        exceedance_draws(p, HotspotQuery(incidence=1.0, rr=1.0))
    assert hotspot_prob(p, HotspotQuery(rr=1.0)).shape == (g.n,)


def test_aggregation_area_and_population(unit_square, rng):
    g = build_grid(unit_square, 0.5)
    samples = rng.random((7, g.n, 2))
    left = Polygon([(0, 0), (0.75, 0), (0.75, 1), (0, 1)])
    agg = aggregate_output(g, [left], samples)
    w = np.array([0.25 * 0.5 if g.origin_x[i] == 0 else 0.25 * 0.25 for i in range(g.n)])
    w /= w.sum()
    assert np.allclose(agg.samples[:, 0, :], np.einsum("snt,n->st", samples, w))
    assert np.allclose(agg.mean, agg.samples.mean(axis=0))
    pop = np.arange(1.0, g.n + 1)
    aggp = aggregate_output(g, [left], samples, "population", pop)
    wp = w * pop / (w * pop).sum()
    assert np.allclose(aggp.samples[:, 0, :], np.einsum("snt,n->st", samples, wp))
    assert np.allclose(agg.prob_exceed(0.5), (agg.samples[:, :, -1] > 0.5).mean(axis=0))


def test_aggregation_without_overlap(unit_square):
    g = build_grid(unit_square, 0.5)
    with pytest.raises(NoCoverageError):
        aggregate_output(g, [Polygon([(3, 3), (4, 3), (4, 4)])], np.ones((2, g.n, 1)))
