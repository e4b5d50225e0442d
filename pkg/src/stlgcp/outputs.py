"""Predictions, hotspot probabilities and aggregation onto other geographies.

Every summary is computed from per-draw quantities: intensities, relative
risks and rate ratios are evaluated draw by draw and only then averaged or
thresholded, so nonlinear summaries (exceedance probabilities, ratios) are
Monte-Carlo consistent.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .covariance import build_temporal
from .errors import InvalidQueryError, NoCoverageError, UnsupportedError
from .geometry import compute_intersections
from .sampler import SqrtFactory

PRED_TYPES = ("pred", "rr", "irr")


@dataclass
class PredictionSet:
    """Per-draw predictions with mean/sd summaries.

    ``samples["pred"]`` is ``(S, u, T)`` incidence for the observation units
    (cells or regions), ``samples["pred_pc"]`` the per-capita incidence,
    ``samples["rr"]`` is ``(S, n, T)`` relative risk on grid cells and
    ``samples["irr"]`` is ``(S, u)`` for the latest period.
    """

    is_region: bool
    T: int
    irr_lag: int | None
    samples: dict = field(default_factory=dict)

    def mean(self, name):
        return self.samples[name].mean(axis=0)

    def sd(self, name):
        s = self.samples[name]
        return s.std(axis=0, ddof=1) if s.shape[0] > 1 else np.zeros(s.shape[1:])

    def level(self, name):
        """``"cell"`` or ``"unit"`` (region for region models, cell for grid models)."""
        if name == "rr" or not self.is_region:
            return "cell"
        return "region"

    @property
    def n_draws(self):
        return next(iter(self.samples.values())).shape[0]


def extract_preds(fit, model, types=PRED_TYPES, irr_lag=1, popdens=None, factory=None):
    """Build a :class:`PredictionSet` from a fitted model's latent draws."""
    types = tuple(types)
    bad = set(types) - set(PRED_TYPES)
    if bad:
        raise InvalidQueryError(f"unknown prediction types {sorted(bad)}")
    if "irr" in types:
        if model.T == 1:
            raise UnsupportedError("incidence rate ratios need more than one period")
        if not 1 <= irr_lag < model.T:
            raise UnsupportedError(f"irr lag must be between 1 and {model.T - 1}")
    spec = fit.spec
    factory = factory or SqrtFactory(model.coords, spec.approximation, spec.kernel, spec.m, spec.c)
    sq = factory(fit.sigma_sq, fit.phi)
    P = build_temporal(fit.rho, model.T)
    Z = fit.sample_bank.fields(sq, P.R)
    return predictions_from_fields(model, fit.gamma, Z, types, irr_lag, popdens)


def predictions_from_fields(model, gamma, Z, types=PRED_TYPES, irr_lag=1, popdens=None):
    """Predictions for explicit latent draws ``Z`` of shape ``(S, n, T)``.

    ``gamma`` is one coefficient vector or one per draw, ``(S, k)``.
    """
    Z = np.asarray(Z, float)
    gamma = np.asarray(gamma, float)
    out = PredictionSet(is_region=model.is_region, T=model.T, irr_lag=irr_lag if "irr" in types else None)
    lam = None
    if "pred" in types or "irr" in types:
        if gamma.ndim == 2:
            lam = np.stack([model.intensity(g, z) for g, z in zip(gamma, Z)])
        else:
            lam = model.intensity(gamma, Z)
    if "pred" in types:
        out.samples["pred"] = lam
        if popdens is not None:
            pd = np.broadcast_to(np.asarray(popdens, float).reshape(lam.shape[1], -1), lam.shape[1:])
            out.samples["pred_pc"] = lam / pd
    if "rr" in types:
        out.samples["rr"] = np.exp(Z)
    if "irr" in types:
        T = model.T
        out.samples["irr"] = lam[:, :, T - 1] / lam[:, :, T - 1 - irr_lag]
    return out


@dataclass(frozen=True)
class HotspotQuery:
    """Joint exceedance query; unset thresholds are ignored.

    ``incidence`` and ``rr`` refer to period ``period`` (default the
    latest); ``irr`` is the rate ratio against ``irr_lag`` periods earlier.
    """

    incidence: float | None = None
    rr: float | None = None
    irr: float | None = None
    irr_lag: int = 1
    period: int = -1
    label: str = "hotspot_prob"

    def __post_init__(self):
        if self.incidence is None and self.rr is None and self.irr is None:
            raise InvalidQueryError("a hotspot query needs at least one threshold")

    def thresholds(self):
        return {k: v for k, v in (("pred", self.incidence), ("rr", self.rr), ("irr", self.irr)) if v is not None}


def exceedance_draws(preds: PredictionSet, query: HotspotQuery):
    """Boolean ``(S, units)`` array: does each draw exceed every threshold?"""
    th = query.thresholds()
    if preds.is_region and "rr" in th and len(th) > 1:
        raise InvalidQueryError("relative risk (grid cells) cannot be combined with region-level thresholds")
    if "irr" in th and preds.irr_lag is not None and preds.irr_lag != query.irr_lag:
        raise InvalidQueryError(f"predictions were built with irr lag {preds.irr_lag}, query asks for {query.irr_lag}")
    joint = None
    for name, value in th.items():
        if name not in preds.samples:
            raise InvalidQueryError(f"predictions do not contain {name!r}")
        s = preds.samples[name]
        s = s if name == "irr" else s[:, :, query.period]
        hit = s > value
        joint = hit if joint is None else joint & hit
    return joint


def hotspot_prob(preds: PredictionSet, query: HotspotQuery):
    """Fraction of draws in which all thresholds are exceeded (strict ``>``)."""
    hits = exceedance_draws(preds, query)
    return hits.sum(axis=0) / hits.shape[0]


@dataclass
class AggregateResult:
    mean: np.ndarray  # (targets, T)
    sd: np.ndarray
    samples: np.ndarray  # (S, targets, T)
    weights: list

    def prob_exceed(self, threshold, period=-1):
        return (self.samples[:, :, period] > threshold).mean(axis=0)


def aggregation_weights(grid, targets, weight_type="area", popdens=None):
    """Per-target lists of ``(cells, weights)``; weights sum to one per target."""
    imap = compute_intersections(grid, targets)
    present = np.bincount(imap.region, minlength=len(targets)) > 0
    if not present.all():
        missing = np.flatnonzero(~present).tolist()
        raise NoCoverageError(f"targets with no grid overlap: {missing}", missing)
    out = []
    for j in range(len(targets)):
        sel = imap.region == j
        cells = imap.cell[sel]
        w = imap.area[sel].copy()
        if weight_type == "population":
            if popdens is None:
                raise InvalidQueryError("population weighting needs a population density column")
            w = w * np.asarray(popdens, float)[cells]
        elif weight_type != "area":
            raise InvalidQueryError(f"unknown weight type {weight_type!r}")
        total = w.sum()
        if not total > 0:
            raise NoCoverageError(f"target {j} has zero total weight", [j])
        out.append((cells, w / total))
    return out


def aggregate_output(grid, targets, samples, weight_type="area", popdens=None):
    """Draw-wise weighted average of cell samples ``(S, n, T)`` over each target."""
    samples = np.asarray(samples, float)
    if samples.ndim == 2:
        samples = samples[:, :, None]
    weights = aggregation_weights(grid, targets, weight_type,
                                  None if popdens is None else np.asarray(popdens, float).reshape(grid.n, -1)[:, -1])
    agg = np.stack([np.einsum("snt,n->st", samples[:, cells, :], w) for cells, w in weights], axis=1)
    sd = agg.std(axis=0, ddof=1) if agg.shape[0] > 1 else np.zeros(agg.shape[1:])
    return AggregateResult(mean=agg.mean(axis=0), sd=sd, samples=agg, weights=weights)
