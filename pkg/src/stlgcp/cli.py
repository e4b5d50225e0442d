"""Command line front end: ``stlgcp {grid,fit,predict,hotspot,semivariogram}``.

Every command reads and writes flat files in one output directory.
Artifacts carry the hash of the configuration that produced them and
downstream commands refuse to mix artifacts from different runs.  Exit
codes: 0 success, 2 configuration error, 3 numerical failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import platform
import sys
import time
import warnings
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .covariance import build_temporal, empirical_semivariogram
from .errors import ArtifactError, ConfigError, LgcpError, UnsupportedError
from .estimation import FitOptions, fit_options_dict, mcmcml_fit
from .geometry import (
    CaseEvents,
    IntersectionMap,
    add_covariates,
    add_time_indicators,
    build_grid,
    compute_intersections,
    points_to_grid,
    reorder,
    union_of,
)
from .io import (
    config_hash,
    env_output_dir,
    geometry_to_shape,
    read_csv_matrix,
    read_events_csv,
    read_geojson,
    read_grid,
    read_json,
    shape_to_geometry,
    write_csv,
    write_geojson,
    write_grid,
    write_json,
    cell_polygon,
)
from .model import LgcpModel, ModelSpec
from .outputs import HotspotQuery, aggregate_output, hotspot_prob, predictions_from_fields
from .sampler import Priors, SqrtFactory, bayes_fit


def _names(text):
    return [s for s in (text or "").split(",") if s]


def _floats(text):
    return [float(s) for s in _names(text)]


# ---------------------------------------------------------------------------
# grid


def cmd_grid(args):
    out = Path(args.output_dir)
    if bool(args.boundary) == bool(args.regions):
        raise ConfigError("give exactly one of --boundary or --regions")
    config = {
        "command": "grid",
        "cellsize": args.cellsize,
        "laglength": args.laglength,
        "period": args.period,
        "ordering": args.ordering,
        "seed": args.seed,
        "covariate_names": _names(args.covariate_names),
        "weight_type": args.weight_type,
        "popdens": args.popdens,
        "count_field": args.count_field,
        "region_covariates": _names(args.region_covariates),
        "region_offset": args.region_offset,
        "time_indicators": args.time_indicators,
    }
    files = [args.boundary, args.regions, args.events, args.covariates]
    chash = config_hash(config, files)
    regions = None
    if args.regions:
        regions = read_geojson(args.regions)
        boundary = union_of([s for s, _ in regions])
    else:
        boundary = union_of([s for s, _ in read_geojson(args.boundary)])
    grid = build_grid(boundary, args.cellsize)
    grid = reorder(grid, args.ordering, args.seed)
    discarded = 0
    if args.events:
        if regions is not None:
            raise ConfigError("case events are only used in grid mode; regions carry their own counts")
        events, discarded = read_events_csv(args.events, args.laglength, args.period)
        grid = points_to_grid(grid, events, args.laglength)
    elif args.laglength > 1:
        grid = points_to_grid(grid, CaseEvents([], [], []), args.laglength)
    if args.covariates:
        source = read_geojson(args.covariates)
        grid = add_covariates(grid, source, _names(args.covariate_names), args.weight_type, args.popdens)
    if args.time_indicators:
        grid = add_time_indicators(grid)
    meta = {"config_hash": chash, "config": config, "events_discarded": discarded, "mode": "grid"}
    if regions is not None:
        meta["mode"] = "region"
        imap = compute_intersections(grid, [s for s, _ in regions])
        write_json(out / "intersections.json", region_payload(regions, imap, args, grid.T))
    write_grid(out, grid, meta)
    return 0


def _period_values(props, field, T, where):
    if f"{field}_1" not in props and field in props:
        return [float(props[field])] * T
    try:
        return [float(props[f"{field}_{t + 1}"]) for t in range(T)]
    except KeyError as exc:
        raise ConfigError(f"{where}: missing property {exc.args[0]!r}") from None


def region_payload(regions, imap: IntersectionMap, args, T):
    counts, covs, offset = [], {n: [] for n in _names(args.region_covariates)}, []
    for j, (_, p) in enumerate(regions):
        where = f"region {j}"
        counts.append(_period_values(p, args.count_field, T, where))
        for name in covs:
            covs[name].append(_period_values(p, name, T, where))
        if args.region_offset:
            offset.append(_period_values(p, args.region_offset, T, where))
    return {
        "cell": imap.cell,
        "region": imap.region,
        "weight": imap.weight,
        "area": imap.area,
        "n_regions": imap.n_regions,
        "counts": counts,
        "region_covariates": covs,
        "region_offset": offset or None,
        "regions": [shape_to_geometry(s) for s, _ in regions],
        "properties": [p for _, p in regions],
    }


# ---------------------------------------------------------------------------
# model loading


def load_model(outdir, spec: ModelSpec):
    grid, meta = read_grid(outdir)
    if meta.get("mode") == "region":
        data = read_json(Path(outdir) / "intersections.json")
        imap = IntersectionMap(
            cell=np.array(data["cell"], dtype=np.int64),
            region=np.array(data["region"], dtype=np.int64),
            weight=np.array(data["weight"], dtype=float),
            n_regions=int(data["n_regions"]),
            area=np.array(data["area"], dtype=float),
        )
        model = LgcpModel.from_regions(
            grid,
            imap,
            np.array(data["counts"], dtype=float),
            spec,
            region_covariates={k: np.array(v, float) for k, v in data["region_covariates"].items()},
            region_offset=None if data["region_offset"] is None else np.array(data["region_offset"], float),
        )
        return grid, meta, model, data
    return grid, meta, LgcpModel.from_grid(grid, spec), None


def spec_from_args(args):
    known = _floats(args.known_theta) if args.known_theta else None
    return ModelSpec(
        covariates=_names(args.covariates),
        region_covariates=_names(args.region_covariates),
        offset=args.offset,
        approximation=args.approximation,
        kernel=args.kernel,
        m=args.m,
        c=args.c,
        known_theta=tuple(known) if known else None,
    )


def spec_dict(spec: ModelSpec):
    return {
        "covariates": list(spec.covariates),
        "region_covariates": list(spec.region_covariates),
        "offset": spec.offset,
        "approximation": spec.approximation,
        "kernel": spec.kernel,
        "m": spec.m,
        "c": spec.c,
        "known_theta": None if spec.known_theta is None else list(spec.known_theta),
    }


def _file_digest(path):
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


# ---------------------------------------------------------------------------
# fit


def cmd_fit(args):
    out = Path(args.output_dir)
    t_start = time.perf_counter()
    spec = spec_from_args(args)
    grid, meta, model, _ = load_model(out, spec)
    config = {"command": "fit", "grid_hash": meta["config_hash"], "spec": spec_dict(spec), "algorithm": args.algorithm,
              "seed": args.seed}
    if args.algorithm == "bayes":
        config.update({"chains": args.chains, "iter_warmup": args.iter_warmup, "iter_sampling": args.iter_sampling})
        result = _fit_bayes(args, spec, model, config)
    else:
        options = FitOptions(
            algorithm=args.algorithm,
            alpha=args.alpha,
            use_polyak=args.polyak,
            m_k=args.m_k,
            adaptive=args.adaptive,
            tol=args.tol,
            max_iter=args.max_iter,
            optimiser=args.optimiser,
            warmup=args.warmup,
            n_pred=args.n_pred,
            seed=args.seed,
        )
        config["options"] = fit_options_dict(options)
        result = _fit_ml(spec, model, options, config)
    fit_doc, Z, params, timings = result
    chash = config_hash(config)
    fit_doc.update({"config_hash": chash, "grid_hash": meta["config_hash"], "model": spec_dict(spec),
                    "model_type": "region" if model.is_region else "grid", "names": model.names})
    write_json(out / "fit.json", fit_doc)
    S, n, T = Z.shape
    header = [f"z_{i}_{t + 1}" for t in range(T) for i in range(n)]
    write_csv(out / "samples.csv", header, Z.transpose(0, 2, 1).reshape(S, n * T))
    if params is not None:
        write_csv(out / "params.csv", list(params), np.column_stack(list(params.values())))
    trace = fit_doc.get("trace") or []
    if trace:
        k = len(trace[0]["gamma"])
        head = ["iter"] + [f"gamma_{j}" for j in range(k)] + ["sigma_sq", "phi", "rho", "m_k", "loglik", "delta_L",
                                                               "sigma_delta", "accept_rate", "step_size"]
        rows = [[e["iter"], *e["gamma"], e["sigma_sq"], e["phi"], e["rho"], e["m_k"], e["loglik"],
                 float("nan") if e["delta_L"] is None else e["delta_L"],
                 float("nan") if e["sigma_delta"] is None else e["sigma_delta"], e["accept_rate"], e["step_size"]]
                for e in trace]
        write_csv(out / "trace.csv", head, rows)
    artifacts = ["fit.json", "samples.csv"] + (["params.csv"] if params is not None else []) + (
        ["trace.csv"] if trace else [])
    write_json(out / "manifest.json", {
        "config_hash": chash,
        "seed": args.seed,
        "threads": args.threads,
        "versions": {"stlgcp": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "artifacts": {a: _file_digest(out / a) for a in artifacts},
        "timing_file": "timing.json",
    })
    timings["wall_clock"] = time.perf_counter() - t_start
    write_json(out / "timing.json", timings)
    return 0


def _fit_ml(spec, model, options, config):
    fit = mcmcml_fit(model, spec, options)
    sq = SqrtFactory(model.coords, spec.approximation, spec.kernel, spec.m, spec.c)(fit.sigma_sq, fit.phi)
    Z = fit.sample_bank.fields(sq, build_temporal(fit.rho, model.T).R)
    doc = {
        "algorithm": options.algorithm,
        "options": config["options"],
        "estimates": fit.summary(),
        "theta_source": fit.theta_source,
        "trace": fit.trace,
        "n_draws": int(Z.shape[0]),
        "mc_se": fit.mc_se,
    }
    return doc, Z, None, dict(fit.timings)


def _fit_bayes(args, spec, model, config):
    if spec.known_theta is not None:
        raise UnsupportedError("known covariance parameters are not supported by the Bayesian sampler")
    factory = SqrtFactory(model.coords, spec.approximation, spec.kernel, spec.m, spec.c)
    t0 = time.perf_counter()
    res = bayes_fit(model, factory, Priors(), chains=args.chains, iter_warmup=args.iter_warmup,
                    iter_sampling=args.iter_sampling, seed=args.seed)
    C, S = res.sigma.shape
    Z = []
    gam = res.gamma.reshape(C * S, -1)
    sig, phi, rho = res.sigma.ravel(), res.phi.ravel(), res.rho.ravel()
    zs = res.zstar.reshape((C * S,) + res.zstar.shape[2:])
    for s in range(C * S):
        sq = factory(sig[s] ** 2, phi[s])
        Z.append(sq.apply(zs[s]) @ build_temporal(rho[s], model.T).R.T)
    params = {f"gamma_{j}": gam[:, j] for j in range(gam.shape[1])}
    params.update({"sigma": sig, "phi": phi, "rho": rho})
    doc = {
        "algorithm": "bayes",
        "estimates": res.summary(),
        "theta_source": "estimated",
        "accept_rate": res.accept_rate,
        "n_draws": int(C * S),
        "trace": [],
    }
    return doc, np.array(Z), params, {"sampling": time.perf_counter() - t0}


# ---------------------------------------------------------------------------
# predict / hotspot


def _load_fit(out):
    out = Path(out)
    if not (out / "fit.json").exists():
        raise ArtifactError(f"{out}: no fit artifact found; run the 'fit' command first")
    fit = read_json(out / "fit.json")
    grid_meta = read_json(out / "grid_meta.json")
    if fit.get("grid_hash") != grid_meta.get("config_hash"):
        raise ArtifactError("fit.json was produced from a different grid artifact; re-run 'fit'")
    spec = ModelSpec(**{k: (tuple(v) if k == "known_theta" and v else v) for k, v in fit["model"].items()})
    grid, meta, model, regions = load_model(out, spec)
    _, Zflat = read_csv_matrix(out / "samples.csv")
    S = Zflat.shape[0]
    Z = Zflat.reshape(S, model.T, model.n).transpose(0, 2, 1)
    if (out / "params.csv").exists():
        head, P = read_csv_matrix(out / "params.csv")
        gamma = P[:, [j for j, h in enumerate(head) if h.startswith("gamma_")]]
    else:
        gamma = np.array([fit["estimates"]["gamma"][nm] for nm in fit["names"]])
    return fit, grid, model, regions, Z, gamma


def _popdens(grid, name):
    return None if not name else grid.values(name)


def _unit_shapes(grid, model, regions):
    if model.is_region:
        return [geometry_to_shape(g) for g in regions["regions"]]
    return [cell_polygon(grid, i) for i in range(grid.n)]


def cmd_predict(args):
    out = Path(args.output_dir)
    fit, grid, model, regions, Z, gamma = _load_fit(out)
    if args.types:
        types = _names(args.types)
    else:
        types = ["pred", "rr"] + (["irr"] if model.T > 1 else [])
    if "irr" in types and not 1 <= args.irr_lag < model.T:
        raise UnsupportedError(f"irr needs a lag between 1 and T-1 (T = {model.T})")
    popdens = None
    if args.popdens:
        if model.is_region:
            if regions["region_offset"] is None:
                raise ConfigError("per-capita predictions for regions need a region offset")
            popdens = np.array(regions["region_offset"], float)
        else:
            popdens = grid.values(args.popdens)
    preds = predictions_from_fields(model, gamma, Z, types, args.irr_lag, popdens)
    cell_props = [{"cell_id": int(c)} for c in grid.cell_ids]
    unit_props = [{"region_id": u} for u in range(model.u)] if model.is_region else cell_props
    rows = []
    for name in ("pred", "pred_pc", "rr", "irr"):
        if name not in preds.samples:
            continue
        target = cell_props if preds.level(name) == "cell" else unit_props
        ids = [p.get("cell_id", p.get("region_id")) for p in target]
        mean, sd = preds.mean(name), preds.sd(name)
        if mean.ndim == 1:
            mean, sd = mean[:, None], sd[:, None]
            periods = [model.T]
        else:
            periods = list(range(1, model.T + 1))
        for i, p in enumerate(target):
            for j, t in enumerate(periods):
                p[f"{name}_mean_{t}"] = float(mean[i, j])
                p[f"{name}_sd_{t}"] = float(sd[i, j])
                rows.append([preds.level(name), ids[i], t, name, float(mean[i, j]), float(sd[i, j])])
    write_geojson(out / "predictions.geojson", _unit_shapes(grid, model, regions), unit_props)
    if model.is_region and "rr" in preds.samples:
        write_geojson(out / "predictions_grid.geojson", [cell_polygon(grid, i) for i in range(grid.n)], cell_props)
    write_csv(out / "predictions.csv", ["level", "id", "t", "measure", "mean", "sd"], rows)
    if args.aggregate:
        targets = read_geojson(args.aggregate)
        cols = [c for c in _names(args.aggregate_columns) if c in preds.samples and preds.level(c) == "cell"]
        if not cols:
            raise ConfigError("no cell-level prediction columns to aggregate")
        props = [dict(p) for _, p in targets]
        for c in cols:
            dens = _popdens(grid, args.popdens) if args.weight_type == "population" else None
            agg = aggregate_output(grid, [s for s, _ in targets], preds.samples[c], args.weight_type, dens)
            for j, p in enumerate(props):
                for t in range(agg.mean.shape[1]):
                    p[f"{c}_mean_{t + 1}"] = float(agg.mean[j, t])
                    p[f"{c}_sd_{t + 1}"] = float(agg.sd[j, t])
        write_geojson(out / "aggregated.geojson", [s for s, _ in targets], props)
    return 0


def cmd_hotspot(args):
    out = Path(args.output_dir)
    fit, grid, model, regions, Z, gamma = _load_fit(out)
    query = HotspotQuery(incidence=args.incidence, rr=args.rr, irr=args.irr, irr_lag=args.irr_lag, label=args.label)
    types = [t for t, v in (("pred", args.incidence), ("rr", args.rr), ("irr", args.irr)) if v is not None]
    preds = predictions_from_fields(model, gamma, Z, types, args.irr_lag)
    prob = hotspot_prob(preds, query)
    cell_level = set(query.thresholds()) == {"rr"} or not model.is_region
    if cell_level:
        shapes = [cell_polygon(grid, i) for i in range(grid.n)]
        ids = [int(c) for c in grid.cell_ids]
    else:
        shapes = _unit_shapes(grid, model, regions)
        ids = list(range(model.u))
    props = [{"id": i, args.label: float(p)} for i, p in zip(ids, prob)]
    thresholds = {"incidence": args.incidence, "rr": args.rr, "irr": args.irr, "irr_lag": args.irr_lag,
                  "label": args.label, "inequality": ">", "combination": "and"}
    doc = {"type": "FeatureCollection", "metadata": {"thresholds": thresholds, "config_hash": fit["config_hash"]},
           "features": [{"type": "Feature", "geometry": shape_to_geometry(s), "properties": p}
                        for s, p in zip(shapes, props)]}
    write_json(out / "hotspots.geojson", doc)
    write_csv(out / "hotspots.csv", ["id", args.label], [[i, float(p)] for i, p in zip(ids, prob)])
    write_json(out / "hotspots_meta.json", {"thresholds": thresholds, "config_hash": fit["config_hash"]})
    return 0


def cmd_semivariogram(args):
    out = Path(args.output_dir)
    grid, _ = read_grid(out)
    if not 1 <= args.period <= grid.T:
        raise ConfigError(f"period must be between 1 and {grid.T}")
    sv = empirical_semivariogram(grid, args.column, args.bins, args.period - 1)
    rows = [[float(c), float(g), int(k)] for c, g, k in zip(sv.bin_centres, sv.semivariance, sv.n_pairs)]
    write_csv(out / "semivariogram.csv", ["bin_center", "semivariance", "n_pairs"], rows)
    return 0


# ---------------------------------------------------------------------------
# argument parsing


def build_parser():
    parser = argparse.ArgumentParser(prog="stlgcp", description="Spatio-temporal log-Gaussian Cox process models")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-o", "--output-dir", default=None,
                        help="artifact directory (default: $LGCP_OUTPUT_DIR or current directory)")
    common.add_argument("--config", help="JSON file with option values; command-line flags take precedence")
    common.add_argument("--threads", type=int, default=None,
                        help="thread budget (default $LGCP_THREADS); results do not depend on it")
    common.add_argument("--seed", type=int, default=1)
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("grid", parents=[common], help="build the computational grid")
    g.add_argument("--boundary", help="boundary polygon(s) GeoJSON")
    g.add_argument("--regions", help="region polygons GeoJSON with counts (region mode)")
    g.add_argument("--cellsize", type=float, required=False)
    g.add_argument("--events", help="case events CSV (x,y[,t|date])")
    g.add_argument("--laglength", type=int, default=1)
    g.add_argument("--period", choices=["day", "week", "month"], default="day")
    g.add_argument("--covariates", help="covariate polygons GeoJSON")
    g.add_argument("--covariate-names", default="")
    g.add_argument("--weight-type", choices=["area", "population"], default="area")
    g.add_argument("--popdens", default=None)
    g.add_argument("--count-field", default="y")
    g.add_argument("--region-covariates", default="")
    g.add_argument("--region-offset", default=None)
    g.add_argument("--ordering", choices=["minimax", "none", "random", "y"], default="minimax")
    g.add_argument("--time-indicators", action="store_true")
    g.set_defaults(func=cmd_grid)

    f = sub.add_parser("fit", parents=[common], help="fit the model")
    f.add_argument("--algorithm", choices=["saem", "mcmcml", "bayes"], default="saem")
    f.add_argument("--approximation", choices=["nngp", "hsgp", "none"], default="nngp")
    f.add_argument("--kernel", choices=["exponential", "squared_exponential"], default="exponential")
    f.add_argument("--m", type=int, default=None, help="neighbours (NNGP) or basis functions per axis (HSGP)")
    f.add_argument("--c", type=float, default=2.0, help="HSGP boundary factor")
    f.add_argument("--covariates", default="")
    f.add_argument("--region-covariates", default="")
    f.add_argument("--offset", default=None)
    f.add_argument("--known-theta", default=None, help="sigma_sq,phi[,rho]")
    f.add_argument("--alpha", type=float, default=0.7)
    f.add_argument("--polyak", action="store_true")
    f.add_argument("--m-k", type=int, default=None)
    f.add_argument("--adaptive", action="store_true")
    f.add_argument("--tol", type=float, default=1e-2)
    f.add_argument("--max-iter", type=int, default=50)
    f.add_argument("--optimiser", choices=["derivative_free", "quasi_newton"], default="quasi_newton")
    f.add_argument("--warmup", type=int, default=500)
    f.add_argument("--n-pred", type=int, default=200)
    f.add_argument("--chains", type=int, default=4)
    f.add_argument("--iter-warmup", type=int, default=500)
    f.add_argument("--iter-sampling", type=int, default=500)
    f.set_defaults(func=cmd_fit)

    p = sub.add_parser("predict", parents=[common], help="summarise predictions")
    p.add_argument("--types", default=None, help="comma-separated subset of pred,rr,irr (default: all available)")
    p.add_argument("--irr-lag", type=int, default=1)
    p.add_argument("--popdens", default=None)
    p.add_argument("--aggregate", help="target polygons GeoJSON for aggregation")
    p.add_argument("--aggregate-columns", default="rr")
    p.add_argument("--weight-type", choices=["area", "population"], default="area")
    p.set_defaults(func=cmd_predict)

    h = sub.add_parser("hotspot", parents=[common], help="exceedance probabilities")
    h.add_argument("--incidence", type=float, default=None)
    h.add_argument("--rr", type=float, default=None)
    h.add_argument("--irr", type=float, default=None)
    h.add_argument("--irr-lag", type=int, default=1)
    h.add_argument("--label", default="hotspot_prob")
    h.set_defaults(func=cmd_hotspot)

    s = sub.add_parser("semivariogram", parents=[common], help="empirical semivariogram of a grid column")
    s.add_argument("--column", default="y")
    s.add_argument("--period", type=int, default=1)
    s.add_argument("--bins", type=int, default=10)
    s.set_defaults(func=cmd_semivariogram)
    return parser


def parse_args(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config:
        cfg = read_json(args.config)
        given = {a.split("=")[0] for a in (argv if argv is not None else sys.argv[1:]) if a.startswith("--")}
        for key, value in cfg.items():
            dest = key.replace("-", "_")
            if not hasattr(args, dest):
                raise ConfigError(f"{args.config}: unknown option {key!r}")
            if "--" + dest.replace("_", "-") not in given:
                setattr(args, dest, value)
    if args.output_dir is None:
        args.output_dir = env_output_dir(".")
    if args.threads is None:
        env = os.environ.get("LGCP_THREADS")
        args.threads = int(env) if env else None
    if args.command == "grid" and not (args.cellsize and args.cellsize > 0):
        raise ConfigError("--cellsize must be a positive number")
    return args


def main(argv=None):
    try:
        args = parse_args(argv)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            return args.func(args)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return exc.exit_code
    except ArtifactError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return exc.exit_code
    except LgcpError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return exc.exit_code
    except (OSError, json.JSONDecodeError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
