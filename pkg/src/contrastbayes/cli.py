"""Command-line interface: ``simulate``, ``fit``, ``coverage`` and ``validate``.

Exit codes: 0 success, 1 numerical or statistical failure, 2 usage or I/O
error.  Output files never contain timestamps, and their provenance leaves
out ``--out`` and ``--threads``, so reruns with the same seed are
byte-identical whatever the thread count.
"""

from __future__ import annotations

import argparse
import configparser
import hashlib
import json
import sys
import time
from pathlib import Path
from typing import Sequence

import numpy as np

from . import __version__, core, io, markov, oracles, roughness, simulators, variogram

CONFIG_SECTION = "contrastbayes"
# flags that do not change results and are kept out of provenance
_NON_RESULT_FLAGS = {"out", "threads", "config"}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("run options")
    g.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    g.add_argument("--out", type=Path, default=Path("out"), help="output directory (default ./out)")
    g.add_argument("--threads", type=int, default=1, help="worker threads for replications (default 1)")
    g.add_argument("--config", type=Path, default=None,
                   help=f"INI file with a [{CONFIG_SECTION}] section; keys mirror the long flags")


def _floats(text: str) -> list[float]:
    try:
        return [float(v) for v in text.replace(",", " ").split()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected numbers, got {text!r}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contrastbayes", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="simulate a field or a set of transects")
    p.add_argument("kind", choices=("grf", "markov", "cylinders"))
    p.add_argument("--n", type=int, default=20, help="grid side (grf, markov)")
    p.add_argument("--theta", type=float, default=1.0, help="exponential variogram range parameter (grf)")
    p.add_argument("--theta1", type=float, default=0.0, help="field effect (markov)")
    p.add_argument("--theta2", type=float, default=0.3, help="interaction (markov)")
    p.add_argument("--sweeps", type=int, default=simulators.DEFAULT_BURN_IN, help="Gibbs sweeps (markov)")
    p.add_argument("--alpha", type=float, default=46.6, help="cylinder intensity scale (cylinders)")
    p.add_argument("--beta", type=float, default=3.28, help="radius decay rate, 1/mm (cylinders)")
    p.add_argument("--transects", type=int, default=12, help="number of transects (cylinders)")
    p.add_argument("--length", type=float, default=1180.0, help="transect length in mm (cylinders)")
    p.add_argument("--spacing", type=float, default=2.0, help="sampling step in mm (cylinders)")
    _common(p)

    p = sub.add_parser("fit", help="fit one of the three models to a data file")
    p.add_argument("case", choices=("variogram", "markov", "roughness"))
    p.add_argument("--input", type=Path, required=True,
                   help="field CSV (variogram, markov) or transect manifest / file (roughness)")
    p.add_argument("--grid-nodes", type=int, default=None, help="posterior grid nodes per axis")
    p.add_argument("--gamma-reps", type=int, default=1000, help="simulated datasets for Gamma and I")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--prior-box", type=_floats, default=None,
                   help="uniform prior box as 'lo,hi' per parameter, e.g. '-1.5,1.5,-1.5,1.5'")
    p.add_argument("--spacing", type=float, default=None, help="spacing in mm for a single transect file")
    p.add_argument("--bandwidth", type=float, default=roughness.DEFAULT_BANDWIDTH,
                   help="detrending kernel bandwidth in mm; 0 disables (roughness)")
    _common(p)

    p = sub.add_parser("coverage", help="repeated simulate-and-fit coverage study")
    p.add_argument("case", choices=("variogram", "markov", "roughness"))
    p.add_argument("--reps", type=int, default=None, help="outer replications")
    p.add_argument("--gamma-reps", type=int, default=None, help="inner replications for Gamma and I")
    p.add_argument("--n", type=int, default=20, help="grid side (variogram, markov)")
    p.add_argument("--theta", type=float, default=1.0, help="true range parameter (variogram)")
    p.add_argument("--theta1", type=float, default=0.0, help="true field effect (markov)")
    p.add_argument("--theta2", type=float, default=0.3, help="true interaction (markov)")
    p.add_argument("--alpha", type=float, default=46.6, help="true alpha (roughness)")
    p.add_argument("--beta", type=float, default=3.28, help="true beta (roughness)")
    p.add_argument("--transects", type=int, default=12, help="transects per sample (roughness)")
    p.add_argument("--length", type=float, default=1180.0, help="transect length in mm (roughness)")
    p.add_argument("--spacing", type=float, default=2.0, help="sampling step in mm (roughness)")
    p.add_argument("--level", type=float, default=0.95, help="confidence level")
    p.add_argument("--grid-nodes", type=int, default=None, help="posterior grid nodes per axis")
    _common(p)

    p = sub.add_parser("validate", help="run the oracle suite")
    p.add_argument("--only", action="append", choices=sorted(oracles.ORACLES), default=None,
                   help="run only this oracle (repeatable)")
    _common(p)
    return parser


def _subparser(parser: argparse.ArgumentParser, name: str) -> argparse.ArgumentParser:
    for action in parser._actions:
        if isinstance(action, argparse._SubParsersAction):
            return action.choices[name]
    raise KeyError(name)


def _config_defaults(sub: argparse.ArgumentParser, path: Path) -> dict:
    """Typed defaults from an INI file; unknown keys are usage errors."""
    cp = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            cp.read_file(fh)
    except FileNotFoundError:
        raise UsageError(f"config file not found: {path}") from None
    except configparser.Error as exc:
        raise UsageError(f"cannot parse config file {path}: {exc}") from None
    if not cp.has_section(CONFIG_SECTION):
        raise UsageError(f"config file {path} has no [{CONFIG_SECTION}] section")
    actions = {a.dest: a for a in sub._actions if a.option_strings}
    out = {}
    for key, raw in cp.items(CONFIG_SECTION):
        dest = key.replace("-", "_")
        if dest not in actions or dest == "config":
            raise UsageError(f"unknown config key {key!r} in {path}")
        action = actions[dest]
        try:
            if isinstance(action, argparse._AppendAction):
                out[dest] = [v for v in raw.replace(",", " ").split()]
            elif action.type is not None:
                out[dest] = action.type(raw)
            else:
                out[dest] = raw
        except (ValueError, argparse.ArgumentTypeError) as exc:
            raise UsageError(f"bad value for {key!r} in {path}: {exc}") from None
    return out


def parse_args(argv: Sequence[str] | None):
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.config is not None:
        sub = _subparser(parser, args.command)
        sub.set_defaults(**_config_defaults(sub, args.config))
        args = parser.parse_args(argv)
    return args


# ---------------------------------------------------------------- provenance


def provenance(args) -> dict:
    params = {k: (str(v) if isinstance(v, Path) else v) for k, v in sorted(vars(args).items())
              if k not in _NON_RESULT_FLAGS}
    blob = json.dumps(params, sort_keys=True, default=str)
    return {
        "version": __version__,
        "command": args.command,
        "parameters": params,
        "seed": args.seed,
        "config_hash": hashlib.sha256(blob.encode()).hexdigest()[:16],
    }


def _box(args, default: core.ParamBox) -> core.ParamBox:
    if args.prior_box is None:
        return default
    vals = args.prior_box
    if len(vals) != 2 * default.dim:
        raise UsageError(f"--prior-box needs {2 * default.dim} numbers, got {len(vals)}")
    return core.ParamBox(vals[0::2], vals[1::2])


def _require_positive(**kw) -> None:
    for name, v in kw.items():
        if v is not None and v < 1:
            raise UsageError(f"--{name.replace('_', '-')} must be at least 1, got {v}")


# ---------------------------------------------------------------- commands


def cmd_simulate(args) -> int:
    prov = provenance(args)
    out: Path = args.out
    if args.kind == "grf":
        fld = simulators.simulate_grf_exponential(args.n, args.theta, args.seed)
        path = io.write_field_csv(out / "grf_field.csv", fld, prov)
        v = fld.values
        print(f"wrote {path}: {args.n}x{args.n} field, mean {v.mean():.4f}, variance {v.var():.4f}")
    elif args.kind == "markov":
        fld = simulators.simulate_markov_field(args.n, args.theta1, args.theta2, args.sweeps, args.seed)
        path = io.write_field_csv(out / "markov_field.csv", fld, prov)
        print(f"wrote {path}: {args.n}x{args.n} binary field, fraction of ones {fld.values.mean():.4f}")
    else:
        design = roughness.TransectDesign(args.transects, args.length, args.spacing)
        sample = roughness.simulate_sample((args.alpha, args.beta), design, args.seed)
        path = io.write_transects(out, "transects", sample, prov)
        m = roughness.sample_moments(sample)
        print(f"wrote {path}: {len(sample.transects)} transects, nu(A) {m.nu_A:g} mm, "
              f"mean height {m.m1:.4f} mm, mean squared height {m.m2:.4f} mm^2")
    return 0


def _dist(d: core.LimitDistribution, region: core.ConfidenceRegion) -> dict:
    return {"mean": d.mean, "covariance": d.covariance, "intervals": region.intervals,
            "ellipse": {"center": region.center, "shape": region.shape, "radius2": region.radius2,
                        "level": region.level}}


def _map(m: core.MapEstimate) -> dict:
    return {"point": m.point, "objective": m.objective, "refined": m.refined, "on_boundary": m.on_boundary}


def _post_info(p: core.PosteriorInformation) -> dict:
    return {"mean_centered": p.matrix, "mode_centered": p.mode_centered, "omega": p.omega,
            "shortcut": p.shortcut}


def _fit_variogram(args, prov) -> dict:
    fld = io.read_field_csv(args.input, binary=False)
    prior = core.uniform_prior(_box(args, variogram.default_prior().support))
    cfg = variogram.VariogramConfig(args.grid_nodes or 401, args.gamma_reps, args.level, args.seed, args.threads)
    rep = variogram.run_variogram_fit(fld, prior, cfg)
    io.write_grid_csv(args.out / "variogram_posterior.csv", rep.grid, ["theta"], prov)
    return {
        "case": "variogram",
        "t": rep.grid.t,
        "map": _map(rep.map),
        "gamma_mc": rep.gamma_mc,
        "info_mc": rep.info_mc,
        "info_posterior": _post_info(rep.info_post),
        "limit_variance_mc": float(rep.limit_mc.covariance[0, 0]),
        "limit_variance_posterior": float(rep.limit_post.covariance[0, 0]),
        "ci_mc": rep.ci_mc,
        "ci_posterior_info": rep.ci_post,
        "posterior_quantile_interval": rep.grid.marginal_interval(0, args.level),
        "variogram": {"lags": rep.vario.lags, "gamma_hat": rep.vario.gamma_hat, "counts": rep.vario.counts},
        "diagnostics": {"boundary_map": rep.map.on_boundary, "posterior_mass": rep.grid.total_mass()},
    }


def _fit_markov(args, prov) -> dict:
    fld = io.read_field_csv(args.input, binary=True)
    prior = core.uniform_prior(_box(args, markov.default_prior().support))
    cfg = markov.MarkovConfig(args.grid_nodes or 101, args.gamma_reps, simulators.DEFAULT_BURN_IN,
                              args.level, args.seed, args.threads)
    rep = markov.run_markov_fit(fld, prior, cfg)
    io.write_grid_csv(args.out / "markov_posterior.csv", rep.grid, ["theta1", "theta2"], prov)
    for k, name in enumerate(("theta1", "theta2")):
        io.write_marginal_csv(args.out / f"markov_marginal_{name}.csv", rep.grid, k, name, prov)
    return {
        "case": "markov",
        "t": rep.grid.t,
        "map": _map(rep.map),
        "gamma_mc": rep.gamma_mc,
        "info_mc": rep.info_mc,
        "info_posterior": _post_info(rep.info_post),
        "limit_mc": _dist(rep.limit_mc, rep.region_mc),
        "limit_posterior_info": _dist(rep.limit_post, rep.region_post),
        "posterior_quantile_intervals": [rep.grid.marginal_interval(k, args.level) for k in range(2)],
        "interior_counts": rep.counts,
        "diagnostics": {"boundary_map": rep.map.on_boundary, "posterior_mass": rep.grid.total_mass()},
    }


def _fit_roughness(args, prov) -> dict:
    path: Path = args.input
    if path.suffix.lower() == ".json":
        transects, spacing = io.read_transect_manifest(path)
    else:
        if args.spacing is None:
            raise UsageError("--spacing is required for a single transect file")
        transects, spacing = (io.read_transect_file(path),), args.spacing
    if args.bandwidth > 0:
        transects = tuple(roughness.detrend_kernel(t, spacing, args.bandwidth) for t in transects)
    sample = simulators.SurfaceSample(transects, spacing)
    prior = core.uniform_prior(_box(args, roughness.default_prior().support))
    nodes = args.grid_nodes or 101
    rep = roughness.run_roughness_fit(sample, prior, roughness.RoughnessConfig(nodes, nodes, level=args.level))
    io.write_grid_csv(args.out / "roughness_posterior.csv", rep.grid, ["alpha", "beta"], prov)
    io.write_grid_csv(args.out / "roughness_posterior_coarse.csv", rep.coarse, ["alpha", "beta"], prov)
    for k, name in enumerate(("alpha", "beta")):
        io.write_marginal_csv(args.out / f"roughness_marginal_{name}.csv", rep.grid, k, name, prov)
    m = rep.moments
    return {
        "case": "roughness",
        "t": m.nu_A,
        "moments": {"m1": m.m1, "m2": m.m2, "nu_A": m.nu_A},
        "detrend_bandwidth": args.bandwidth,
        "map": _map(rep.map),
        "posterior_quantile_intervals": rep.intervals_post,
        "info_model": rep.info_model,
        "info_posterior": _post_info(rep.info_post),
        "limit_model": _dist(rep.limit, rep.region),
        "kappa": roughness.kappa_constant(),
        "diagnostics": {"boundary_map": rep.map.on_boundary, "posterior_mass": rep.grid.total_mass()},
    }


def cmd_fit(args) -> int:
    if not args.input.exists():
        raise FileNotFoundError(args.input)
    _require_positive(gamma_reps=args.gamma_reps, grid_nodes=args.grid_nodes)
    prov = provenance(args)
    report = {"variogram": _fit_variogram, "markov": _fit_markov, "roughness": _fit_roughness}[args.case](args, prov)
    report["provenance"] = prov
    path = io.write_json(args.out / f"{args.case}_report.json", report)
    print(f"wrote {path}")
    print(f"MAP {np.array2string(np.asarray(report['map']['point']), precision=4)}")
    if report["map"]["on_boundary"]:
        print("warning: the MAP lies on the prior box boundary")
    return 0


def _coverage_variogram(args, prov) -> dict:
    res = variogram.coverage_experiment(args.theta, args.n, args.reps or 200, args.gamma_reps or 200,
                                        args.seed, args.threads, args.level, args.grid_nodes or 401)
    recs = res.records
    io.write_table_csv(args.out / "coverage_variogram.csv", {
        "index": [r.index for r in recs], "map": [r.map for r in recs],
        "ci_lo_mc": [r.ci_lo_mc for r in recs], "ci_hi_mc": [r.ci_hi_mc for r in recs],
        "covered_mc": [r.covered_mc for r in recs],
        "ci_lo_post": [r.ci_lo_post for r in recs], "ci_hi_post": [r.ci_hi_post for r in recs],
        "covered_post": [r.covered_post for r in recs],
    }, prov)
    return {"rate_mc": res.rate_mc, "se_mc": res.se_mc, "rate_post": res.rate_post, "se_post": res.se_post,
            "successes": len(res.successes), "failures": res.failures,
            "errors": sorted({r.error for r in recs if r.error})}


def _coverage_markov(args, prov) -> dict:
    res = markov.coverage_experiment((args.theta1, args.theta2), args.n, args.reps or 50, args.gamma_reps or 1000,
                                     args.seed, args.threads, args.level, args.grid_nodes or 101)
    recs = res.records
    io.write_table_csv(args.out / "coverage_markov.csv", {
        "index": [r.index for r in recs], "map_theta1": [r.map[0] for r in recs],
        "map_theta2": [r.map[1] for r in recs], "var_theta1": [r.var1 for r in recs],
        "var_theta2": [r.var2 for r in recs], "covered_mc": [r.covered_mc for r in recs],
        "covered_post": [r.covered_post for r in recs],
    }, prov)
    ok = len(res.successes)
    return {"hits_mc": res.hits_mc, "hits_post": res.hits_post, "successes": ok, "failures": res.failures,
            "rate_mc": res.hits_mc / ok if ok else None, "rate_post": res.hits_post / ok if ok else None,
            "median_limit_variances": res.median_variances if ok else None,
            "errors": sorted({r.error for r in recs if r.error})}


def _coverage_roughness(args, prov) -> dict:
    design = roughness.TransectDesign(args.transects, args.length, args.spacing)
    nodes = args.grid_nodes or 101
    res = roughness.coverage_experiment((args.alpha, args.beta), design, args.reps or 100, args.seed, args.threads,
                                        roughness.RoughnessConfig(nodes, nodes, level=args.level,
                                                                  warn_boundary=False))
    io.write_table_csv(args.out / "coverage_roughness.csv", {
        "map_alpha": res.maps[:, 0], "map_beta": res.maps[:, 1],
        "covered_post_alpha": res.covered_post[:, 0], "covered_post_beta": res.covered_post[:, 1],
        "covered_model_alpha": res.covered_model[:, 0], "covered_model_beta": res.covered_model[:, 1],
    }, prov)
    post, model = res.rates()
    return {"rate_post": post, "rate_model": model, "successes": int(res.maps.shape[0]), "failures": res.failures}


def cmd_coverage(args) -> int:
    _require_positive(reps=args.reps, gamma_reps=args.gamma_reps, grid_nodes=args.grid_nodes)
    prov = provenance(args)
    fn = {"variogram": _coverage_variogram, "markov": _coverage_markov, "roughness": _coverage_roughness}[args.case]
    summary = fn(args, prov)
    summary["provenance"] = prov
    path = io.write_json(args.out / f"coverage_{args.case}.json", summary)
    print(f"wrote {path}")
    for k, v in summary.items():
        if k.startswith(("rate", "se_", "hits", "failures", "median")):
            print(f"  {k}: {v}")
    return 0


def cmd_validate(args) -> int:
    prov = provenance(args)
    results = oracles.run_oracles(args.only, args.threads)
    for r in results:
        print(r.line())
    io.write_table_csv(args.out / "validate.csv", {
        "measured": [r.measured for r in results], "expected": [r.expected for r in results],
        "tolerance": [r.tolerance for r in results], "passed": [r.passed for r in results],
    }, {**prov, "checks": [f"{r.oracle}: {r.check}" for r in results]})
    io.write_json(args.out / "validate.json", {"results": [vars(r) for r in results], "provenance": prov})
    failed = sum(not r.passed for r in results)
    print(f"{len(results) - failed} passed, {failed} failed")
    return 1 if failed else 0


COMMANDS = {"simulate": cmd_simulate, "fit": cmd_fit, "coverage": cmd_coverage, "validate": cmd_validate}


def main(argv: Sequence[str] | None = None) -> int:
    try:
        args = parse_args(argv)
    except UsageError as exc:
        print(f"contrastbayes: error: {exc}", file=sys.stderr)
        return 2
    except SystemExit as exc:
        return int(exc.code or 0)
    if args.threads < 1:
        print("contrastbayes: error: --threads must be at least 1", file=sys.stderr)
        return 2
    start = time.perf_counter()
    try:
        code = COMMANDS[args.command](args)
    except (UsageError, FileNotFoundError, io.DataFormatError, OSError, ValueError) as exc:
        msg = f"no such file: {exc.filename or exc}" if isinstance(exc, FileNotFoundError) else str(exc)
        print(f"contrastbayes: error: {msg}", file=sys.stderr)
        return 2
    except (core.InferenceError, simulators.SimulationError, roughness.KappaError,
            variogram.CoverageError, np.linalg.LinAlgError) as exc:
        print(f"contrastbayes: numerical failure: {exc}", file=sys.stderr)
        return 1
    print(f"done in {time.perf_counter() - start:.1f} s", file=sys.stderr)
    return code


if __name__ == "__main__":
    raise SystemExit(main())
