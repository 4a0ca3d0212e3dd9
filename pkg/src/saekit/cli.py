"""Command-line entry point: ``saekit {direct,fh,trend,simulate}``.

Exit status: 0 success, 2 validation error, 3 non-convergence (outputs and
diagnostics are still written), 64 usage error.
"""
from __future__ import annotations

import argparse
import json
import math
import os
import sys
import warnings
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .direct import annual_estimates, cv_direct, domain_estimate
from .errors import SaekitError, UndefinedCVError
from .frame import Domain, exclude_empty_units, pool_panels
from .io import load_config, read_area_level, read_survey, write_table
from .simulate import STUDIES, AreaSimConfig, DirectSimConfig, UnitSimConfig, monte_carlo
from .spatial_fh import FitOptions, cv_eblup, reml_fit, ser
from .unit_trend import (
    SCALE_NAMES,
    UnitLevelModel,
    compare_precision,
    design_adjust,
    fit_mcmc,
    trend_trajectory,
)

EXIT_OK, EXIT_VALIDATION, EXIT_NONCONVERGENCE, EXIT_USAGE = 0, 2, 3, 64


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _year_range(text: str) -> tuple[int, int]:
    try:
        a, _, b = text.partition(":")
        lo, hi = int(a), int(b or a)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected YEAR or START:END, got {text!r}") from None
    if lo > hi:
        raise argparse.ArgumentTypeError(f"empty year range {text!r}")
    return lo, hi


def _seed(args) -> int:
    if args.seed is not None:
        return args.seed
    env = os.environ.get("SAEKIT_SEED")
    if env is not None:
        try:
            return int(env)
        except ValueError:
            raise SaekitError(f"SAEKIT_SEED must be an integer, got {env!r}") from None
    return 0


def _config_keys(path) -> set:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError):
        return set()
    return set(raw) if isinstance(raw, dict) else set()


def _cv_or_nan(mean, var):
    try:
        return 100.0 * math.sqrt(var) / mean if mean != 0 else float("nan")
    except ValueError:
        return float("nan")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="saekit", description="Small area estimation for forest inventory panels.")
    p.add_argument("--version", action="version", version=f"saekit {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def common(sp, seeded=False):
        sp.add_argument("--out", required=True, type=Path, help="output directory")
        sp.add_argument("--format", choices=("csv", "json"), default="csv")
        sp.add_argument("--threads", type=int, default=os.cpu_count() or 1)
        if seeded:
            sp.add_argument("--seed", type=int, default=None, help="defaults to $SAEKIT_SEED, then 0")

    def frame_inputs(sp):
        sp.add_argument("--plots", required=True, type=Path)
        sp.add_argument("--strata", required=True, type=Path)
        sp.add_argument("--units", required=True, type=Path)
        sp.add_argument("--onset", type=int, default=1999, help="first year of the annual program")

    d = sub.add_parser("direct", help="post-stratified direct estimates per domain")
    frame_inputs(d)
    mode = d.add_mutually_exclusive_group(required=True)
    mode.add_argument("--pool", type=_year_range, help="periodic estimate pooling panels START:END")
    mode.add_argument("--annual", type=_year_range, help="one estimate per panel year START:END")
    common(d)

    f = sub.add_parser("fh", help="fit the spatial Fay-Herriot model")
    f.add_argument("--direct", required=True, type=Path)
    f.add_argument("--covariates", required=True, type=Path)
    f.add_argument("--adjacency", required=True, type=Path)
    f.add_argument("--grid-size", type=int, default=15)
    f.add_argument("--max-iter", type=int, default=2000)
    common(f)

    t = sub.add_parser("trend", help="fit the unit-level Bayesian trend model")
    frame_inputs(t)
    t.add_argument("--forecast", type=int, default=None, help="extend the trajectory through this year")
    t.add_argument("--chains", type=int, default=3)
    t.add_argument("--iter", type=int, default=4000, help="iterations per chain including warmup")
    t.add_argument("--warmup", type=float, default=0.5)
    t.add_argument("--draws", type=int, default=200, help="trajectories kept for spaghetti plots")
    common(t, seeded=True)

    s = sub.add_parser("simulate", help="run a Monte Carlo validation study")
    s.add_argument("--study", required=True, choices=STUDIES)
    s.add_argument("--config", type=Path, default=None, help="JSON file of config fields")
    s.add_argument("--reps", type=int, default=200)
    common(s, seeded=True)
    return p


def _meta(args, extra=None, flags=()):
    cfg = {k: (str(v) if isinstance(v, Path) else v) for k, v in vars(args).items()
           if k not in ("out", "threads", "format")}
    meta = {"software": "saekit", "version": __version__, "config": cfg, "flags": sorted(set(flags))}
    if extra:
        meta.update(extra)
    return meta


def _cmd_direct(args) -> int:
    frame, domains = read_survey(args.plots, args.strata, args.units, args.onset)
    cols = ["domain_id", "year", "period", "mean", "variance_of_mean", "total", "variance_of_total",
            "cv_percent", "n_plots", "area_ha", "flags"]
    rows, flags = [], []
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        for dom in domains:
            if args.pool:
                ests = [domain_estimate(pool_panels(frame, args.pool), dom)]
            else:
                ests = annual_estimates(frame, dom, range(args.annual[0], args.annual[1] + 1))
            for e in ests:
                try:
                    cv = cv_direct(e)
                except UndefinedCVError:
                    cv = float("nan")
                period = f"{args.pool[0]}:{args.pool[1]}" if args.pool else str(e.year_label)
                rows.append([e.domain_id, e.year_label, period, e.mean, e.variance_of_mean, e.total,
                             e.variance_of_total, cv, e.n_plots, e.area, list(e.flags)])
                flags.extend(e.flags)
    flags.extend(str(w.message) for w in caught)
    write_table(args.out, "direct_estimates", cols, rows, args.format, _meta(args, flags=flags))
    return EXIT_OK


def _cmd_fh(args) -> int:
    data = read_area_level(args.direct, args.covariates, args.adjacency)
    fit = reml_fit(data, FitOptions(grid_size=args.grid_size, max_iter=args.max_iter))
    cv_d = [_cv_or_nan(m, v) for m, v in zip(data.y, data.psi)]
    cv_e = cv_eblup(fit)
    s = ser(data.psi, fit)
    isolated = set(data.isolated)
    rows = []
    for k, dom in enumerate(data.domains):
        fl = []
        if dom in isolated:
            fl.append("isolated")
        if not np.isfinite(cv_e[k]):
            fl.append("undefined_cv")
        if np.isinf(s[k]):
            fl.append("infinite_ser")
        rows.append([dom, data.y[k], data.psi[k], cv_d[k], fit.eblup[k], fit.mse[k],
                     fit.g1[k], fit.g2[k], fit.g3[k], cv_e[k], s[k], fl])
    cols = ["domain_id", "direct_mean", "direct_variance", "direct_cv", "eblup", "mse",
            "g1", "g2", "g3", "eblup_cv", "ser", "flags"]
    meta = _meta(args, {"excluded_domains": list(data.excluded), "converged": fit.converged},
                 flags=fit.flags)
    write_table(args.out, "fh_domains", cols, rows, args.format, meta)
    params = [[f"beta_{name}", float(b)] for name, b in zip(("intercept",) + data.covariate_names, fit.beta)]
    params += [["sigma2", fit.sigma2], ["rho", fit.rho], ["reml_loglik", fit.reml_loglik],
               ["fisher_sigma2_sigma2", fit.fisher_info[0, 0]], ["fisher_sigma2_rho", fit.fisher_info[0, 1]],
               ["fisher_rho_rho", fit.fisher_info[1, 1]], ["iterations", float(fit.iterations)]]
    write_table(args.out, "fh_parameters", ["parameter", "estimate"], params, args.format, meta)
    return EXIT_OK if fit.converged else EXIT_NONCONVERGENCE


def _posterior_rows(draws):
    rows = []

    def add(name, x, rhat):
        q = np.quantile(x, [0.025, 0.5, 0.975])
        rows.append([name, float(np.mean(x)), float(np.std(x, ddof=1)), q[0], q[1], q[2],
                     float(rhat) if rhat is not None else None])

    for name in ("alpha", "beta") + SCALE_NAMES:
        add(name, draws.flat(name), draws.rhat.get(name))
    for name, ids in (("alpha_h", draws.stratum_ids), ("beta_h", draws.stratum_ids),
                      ("alpha_hi", draws.plot_ids), ("beta_hi", draws.plot_ids)):
        if name not in draws.params:
            continue
        flat = draws.flat(name)
        rh = draws.rhat.get(name)
        for k, i in enumerate(ids):
            add(f"{name}[{i}]", flat[:, k], None if rh is None else rh[k])
    return rows


def _cmd_trend(args) -> int:
    seed = _seed(args)
    frame, _ = read_survey(args.plots, args.strata, args.units, args.onset)
    frame = exclude_empty_units(frame)
    draws = fit_mcmc(UnitLevelModel(), frame, seed=seed, n_chains=args.chains, n_iter=args.iter,
                     warmup=args.warmup, threads=args.threads)
    adj = design_adjust(draws, frame)
    observed = frame.years
    last = max(observed[-1], args.forecast or observed[-1])
    years = list(range(observed[0], last + 1))
    traj = trend_trajectory(adj, years)
    flags = [] if draws.converged else ["not_converged"]
    extra = {"seed": seed, "area_ha": adj.area, "max_rhat": draws.max_rhat,
             "n_single_visit_plots": draws.n_single_visit_plots, "converged": draws.converged}

    cols = ["year", "t", "forecast"]
    for part in ("mean", "total"):
        cols += [f"{part}_{s}" for s in ("posterior_mean", "posterior_variance", "median", "q025", "q975", "cv")]
    cols += ["prob_beta_positive", "flags"]
    rows = []
    for e in traj:
        row = [e.year, e.t, e.year > observed[-1]]
        for s in (e.mean, e.total):
            row += [s.mean, s.variance, s.median, s.lower, s.upper, s.cv]
        rows.append(row + [e.prob_beta_positive, list(e.flags)])
        flags.extend(e.flags)
    write_table(args.out, "trend", cols, rows, args.format, _meta(args, extra, flags))

    population = Domain("population", tuple(frame.units), frame.total_area)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always")
        direct = annual_estimates(frame, population, observed)
        cmp_ = compare_precision(traj, direct)
    direct_by_year = {e.year_label: e for e in direct}
    crow = [[r.year, r.cv_model, r.cv_direct, r.reduction, direct_by_year[r.year].total,
             direct_by_year[r.year].variance_of_total] for r in cmp_.rows]
    write_table(args.out, "precision_comparison",
                ["year", "cv_model", "cv_direct", "reduction_pct", "direct_total", "direct_variance_of_total"],
                crow, args.format,
                _meta(args, {**extra, "mean_reduction_pct": cmp_.mean_reduction},
                      flags + [str(w.message) for w in caught]))

    write_table(args.out, "posterior_summary", ["parameter", "mean", "sd", "q025", "median", "q975", "rhat"],
                _posterior_rows(draws), args.format, _meta(args, extra, flags))

    n = draws.n_draws
    pick = np.unique(np.linspace(0, n - 1, min(args.draws, n)).round().astype(int))
    scalars = ("alpha", "beta") + SCALE_NAMES
    drows = []
    for k in pick:
        chain, it = divmod(int(k), draws.n_iter)
        drows.append([chain, it] + [draws.flat(s)[k] for s in scalars] + [adj.alpha_hat[k], adj.beta_hat[k]])
    write_table(args.out, "draws", ["chain", "iteration", *scalars, "alpha_hat", "beta_hat"], drows,
                args.format, _meta(args, extra, flags))
    trows = [[int(k), y, adj.area * (adj.alpha_hat[k] + adj.beta_hat[k] * (y - adj.onset_year))]
             for k in pick for y in years]
    write_table(args.out, "trajectories", ["draw", "year", "total"], trows, args.format,
                _meta(args, extra, flags))
    return EXIT_OK if draws.converged else EXIT_NONCONVERGENCE


_STUDY_CONFIG = {"direct_unbiasedness": DirectSimConfig, "fh_recovery": AreaSimConfig,
                 "fh_mse_calibration": AreaSimConfig, "trend_coverage": UnitSimConfig}


def _cmd_simulate(args) -> int:
    cls = _STUDY_CONFIG[args.study]
    cfg = load_config(args.config, cls) if args.config else cls()
    # --seed wins over a seed in the config file, which wins over $SAEKIT_SEED
    file_seed = args.config is not None and "seed" in _config_keys(args.config)
    if args.seed is not None or not file_seed:
        cfg = replace(cfg, seed=_seed(args))
    report = monte_carlo(args.study, cfg, args.reps, threads=args.threads)
    extra = {"seed": cfg.seed, "study": args.study, "n_failed": report.n_failed, "sim_config": report.config}
    keys = sorted({k for r in report.replicates for k in r if k != "traceback"})
    rows = [[i] + [r.get(k) for k in keys] for i, r in enumerate(report.replicates)]
    write_table(args.out, f"{args.study}_replicates", ["replicate"] + keys, rows, args.format, _meta(args, extra))
    srows = [[k, v, report.mc_se.get(k)] for k, v in report.metrics.items()]
    write_table(args.out, f"{args.study}_summary", ["metric", "value", "mc_se"], srows, args.format,
                _meta(args, extra))
    return EXIT_OK


_COMMANDS = {"direct": _cmd_direct, "fh": _cmd_fh, "trend": _cmd_trend, "simulate": _cmd_simulate}


def cli(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "threads", 1) < 1:
        parser.error("--threads must be at least 1")
    try:
        return _COMMANDS[args.command](args)
    except (SaekitError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"saekit {args.command}: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


def main() -> None:
    sys.exit(cli())
