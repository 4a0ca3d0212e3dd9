"""Synthetic survey frames and area-level data with known truth, plus Monte Carlo studies.

Every generator is a pure function of its config (including ``seed``).
Replicate ``r`` of a study draws from child ``r`` of ``SeedSequence(seed)``,
so reports do not depend on worker count or execution order.
"""
from __future__ import annotations

import math
import traceback
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from typing import Any

import numpy as np
from scipy import stats

from .direct import annual_estimates, domain_estimate
from .errors import DomainError, MonteCarloAbort
from .frame import Domain, EstimationUnit, PlotVisit, Stratum, SurveyFrame, build_frame
from .spatial_fh import AreaLevelData, FitOptions, bootstrap_mse, reml_fit, row_standardize, sar_covariance, ser
from .unit_trend import (
    SCALE_NAMES,
    UnitLevelModel,
    compare_precision,
    design_adjust,
    fit_mcmc,
    trend_trajectory,
)

STUDIES = ("fh_recovery", "fh_mse_calibration", "trend_coverage", "direct_unbiasedness")
MAX_FAILURE_RATE = 0.05


# -- configs ------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaSimConfig:
    seed: int = 0
    n_domains: int = 100
    topology: str = "lattice"
    beta: tuple[float, ...] = (10.0, 1.0, -1.0)
    sigma2: float = 4.0
    rho: float = 0.5
    psi_scale: float = 4.0
    notional_plots: int = 8
    covariate_sd: float = 1.0
    radius: float | None = None

    def __post_init__(self):
        if self.n_domains < 2:
            raise DomainError("n_domains must be at least 2")
        if not -1 < self.rho < 1:
            raise DomainError("rho must lie in (-1, 1)")
        if self.sigma2 < 0 or self.psi_scale < 0 or self.notional_plots < 1:
            raise DomainError("variances must be nonnegative and notional_plots positive")
        if self.topology not in ("lattice", "ring", "random_geometric"):
            raise DomainError(f"unknown topology {self.topology!r}")
        object.__setattr__(self, "beta", tuple(float(b) for b in self.beta))


@dataclass(frozen=True)
class UnitSimConfig:
    seed: int = 0
    n_units: int = 2
    strata_per_unit: int = 2
    plots_per_stratum: int = 25
    first_year: int = 1999
    n_years: int = 20
    rotation: int = 5
    onset_year: int = 1999
    alpha: float = 100.0
    beta: float = 2.0
    sigma_alpha_h: float = 10.0
    sigma_beta_h: float = 0.5
    sigma_alpha_hi: float = 20.0
    sigma_beta_hi: float = 1.0
    sigma_eps: float = 5.0
    stratum_area_range: tuple[float, float] = (500.0, 5000.0)
    n_chains: int = 3
    n_iter: int = 2000
    warmup: float = 0.5

    def __post_init__(self):
        counts = (self.n_units, self.strata_per_unit, self.plots_per_stratum, self.n_years, self.rotation)
        if min(counts) < 1:
            raise DomainError("all counts must be positive")
        if any(getattr(self, s) < 0 for s in SCALE_NAMES):
            raise DomainError("scales must be nonnegative")
        lo, hi = self.stratum_area_range
        if not 0 < lo <= hi:
            raise DomainError("invalid stratum area range")
        if self.first_year < self.onset_year:
            raise DomainError("first_year precedes onset_year")

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(range(self.first_year, self.first_year + self.n_years))


@dataclass(frozen=True)
class DirectSimConfig:
    seed: int = 0
    n_units: int = 3
    strata_per_unit: int = 3
    population_per_stratum: tuple[int, int] = (40, 120)
    sample_size: int = 30
    stratum_mean_range: tuple[float, float] = (20.0, 200.0)
    within_sd: float = 15.0
    plot_area_ha: float = 2428.0

    def __post_init__(self):
        lo, hi = self.population_per_stratum
        if min(self.n_units, self.strata_per_unit, lo) < 1 or hi < lo:
            raise DomainError("invalid population counts")
        if self.sample_size < self.strata_per_unit:
            raise DomainError("sample_size must allow every stratum to be sampled")


# -- truths -------------------------------------------------------------------------

@dataclass(frozen=True)
class AreaTruth:
    Z: np.ndarray
    v: np.ndarray
    beta: np.ndarray
    sigma2: float
    rho: float


@dataclass(frozen=True)
class UnitTruth:
    alpha: float
    beta: float
    stratum_ids: tuple
    stratum_areas: np.ndarray
    alpha_h: np.ndarray
    beta_h: np.ndarray
    plot_ids: tuple
    alpha_hi: np.ndarray
    beta_hi: np.ndarray
    onset_year: int

    @property
    def area(self) -> float:
        return float(math.fsum(self.stratum_areas))

    def true_slope(self) -> float:
        return float(np.sum(self.stratum_areas * (self.beta + self.beta_h)) / self.area)

    def true_intercept(self) -> float:
        return float(np.sum(self.stratum_areas * (self.alpha + self.alpha_h)) / self.area)

    def true_mean(self, t) -> float:
        """Area-weighted mean of the stratum trend lines at time ``t``."""
        return self.true_intercept() + self.true_slope() * t

    def true_total(self, t) -> float:
        return self.area * self.true_mean(t)


@dataclass(frozen=True)
class FinitePopulation:
    """A fully enumerated population of plots; sampling draws plots from units."""

    units: tuple[EstimationUnit, ...]
    strata: tuple[Stratum, ...]
    plot_stratum: tuple[str, ...]
    values: np.ndarray
    onset_year: int = 1999

    @property
    def true_mean(self) -> float:
        return float(np.mean(self.values))


# -- topologies ---------------------------------------------------------------------

def lattice_adjacency(n: int) -> np.ndarray:
    rows = max(r for r in range(1, int(math.isqrt(n)) + 1) if n % r == 0)
    cols = n // rows
    a = np.zeros((n, n))
    for i in range(rows):
        for j in range(cols):
            k = i * cols + j
            if j + 1 < cols:
                a[k, k + 1] = a[k + 1, k] = 1
            if i + 1 < rows:
                a[k, k + cols] = a[k + cols, k] = 1
    return a


def ring_adjacency(n: int) -> np.ndarray:
    a = np.zeros((n, n))
    for k in range(n):
        a[k, (k + 1) % n] = a[(k + 1) % n, k] = 1
    np.fill_diagonal(a, 0)
    return a


def random_geometric_adjacency(n: int, rng: np.random.Generator, radius: float | None = None) -> np.ndarray:
    pts = rng.random((n, 2))
    r = radius if radius is not None else math.sqrt(6.0 / (math.pi * n))
    d = np.hypot(pts[:, None, 0] - pts[None, :, 0], pts[:, None, 1] - pts[None, :, 1])
    a = (d <= r).astype(float)
    np.fill_diagonal(a, 0)
    return a


def _adjacency(cfg: AreaSimConfig, rng) -> np.ndarray:
    if cfg.topology == "lattice":
        return lattice_adjacency(cfg.n_domains)
    if cfg.topology == "ring":
        return ring_adjacency(cfg.n_domains)
    return random_geometric_adjacency(cfg.n_domains, rng, cfg.radius)


# -- generators ---------------------------------------------------------------------

def _rng(seed) -> np.random.Generator:
    return np.random.default_rng(seed)


def gen_area_level(cfg: AreaSimConfig, seed=None) -> tuple[AreaLevelData, AreaTruth]:
    """Draw one area-level data set from the spatial Fay-Herriot model.

    ``psi_d = psi_scale * nu / chi2_nu`` with ``nu = notional_plots``; the
    random effects come from the SAR(1) law via a Cholesky factor.
    """
    rng = _rng(cfg.seed if seed is None else seed)
    D = cfg.n_domains
    W, _ = row_standardize(_adjacency(cfg, rng))
    p = len(cfg.beta)
    X = np.column_stack([np.ones(D), cfg.covariate_sd * rng.standard_normal((D, p - 1))])
    beta = np.asarray(cfg.beta)
    if cfg.sigma2 > 0:
        G = sar_covariance(cfg.rho, W, cfg.sigma2)
        v = np.linalg.cholesky(G) @ rng.standard_normal(D)
    else:
        v = np.zeros(D)
    if cfg.psi_scale > 0:
        nu = cfg.notional_plots
        psi = cfg.psi_scale * nu / rng.chisquare(nu, size=D)
    else:
        psi = np.zeros(D)
    Z = X @ beta + v
    y = Z + np.sqrt(psi) * rng.standard_normal(D)
    data = AreaLevelData(
        domains=tuple(f"D{k:04d}" for k in range(D)), y=y, psi=psi, X=X, W=W,
        covariate_names=tuple(f"x{k}" for k in range(1, p)),
    )
    return data, AreaTruth(Z=Z, v=v, beta=beta, sigma2=cfg.sigma2, rho=cfg.rho)


def gen_unit_level(cfg: UnitSimConfig, seed=None) -> tuple[SurveyFrame, UnitTruth]:
    """Draw a rotating-panel survey frame from the hierarchical trend model.

    Plot ``k`` of each stratum is measured in years ``first_year + (k mod
    rotation) + m * rotation``, so each annual panel holds a mutually
    exclusive subset of plots drawn from every stratum.
    """
    rng = _rng(cfg.seed if seed is None else seed)
    units, strata, visits = [], [], []
    s_ids, s_areas, ah_all, bh_all = [], [], [], []
    p_ids, ap_all, bp_all = [], [], []
    lo, hi = cfg.stratum_area_range
    years = cfg.years
    for u in range(cfg.n_units):
        uid = f"U{u:02d}"
        areas = rng.uniform(lo, hi, size=cfg.strata_per_unit)
        for h in range(cfg.strata_per_unit):
            sid = f"{uid}S{h:02d}"
            strata.append(Stratum(sid, uid, float(areas[h])))
            a_h = cfg.sigma_alpha_h * rng.standard_normal()
            b_h = cfg.sigma_beta_h * rng.standard_normal()
            s_ids.append(sid)
            s_areas.append(float(areas[h]))
            ah_all.append(a_h)
            bh_all.append(b_h)
            for i in range(cfg.plots_per_stratum):
                pid = f"{sid}P{i:04d}"
                a_hi = cfg.sigma_alpha_hi * rng.standard_normal()
                b_hi = cfg.sigma_beta_hi * rng.standard_normal()
                p_ids.append(pid)
                ap_all.append(a_hi)
                bp_all.append(b_hi)
                offset = i % cfg.rotation
                for year in years[offset::cfg.rotation]:
                    t = year - cfg.onset_year
                    mu = cfg.alpha + a_h + a_hi + (cfg.beta + b_h + b_hi) * t
                    visits.append(PlotVisit(pid, sid, year, float(mu + cfg.sigma_eps * rng.standard_normal())))
        units.append(EstimationUnit(uid, float(math.fsum(areas))))
    frame = build_frame(units, strata, visits, onset_year=cfg.onset_year)
    truth = UnitTruth(
        alpha=cfg.alpha, beta=cfg.beta, stratum_ids=tuple(s_ids), stratum_areas=np.array(s_areas),
        alpha_h=np.array(ah_all), beta_h=np.array(bh_all), plot_ids=tuple(p_ids),
        alpha_hi=np.array(ap_all), beta_hi=np.array(bp_all), onset_year=cfg.onset_year,
    )
    return frame, truth


def population_domain(frame: SurveyFrame, domain_id: str = "population") -> Domain:
    return Domain(domain_id, tuple(frame.units), frame.total_area)


def gen_finite_population(cfg: DirectSimConfig, seed=None) -> FinitePopulation:
    rng = _rng(cfg.seed if seed is None else seed)
    lo, hi = cfg.population_per_stratum
    units, strata, owner, values = [], [], [], []
    for u in range(cfg.n_units):
        uid = f"U{u:02d}"
        unit_area = []
        for h in range(cfg.strata_per_unit):
            sid = f"{uid}S{h:02d}"
            N_h = int(rng.integers(lo, hi + 1))
            mu = rng.uniform(*cfg.stratum_mean_range)
            values.append(np.maximum(mu + cfg.within_sd * rng.standard_normal(N_h), 0.0))
            owner.extend([sid] * N_h)
            area = N_h * cfg.plot_area_ha
            strata.append(Stratum(sid, uid, area))
            unit_area.append(area)
        units.append(EstimationUnit(uid, float(math.fsum(unit_area))))
    return FinitePopulation(tuple(units), tuple(strata), tuple(owner), np.concatenate(values))


def sample_population(pop: FinitePopulation, sample_size: int, rng, max_tries: int = 1000) -> SurveyFrame:
    """Simple random sample of plots within each unit, post-stratified afterwards.

    Samples leaving a stratum empty are redrawn, so the estimator is used
    conditionally on every stratum being observed.
    """
    owner = np.array(pop.plot_stratum, dtype=object)
    unit_of = {s.id: s.unit_id for s in pop.strata}
    plot_unit = np.array([unit_of[s] for s in owner], dtype=object)
    visits = []
    for unit in pop.units:
        idx = np.flatnonzero(plot_unit == unit.id)
        wanted = {s.id for s in pop.strata if s.unit_id == unit.id}
        for _ in range(max_tries):
            take = rng.choice(idx, size=min(sample_size, len(idx)), replace=False)
            if {owner[k] for k in take} == wanted:
                break
        else:
            raise DomainError(f"could not sample every stratum of unit {unit.id!r}")
        for k in sorted(take):
            visits.append(PlotVisit(f"P{k:06d}", owner[k], pop.onset_year, float(pop.values[k])))
    return build_frame(pop.units, pop.strata, visits, onset_year=pop.onset_year)


# -- Monte Carlo studies ------------------------------------------------------------

@dataclass
class MonteCarloReport:
    study: str
    n_reps: int
    n_failed: int
    metrics: dict[str, float]
    mc_se: dict[str, float]
    replicates: list[dict[str, Any]] = field(repr=False, default_factory=list)
    config: dict[str, Any] = field(default_factory=dict)


def _rep_direct(cfg: DirectSimConfig, pop: FinitePopulation, seed) -> dict:
    rng = _rng(seed)
    frame = sample_population(pop, cfg.sample_size, rng)
    est = domain_estimate(frame, population_domain(frame))
    return {"mean": est.mean, "variance_of_mean": est.variance_of_mean, "n_plots": est.n_plots}


def _rep_fh(cfg: AreaSimConfig, seed) -> dict:
    data, truth = gen_area_level(cfg, seed=seed)
    fit = reml_fit(data)
    s = ser(data.psi, fit)
    row = {
        "sigma2": fit.sigma2, "rho": fit.rho, "converged": fit.converged,
        "mse_eblup": float(np.mean((fit.eblup - truth.Z) ** 2)),
        "mse_direct": float(np.mean((data.y - truth.Z) ** 2)),
        "mean_ser": float(np.mean(s[np.isfinite(s)])),
        "mean_analytic_mse": float(np.mean(fit.mse)),
        "sigma2_boundary": "sigma2_boundary" in fit.flags,
    }
    for k, b in enumerate(fit.beta):
        row[f"beta{k}"] = float(b)
    return row


def _rep_trend(cfg: UnitSimConfig, seed) -> dict:
    ss = np.random.SeedSequence(seed) if not isinstance(seed, np.random.SeedSequence) else seed
    gen_seed, fit_seed = ss.spawn(2)
    frame, truth = gen_unit_level(cfg, seed=gen_seed)
    fit_seed_int = int(fit_seed.generate_state(1)[0])
    draws = fit_mcmc(UnitLevelModel(), frame, seed=fit_seed_int, n_chains=cfg.n_chains,
                     n_iter=cfg.n_iter, warmup=cfg.warmup, store_plot_effects=False)
    adj = design_adjust(draws, frame)
    years = cfg.years
    traj = trend_trajectory(adj, years)
    covered = [e.total.lower <= truth.true_total(e.t) <= e.total.upper for e in traj]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        direct = annual_estimates(frame, population_domain(frame), years)
    cmp_ = compare_precision(traj, direct)
    return {
        "covered_final": bool(covered[-1]),
        "coverage_years": float(np.mean(covered)),
        "covered_slope": bool(np.quantile(adj.beta_hat, 0.025) <= truth.true_slope()
                              <= np.quantile(adj.beta_hat, 0.975)),
        "mean_reduction": cmp_.mean_reduction,
        "all_years_lower": all(r.cv_model < r.cv_direct for r in cmp_.rows),
        "max_rhat": draws.max_rhat,
        "converged": draws.converged,
    }


def _run_replicate(job):
    study, cfg, extra, seed = job
    try:
        if study == "direct_unbiasedness":
            return _rep_direct(cfg, extra, seed)
        if study == "fh_recovery":
            return _rep_fh(cfg, seed)
        if study == "trend_coverage":
            return _rep_trend(cfg, seed)
        raise ValueError(study)
    except Exception as exc:  # recorded, not raised; the harness decides
        return {"error": f"{type(exc).__name__}: {exc}", "traceback": traceback.format_exc()}


def _map(jobs, threads):
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as ex:
            return list(ex.map(_run_replicate, jobs))
    return [_run_replicate(j) for j in jobs]


def _mean_se(x) -> tuple[float, float]:
    x = np.asarray(x, dtype=float)
    return float(np.mean(x)), float(np.std(x, ddof=1) / math.sqrt(len(x)))


def _prop_se(x) -> tuple[float, float]:
    p = float(np.mean(x))
    return p, math.sqrt(p * (1 - p) / len(x))


def monte_carlo(study: str, cfg, n_reps: int, threads: int = 1) -> MonteCarloReport:
    """Run a named validation study and summarize it with Monte Carlo standard errors.

    Studies: ``direct_unbiasedness`` (DirectSimConfig), ``fh_recovery`` and
    ``fh_mse_calibration`` (AreaSimConfig), ``trend_coverage`` (UnitSimConfig).
    For ``fh_mse_calibration`` the replicates are bootstrap draws on a single
    generated instance.
    """
    if study not in STUDIES:
        raise DomainError(f"unknown study {study!r}; choose from {', '.join(STUDIES)}")
    if n_reps < 50:
        raise DomainError("n_reps must be at least 50")
    expected = {"direct_unbiasedness": DirectSimConfig, "fh_recovery": AreaSimConfig,
                "fh_mse_calibration": AreaSimConfig, "trend_coverage": UnitSimConfig}[study]
    if not isinstance(cfg, expected):
        raise DomainError(f"study {study} needs a {expected.__name__}")

    if study == "fh_mse_calibration":
        return _mse_calibration(cfg, n_reps, threads)

    children = np.random.SeedSequence(cfg.seed).spawn(n_reps + 1)
    extra = gen_finite_population(cfg, seed=children[0]) if study == "direct_unbiasedness" else None
    rows = _map([(study, cfg, extra, children[r + 1]) for r in range(n_reps)], threads)
    ok = [r for r in rows if "error" not in r]
    n_failed = len(rows) - len(ok)
    if n_failed > MAX_FAILURE_RATE * n_reps:
        first = next(r for r in rows if "error" in r)
        raise MonteCarloAbort(f"{study}: {n_failed}/{n_reps} replicates failed; first: {first['error']}")

    metrics, se = {}, {}
    if study == "direct_unbiasedness":
        truth = extra.true_mean
        m, s = _mean_se([r["mean"] for r in ok])
        metrics.update(true_mean=truth, mean_estimate=m, z_score=(m - truth) / s,
                       empirical_variance=float(np.var([r["mean"] for r in ok], ddof=1)),
                       mean_variance_estimate=float(np.mean([r["variance_of_mean"] for r in ok])))
        se["mean_estimate"] = s
    elif study == "fh_recovery":
        s2 = np.array([r["sigma2"] for r in ok])
        rho = np.array([r["rho"] for r in ok])
        metrics.update(
            true_sigma2=cfg.sigma2, true_rho=cfg.rho,
            median_sigma2=float(np.median(s2)), median_rho=float(np.median(rho)),
            sigma2_rel_error=float(np.median(s2) / cfg.sigma2 - 1) if cfg.sigma2 > 0 else float("nan"),
            boundary_rate=float(np.mean([r["sigma2_boundary"] for r in ok])),
        )
        for key in ("mse_eblup", "mse_direct", "mean_ser", "mean_analytic_mse", "beta0"):
            metrics[key], se[key] = _mean_se([r[key] for r in ok])
        # normal-approximation SE of a median
        se["median_sigma2"] = float(1.2533 * np.std(s2, ddof=1) / math.sqrt(len(s2)))
        se["median_rho"] = float(1.2533 * np.std(rho, ddof=1) / math.sqrt(len(rho)))
    elif study == "trend_coverage":
        for key in ("covered_final", "covered_slope", "all_years_lower", "converged"):
            metrics[key], se[key] = _prop_se([r[key] for r in ok])
        for key in ("coverage_years", "mean_reduction", "max_rhat"):
            metrics[key], se[key] = _mean_se([r[key] for r in ok])
    return MonteCarloReport(study, n_reps, n_failed, metrics, se, rows, _config_dict(cfg))


def _config_dict(cfg) -> dict:
    return {k: (list(v) if isinstance(v, tuple) else v) for k, v in asdict(cfg).items()}


def _mse_calibration(cfg: AreaSimConfig, n_reps: int, threads: int) -> MonteCarloReport:
    data, truth = gen_area_level(cfg)
    fit = reml_fit(data)
    boot = bootstrap_mse(fit, data, n_boot=n_reps, seed=cfg.seed + 1, threads=threads)
    rel = np.abs(fit.mse - boot) / boot
    within = rel <= 0.25
    rows = [{"domain_id": d, "analytic_mse": float(a), "bootstrap_mse": float(b), "relative_error": float(r)}
            for d, a, b, r in zip(data.domains, fit.mse, boot, rel)]
    p, s = _prop_se(within)
    metrics = {"fraction_within_25pct": p, "median_relative_error": float(np.median(rel)),
               "sigma2_hat": fit.sigma2, "rho_hat": fit.rho}
    return MonteCarloReport("fh_mse_calibration", n_reps, 0, metrics, {"fraction_within_25pct": s},
                            rows, _config_dict(cfg))


# -- simulation-based calibration of the trend sampler ------------------------------

def draw_prior_scales(model: UnitLevelModel, rng) -> dict[str, float]:
    df, loc, scale = model.scale_prior
    return {name: float(abs(loc + scale * rng.standard_t(df))) for name in SCALE_NAMES}


def simulation_based_calibration(
    n_datasets: int,
    base: UnitSimConfig,
    seed: int = 0,
    n_ranks: int = 99,
    params: tuple[str, ...] = ("alpha", "beta", "sigma_eps"),
    model: UnitLevelModel | None = None,
) -> dict[str, np.ndarray]:
    """Ranks of true parameters among thinned posterior draws on prior-predictive data.

    Returns a mapping from parameter name to an integer array of ranks in
    ``0..n_ranks``; under a correct sampler they are uniform.
    """
    model = model or UnitLevelModel()
    children = np.random.SeedSequence(seed).spawn(n_datasets)
    ranks = {p: np.empty(n_datasets, dtype=int) for p in params}
    for k, child in enumerate(children):
        prior_ss, gen_ss, fit_ss = child.spawn(3)
        rng = _rng(prior_ss)
        truth = {
            "alpha": float(rng.normal(*model.alpha_prior)),
            "beta": float(rng.normal(*model.beta_prior)),
            **draw_prior_scales(model, rng),
        }
        cfg = replace(base, alpha=truth["alpha"], beta=truth["beta"],
                      **{s: truth[s] for s in SCALE_NAMES})
        frame, _ = gen_unit_level(cfg, seed=gen_ss)
        draws = fit_mcmc(model, frame, seed=int(fit_ss.generate_state(1)[0]), n_chains=base.n_chains,
                         n_iter=base.n_iter, warmup=base.warmup, store_plot_effects=False)
        for p in params:
            flat = draws.flat(p)
            idx = np.linspace(0, len(flat) - 1, n_ranks).round().astype(int)
            ranks[p][k] = int(np.sum(flat[idx] < truth[p]))
    return ranks


def rank_uniformity_pvalue(ranks: np.ndarray, n_ranks: int = 99, n_bins: int = 10) -> float:
    """Chi-square p-value for uniformity of SBC ranks over ``n_ranks + 1`` values."""
    edges = np.linspace(0, n_ranks + 1, n_bins + 1)
    counts, _ = np.histogram(ranks, bins=edges)
    return float(stats.chisquare(counts).pvalue)
