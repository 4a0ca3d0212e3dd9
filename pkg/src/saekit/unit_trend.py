"""Bayesian hierarchical linear trend model for repeated plot visits.

For visit j on plot i of stratum h, with t years since program onset::

    y_hij = alpha + alpha_h + alpha_hi + (beta + beta_h + beta_hi) t_hij + eps_hij

Stratum effects ``(alpha_h, beta_h)`` and plot effects ``(alpha_hi, beta_hi)``
are zero-mean normal deviations with their own standard deviations, and
``eps ~ N(0, sigma_eps^2)``. Priors: ``alpha ~ N(50, 250^2)``,
``beta ~ N(0, 100^2)`` and a half-t(3, 0, 100) on each of the five standard
deviations.

The sampler draws every location parameter jointly from its exact Gaussian
conditional (plot and stratum effects are integrated out level by level
using per-plot sufficient statistics), then updates each scale by slice
sampling on the log scale.
"""
from __future__ import annotations

import math
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .direct import DomainEstimate, cv_direct
from .errors import FrameIntegrityError, IdentifiabilityError, UndefinedCVError
from .frame import SurveyFrame
from .mcmc import slice_sample, split_rhat

SCALE_NAMES = ("sigma_alpha_h", "sigma_beta_h", "sigma_alpha_hi", "sigma_beta_hi", "sigma_eps")
RHAT_THRESHOLD = 1.05


@dataclass(frozen=True)
class UnitLevelModel:
    """Prior specification. ``fixed_scales`` pins any of the five SDs to a value."""

    alpha_prior: tuple[float, float] = (50.0, 250.0)
    beta_prior: tuple[float, float] = (0.0, 100.0)
    scale_prior: tuple[float, float, float] = (3.0, 0.0, 100.0)  # df, location, scale
    fixed_scales: Mapping[str, float] | None = None

    def __post_init__(self):
        if self.alpha_prior[1] <= 0 or self.beta_prior[1] <= 0 or self.scale_prior[2] <= 0:
            raise ValueError("prior scales must be strictly positive")
        for k, v in (self.fixed_scales or {}).items():
            if k not in SCALE_NAMES:
                raise ValueError(f"unknown scale parameter {k!r}")
            if not v > 0:
                raise ValueError(f"fixed scale {k} must be positive")


@dataclass(frozen=True)
class TrendDesign:
    """Index maps and per-plot sufficient statistics of a frame."""

    stratum_ids: tuple
    plot_ids: tuple
    plot_stratum: np.ndarray
    visit_plot: np.ndarray
    y: np.ndarray
    t: np.ndarray
    n: np.ndarray
    st: np.ndarray
    stt: np.ndarray
    sy: np.ndarray
    sty: np.ndarray
    onset_year: int

    @classmethod
    def from_frame(cls, frame: SurveyFrame) -> "TrendDesign":
        cols = frame.arrays()
        stratum_ids = tuple(frame.strata)
        s_index = {s: k for k, s in enumerate(stratum_ids)}
        plot_ids = frame.plot_ids
        p_index = {p: k for k, p in enumerate(plot_ids)}
        visit_plot = np.array([p_index[p] for p in cols["plot_id"]], dtype=np.int64)
        plot_stratum = np.empty(len(plot_ids), dtype=np.int64)
        for p, s in zip(cols["plot_id"], cols["stratum_id"]):
            plot_stratum[p_index[p]] = s_index[s]
        y = cols["response"]
        t = cols["t"].astype(float)
        P = len(plot_ids)

        def tot(w):
            return np.bincount(visit_plot, weights=w, minlength=P)

        return cls(
            stratum_ids=stratum_ids, plot_ids=plot_ids, plot_stratum=plot_stratum,
            visit_plot=visit_plot, y=y, t=t,
            n=tot(np.ones_like(y)), st=tot(t), stt=tot(t * t), sy=tot(y), sty=tot(t * y),
            onset_year=frame.onset_year,
        )

    @property
    def n_strata(self) -> int:
        return len(self.stratum_ids)

    @property
    def n_plots(self) -> int:
        return len(self.plot_ids)


@dataclass
class PosteriorDraws:
    """Retained draws, each array shaped ``(n_chains, n_iter, ...)``."""

    params: dict[str, np.ndarray]
    stratum_ids: tuple
    plot_ids: tuple
    n_chains: int
    n_iter: int
    seed: int
    onset_year: int
    rhat: dict[str, np.ndarray] = field(default_factory=dict)
    converged: bool = True
    n_single_visit_plots: int = 0

    def flat(self, name: str) -> np.ndarray:
        a = self.params[name]
        return a.reshape((self.n_chains * self.n_iter,) + a.shape[2:])

    @property
    def n_draws(self) -> int:
        return self.n_chains * self.n_iter

    @property
    def max_rhat(self) -> float:
        vals = [np.nanmax(np.atleast_1d(r)) for r in self.rhat.values() if np.size(r)]
        return float(max(vals)) if vals else float("nan")


# -- 2x2 helpers on component arrays -------------------------------------------------

def _inv2(a, b, c, d):
    det = a * d - b * c
    return d / det, -b / det, -c / det, a / det


def _mat2_apply(m, x0, x1):
    a, b, c, d = m
    return a * x0 + b * x1, c * x0 + d * x1


def _mat2_mul(m, n):
    a, b, c, d = m
    e, f, g, h = n
    return a * e + b * g, a * f + b * h, c * e + d * g, c * f + d * h


def _gauss2_from_precision(r00, r01, r11, b0, b1, z0, z1):
    """Draw from N(R^{-1} b, R^{-1}) with R = [[r00, r01], [r01, r11]]."""
    inv = _inv2(r00, r01, r01, r11)
    m0, m1 = _mat2_apply(inv, b0, b1)
    l00 = np.sqrt(r00)
    l10 = r01 / l00
    l11 = np.sqrt(np.maximum(r11 - l10 * l10, 0.0))
    x1 = z1 / l11
    x0 = (z0 - l10 * x1) / l00
    return m0 + x0, m1 + x1


def _shrink(S, s, d0, d1):
    """``(S^{-1} + D)^{-1}`` and ``(I + S D)^{-1} s`` without forming S^{-1}."""
    s00, s01, s11 = S
    E = (1.0 + s00 * d0, s01 * d1, s01 * d0, 1.0 + s11 * d1)
    Ei = _inv2(*E)
    M = _mat2_mul(Ei, (s00, s01, s01, s11))
    m = _mat2_apply(Ei, *s)
    return (M[0], 0.5 * (M[1] + M[2]), M[3]), m


def _log_halft(sigma, df, loc, scale):
    z = (sigma - loc) / scale
    return -0.5 * (df + 1.0) * math.log1p(z * z / df)


class _Chain:
    def __init__(self, design: TrendDesign, model: UnitLevelModel, rng: np.random.Generator):
        self.d = design
        self.model = model
        self.rng = rng
        y_scale = max(float(np.std(design.y)), float(np.mean(np.abs(design.y))), 1.0)
        self.log_lo = math.log(1e-8 * y_scale)
        self.log_hi = math.log(1e8 * max(y_scale, model.scale_prior[2]))
        self.y_scale = y_scale

    def initial_scales(self) -> dict[str, float]:
        fixed = self.model.fixed_scales or {}
        base = 0.5 * self.y_scale
        out = {}
        for name in SCALE_NAMES:
            out[name] = float(fixed[name]) if name in fixed else float(
                np.clip(base * math.exp(self.rng.normal()), math.exp(self.log_lo), math.exp(self.log_hi))
            )
        return out

    def draw_locations(self, sc):
        d, rng = self.d, self.rng
        tau = sc["sigma_eps"] ** 2
        S = (d.n / tau, d.st / tau, d.stt / tau)
        s = (d.sy / tau, d.sty / tau)
        dp0, dp1 = sc["sigma_alpha_hi"] ** 2, sc["sigma_beta_hi"] ** 2
        ds0, ds1 = sc["sigma_alpha_h"] ** 2, sc["sigma_beta_h"] ** 2
        H = d.n_strata

        Mi, mi = _shrink(S, s, dp0, dp1)
        ps = d.plot_stratum
        Mh = tuple(np.bincount(ps, weights=c, minlength=H) for c in Mi)
        mh = tuple(np.bincount(ps, weights=c, minlength=H) for c in mi)
        Kh, kh = _shrink(Mh, mh, ds0, ds1)

        (a0, sa), (b0, sb) = self.model.alpha_prior, self.model.beta_prior
        r00 = 1.0 / sa**2 + Kh[0].sum()
        r01 = Kh[1].sum()
        r11 = 1.0 / sb**2 + Kh[2].sum()
        z = rng.standard_normal(2)
        alpha, beta = _gauss2_from_precision(
            r00, r01, r11, a0 / sa**2 + kh[0].sum(), b0 / sb**2 + kh[1].sum(), z[0], z[1]
        )

        z = rng.standard_normal((2, H))
        b0h = mh[0] - (Mh[0] * alpha + Mh[1] * beta)
        b1h = mh[1] - (Mh[1] * alpha + Mh[2] * beta)
        ah, bh = _gauss2_from_precision(
            1.0 / ds0 + Mh[0], Mh[1], 1.0 / ds1 + Mh[2], b0h, b1h, z[0], z[1]
        )

        P = d.n_plots
        ta = alpha + ah[ps]
        tb = beta + bh[ps]
        z = rng.standard_normal((2, P))
        b0p = s[0] - (S[0] * ta + S[1] * tb)
        b1p = s[1] - (S[1] * ta + S[2] * tb)
        ap, bp = _gauss2_from_precision(
            1.0 / dp0 + S[0], S[1], 1.0 / dp1 + S[2], b0p, b1p, z[0], z[1]
        )
        return float(alpha), float(beta), ah, bh, ap, bp

    def update_scale(self, current, n, sumsq):
        df, loc, scale = self.model.scale_prior

        def logf(u):
            sig = math.exp(u)
            return _log_halft(sig, df, loc, scale) - n * u - 0.5 * sumsq * math.exp(-2.0 * u) + u

        u0 = min(max(math.log(current), self.log_lo), self.log_hi)
        u, _ = slice_sample(u0, logf, self.rng, w=1.0, lower=self.log_lo, upper=self.log_hi)
        return math.exp(u)

    def run(self, n_iter: int, n_warm: int, store_plot_effects: bool):
        d = self.d
        fixed = self.model.fixed_scales or {}
        sc = self.initial_scales()
        keep = n_iter - n_warm
        H, P = d.n_strata, d.n_plots
        out = {
            "alpha": np.empty(keep), "beta": np.empty(keep),
            "alpha_h": np.empty((keep, H)), "beta_h": np.empty((keep, H)),
        }
        if store_plot_effects:
            out["alpha_hi"] = np.empty((keep, P))
            out["beta_hi"] = np.empty((keep, P))
        for name in SCALE_NAMES:
            out[name] = np.empty(keep)

        for it in range(n_iter):
            alpha, beta, ah, bh, ap, bp = self.draw_locations(sc)
            groups = {
                "sigma_alpha_h": (H, ah @ ah),
                "sigma_beta_h": (H, bh @ bh),
                "sigma_alpha_hi": (P, ap @ ap),
                "sigma_beta_hi": (P, bp @ bp),
            }
            if "sigma_eps" not in fixed:
                vp = d.visit_plot
                ca = alpha + ah[d.plot_stratum] + ap
                cb = beta + bh[d.plot_stratum] + bp
                r = d.y - ca[vp] - cb[vp] * d.t
                groups["sigma_eps"] = (len(d.y), r @ r)
            for name, (n, ss) in groups.items():
                if name not in fixed:
                    sc[name] = self.update_scale(sc[name], n, ss)
            k = it - n_warm
            if k >= 0:
                out["alpha"][k] = alpha
                out["beta"][k] = beta
                out["alpha_h"][k] = ah
                out["beta_h"][k] = bh
                if store_plot_effects:
                    out["alpha_hi"][k] = ap
                    out["beta_hi"][k] = bp
                for name in SCALE_NAMES:
                    out[name][k] = sc[name]
        return out


def _run_chain(args):
    design, model, seed_seq, n_iter, n_warm, store = args
    return _Chain(design, model, np.random.default_rng(seed_seq)).run(n_iter, n_warm, store)


def fit_mcmc(
    model: UnitLevelModel,
    frame: SurveyFrame,
    seed: int,
    n_chains: int = 3,
    n_iter: int = 4000,
    warmup: float = 0.5,
    threads: int = 1,
    store_plot_effects: bool = True,
) -> PosteriorDraws:
    """Sample the joint posterior of the hierarchical trend model.

    ``n_iter`` counts iterations per chain including the discarded warmup
    fraction. Chain ``c`` uses the RNG stream spawned as child ``c`` of
    ``SeedSequence(seed)``, so results do not depend on ``threads``.
    """
    design = TrendDesign.from_frame(frame)
    if len(np.unique(design.t)) < 2:
        raise IdentifiabilityError("need visits at two or more distinct times to identify a slope")
    if not 0 <= warmup < 1:
        raise ValueError("warmup fraction must lie in [0, 1)")
    n_warm = int(round(n_iter * warmup))
    if n_iter - n_warm < 2:
        raise ValueError("too few retained iterations")
    seeds = np.random.SeedSequence(seed).spawn(n_chains)
    jobs = [(design, model, s, n_iter, n_warm, store_plot_effects) for s in seeds]
    if threads > 1 and n_chains > 1:
        with ProcessPoolExecutor(max_workers=min(threads, n_chains)) as ex:
            chains = list(ex.map(_run_chain, jobs))
    else:
        chains = [_run_chain(j) for j in jobs]
    params = {k: np.stack([c[k] for c in chains]) for k in chains[0]}
    keep = n_iter - n_warm
    draws = PosteriorDraws(
        params=params, stratum_ids=design.stratum_ids, plot_ids=design.plot_ids,
        n_chains=n_chains, n_iter=keep, seed=seed, onset_year=design.onset_year,
        n_single_visit_plots=int(np.sum(design.n == 1)),
    )
    fixed = model.fixed_scales or {}
    if keep >= 4:
        draws.rhat = {k: split_rhat(v) for k, v in params.items() if k not in fixed}
        draws.converged = not (draws.max_rhat > RHAT_THRESHOLD)
    return draws


# -- design-based summaries of the posterior ----------------------------------------

@dataclass(frozen=True)
class AdjustedDraws:
    """Per-draw design-adjusted population intercept and slope."""

    alpha_hat: np.ndarray
    beta_hat: np.ndarray
    area: float
    onset_year: int


def design_adjust(draws: PosteriorDraws, frame: SurveyFrame) -> AdjustedDraws:
    """Area-weighted population coefficients per draw.

    ``alpha_hat = sum_h A_h (alpha + alpha_h) / A`` and likewise for the
    slope, with ``A`` the combined area of the strata in the draws.
    """
    try:
        areas = np.array([frame.strata[sid].area for sid in draws.stratum_ids])
    except KeyError as exc:
        raise FrameIntegrityError(f"stratum {exc.args[0]!r} in draws has no known area") from None
    A = float(math.fsum(areas))
    alpha = draws.flat("alpha")[:, None] + draws.flat("alpha_h")
    beta = draws.flat("beta")[:, None] + draws.flat("beta_h")
    return AdjustedDraws((alpha * areas).sum(axis=1) / A, (beta * areas).sum(axis=1) / A,
                         A, draws.onset_year)


@dataclass(frozen=True)
class Summary:
    mean: float
    variance: float
    median: float
    lower: float
    upper: float
    cv: float  # percent

    def scaled(self, c: float) -> "Summary":
        return Summary(c * self.mean, c * c * self.variance, c * self.median,
                       c * self.lower, c * self.upper, self.cv)


@dataclass(frozen=True)
class TrendEstimate:
    t: int
    year: int
    mean: Summary
    total: Summary
    prob_beta_positive: float
    flags: tuple[str, ...] = ()


def summarize(x: np.ndarray) -> tuple[Summary, tuple[str, ...]]:
    mean = float(np.mean(x))
    var = float(np.var(x, ddof=1)) if len(x) > 1 else 0.0
    lo, med, hi = (float(q) for q in np.quantile(x, [0.025, 0.5, 0.975]))
    flags = ()
    if mean == 0:
        cv = float("nan")
        flags = ("undefined_cv",)
    else:
        cv = 100.0 * math.sqrt(var) / mean
    return Summary(mean, var, med, lo, hi, cv), flags


def trend_estimate(adjusted: AdjustedDraws, t: int) -> TrendEstimate:
    """Posterior summaries of the population mean and total at time ``t``.

    Years beyond the observed range are forecasts. CVs are in percent.
    """
    if t < 0:
        raise ValueError("t must be nonnegative")
    per_draw = adjusted.alpha_hat + adjusted.beta_hat * t
    mean, flags = summarize(per_draw)
    total = mean.scaled(adjusted.area)
    p_pos = float(np.mean(adjusted.beta_hat > 0))
    return TrendEstimate(int(t), adjusted.onset_year + int(t), mean, total, p_pos, flags)


def trend_trajectory(adjusted: AdjustedDraws, years: Sequence[int]) -> list[TrendEstimate]:
    return [trend_estimate(adjusted, y - adjusted.onset_year) for y in years]


class PrecisionWarning(UserWarning):
    pass


@dataclass(frozen=True)
class PrecisionRow:
    year: int
    cv_model: float
    cv_direct: float
    reduction: float  # percent


@dataclass(frozen=True)
class PrecisionComparison:
    rows: tuple[PrecisionRow, ...]
    mean_reduction: float


def compare_precision(trend: Sequence[TrendEstimate], direct: Sequence[DomainEstimate]) -> PrecisionComparison:
    """Per-year CV of model-based versus annual direct estimates."""
    model_by_year = {e.year: e for e in trend}
    direct_by_year = {e.year_label: e for e in direct}
    for y in sorted(set(model_by_year) ^ set(direct_by_year)):
        warnings.warn(f"year {y} present in only one input; excluded", PrecisionWarning, stacklevel=2)
    rows = []
    for y in sorted(set(model_by_year) & set(direct_by_year)):
        try:
            cvd = cv_direct(direct_by_year[y])
        except UndefinedCVError:
            warnings.warn(f"year {y}: direct CV undefined; excluded", PrecisionWarning, stacklevel=2)
            continue
        cvm = model_by_year[y].mean.cv
        red = 100.0 * (cvd - cvm) / cvd if cvd != 0 else float("nan")
        rows.append(PrecisionRow(int(y), cvm, cvd, red))
    mean_red = float(np.mean([r.reduction for r in rows])) if rows else float("nan")
    return PrecisionComparison(tuple(rows), mean_red)


def posterior_predictive_pvalues(
    draws: PosteriorDraws, frame: SurveyFrame, n_rep: int = 500, seed: int = 0
) -> dict[str, float]:
    """Posterior predictive p-values ``P(T(y_rep) >= T(y))`` for the mean and variance of y."""
    design = TrendDesign.from_frame(frame)
    if "alpha_hi" not in draws.params:
        raise ValueError("posterior predictive checks need stored plot effects")
    rng = np.random.default_rng(seed)
    idx = np.linspace(0, draws.n_draws - 1, min(n_rep, draws.n_draws)).astype(int)
    ps, vp = design.plot_stratum, design.visit_plot
    y_obs = design.y
    hits = {"mean": 0, "var": 0}
    for k in idx:
        ca = draws.flat("alpha")[k] + draws.flat("alpha_h")[k][ps] + draws.flat("alpha_hi")[k]
        cb = draws.flat("beta")[k] + draws.flat("beta_h")[k][ps] + draws.flat("beta_hi")[k]
        mu = ca[vp] + cb[vp] * design.t
        y_rep = mu + draws.flat("sigma_eps")[k] * rng.standard_normal(len(mu))
        hits["mean"] += y_rep.mean() >= y_obs.mean()
        hits["var"] += y_rep.var() >= y_obs.var()
    return {k: v / len(idx) for k, v in hits.items()}
