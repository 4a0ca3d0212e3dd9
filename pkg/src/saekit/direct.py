"""Post-stratified direct estimators of domain means and totals.

Within an estimation unit with strata weights ``W_h = A_h / A``::

    ybar   = sum_h W_h ybar_h
    v(ybar) = (1/n) sum_h W_h s_h^2 + (1/n^2) sum_h (1 - W_h) s_h^2

with ``s_h^2`` the within-stratum sample variance and ``n`` the number of
visits in the unit. Units are independent populations, so totals and
total-variances add across the units of a domain.
"""
from __future__ import annotations

import math
import warnings
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

from .errors import EmptySampleError, MissingStratumSampleError, UndefinedCVError
from .frame import Domain, SurveyFrame, select_panel


class SkippedYearWarning(UserWarning):
    """An annual panel could not be estimated and was left out."""


class UnitEstimate(NamedTuple):
    mean: float
    variance_of_mean: float
    n: int
    degenerate_strata: tuple[str, ...] = ()


@dataclass(frozen=True)
class DomainEstimate:
    domain_id: str
    mean: float
    variance_of_mean: float
    area: float
    n_plots: int
    year_label: int | None = None
    flags: tuple[str, ...] = ()
    total: float = field(init=False)
    variance_of_total: float = field(init=False)

    def __post_init__(self):
        object.__setattr__(self, "total", self.mean * self.area)
        object.__setattr__(self, "variance_of_total", self.variance_of_mean * self.area**2)

    @property
    def zero_estimate(self) -> bool:
        return "zero_estimate" in self.flags


def _sample_variance(values: Sequence[float], mean: float) -> float:
    n = len(values)
    if n < 2:
        return 0.0
    return math.fsum((x - mean) ** 2 for x in values) / (n - 1)


def post_stratified_unit_estimate(frame: SurveyFrame, unit_id: str) -> UnitEstimate:
    """Post-stratified mean and its variance for one estimation unit.

    Strata with a single visit contribute their value to the mean and zero to
    the variance; their ids are reported in ``degenerate_strata``.
    """
    unit = frame.units[unit_id]
    strata_ids = frame.strata_of(unit_id)
    per_stratum = [(sid, [v.response for v in frame.visits_in_stratum(sid)]) for sid in strata_ids]
    n = sum(len(vals) for _, vals in per_stratum)
    if n < 1:
        raise EmptySampleError(f"estimation unit {unit_id!r} has no sampled visits")

    mean_terms, var_terms_a, var_terms_b, degenerate = [], [], [], []
    for sid, vals in per_stratum:
        if not vals:
            raise MissingStratumSampleError(sid)
        w = frame.strata[sid].area / unit.area
        ybar_h = math.fsum(vals) / len(vals)
        s2 = _sample_variance(vals, ybar_h)
        if len(vals) == 1:
            degenerate.append(sid)
        mean_terms.append(w * ybar_h)
        var_terms_a.append(w * s2)
        var_terms_b.append((1.0 - w) * s2)
    mean = math.fsum(mean_terms)
    var = math.fsum(var_terms_a) / n + math.fsum(var_terms_b) / n**2
    return UnitEstimate(mean, max(var, 0.0), n, tuple(degenerate))


def domain_estimate(frame: SurveyFrame, domain: Domain, year_label: int | None = None) -> DomainEstimate:
    """Direct estimate for a domain made of whole estimation units.

    The frame should already be pooled (periodic estimate) or restricted to a
    single panel (annual estimate). A domain with no sampled plots, or whose
    estimate is identically zero, carries the ``zero_estimate`` flag.
    """
    frame.check_domain(domain)
    sampled = [u for u in domain.member_units if frame.visits_in_unit(u)]
    flags: list[str] = []
    if not sampled:
        return DomainEstimate(domain.id, 0.0, 0.0, domain.area, 0, year_label, ("zero_estimate",))
    unsampled = [u for u in domain.member_units if u not in sampled]
    if unsampled:
        raise EmptySampleError(
            f"domain {domain.id!r}: estimation unit {unsampled[0]!r} has no sampled visits"
        )
    totals, variances, n = [], [], 0
    for uid in domain.member_units:
        est = post_stratified_unit_estimate(frame, uid)
        area = frame.units[uid].area
        totals.append(est.mean * area)
        variances.append(est.variance_of_mean * area**2)
        n += est.n
        if est.degenerate_strata:
            flags.extend(f"degenerate_stratum:{sid}" for sid in est.degenerate_strata)
    total = math.fsum(totals)
    var_total = math.fsum(variances)
    mean = total / domain.area
    var_mean = var_total / domain.area**2
    if mean == 0 and var_mean == 0:
        flags.append("zero_estimate")
    return DomainEstimate(domain.id, mean, var_mean, domain.area, n, year_label, tuple(flags))


def annual_estimates(frame: SurveyFrame, domain: Domain, years: Sequence[int]) -> list[DomainEstimate]:
    """One direct estimate per year, each from that year's panel alone.

    Years without visits in the domain, or whose panel misses a stratum, are
    skipped with a :class:`SkippedYearWarning`.
    """
    out = []
    for year in years:
        try:
            panel = select_panel(frame, year)
            est = domain_estimate(panel, domain, year_label=int(year))
        except (EmptySampleError, MissingStratumSampleError) as exc:
            warnings.warn(f"year {year} skipped: {exc}", SkippedYearWarning, stacklevel=2)
            continue
        if est.n_plots == 0:
            warnings.warn(f"year {year} skipped: no visits in domain {domain.id!r}",
                          SkippedYearWarning, stacklevel=2)
            continue
        out.append(est)
    return out


def cv_percent(mean: float, variance: float) -> float:
    if mean == 0:
        raise UndefinedCVError("coefficient of variation is undefined for a zero estimate")
    return 100.0 * math.sqrt(variance) / mean


def cv_direct(e: DomainEstimate) -> float:
    """Coefficient of variation of a direct estimate, in percent."""
    return cv_percent(e.mean, e.variance_of_mean)
