"""Hierarchical survey frame: estimation units, strata, plots and annual panel visits.

A frame is immutable once built. Visits are kept sorted by ``(plot_id, panel_year)``
so every downstream accumulation runs in a fixed order.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np

from .errors import (
    DomainError,
    DuplicateVisitError,
    EmptyPopulationError,
    EmptySampleError,
    FrameIntegrityError,
)

AREA_RTOL = 1e-9
DEFAULT_ONSET_YEAR = 1999


@dataclass(frozen=True)
class EstimationUnit:
    id: str
    area: float


@dataclass(frozen=True)
class Stratum:
    id: str
    unit_id: str
    area: float


@dataclass(frozen=True)
class PlotVisit:
    """One measurement of one plot; ``response`` is per hectare, 0 outside the population."""

    plot_id: str
    stratum_id: str
    panel_year: int
    response: float


@dataclass(frozen=True)
class Domain:
    id: str
    member_units: tuple[str, ...]
    area: float

    def __post_init__(self):
        object.__setattr__(self, "member_units", tuple(self.member_units))
        if not self.area > 0:
            raise DomainError(f"domain {self.id!r}: area must be positive, got {self.area}")
        if len(set(self.member_units)) != len(self.member_units):
            raise FrameIntegrityError(f"domain {self.id!r} lists a member unit twice")


def _close(a: float, b: float) -> bool:
    return math.isclose(a, b, rel_tol=AREA_RTOL, abs_tol=0.0)


@dataclass(frozen=True)
class SurveyFrame:
    """Validated survey frame. Build through :func:`build_frame`."""

    units: Mapping[str, EstimationUnit]
    strata: Mapping[str, Stratum]
    visits: tuple[PlotVisit, ...]
    onset_year: int = DEFAULT_ONSET_YEAR
    _unit_strata: Mapping[str, tuple[str, ...]] = field(default=None, repr=False, compare=False)
    _stratum_visits: Mapping[str, tuple[PlotVisit, ...]] = field(default=None, repr=False, compare=False)

    @property
    def total_area(self) -> float:
        """Combined area of all estimation units in the frame (A)."""
        return math.fsum(u.area for u in self.units.values())

    def strata_of(self, unit_id: str) -> tuple[str, ...]:
        return self._unit_strata[unit_id]

    def visits_in_stratum(self, stratum_id: str) -> tuple[PlotVisit, ...]:
        return self._stratum_visits[stratum_id]

    def visits_in_unit(self, unit_id: str) -> tuple[PlotVisit, ...]:
        out = []
        for sid in self.strata_of(unit_id):
            out.extend(self._stratum_visits[sid])
        return tuple(sorted(out, key=_visit_key))

    def unit_of_stratum(self, stratum_id: str) -> str:
        return self.strata[stratum_id].unit_id

    def t(self, visit: PlotVisit) -> int:
        """Years since program onset for a visit."""
        return visit.panel_year - self.onset_year

    @property
    def plot_ids(self) -> tuple[str, ...]:
        return tuple(sorted({v.plot_id for v in self.visits}))

    @property
    def years(self) -> tuple[int, ...]:
        return tuple(sorted({v.panel_year for v in self.visits}))

    def stratum_weights(self, unit_id: str) -> dict[str, float]:
        area = self.units[unit_id].area
        return {sid: self.strata[sid].area / area for sid in self.strata_of(unit_id)}

    def arrays(self) -> dict[str, np.ndarray]:
        """Column arrays of the visit table in canonical order."""
        return {
            "plot_id": np.array([v.plot_id for v in self.visits], dtype=object),
            "stratum_id": np.array([v.stratum_id for v in self.visits], dtype=object),
            "panel_year": np.array([v.panel_year for v in self.visits], dtype=np.int64),
            "t": np.array([v.panel_year - self.onset_year for v in self.visits], dtype=np.int64),
            "response": np.array([v.response for v in self.visits], dtype=float),
        }

    def check_domain(self, domain: Domain) -> None:
        missing = [u for u in domain.member_units if u not in self.units]
        if missing:
            raise FrameIntegrityError(f"domain {domain.id!r} references unknown unit {missing[0]!r}")
        area = math.fsum(self.units[u].area for u in domain.member_units)
        if not _close(area, domain.area):
            raise FrameIntegrityError(
                f"domain {domain.id!r}: area {domain.area} differs from member-unit total {area}"
            )

    def check_domains(self, domains: Iterable[Domain]) -> None:
        """Validate each domain and require member units to be disjoint across domains."""
        owner: dict[str, str] = {}
        for d in domains:
            self.check_domain(d)
            for u in d.member_units:
                if u in owner:
                    raise FrameIntegrityError(
                        f"unit {u!r} belongs to both domain {owner[u]!r} and {d.id!r}"
                    )
                owner[u] = d.id


def _visit_key(v: PlotVisit):
    return (v.plot_id, v.panel_year)


def build_frame(
    units: Iterable[EstimationUnit],
    strata: Iterable[Stratum],
    visits: Iterable[PlotVisit],
    onset_year: int = DEFAULT_ONSET_YEAR,
) -> SurveyFrame:
    """Validate the unit/stratum/visit hierarchy and return an immutable frame.

    Raises
    ------
    DomainError
        Nonpositive area, non-finite response, or a visit before ``onset_year``.
    FrameIntegrityError
        Dangling references, duplicate ids, a plot spanning two strata, or
        stratum areas that do not sum to their unit's area.
    DuplicateVisitError
        The same plot visited twice in one panel year.
    """
    units = list(units)
    strata = list(strata)
    visits = list(visits)

    unit_map: dict[str, EstimationUnit] = {}
    for u in units:
        if not (u.area > 0 and math.isfinite(u.area)):
            raise DomainError(f"estimation unit {u.id!r}: area must be positive, got {u.area}")
        if u.id in unit_map:
            raise FrameIntegrityError(f"duplicate estimation unit id {u.id!r}")
        unit_map[u.id] = u

    stratum_map: dict[str, Stratum] = {}
    unit_strata: dict[str, list[str]] = {uid: [] for uid in unit_map}
    for s in strata:
        if not (s.area > 0 and math.isfinite(s.area)):
            raise DomainError(f"stratum {s.id!r}: area must be positive, got {s.area}")
        if s.id in stratum_map:
            raise FrameIntegrityError(f"duplicate stratum id {s.id!r}")
        if s.unit_id not in unit_map:
            raise FrameIntegrityError(
                f"stratum {s.id!r} references unknown estimation unit {s.unit_id!r}"
            )
        stratum_map[s.id] = s
        unit_strata[s.unit_id].append(s.id)

    for uid, sids in unit_strata.items():
        total = math.fsum(stratum_map[sid].area for sid in sids)
        if not _close(total, unit_map[uid].area):
            raise FrameIntegrityError(
                f"estimation unit {uid!r}: stratum areas sum to {total}, unit area is {unit_map[uid].area}"
            )

    seen: set[tuple[str, int]] = set()
    plot_stratum: dict[str, str] = {}
    stratum_visits: dict[str, list[PlotVisit]] = {sid: [] for sid in stratum_map}
    for v in visits:
        if v.stratum_id not in stratum_map:
            raise FrameIntegrityError(
                f"visit of plot {v.plot_id!r} references unknown stratum {v.stratum_id!r}"
            )
        if not math.isfinite(v.response):
            raise DomainError(f"plot {v.plot_id!r} year {v.panel_year}: response is not finite")
        if v.panel_year < onset_year:
            raise DomainError(
                f"plot {v.plot_id!r}: panel year {v.panel_year} precedes onset year {onset_year}"
            )
        key = (v.plot_id, v.panel_year)
        if key in seen:
            raise DuplicateVisitError(f"plot {v.plot_id!r} visited twice in {v.panel_year}")
        seen.add(key)
        prev = plot_stratum.setdefault(v.plot_id, v.stratum_id)
        if prev != v.stratum_id:
            raise FrameIntegrityError(
                f"plot {v.plot_id!r} appears in strata {prev!r} and {v.stratum_id!r}"
            )
        stratum_visits[v.stratum_id].append(v)

    return SurveyFrame(
        units=MappingProxyType(dict(unit_map)),
        strata=MappingProxyType(dict(stratum_map)),
        visits=tuple(sorted(visits, key=_visit_key)),
        onset_year=int(onset_year),
        _unit_strata=MappingProxyType({k: tuple(v) for k, v in unit_strata.items()}),
        _stratum_visits=MappingProxyType(
            {k: tuple(sorted(v, key=_visit_key)) for k, v in stratum_visits.items()}
        ),
    )


def _rebuild(frame: SurveyFrame, unit_ids, visits) -> SurveyFrame:
    keep = set(unit_ids)
    units = [u for uid, u in frame.units.items() if uid in keep]
    strata = [s for s in frame.strata.values() if s.unit_id in keep]
    return build_frame(units, strata, visits, onset_year=frame.onset_year)


def exclude_empty_units(frame: SurveyFrame) -> SurveyFrame:
    """Drop estimation units whose every visit has a zero response."""
    keep = [
        uid for uid in frame.units
        if any(v.response != 0 for v in frame.visits_in_unit(uid))
    ]
    if not keep:
        raise EmptyPopulationError("every estimation unit has only zero-valued plot observations")
    if len(keep) == len(frame.units):
        return frame
    kept_strata = {sid for uid in keep for sid in frame.strata_of(uid)}
    visits = [v for v in frame.visits if v.stratum_id in kept_strata]
    return _rebuild(frame, keep, visits)


def pool_panels(frame: SurveyFrame, year_range: tuple[int, int]) -> SurveyFrame:
    """Pool annual panels in an inclusive year range into one periodic sample.

    Each plot contributes its most recent visit inside the range; the result is
    treated as if all retained plots were measured at the end of the cycle.
    """
    start, end = (int(y) for y in year_range)
    if start > end:
        raise DomainError(f"empty year range {start}:{end}")
    latest: dict[str, PlotVisit] = {}
    for v in frame.visits:  # sorted by (plot, year), so later years overwrite
        if start <= v.panel_year <= end:
            latest[v.plot_id] = v
    if not latest:
        raise EmptySampleError(f"no plot visits between {start} and {end}")
    return build_frame(
        frame.units.values(), frame.strata.values(), latest.values(), onset_year=frame.onset_year
    )


def select_panel(frame: SurveyFrame, year: int) -> SurveyFrame:
    """Restrict the frame to the single annual panel measured in ``year``."""
    return pool_panels(frame, (year, year))
