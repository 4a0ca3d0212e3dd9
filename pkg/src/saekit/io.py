"""CSV/JSON readers and writers for frames, area-level data and result tables.

All files are UTF-8, comma-delimited, ``.`` decimal separator, no thousands
separators. Floats are written with ``repr`` so write -> read -> write is
byte-stable.
"""
from __future__ import annotations

import csv
import json
import math
from collections import OrderedDict
from dataclasses import fields
from pathlib import Path
from typing import Any, Callable, Iterable, Sequence

import numpy as np

from .errors import CsvFormatError, FrameIntegrityError, SaekitError, SchemaError
from .frame import DEFAULT_ONSET_YEAR, Domain, EstimationUnit, PlotVisit, Stratum, SurveyFrame, build_frame
from .spatial_fh import AreaLevelData, row_standardize

PLOTS_COLUMNS = ("plot_id", "stratum_id", "panel_year", "response_per_ha")
STRATA_COLUMNS = ("stratum_id", "unit_id", "area_ha")
UNITS_COLUMNS = ("unit_id", "domain_id", "area_ha")
DIRECT_COLUMNS = ("domain_id", "mean", "variance_of_mean")
ADJACENCY_COLUMNS = ("domain_id_a", "domain_id_b")


def _text(s: str) -> str:
    if s == "":
        raise ValueError("empty value")
    return s


def _float(s: str) -> float:
    x = float(s)
    if not math.isfinite(x):
        raise ValueError(f"non-finite number {s!r}")
    return x


def _int(s: str) -> int:
    return int(s)


def _read_rows(path, columns: Sequence[str] | None, parsers: dict[str, Callable], first_fixed: str | None = None):
    """Yield ``(line_number, row)`` with parsed values.

    ``columns`` is the exact header set; with ``columns=None`` only
    ``first_fixed`` must be the first column and the rest parse as floats.
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise SchemaError(path, columns or [first_fixed], []) from None
        header = [h.strip() for h in header]
        if columns is not None:
            missing = [c for c in columns if c not in header]
            unexpected = [c for c in header if c not in columns]
            if missing or unexpected or len(set(header)) != len(header):
                raise SchemaError(path, missing, unexpected)
        elif not header or header[0] != first_fixed:
            raise SchemaError(path, [first_fixed], header[:1])
        for raw in reader:
            line = reader.line_num
            if not raw or all(not c.strip() for c in raw):
                continue
            if len(raw) != len(header):
                raise CsvFormatError(path, line, header[min(len(raw), len(header) - 1)],
                                     f"expected {len(header)} fields, found {len(raw)}")
            row = {}
            for name, value in zip(header, raw):
                parse = parsers.get(name, _float if columns is None else _text)
                try:
                    row[name] = parse(value.strip())
                except ValueError as exc:
                    raise CsvFormatError(path, line, name, str(exc)) from None
            yield line, header, row


def read_survey(plots_csv, strata_csv, units_csv, onset_year: int = DEFAULT_ONSET_YEAR):
    """Read the three frame files; return ``(frame, domains)``."""
    units, unit_domain = [], OrderedDict()
    for _, _, r in _read_rows(units_csv, UNITS_COLUMNS, {"unit_id": _text, "domain_id": _text, "area_ha": _float}):
        units.append(EstimationUnit(r["unit_id"], r["area_ha"]))
        unit_domain[r["unit_id"]] = r["domain_id"]
    strata = [
        Stratum(r["stratum_id"], r["unit_id"], r["area_ha"])
        for _, _, r in _read_rows(strata_csv, STRATA_COLUMNS,
                                  {"stratum_id": _text, "unit_id": _text, "area_ha": _float})
    ]
    visits = [
        PlotVisit(r["plot_id"], r["stratum_id"], r["panel_year"], r["response_per_ha"])
        for _, _, r in _read_rows(plots_csv, PLOTS_COLUMNS,
                                  {"plot_id": _text, "stratum_id": _text, "panel_year": _int,
                                   "response_per_ha": _float})
    ]
    frame = build_frame(units, strata, visits, onset_year=onset_year)
    members: OrderedDict[str, list[str]] = OrderedDict()
    for uid, did in unit_domain.items():
        members.setdefault(did, []).append(uid)
    domains = [
        Domain(did, tuple(us), math.fsum(frame.units[u].area for u in us)) for did, us in members.items()
    ]
    frame.check_domains(domains)
    return frame, domains


def read_frame(plots_csv, strata_csv, units_csv, onset_year: int = DEFAULT_ONSET_YEAR) -> SurveyFrame:
    return read_survey(plots_csv, strata_csv, units_csv, onset_year)[0]


def _fmt(x) -> str:
    if x is None:
        return ""
    if isinstance(x, bool):
        return "true" if x else "false"
    if isinstance(x, (float, np.floating)):
        return repr(float(x))
    if isinstance(x, (int, np.integer)):
        return str(int(x))
    if isinstance(x, (tuple, list)):
        return ";".join(str(v) for v in x)
    return str(x)


def _write_csv(path, columns, rows: Iterable[Sequence]):
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(columns)
        for r in rows:
            w.writerow([_fmt(v) for v in r])


def write_frame(frame: SurveyFrame, domains: Sequence[Domain], directory) -> dict[str, Path]:
    """Write ``plots.csv``, ``strata.csv`` and ``units.csv`` in canonical row order."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    owner = {u: dom.id for dom in domains for u in dom.member_units}
    missing = [u for u in frame.units if u not in owner]
    if missing:
        raise FrameIntegrityError(f"unit {missing[0]!r} belongs to no domain")
    paths = {k: d / f"{k}.csv" for k in ("plots", "strata", "units")}
    _write_csv(paths["plots"], PLOTS_COLUMNS,
               ((v.plot_id, v.stratum_id, v.panel_year, float(v.response)) for v in frame.visits))
    _write_csv(paths["strata"], STRATA_COLUMNS,
               ((s.id, s.unit_id, float(s.area)) for s in sorted(frame.strata.values(), key=lambda s: s.id)))
    _write_csv(paths["units"], UNITS_COLUMNS,
               ((u.id, owner[u.id], float(u.area)) for u in sorted(frame.units.values(), key=lambda u: u.id)))
    return paths


def read_area_level(direct_csv, covariates_csv, adjacency_csv) -> AreaLevelData:
    """Assemble area-level data; zero-variance domains are excluded and listed in ``excluded``.

    The adjacency edge list must contain both directions of every edge.
    Edges touching domains absent from the direct file are ignored.
    """
    ids, y, psi = [], [], []
    for line, _, r in _read_rows(direct_csv, DIRECT_COLUMNS,
                                 {"domain_id": _text, "mean": _float, "variance_of_mean": _float}):
        if r["variance_of_mean"] < 0:
            raise CsvFormatError(direct_csv, line, "variance_of_mean", "negative variance")
        if r["domain_id"] in ids:
            raise CsvFormatError(direct_csv, line, "domain_id", f"duplicate domain {r['domain_id']!r}")
        ids.append(r["domain_id"])
        y.append(r["mean"])
        psi.append(r["variance_of_mean"])

    cov: dict[str, list[float]] = {}
    names: list[str] = []
    for _, header, r in _read_rows(covariates_csv, None, {"domain_id": _text}, first_fixed="domain_id"):
        names = header[1:]
        cov[r["domain_id"]] = [r[n] for n in names]
    lacking = [d for d in ids if d not in cov]
    if lacking:
        raise FrameIntegrityError(f"domain {lacking[0]!r} has no covariate row in {covariates_csv}")

    keep = [i for i, v in enumerate(psi) if v > 0]
    excluded = tuple(ids[i] for i in range(len(ids)) if psi[i] == 0)
    kept_ids = [ids[i] for i in keep]
    pos = {d: k for k, d in enumerate(kept_ids)}
    known = set(ids)
    edges = set()
    for line, _, r in _read_rows(adjacency_csv, ADJACENCY_COLUMNS, {"domain_id_a": _text, "domain_id_b": _text}):
        a, b = r["domain_id_a"], r["domain_id_b"]
        if a == b:
            raise FrameIntegrityError(f"{adjacency_csv}:{line}: self-loop on domain {a!r}")
        if a in known and b in known:
            edges.add((a, b))
    asym = sorted((a, b) for a, b in edges if (b, a) not in edges)
    if asym:
        shown = ", ".join(f"({a}, {b})" for a, b in asym[:10])
        raise FrameIntegrityError(f"adjacency is not symmetric; unmatched pairs: {shown}")
    adj = np.zeros((len(kept_ids), len(kept_ids)))
    for a, b in edges:
        if a in pos and b in pos:
            adj[pos[a], pos[b]] = 1.0
    W, _ = row_standardize(adj)
    X = np.column_stack([np.ones(len(keep))] + [[cov[d][j] for d in kept_ids] for j in range(len(names))])
    return AreaLevelData(
        domains=tuple(kept_ids), y=np.array([y[i] for i in keep]), psi=np.array([psi[i] for i in keep]),
        X=X, W=W, covariate_names=tuple(names), excluded=excluded,
    )


def write_area_level(data: AreaLevelData, directory) -> dict[str, Path]:
    """Write ``direct.csv``, ``covariates.csv`` and ``adjacency.csv`` for a data set."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    paths = {k: d / f"{k}.csv" for k in ("direct", "covariates", "adjacency")}
    _write_csv(paths["direct"], DIRECT_COLUMNS, zip(data.domains, data.y.tolist(), data.psi.tolist()))
    names = list(data.covariate_names) or [f"x{k}" for k in range(1, data.X.shape[1])]
    _write_csv(paths["covariates"], ["domain_id"] + names,
               ([dom] + row[1:] for dom, row in zip(data.domains, data.X.tolist())))
    ii, jj = np.nonzero(data.W > 0)
    _write_csv(paths["adjacency"], ADJACENCY_COLUMNS,
               ((data.domains[i], data.domains[j]) for i, j in zip(ii, jj)))
    return paths


# -- result tables ------------------------------------------------------------------

def _jsonable(x):
    if isinstance(x, (float, np.floating)):
        x = float(x)
        return x if math.isfinite(x) else None
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    return x


def write_table(directory, name: str, columns: Sequence[str], rows: Iterable[Sequence],
                fmt: str = "csv", metadata: dict[str, Any] | None = None) -> Path:
    """Write one result table plus a ``<name>.meta.json`` sidecar."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    rows = [list(r) for r in rows]
    if fmt == "csv":
        path = d / f"{name}.csv"
        _write_csv(path, columns, rows)
    elif fmt == "json":
        path = d / f"{name}.json"
        records = [dict(zip(columns, (_jsonable(v) for v in r))) for r in rows]
        path.write_text(json.dumps(records, indent=2) + "\n", encoding="utf-8")
    else:
        raise SaekitError(f"unknown output format {fmt!r}")
    meta = dict(metadata or {})
    meta.update(table=name, columns=list(columns), n_rows=len(rows))
    (d / f"{name}.meta.json").write_text(
        json.dumps(_jsonable(meta), indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )
    return path


def load_config(path, cls):
    """Build a config dataclass from a JSON object; unknown keys are rejected."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise SaekitError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise SaekitError(f"{path}: config must be a JSON object")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(raw) - allowed)
    if unknown:
        raise SaekitError(f"{path}: unknown config keys: {', '.join(unknown)}")
    kwargs = {k: tuple(v) if isinstance(v, list) else v for k, v in raw.items()}
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise SaekitError(f"{path}: {exc}") from None
