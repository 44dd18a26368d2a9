"""OxCGRT-style CSV ingestion and the cultural-dimension lookup table.

Both parsers take raw bytes (or text, or a path-like/file object) and return
immutable, validated in-memory structures.  A parsed :class:`Dataset` can be
cached to a versioned JSON snapshot with :func:`dataset_to_json` and read back
with :func:`dataset_from_json`.
"""
from __future__ import annotations

import datetime as dt
import io
import json
import logging
import os
from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Iterable, Mapping

import numpy as np
import pandas as pd

logger = logging.getLogger(__name__)

SNAPSHOT_FORMAT = "epiforecast.dataset"
SNAPSHOT_VERSION = 1

OXCGRT_NPI_COLUMNS = (
    "C1_School closing",
    "C2_Workplace closing",
    "C3_Cancel public events",
    "C4_Restrictions on gatherings",
    "C5_Close public transport",
    "C6_Stay at home requirements",
    "C7_Restrictions on internal movement",
    "C8_International travel controls",
    "H1_Public information campaigns",
    "H2_Testing policy",
    "H3_Contact tracing",
    "H6_Facial Coverings",
)
OXCGRT_NPI_MAX = (3, 3, 2, 4, 2, 3, 2, 4, 2, 3, 2, 4)

_MISSING_MARKERS = {"", "na", "nan", "n/a", "null", "#null!", "none"}


class IngestError(ValueError):
    """Fatal ingestion failure (no usable data, bad schema, invalid table)."""


@dataclass(frozen=True)
class NpiSchema:
    names: tuple[str, ...] = OXCGRT_NPI_COLUMNS
    max_levels: tuple[int, ...] = OXCGRT_NPI_MAX

    def __post_init__(self):
        object.__setattr__(self, "names", tuple(self.names))
        object.__setattr__(self, "max_levels", tuple(int(m) for m in self.max_levels))
        if len(self.names) != 12 or len(self.max_levels) != 12:
            raise ValueError(
                f"NPI schema needs exactly 12 columns, got {len(self.names)} names "
                f"and {len(self.max_levels)} max levels"
            )
        if any(m < 1 for m in self.max_levels):
            raise ValueError(f"every NPI max level must be >= 1: {self.max_levels}")

    @property
    def max_array(self) -> np.ndarray:
        return np.asarray(self.max_levels, dtype=np.int64)


DEFAULT_SCHEMA = NpiSchema()


@dataclass(frozen=True)
class ColumnMap:
    """Header names for the context columns.  Defaults follow OxCGRT."""

    country: str = "CountryName"
    region: str = "RegionName"
    geo_id: str = "GeoID"
    date: str = "Date"
    cases: str = "ConfirmedCases"
    deaths: str = "ConfirmedDeaths"
    population: str = "Population"


DEFAULT_COLUMNS = ColumnMap()


@dataclass(frozen=True, order=True)
class RegionKey:
    geo_id: str
    country_name: str = field(compare=False)
    region_name: str | None = field(default=None, compare=False)

    def __post_init__(self):
        if not self.geo_id:
            raise ValueError("geo_id must be nonempty")

    @classmethod
    def make(cls, country_name: str, region_name: str | None = None, geo_id: str | None = None):
        region_name = region_name or None
        if geo_id is None:
            geo_id = country_name if region_name is None else f"{country_name} / {region_name}"
        return cls(geo_id=geo_id, country_name=country_name, region_name=region_name)


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class RegionSeries:
    key: RegionKey
    population: int
    dates: np.ndarray  # datetime64[D], contiguous
    confirmed_cases: np.ndarray
    confirmed_deaths: np.ndarray
    npi: np.ndarray  # (days, 12) int

    def __post_init__(self):
        dates = np.asarray(self.dates, dtype="datetime64[D]")
        cases = np.asarray(self.confirmed_cases, dtype=np.float64)
        deaths = np.asarray(self.confirmed_deaths, dtype=np.float64)
        npi = np.asarray(self.npi, dtype=np.int64).reshape(len(dates), -1)
        if int(self.population) <= 0:
            raise ValueError(f"{self.key.geo_id}: population must be positive")
        if not (len(dates) == len(cases) == len(deaths) == len(npi)):
            raise ValueError(f"{self.key.geo_id}: array lengths disagree")
        if len(dates) > 1 and np.any(np.diff(dates).astype(np.int64) != 1):
            raise ValueError(f"{self.key.geo_id}: dates must be contiguous and ascending")
        if npi.shape[1] != 12:
            raise ValueError(f"{self.key.geo_id}: expected 12 NPI columns, got {npi.shape[1]}")
        if np.any(cases < 0) or np.any(deaths < 0):
            raise ValueError(f"{self.key.geo_id}: negative cumulative counts")
        object.__setattr__(self, "population", int(self.population))
        object.__setattr__(self, "dates", _frozen(dates))
        object.__setattr__(self, "confirmed_cases", _frozen(cases))
        object.__setattr__(self, "confirmed_deaths", _frozen(deaths))
        object.__setattr__(self, "npi", _frozen(npi))

    def __len__(self):
        return len(self.dates)

    def slice(self, start: int, stop: int) -> "RegionSeries":
        return RegionSeries(
            self.key,
            self.population,
            self.dates[start:stop],
            self.confirmed_cases[start:stop],
            self.confirmed_deaths[start:stop],
            self.npi[start:stop],
        )

    def new_cases(self) -> np.ndarray:
        """Daily new cases; day 0 counts as zero (no prior day to difference)."""
        return np.diff(self.confirmed_cases, prepend=self.confirmed_cases[:1])

    def new_deaths(self) -> np.ndarray:
        return np.diff(self.confirmed_deaths, prepend=self.confirmed_deaths[:1])

    def same_as(self, other: "RegionSeries") -> bool:
        return (
            self.key == other.key
            and self.key.country_name == other.key.country_name
            and self.key.region_name == other.key.region_name
            and self.population == other.population
            and np.array_equal(self.dates, other.dates)
            and np.array_equal(self.confirmed_cases, other.confirmed_cases)
            and np.array_equal(self.confirmed_deaths, other.confirmed_deaths)
            and np.array_equal(self.npi, other.npi)
        )


@dataclass(frozen=True)
class CulturalProfile:
    values: tuple[float, ...]
    imputed: bool = False

    def __post_init__(self):
        values = tuple(float(v) for v in self.values)
        if len(values) != 6:
            raise ValueError(f"cultural profile needs 6 values, got {len(values)}")
        if any(not (0.0 <= v <= 100.0) for v in values):
            raise ValueError(f"cultural scores must lie in [0, 100]: {values}")
        object.__setattr__(self, "values", values)

    def as_array(self) -> np.ndarray:
        return np.asarray(self.values, dtype=np.float64)


class CultureTable(Mapping):
    """Country name -> :class:`CulturalProfile`, with fallback imputation.

    Indexing with ``[]`` only returns countries present in the table;
    :meth:`lookup` also resolves ``"Country / Region"`` names and falls back to
    the column-wise mean profile (flagged ``imputed``) for unknown countries.
    """

    def __init__(self, profiles: Mapping[str, CulturalProfile]):
        self._profiles = dict(sorted(profiles.items()))
        if self._profiles:
            mean = np.mean([p.values for p in self._profiles.values()], axis=0)
            self.mean_profile = CulturalProfile(tuple(mean), imputed=True)
        else:
            self.mean_profile = CulturalProfile((50.0,) * 6, imputed=True)

    def __getitem__(self, country):
        return self._profiles[country]

    def __iter__(self):
        return iter(self._profiles)

    def __len__(self):
        return len(self._profiles)

    def lookup(self, name: str) -> CulturalProfile:
        if name in self._profiles:
            return self._profiles[name]
        country = name.split(" / ", 1)[0].strip()
        if country in self._profiles:
            return self._profiles[country]
        return self.mean_profile


@dataclass(frozen=True)
class IngestReport:
    rows_read: int = 0
    errors: tuple[tuple[int, str], ...] = ()
    dropped: tuple[str, ...] = ()
    npi_clamped: int = 0


@dataclass(frozen=True, eq=False)
class Dataset:
    schema: NpiSchema
    regions: Mapping[RegionKey, RegionSeries]
    culture: CultureTable = field(default_factory=lambda: CultureTable({}))
    report: IngestReport = field(default_factory=IngestReport)

    def __post_init__(self):
        ordered = dict(sorted(self.regions.items(), key=lambda kv: kv[0].geo_id))
        object.__setattr__(self, "regions", MappingProxyType(ordered))

    def __len__(self):
        return len(self.regions)

    def by_geo_id(self, geo_id: str) -> RegionSeries:
        for key, series in self.regions.items():
            if key.geo_id == geo_id:
                return series
        raise KeyError(geo_id)

    def geo_ids(self) -> list[str]:
        return [k.geo_id for k in self.regions]

    def with_culture(self, culture: CultureTable) -> "Dataset":
        return Dataset(self.schema, dict(self.regions), culture, self.report)

    def culture_for(self, key: RegionKey) -> CulturalProfile:
        return self.culture.lookup(key.country_name)

    def same_as(self, other: "Dataset") -> bool:
        if self.schema != other.schema or list(self.regions) != list(other.regions):
            return False
        return all(self.regions[k].same_as(other.regions[k]) for k in self.regions)


def _read_bytes(raw) -> bytes:
    if isinstance(raw, bytes):
        return raw
    if isinstance(raw, str):
        if "\n" not in raw and os.path.exists(raw):
            with open(raw, "rb") as f:
                return f.read()
        return raw.encode("utf-8")
    if isinstance(raw, os.PathLike):
        with open(raw, "rb") as f:
            return f.read()
    data = raw.read()
    return data.encode("utf-8") if isinstance(data, str) else data


def _is_missing(cell: str) -> bool:
    return cell.strip().lower() in _MISSING_MARKERS


def _parse_number(cell: str) -> float | None:
    """None for missing markers; raises ValueError for garbage."""
    if _is_missing(cell):
        return None
    value = float(cell)
    if not np.isfinite(value):
        raise ValueError(f"non-finite value {cell!r}")
    return value


def _parse_date(cell: str) -> np.datetime64:
    cell = cell.strip()
    if len(cell) == 8 and cell.isdigit():
        return np.datetime64(dt.datetime.strptime(cell, "%Y%m%d").date(), "D")
    return np.datetime64(dt.date.fromisoformat(cell[:10]), "D")


def parse_oxcgrt(raw, schema: NpiSchema = DEFAULT_SCHEMA, columns: ColumnMap = DEFAULT_COLUMNS) -> Dataset:
    """Parse an OxCGRT-format CSV into a :class:`Dataset`.

    Empty NPI cells become 0.  Regions without a single reported case count
    are dropped.  Within a region, missing dates and missing cumulative counts
    are forward-filled, and cumulative counts are clamped to their running
    maximum.  Malformed rows are skipped and listed in ``dataset.report``.
    """
    frame = pd.read_csv(io.BytesIO(_read_bytes(raw)), dtype=str, keep_default_na=False)
    frame.columns = [c.strip() for c in frame.columns]

    required = [columns.country, columns.date, columns.cases, columns.deaths, columns.population]
    missing = [c for c in [*required, *schema.names] if c not in frame.columns]
    if missing:
        raise IngestError(f"CSV header lacks required columns: {missing}")
    has_region = columns.region in frame.columns
    has_geo = columns.geo_id in frame.columns

    max_levels = schema.max_array
    errors: list[tuple[int, str]] = []
    clamped = 0
    grouped: dict[str, dict] = {}

    for row_index, row in enumerate(frame.itertuples(index=False, name=None)):
        cells = dict(zip(frame.columns, row))
        try:
            country = cells[columns.country].strip()
            if not country:
                raise ValueError("empty country name")
            region = cells[columns.region].strip() if has_region else ""
            geo_id = cells[columns.geo_id].strip() if has_geo else ""
            key = RegionKey.make(country, region or None, geo_id or None)
            date = _parse_date(cells[columns.date])
            population = _parse_number(cells[columns.population])
            if population is None or population <= 0:
                raise ValueError(f"bad population {cells[columns.population]!r}")
            cases = _parse_number(cells[columns.cases])
            deaths = _parse_number(cells[columns.deaths])
            npi = []
            for name in schema.names:
                level = _parse_number(cells[name])
                npi.append(0 if level is None else int(round(level)))
        except (ValueError, KeyError) as exc:
            errors.append((row_index, str(exc)))
            continue

        npi_arr = np.asarray(npi, dtype=np.int64)
        if np.any(npi_arr < 0) or np.any(npi_arr > max_levels):
            clamped += 1
            npi_arr = np.clip(npi_arr, 0, max_levels)

        slot = grouped.setdefault(key.geo_id, {"key": key, "population": population, "rows": {}})
        # duplicate dates: the later row wins
        slot["rows"][date] = (cases, deaths, npi_arr)

    if errors:
        logger.warning("skipped %d malformed rows (first: row %d: %s)", len(errors), *errors[0])
    if clamped:
        logger.warning("clamped out-of-range NPI levels on %d rows", clamped)

    regions: dict[RegionKey, RegionSeries] = {}
    dropped: list[str] = []
    for geo_id in sorted(grouped):
        slot = grouped[geo_id]
        series = _assemble_region(slot["key"], slot["population"], slot["rows"])
        if series is None:
            dropped.append(geo_id)
        else:
            regions[series.key] = series

    if not regions:
        raise IngestError(f"no regions retained ({len(dropped)} dropped, {len(errors)} bad rows)")

    report = IngestReport(len(frame), tuple(errors), tuple(dropped), clamped)
    return Dataset(schema, regions, CultureTable({}), report)


def _assemble_region(key: RegionKey, population: float, rows: dict) -> RegionSeries | None:
    dates = sorted(rows)
    cases = np.array([np.nan if rows[d][0] is None else rows[d][0] for d in dates])
    if np.all(np.isnan(cases)):
        return None
    deaths = np.array([np.nan if rows[d][1] is None else rows[d][1] for d in dates])
    npi = np.stack([rows[d][2] for d in dates])

    full = np.arange(dates[0], dates[-1] + np.timedelta64(1, "D"), dtype="datetime64[D]")
    position = (np.asarray(dates, dtype="datetime64[D]") - full[0]).astype(np.int64)
    present = np.zeros(len(full), dtype=bool)
    present[position] = True
    # index of the latest present row at or before each day
    src = np.maximum.accumulate(np.where(present, np.arange(len(full)), 0))
    lookup = np.full(len(full), -1)
    lookup[position] = np.arange(len(dates))
    row_of_day = lookup[src]

    def fill(values):
        out = values[row_of_day]
        out = pd.Series(out).ffill().fillna(0.0).to_numpy()
        return np.maximum.accumulate(np.maximum(out, 0.0))

    return RegionSeries(
        key=key,
        population=int(round(population)),
        dates=full,
        confirmed_cases=fill(cases),
        confirmed_deaths=fill(deaths),
        npi=npi[row_of_day],
    )


def load_cultural(raw, country_column: str | None = None) -> CultureTable:
    """Read a country + six-score table (Hofstede dimensions).

    The country column is ``country_column`` if given, else a column named
    ``country`` (any case), else the first column.  The first six columns that
    hold numbers are the scores.  Empty cells take the column mean and mark
    that country's profile as imputed.
    """
    frame = pd.read_csv(io.BytesIO(_read_bytes(raw)), dtype=str, keep_default_na=False)
    frame.columns = [c.strip() for c in frame.columns]
    if country_column is None:
        lowered = {c.lower(): c for c in frame.columns}
        country_column = lowered.get("country", frame.columns[0])
    if country_column not in frame.columns:
        raise IngestError(f"cultural table has no column {country_column!r}")

    score_columns = []
    for col in frame.columns:
        if col == country_column:
            continue
        cells = [c for c in frame[col] if not _is_missing(c)]
        try:
            [float(c) for c in cells]
        except ValueError:
            continue
        if cells:
            score_columns.append(col)
    if len(score_columns) < 6:
        raise IngestError(f"cultural table needs 6 numeric columns, found {len(score_columns)}: {score_columns}")
    score_columns = score_columns[:6]

    scores = np.full((len(frame), 6), np.nan)
    for row_index, row in enumerate(frame[score_columns].itertuples(index=False, name=None)):
        for j, cell in enumerate(row):
            value = _parse_number(cell)
            if value is None:
                continue
            if not 0.0 <= value <= 100.0:
                raise IngestError(f"row {row_index}: score {value} in {score_columns[j]!r} outside [0, 100]")
            scores[row_index, j] = value

    # every selected column has at least one number, so nanmean is defined
    column_means = np.nanmean(scores, axis=0)
    profiles = {}
    for row_index, name in enumerate(frame[country_column]):
        name = name.strip()
        if not name:
            continue
        row = scores[row_index]
        gaps = np.isnan(row)
        profiles[name] = CulturalProfile(tuple(np.where(gaps, column_means, row)), imputed=bool(gaps.any()))
    return CultureTable(profiles)


def date_slice(dataset: Dataset, start, end) -> Dataset:
    """Restrict every region to ``[start, end]`` (inclusive); drop emptied regions."""
    start = np.datetime64(start, "D")
    end = np.datetime64(end, "D")
    if start > end:
        raise ValueError(f"date_slice: start {start} is after end {end}")
    regions = {}
    for key, series in dataset.regions.items():
        mask = (series.dates >= start) & (series.dates <= end)
        if not mask.any():
            continue
        idx = np.flatnonzero(mask)
        regions[key] = series.slice(idx[0], idx[-1] + 1)
    return Dataset(dataset.schema, regions, dataset.culture, dataset.report)


# -- snapshot -----------------------------------------------------------------

def dataset_to_json(dataset: Dataset) -> str:
    """Serialize to the versioned snapshot format (deterministic bytes)."""
    payload = {
        "format": SNAPSHOT_FORMAT,
        "version": SNAPSHOT_VERSION,
        "schema": {"names": list(dataset.schema.names), "max_levels": list(dataset.schema.max_levels)},
        "regions": [
            {
                "geo_id": key.geo_id,
                "country_name": key.country_name,
                "region_name": key.region_name,
                "population": series.population,
                "start_date": str(series.dates[0]),
                "confirmed_cases": series.confirmed_cases.tolist(),
                "confirmed_deaths": series.confirmed_deaths.tolist(),
                "npi": series.npi.tolist(),
            }
            for key, series in dataset.regions.items()
        ],
        "culture": {
            name: {"values": list(p.values), "imputed": p.imputed} for name, p in dataset.culture.items()
        },
        "report": {
            "rows_read": dataset.report.rows_read,
            "errors": [list(e) for e in dataset.report.errors],
            "dropped": list(dataset.report.dropped),
            "npi_clamped": dataset.report.npi_clamped,
        },
    }
    return json.dumps(payload, sort_keys=True, indent=1) + "\n"


def dataset_from_json(text: str) -> Dataset:
    payload = json.loads(text)
    if payload.get("format") != SNAPSHOT_FORMAT:
        raise IngestError("not a dataset snapshot")
    if payload.get("version") != SNAPSHOT_VERSION:
        raise IngestError(f"unsupported snapshot version {payload.get('version')}")
    schema = NpiSchema(tuple(payload["schema"]["names"]), tuple(payload["schema"]["max_levels"]))
    regions = {}
    for item in payload["regions"]:
        key = RegionKey(item["geo_id"], item["country_name"], item["region_name"])
        n = len(item["confirmed_cases"])
        start = np.datetime64(item["start_date"], "D")
        regions[key] = RegionSeries(
            key,
            item["population"],
            start + np.arange(n),
            item["confirmed_cases"],
            item["confirmed_deaths"],
            np.asarray(item["npi"], dtype=np.int64).reshape(n, 12),
        )
    culture = CultureTable(
        {name: CulturalProfile(tuple(p["values"]), p["imputed"]) for name, p in payload["culture"].items()}
    )
    rep = payload.get("report", {})
    report = IngestReport(
        rep.get("rows_read", 0),
        tuple((int(r), str(m)) for r, m in rep.get("errors", [])),
        tuple(rep.get("dropped", [])),
        rep.get("npi_clamped", 0),
    )
    return Dataset(schema, regions, culture, report)


def write_oxcgrt_csv(regions: Iterable[RegionSeries], schema: NpiSchema = DEFAULT_SCHEMA,
                     columns: ColumnMap = DEFAULT_COLUMNS) -> str:
    """Render regions back into the CSV layout :func:`parse_oxcgrt` reads."""
    records = []
    for series in regions:
        for t, day in enumerate(series.dates):
            rec = {
                columns.country: series.key.country_name,
                columns.region: series.key.region_name or "",
                columns.geo_id: series.key.geo_id,
                columns.date: str(day),
                columns.cases: repr(float(series.confirmed_cases[t])),
                columns.deaths: repr(float(series.confirmed_deaths[t])),
                columns.population: str(series.population),
            }
            rec.update({name: str(int(v)) for name, v in zip(schema.names, series.npi[t])})
            records.append(rec)
    header = [columns.country, columns.region, columns.geo_id, columns.date,
              *schema.names, columns.cases, columns.deaths, columns.population]
    return pd.DataFrame.from_records(records, columns=header).to_csv(index=False, lineterminator="\n")


CULTURE_COLUMNS = ("pdi", "idv", "mas", "uai", "ltowvs", "ivr")


def write_culture_csv(culture: Mapping[str, CulturalProfile]) -> str:
    """Render a culture table in the layout :func:`load_cultural` reads."""
    records = [{"country": name, **dict(zip(CULTURE_COLUMNS, (repr(v) for v in profile.values)))}
               for name, profile in culture.items()]
    return pd.DataFrame.from_records(records, columns=["country", *CULTURE_COLUMNS]).to_csv(
        index=False, lineterminator="\n")
