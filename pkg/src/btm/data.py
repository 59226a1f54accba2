"""Survey observations, the country/subregion/region hierarchy, and CSV I/O."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DataError

SOURCE_TYPES = ("DHS", "PMA", "MICS", "National", "Other")
DATA_COLUMNS = ("country", "subregion", "region", "year_start", "year_end",
                "value", "sampling_sd", "source_type")
_TRUE = {"1", "true", "yes", "y", "t"}


@dataclass
class HierarchyIndex:
    """country -> subregion -> region, all as integer indices."""

    countries: list[str]
    subregions: list[str]
    regions: list[str]
    subregion_of: np.ndarray
    region_of: np.ndarray

    def __post_init__(self):
        self.subregion_of = np.asarray(self.subregion_of, dtype=int)
        self.region_of = np.asarray(self.region_of, dtype=int)
        if self.subregion_of.shape != (len(self.countries),):
            raise DataError("every country needs exactly one subregion")
        if self.region_of.shape != (len(self.subregions),):
            raise DataError("every subregion needs exactly one region")

    @property
    def C(self) -> int:
        return len(self.countries)

    @property
    def S(self) -> int:
        return len(self.subregions)

    @property
    def R(self) -> int:
        return len(self.regions)

    @property
    def region_of_country(self) -> np.ndarray:
        return self.region_of[self.subregion_of]

    @classmethod
    def from_rows(cls, rows) -> "HierarchyIndex":
        """Build from (country, subregion, region) triples, first-seen order."""
        countries, subregions, regions = [], [], []
        sub_of, reg_of = {}, {}
        for country, sub, reg in rows:
            if country in sub_of:
                if sub_of[country] != sub:
                    raise DataError(f"country {country!r} mapped to two subregions")
                continue
            if sub in reg_of and reg_of[sub] != reg:
                raise DataError(f"subregion {sub!r} mapped to two regions")
            sub_of[country] = sub
            reg_of[sub] = reg
            countries.append(country)
            if sub not in subregions:
                subregions.append(sub)
            if reg not in regions:
                regions.append(reg)
        return cls(
            countries, subregions, regions,
            [subregions.index(sub_of[c]) for c in countries],
            [regions.index(reg_of[s]) for s in subregions],
        )

    def subset(self, countries) -> "HierarchyIndex":
        keep = [c for c in self.countries if c in set(countries)]
        rows = [(c, self.subregions[self.subregion_of[self.countries.index(c)]],
                 self.regions[self.region_of[self.subregion_of[self.countries.index(c)]]])
                for c in keep]
        return HierarchyIndex.from_rows(rows)


@dataclass
class Observations:
    """Columnar survey observations; ``country`` holds codes, not indices."""

    country: np.ndarray
    year: np.ndarray
    value: np.ndarray
    sampling_sd: np.ndarray
    source_type: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.country = np.asarray(self.country, dtype=object)
        self.year = np.asarray(self.year, dtype=int)
        self.value = np.asarray(self.value, dtype=float)
        self.sampling_sd = np.asarray(self.sampling_sd, dtype=float)
        self.source_type = np.asarray(self.source_type, dtype=object)
        n = len(self.country)
        for name in ("year", "value", "sampling_sd", "source_type"):
            if len(getattr(self, name)) != n:
                raise DataError(f"column {name} has the wrong length")

    def __len__(self) -> int:
        return len(self.country)

    def take(self, idx) -> "Observations":
        idx = np.asarray(idx)
        return Observations(self.country[idx], self.year[idx], self.value[idx],
                            self.sampling_sd[idx], self.source_type[idx], dict(self.meta))

    @property
    def sources(self) -> list[str]:
        """Distinct source types present, in canonical order."""
        present = set(self.source_type.tolist())
        known = [s for s in SOURCE_TYPES if s in present]
        return known + sorted(present - set(known))


def survey_year(year_start: float, year_end: float) -> int:
    """Midpoint of the survey period, rounded down."""
    return int(math.floor(0.5 * (year_start + year_end)))


def impute_sampling_sd(obs: Observations) -> Observations:
    """Fill missing or zero sampling SDs with the largest SD observed for the
    same source type, falling back to the overall largest."""
    sd = obs.sampling_sd.copy()
    bad = ~np.isfinite(sd) | (sd <= 0.0)
    if not bad.any():
        return obs
    good = ~bad
    if not good.any():
        raise DataError("no observation carries a usable sampling SD")
    overall = sd[good].max()
    for i in np.flatnonzero(bad):
        same = good & (obs.source_type == obs.source_type[i])
        sd[i] = sd[same].max() if same.any() else overall
    out = Observations(obs.country, obs.year, obs.value, sd, obs.source_type, dict(obs.meta))
    out.meta["imputed_sd"] = int(bad.sum())
    return out


def _parse_float(text, row, column, path):
    try:
        return float(text)
    except ValueError:
        raise DataError(f"{path}:{row}: column {column!r}: cannot parse {text!r}") from None


def read_observations(path, allowed_sources=SOURCE_TYPES, impute=True):
    """Read an mCPR CSV; returns ``(Observations, HierarchyIndex)``.

    Rows with a truthy ``exclude`` column are dropped.
    """
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in DATA_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        cols = {k: [] for k in ("country", "year", "value", "sd", "source")}
        tree = []
        for row_no, row in enumerate(reader, start=2):
            if row.get("exclude", "").strip().lower() in _TRUE:
                continue
            source = row["source_type"].strip()
            if allowed_sources is not None and source not in allowed_sources:
                raise DataError(f"{path}:{row_no}: unknown source_type {source!r}")
            start = _parse_float(row["year_start"], row_no, "year_start", path)
            end_text = row["year_end"].strip()
            end = _parse_float(end_text, row_no, "year_end", path) if end_text else start
            value = _parse_float(row["value"], row_no, "value", path)
            if not 0.0 <= value <= 1.0:
                raise DataError(f"{path}:{row_no}: value {value} outside [0, 1]")
            sd_text = row["sampling_sd"].strip()
            sd = _parse_float(sd_text, row_no, "sampling_sd", path) if sd_text else np.nan
            country = row["country"].strip()
            tree.append((country, row["subregion"].strip(), row["region"].strip()))
            cols["country"].append(country)
            cols["year"].append(survey_year(start, end))
            cols["value"].append(value)
            cols["sd"].append(sd)
            cols["source"].append(source)
    if not cols["country"]:
        raise DataError(f"{path}: no observations")
    obs = Observations(cols["country"], cols["year"], cols["value"], cols["sd"], cols["source"])
    if impute:
        obs = impute_sampling_sd(obs)
    return obs, HierarchyIndex.from_rows(tree)


def read_hierarchy(path) -> HierarchyIndex:
    """CSV with columns country, subregion, region."""
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        rows = [(r["country"].strip(), r["subregion"].strip(), r["region"].strip())
                for r in reader]
    if not rows:
        raise DataError(f"{path}: empty hierarchy file")
    return HierarchyIndex.from_rows(rows)


def write_observations(path, obs: Observations, hierarchy: HierarchyIndex) -> None:
    idx = {c: i for i, c in enumerate(hierarchy.countries)}
    rows = []
    for i in range(len(obs)):
        c = idx[obs.country[i]]
        s = hierarchy.subregion_of[c]
        rows.append({
            "country": obs.country[i],
            "subregion": hierarchy.subregions[s],
            "region": hierarchy.regions[hierarchy.region_of[s]],
            "year_start": int(obs.year[i]),
            "year_end": int(obs.year[i]),
            "value": repr(float(obs.value[i])),
            "sampling_sd": "" if not np.isfinite(obs.sampling_sd[i]) else repr(float(obs.sampling_sd[i])),
            "source_type": obs.source_type[i],
        })
    from .io import write_csv
    write_csv(path, DATA_COLUMNS, rows)


# --- TFR series ---------------------------------------------------------------

TFR_COLUMNS = ("country", "period_start_year", "tfr", "phase2_flag")


@dataclass
class TfrSeries:
    """One country's TFR on 5-year periods with its Phase II segment."""

    country: str
    period_start: np.ndarray
    tfr: np.ndarray
    phase2_start: int
    phase2_end: int

    def __post_init__(self):
        self.period_start = np.asarray(self.period_start, dtype=int)
        self.tfr = np.asarray(self.tfr, dtype=float)
        if np.any(self.tfr <= 0.0):
            raise DataError(f"{self.country}: TFR values must be positive")
        if not 0 <= self.phase2_start <= self.phase2_end < len(self.tfr):
            raise DataError(f"{self.country}: empty or invalid Phase II segment")

    @property
    def phase2(self) -> np.ndarray:
        return self.tfr[self.phase2_start: self.phase2_end + 1]

    @property
    def phase2_years(self) -> np.ndarray:
        return self.period_start[self.phase2_start: self.phase2_end + 1]


def read_tfr(path) -> list[TfrSeries]:
    path = Path(path)
    by_country: dict[str, list] = {}
    with path.open(newline="") as fh:
        reader = csv.DictReader(fh)
        missing = [c for c in TFR_COLUMNS if c not in (reader.fieldnames or [])]
        if missing:
            raise DataError(f"{path}: missing columns {missing}")
        for row_no, row in enumerate(reader, start=2):
            year = int(_parse_float(row["period_start_year"], row_no, "period_start_year", path))
            tfr = _parse_float(row["tfr"], row_no, "tfr", path)
            flag = row["phase2_flag"].strip().lower() in _TRUE
            by_country.setdefault(row["country"].strip(), []).append((year, tfr, flag))
    out = []
    for country, rows in by_country.items():
        rows.sort()
        flags = [f for _, _, f in rows]
        if not any(flags):
            raise DataError(f"{path}: country {country!r} has no Phase II periods")
        first = flags.index(True)
        last = len(flags) - 1 - flags[::-1].index(True)
        if not all(flags[first: last + 1]):
            raise DataError(f"{path}: country {country!r} has a non-contiguous Phase II")
        out.append(TfrSeries(country, [r[0] for r in rows], [r[1] for r in rows], first, last))
    return out


def write_tfr(path, series: list[TfrSeries]) -> None:
    from .io import write_csv
    rows = []
    for s in series:
        for i, (y, v) in enumerate(zip(s.period_start, s.tfr)):
            rows.append({"country": s.country, "period_start_year": int(y), "tfr": repr(float(v)),
                         "phase2_flag": int(s.phase2_start <= i <= s.phase2_end)})
    write_csv(path, TFR_COLUMNS, rows)
