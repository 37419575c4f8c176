"""Core data containers: per-region count series, covariate panels, region maps.

All series are contiguous daily arrays anchored at a start date. Counts are
kept as integers; covariates as floats. Regions are identified by string ids.
"""
from __future__ import annotations

import datetime as dt
from dataclasses import dataclass, field

import numpy as np

MOBILITY_CHANNELS = (
    "retail_recreation",
    "grocery_pharmacy",
    "parks",
    "transit",
    "workplaces",
    "residential",
)
N_MOBILITY = len(MOBILITY_CHANNELS)


def parse_date(value) -> dt.date:
    """Parse an ISO-8601 date string (or pass through a date)."""
    if isinstance(value, dt.date) and not isinstance(value, dt.datetime):
        return value
    if isinstance(value, dt.datetime):
        return value.date()
    return dt.date.fromisoformat(str(value).strip())


def date_range(start: dt.date, end: dt.date) -> list[dt.date]:
    """Inclusive daily range from start to end."""
    if end < start:
        raise ValueError(f"date range end {end} precedes start {start}")
    n = (end - start).days + 1
    return [start + dt.timedelta(days=i) for i in range(n)]


@dataclass
class RegionSeries:
    """Daily reported cases and deaths for one region.

    Cumulative deaths exceeding cumulative cases is tolerated (real feeds
    contain such inconsistencies); only non-negativity is enforced.
    """

    region_id: str
    start_date: dt.date
    cases: np.ndarray
    deaths: np.ndarray
    population: int

    def __post_init__(self):
        self.cases = np.asarray(self.cases, dtype=np.int64)
        self.deaths = np.asarray(self.deaths, dtype=np.int64)
        if self.cases.shape != self.deaths.shape or self.cases.ndim != 1:
            raise ValueError(
                f"region {self.region_id}: cases/deaths must be 1-d and equal length, "
                f"got {self.cases.shape} vs {self.deaths.shape}"
            )
        if self.cases.size == 0:
            raise ValueError(f"region {self.region_id}: empty series")
        if (self.cases < 0).any() or (self.deaths < 0).any():
            raise ValueError(f"region {self.region_id}: negative counts")
        if self.population <= 0:
            raise ValueError(f"region {self.region_id}: population must be positive")

    def __len__(self) -> int:
        return self.cases.size

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=len(self) - 1)

    @property
    def dates(self) -> list[dt.date]:
        return date_range(self.start_date, self.end_date)

    def index_of(self, day: dt.date) -> int:
        i = (day - self.start_date).days
        if not 0 <= i < len(self):
            raise KeyError(f"{day} outside series [{self.start_date}, {self.end_date}]")
        return i

    def reindexed(self, start: dt.date, end: dt.date) -> "RegionSeries":
        """Return a copy covering [start, end], zero-filling days outside the data."""
        n = (end - start).days + 1
        if n <= 0:
            raise ValueError("reindex range is empty")
        cases = np.zeros(n, dtype=np.int64)
        deaths = np.zeros(n, dtype=np.int64)
        src_lo = max(self.start_date, start)
        src_hi = min(self.end_date, end)
        if src_lo <= src_hi:
            a = (src_lo - self.start_date).days
            b = (src_hi - self.start_date).days + 1
            o = (src_lo - start).days
            cases[o : o + (b - a)] = self.cases[a:b]
            deaths[o : o + (b - a)] = self.deaths[a:b]
        return RegionSeries(self.region_id, start, cases, deaths, self.population)


@dataclass
class CovariatePanel:
    """Smoothed daily mobility indicators for one region, shape (days, channels)."""

    region_id: str
    start_date: dt.date
    values: np.ndarray
    channels: tuple[str, ...] = MOBILITY_CHANNELS
    smoothing_window: int = 7

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2 or self.values.shape[1] != len(self.channels):
            raise ValueError(
                f"region {self.region_id}: covariate panel must be (days, {len(self.channels)}), "
                f"got {self.values.shape}"
            )
        if not np.isfinite(self.values).all():
            raise ValueError(f"region {self.region_id}: covariate panel has non-finite values")

    def __len__(self) -> int:
        return self.values.shape[0]

    @property
    def end_date(self) -> dt.date:
        return self.start_date + dt.timedelta(days=len(self) - 1)

    def reindexed(self, start: dt.date, end: dt.date) -> "CovariatePanel":
        """Return a copy covering [start, end], edge-filling beyond the data."""
        n = (end - start).days + 1
        if n <= 0:
            raise ValueError("reindex range is empty")
        idx = np.clip(
            np.arange((start - self.start_date).days, (start - self.start_date).days + n),
            0,
            len(self) - 1,
        )
        return CovariatePanel(
            self.region_id, start, self.values[idx], self.channels, self.smoothing_window
        )


@dataclass
class RegionMap:
    """Municipality-to-region assignment with municipality populations."""

    municipality_region: dict[str, str]
    municipality_population: dict[str, int]
    _region_ids: list[str] = field(default_factory=list)

    def __post_init__(self):
        for muni, pop in self.municipality_population.items():
            if pop <= 0:
                raise ValueError(f"municipality {muni}: population must be positive")
        if not self._region_ids:
            seen: list[str] = []
            for r in self.municipality_region.values():
                if r not in seen:
                    seen.append(r)
            self._region_ids = seen

    @property
    def region_ids(self) -> list[str]:
        return list(self._region_ids)

    def region_of(self, municipality_id: str) -> str:
        return self.municipality_region[municipality_id]

    def region_population(self, region_id: str) -> int:
        total = sum(
            pop
            for muni, pop in self.municipality_population.items()
            if self.municipality_region[muni] == region_id
        )
        if total <= 0:
            raise ValueError(f"region {region_id} has no municipalities")
        return total

    def municipalities_in(self, region_id: str) -> list[str]:
        return [m for m, r in self.municipality_region.items() if r == region_id]
