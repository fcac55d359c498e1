"""Supervised view of the series: lags, calendar indicators, identity one-hots,
and z-score scaling fitted on the training partition."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from datetime import date, datetime, timedelta
from importlib import resources
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .ingest import CITY_ZONES, City, resolve_zone
from .timeseries import EnergySeries, Level, Resolution

EPSILON = 1e-8

DEFAULT_LAGS: dict[Resolution, tuple[int, ...]] = {
    Resolution.TEN_MIN: (1, 2, 3, 6, 144, 1008),
    Resolution.HOURLY: (1, 2, 3, 24, 168),
    Resolution.DAILY: (1, 2, 7, 14, 28),
}

CALENDAR_COLUMNS = (
    ["is_holiday", "is_weekend"]
    + [f"dow_{i}" for i in range(7)]
    + [f"month_{m}" for m in range(1, 13)]
)


@dataclass(frozen=True)
class LagSpec:
    resolution: Resolution
    offsets: tuple[int, ...]

    def __post_init__(self) -> None:
        offs = tuple(int(o) for o in self.offsets)
        if not offs or offs[0] < 1 or any(b <= a for a, b in zip(offs, offs[1:])):
            raise ValueError("lag offsets must be positive and strictly increasing")
        object.__setattr__(self, "offsets", offs)

    @property
    def max_lag(self) -> int:
        return self.offsets[-1]

    @classmethod
    def default(cls, resolution: Resolution) -> "LagSpec":
        return cls(resolution, DEFAULT_LAGS[resolution])


@dataclass(frozen=True)
class CalendarFeatures:
    is_holiday: int
    is_weekend: int
    day_of_week: int  # Monday = 0
    month: int  # 1..12

    def vector(self) -> np.ndarray:
        v = np.zeros(len(CALENDAR_COLUMNS))
        v[0] = self.is_holiday
        v[1] = self.is_weekend
        v[2 + self.day_of_week] = 1.0
        v[9 + self.month - 1] = 1.0
        return v


@dataclass(frozen=True)
class Normalizer:
    mean: float
    std: float
    epsilon: float = EPSILON

    @property
    def scale(self) -> float:
        return max(self.std, self.epsilon)

    def transform(self, v):
        return (np.asarray(v, dtype=np.float64) - self.mean) / self.scale

    def inverse(self, z):
        return np.asarray(z, dtype=np.float64) * self.scale + self.mean

    def to_dict(self) -> dict:
        return {"mean": self.mean, "std": self.std, "epsilon": self.epsilon}


def fit_normalizer(train_values) -> Normalizer:
    x = np.asarray(train_values, dtype=np.float64).ravel()
    if x.size == 0:
        raise ValueError("cannot fit a normalizer on an empty vector")
    return Normalizer(float(x.mean()), float(x.std()))


def chronological_split(length: int, train_fraction: float, max_lag: int = 0) -> tuple[range, range]:
    if not 0.0 < train_fraction < 1.0:
        raise ValueError("train_fraction must lie in (0, 1)")
    n_train = int(np.floor(length * train_fraction))
    if n_train < max_lag + 1 or length - n_train < max_lag + 1:
        raise ValueError(
            f"series of length {length} split at {n_train} leaves a partition shorter "
            f"than max lag + 1 = {max_lag + 1}"
        )
    return range(0, n_train), range(n_train, length)


def validation_start(n_train: int, fraction: float = 0.1) -> int:
    """First index of the chronological validation tail inside the train partition."""
    n_val = max(1, int(np.floor(n_train * fraction)))
    return n_train - n_val


class HolidayCalendar:
    """Static per-city holiday table with a known year coverage."""

    def __init__(self, entries: Mapping[str, set[date]], years: tuple[int, int]):
        self._entries = {k: frozenset(v) for k, v in entries.items()}
        self.years = years

    @classmethod
    def from_text(cls, text: str) -> "HolidayCalendar":
        entries: dict[str, set[date]] = {}
        lines = [ln for ln in text.splitlines() if ln.strip() and not ln.startswith("#")]
        for row in csv.DictReader(io.StringIO("\n".join(lines))):
            entries.setdefault(row["city"].strip(), set()).add(date.fromisoformat(row["date"].strip()))
        all_years = [d.year for v in entries.values() for d in v]
        if not all_years:
            raise ValueError("holiday table is empty")
        return cls(entries, (min(all_years), max(all_years)))

    @classmethod
    def load(cls, path: str | Path | None = None) -> "HolidayCalendar":
        if path is None:
            text = resources.files("evforecast").joinpath("data/holidays.csv").read_text("utf-8")
        else:
            text = Path(path).read_text("utf-8")
        return cls.from_text(text)

    def is_holiday(self, day: date, city: City | str) -> bool:
        return day in self._entries.get(City(city).value, frozenset())


_DEFAULT_CALENDAR: HolidayCalendar | None = None


def default_calendar() -> HolidayCalendar:
    global _DEFAULT_CALENDAR
    if _DEFAULT_CALENDAR is None:
        _DEFAULT_CALENDAR = HolidayCalendar.load()
    return _DEFAULT_CALENDAR


def local_date(t: datetime | date, city: City | str) -> date:
    if isinstance(t, datetime):
        zone = CITY_ZONES.get(City(city))
        return t.astimezone(resolve_zone(zone)).date() if zone else t.date()
    return t


def calendar_of(
    t: datetime | date, city: City | str, holidays: HolidayCalendar | None = None
) -> CalendarFeatures:
    """Calendar indicators for an instant (in the city's civil calendar) or a civil date."""
    holidays = holidays or default_calendar()
    d = local_date(t, city)
    lo, hi = holidays.years
    if not lo <= d.year <= hi:
        raise ValueError(f"{d} is outside the holiday table coverage {lo}-{hi}")
    dow = d.weekday()
    return CalendarFeatures(int(holidays.is_holiday(d, city)), int(dow >= 5), dow, d.month)


def calendar_matrix(
    t0: datetime, resolution: Resolution, n: int, city: City | str, holidays: HolidayCalendar | None = None
) -> np.ndarray:
    """Calendar rows for intervals 0..n-1, each taken at the interval midpoint."""
    half = timedelta(seconds=resolution.seconds / 2)
    step = timedelta(seconds=resolution.seconds)
    cache: dict[date, np.ndarray] = {}
    out = np.empty((n, len(CALENDAR_COLUMNS)))
    for i in range(n):
        d = local_date(t0 + i * step + half, city)
        row = cache.get(d)
        if row is None:
            row = calendar_of(d, city, holidays).vector()
            cache[d] = row
        out[i] = row
    return out


@dataclass(frozen=True)
class IdentitySchema:
    """Column layout for station and region one-hot blocks."""

    stations: tuple[str, ...]
    regions: tuple[str, ...]

    @property
    def columns(self) -> list[str]:
        return [f"station={s}" for s in self.stations] + [f"region={r}" for r in self.regions]

    def vector(self, level: Level, entity_id: str, station_region: Mapping[str, str]) -> np.ndarray:
        v = np.zeros(len(self.stations) + len(self.regions))
        if level is Level.STATION:
            v[self.stations.index(entity_id)] = 1.0
            v[len(self.stations) + self.regions.index(station_region[entity_id])] = 1.0
        elif level is Level.REGION:
            v[len(self.stations) + self.regions.index(entity_id)] = 1.0
        return v


@dataclass
class FeatureMatrix:
    X: np.ndarray
    y: np.ndarray
    columns: list[str]
    entity: np.ndarray  # entity id per row
    t_index: np.ndarray  # interval index per row
    n_lags: int
    meta: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.y)

    def select(self, mask: np.ndarray) -> "FeatureMatrix":
        return FeatureMatrix(
            self.X[mask], self.y[mask], self.columns, self.entity[mask], self.t_index[mask], self.n_lags, self.meta
        )

    def to_csv(self, path: str | Path, timestamps: Mapping[int, str] | None = None) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["entity_id", "t_index", *self.columns, "target"])
            for e, t, row, y in zip(self.entity, self.t_index, self.X, self.y):
                w.writerow([e, int(t), *(repr(float(v)) for v in row), repr(float(y))])


def lag_columns(lagspec: LagSpec) -> list[str]:
    return [f"lag_{o}" for o in lagspec.offsets]


def static_rows(
    series: EnergySeries,
    city: City | str,
    schema: IdentitySchema,
    station_region: Mapping[str, str],
    holidays: HolidayCalendar | None = None,
    calendar: np.ndarray | None = None,
) -> np.ndarray:
    """Calendar plus identity features for every interval of ``series``."""
    cal = calendar if calendar is not None else calendar_matrix(
        series.t0, series.resolution, len(series), city, holidays
    )
    ident = schema.vector(series.level, series.entity_id, station_region)
    return np.hstack([cal, np.broadcast_to(ident, (len(series), len(ident)))])


def build_matrix(
    series_set: Sequence[EnergySeries],
    lagspec: LagSpec,
    normalizer: Normalizer,
    city: City | str,
    schema: IdentitySchema,
    station_region: Mapping[str, str],
    holidays: HolidayCalendar | None = None,
) -> FeatureMatrix:
    """Rows ordered by entity id then time; row t uses only values before t."""
    if not series_set:
        raise ValueError("no series")
    ref = series_set[0]
    for s in series_set:
        if (s.t0, s.resolution, len(s)) != (ref.t0, ref.resolution, len(ref)):
            raise ValueError("all series must share one grid")
    if ref.resolution is not lagspec.resolution:
        raise ValueError("lag spec resolution does not match the series")
    L = lagspec.max_lag
    if len(ref) <= L:
        raise ValueError(f"series of length {len(ref)} cannot satisfy max lag {L}")
    cal = calendar_matrix(ref.t0, ref.resolution, len(ref), city, holidays)
    blocks_X, blocks_y, ents, ts = [], [], [], []
    t = np.arange(L, len(ref))
    for s in sorted(series_set, key=lambda s: s.entity_id):
        z = normalizer.transform(s.values)
        lags = np.column_stack([z[t - o] for o in lagspec.offsets])
        static = static_rows(s, city, schema, station_region, calendar=cal)[t]
        blocks_X.append(np.hstack([lags, static]))
        blocks_y.append(z[t])
        ents.append(np.full(len(t), s.entity_id, dtype=object))
        ts.append(t)
    columns = lag_columns(lagspec) + CALENDAR_COLUMNS + schema.columns
    return FeatureMatrix(
        np.vstack(blocks_X),
        np.concatenate(blocks_y),
        columns,
        np.concatenate(ents),
        np.concatenate(ts),
        len(lagspec.offsets),
        {"resolution": ref.resolution.label, "t0": ref.t0.isoformat()},
    )
