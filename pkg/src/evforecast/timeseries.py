"""Rasterize sessions onto fixed grids, resample, and aggregate across levels."""

from __future__ import annotations

from dataclasses import dataclass
from datetime import datetime, timedelta, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np
import pandas as pd

from .ingest import SessionRecord

EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


class Resolution(Enum):
    TEN_MIN = 600
    HOURLY = 3600
    DAILY = 86400

    @property
    def seconds(self) -> int:
        return self.value

    @property
    def label(self) -> str:
        return {600: "10min", 3600: "hourly", 86400: "daily"}[self.value]

    @classmethod
    def from_label(cls, label: str) -> "Resolution":
        for r in cls:
            if r.label == label or r.name.lower() == label.lower():
                return r
        raise ValueError(f"unknown resolution {label!r}")


class Level(Enum):
    STATION = "Station"
    REGION = "Region"
    CITY = "City"

    def next(self) -> "Level":
        if self is Level.STATION:
            return Level.REGION
        if self is Level.REGION:
            return Level.CITY
        raise ValueError("City is the top aggregation level")


class GridError(ValueError):
    """Raised for misaligned or mismatched time grids."""


@dataclass(frozen=True)
class EnergySeries:
    entity_id: str
    level: Level
    resolution: Resolution
    t0: datetime
    values: np.ndarray

    def __post_init__(self) -> None:
        vals = np.asarray(self.values, dtype=np.float64)
        if vals.ndim != 1:
            raise ValueError("values must be one-dimensional")
        if np.any(vals < 0):
            raise ValueError("energy series values must be non-negative")
        vals.setflags(write=False)
        object.__setattr__(self, "values", vals)

    def __len__(self) -> int:
        return len(self.values)

    def timestamp(self, i: int) -> datetime:
        return self.t0 + timedelta(seconds=i * self.resolution.seconds)

    def timestamps(self) -> pd.DatetimeIndex:
        return pd.date_range(self.t0, periods=len(self.values), freq=f"{self.resolution.seconds}s")

    @property
    def total(self) -> float:
        return float(self.values.sum())


def _epoch_seconds(ts: datetime) -> int:
    return int((ts - EPOCH).total_seconds())


def default_span(sessions: Sequence[SessionRecord]) -> tuple[datetime, datetime]:
    """First start floored to midnight UTC through last end ceiled to midnight."""
    if not sessions:
        raise ValueError("no sessions")
    day = 86400
    lo = min(_epoch_seconds(s.start) for s in sessions)
    hi = max(_epoch_seconds(s.end) for s in sessions)
    lo = lo - lo % day
    hi = hi if hi % day == 0 else hi + (day - hi % day)
    return EPOCH + timedelta(seconds=lo), EPOCH + timedelta(seconds=hi)


def _session_arrays(sessions: Sequence[SessionRecord]):
    order = sorted(
        range(len(sessions)),
        key=lambda i: (sessions[i].station_id, sessions[i].start, sessions[i].end, sessions[i].energy_kwh),
    )
    st = np.array([sessions[i].station_id for i in order], dtype=object)
    a = np.array([_epoch_seconds(sessions[i].start) for i in order], dtype=np.int64)
    b = np.array([_epoch_seconds(sessions[i].end) for i in order], dtype=np.int64)
    e = np.array([sessions[i].energy_kwh for i in order], dtype=np.float64)
    return st, a, b, e


def _check_span(resolution: Resolution, span: tuple[datetime, datetime]) -> tuple[int, int, int]:
    lo, hi = (_epoch_seconds(t) for t in span)
    step = resolution.seconds
    if lo % 600 or hi % 600 or lo % step or hi % step:
        raise GridError(f"span {span} is not aligned to {resolution.label} boundaries")
    if hi <= lo:
        raise GridError("empty span")
    return lo, hi, (hi - lo) // step


def _allocate(a, b, e, lo, step, n):
    """Spread each session's energy over the intervals it overlaps,
    in proportion to overlap duration."""
    dur = (b - a).astype(np.float64)
    a_c = np.clip(a, lo, lo + n * step)
    b_c = np.clip(b, lo, lo + n * step)
    first = (a_c - lo) // step
    last = (b_c - lo - 1) // step
    counts = np.maximum(last - first + 1, 0)
    keep = (b_c > a_c)
    counts = np.where(keep, counts, 0)
    rep = np.repeat(np.arange(len(a)), counts)
    offs = np.arange(counts.sum()) - np.repeat(np.cumsum(counts) - counts, counts)
    idx = first[rep] + offs
    cell_lo = lo + idx * step
    overlap = np.minimum(b[rep], cell_lo + step) - np.maximum(a[rep], cell_lo)
    share = e[rep] * (overlap / dur[rep])
    return np.bincount(idx, weights=share, minlength=n)[:n]


def rasterize(
    sessions: Sequence[SessionRecord],
    resolution: Resolution = Resolution.TEN_MIN,
    span: tuple[datetime, datetime] | None = None,
) -> dict[str, EnergySeries]:
    """Per-station series on a fixed grid over ``span`` (defaults to whole days).

    Sessions partly outside the span are truncated at its edges; see
    :func:`truncated_energy` for the amount lost. Sessions wholly outside raise.
    """
    span = span or default_span(sessions)
    lo, hi, n = _check_span(resolution, span)
    st, a, b, e = _session_arrays(sessions)
    outside = (b <= lo) | (a >= hi)
    if outside.any():
        raise GridError(f"{int(outside.sum())} sessions lie outside the span")
    t0 = EPOCH + timedelta(seconds=lo)
    out: dict[str, EnergySeries] = {}
    for station in sorted(set(st)):
        m = st == station
        vals = _allocate(a[m], b[m], e[m], lo, resolution.seconds, n)
        out[station] = EnergySeries(station, Level.STATION, resolution, t0, np.maximum(vals, 0.0))
    return out


def truncated_energy(sessions: Iterable[SessionRecord], span: tuple[datetime, datetime]) -> float:
    """kWh falling outside ``span`` under proportional allocation."""
    lo, hi = (_epoch_seconds(t) for t in span)
    lost = 0.0
    for s in sessions:
        a, b = _epoch_seconds(s.start), _epoch_seconds(s.end)
        inside = max(0, min(b, hi) - max(a, lo))
        lost += s.energy_kwh * (1.0 - inside / (b - a))
    return lost


def resample(series: EnergySeries, target: Resolution) -> EnergySeries:
    if target.seconds <= series.resolution.seconds:
        raise GridError("resample target must be coarser than the source")
    factor, rem = divmod(target.seconds, series.resolution.seconds)
    if rem:
        raise GridError("target resolution is not a multiple of the source")
    if _epoch_seconds(series.t0) % target.seconds:
        raise GridError("series start is not aligned to the target grid")
    if len(series) % factor:
        raise GridError("series length does not cover whole target intervals")
    vals = series.values.reshape(-1, factor).sum(axis=1)
    return EnergySeries(series.entity_id, series.level, target, series.t0, vals)


def aggregate(
    series_list: Sequence[EnergySeries], group: Mapping[str, str]
) -> dict[str, EnergySeries]:
    """Sum member series into one series per group at the next level.

    Members are summed in entity-id order so results are bit-reproducible.
    """
    if not series_list:
        raise GridError("nothing to aggregate")
    ref = series_list[0]
    for s in series_list:
        if (s.resolution, s.t0, len(s), s.level) != (ref.resolution, ref.t0, len(ref), ref.level):
            raise GridError(f"series {s.entity_id!r} is on a different grid or level")
    level = ref.level.next()
    members: dict[str, list[EnergySeries]] = {}
    for s in sorted(series_list, key=lambda s: s.entity_id):
        members.setdefault(group[s.entity_id], []).append(s)
    out = {}
    for gid in sorted(members):
        acc = np.zeros(len(ref))
        for s in members[gid]:
            acc = acc + s.values
        out[gid] = EnergySeries(gid, level, ref.resolution, ref.t0, acc)
    return out


def build_levels(
    stations: Mapping[str, EnergySeries], station_region: Mapping[str, str], city: str
) -> dict[Level, dict[str, EnergySeries]]:
    series = [stations[k] for k in sorted(stations)]
    regions = aggregate(series, station_region)
    cities = aggregate([regions[k] for k in sorted(regions)], {k: city for k in regions})
    return {Level.STATION: dict(sorted(stations.items())), Level.REGION: regions, Level.CITY: cities}


def write_series(series: Iterable[EnergySeries], path: str | Path) -> None:
    frames = []
    for s in series:
        frames.append(
            pd.DataFrame(
                {
                    "entity_id": s.entity_id,
                    "interval_start_utc": s.timestamps().strftime("%Y-%m-%dT%H:%M:%SZ"),
                    "kwh": [repr(float(v)) for v in s.values],
                }
            )
        )
    pd.concat(frames, ignore_index=True).to_csv(path, index=False)


def read_series(path: str | Path, level: Level, resolution: Resolution) -> dict[str, EnergySeries]:
    frame = pd.read_csv(path, dtype={"entity_id": str, "interval_start_utc": str, "kwh": str})
    out = {}
    for eid, grp in frame.groupby("entity_id", sort=True):
        t0 = datetime.strptime(grp["interval_start_utc"].iloc[0], "%Y-%m-%dT%H:%M:%SZ")
        vals = np.array([float(v) for v in grp["kwh"]])
        out[eid] = EnergySeries(eid, level, resolution, t0.replace(tzinfo=timezone.utc), vals)
    return out
