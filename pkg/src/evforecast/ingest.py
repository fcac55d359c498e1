"""Parse city charging-session CSVs into one validated, UTC-stamped schema."""

from __future__ import annotations

import json
import math
import re
from collections import Counter
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from enum import Enum
from pathlib import Path
from typing import Iterable, Mapping, Sequence
from zoneinfo import ZoneInfo, ZoneInfoNotFoundError

import numpy as np
import pandas as pd

CANONICAL_FIELDS = ("station_id", "region_id", "start", "end", "energy_kwh")

UTC_NATIVE = "utc-native"

# Drop reasons, in the order they are checked.
MISSING = "missing_value"
UNPARSEABLE = "unparseable_timestamp"
END_NOT_AFTER_START = "end_not_after_start"
NEGATIVE_ENERGY = "negative_energy"
DROP_REASONS = (MISSING, UNPARSEABLE, END_NOT_AFTER_START, NEGATIVE_ENERGY)

SESSION_COLUMNS = ["city", "station_id", "region_id", "start_utc", "end_utc", "energy_kwh"]

_OFFSET_RE = re.compile(r"(?:Z|[+-]\d{2}(?::?\d{2})?)\s*$")


class City(str, Enum):
    PALO_ALTO = "PaloAlto"
    BOULDER = "Boulder"
    DUNDEE = "Dundee"
    PERTH = "Perth"
    CUSTOM = "Custom"


# Local zone used when a city's raw timestamps carry no zone metadata.
CITY_ZONES = {
    City.PALO_ALTO: "America/Los_Angeles",
    City.BOULDER: "America/Denver",
    City.DUNDEE: "Europe/London",
    City.PERTH: "Australia/Perth",
}


class IngestError(ValueError):
    """Raised when a dataset cannot be ingested at all."""


@dataclass(frozen=True)
class SessionRecord:
    station_id: str
    region_id: str
    city: City
    start: datetime
    end: datetime
    energy_kwh: float

    def __post_init__(self) -> None:
        if not self.station_id or not self.region_id:
            raise ValueError("station_id and region_id must be non-empty")
        if self.start.tzinfo is None or self.end.tzinfo is None:
            raise ValueError("session instants must be timezone-aware UTC")
        if not self.end > self.start:
            raise ValueError("session end must be after start")
        if not (self.energy_kwh >= 0 and math.isfinite(self.energy_kwh)):
            raise ValueError("energy_kwh must be finite and non-negative")


@dataclass
class DatasetManifest:
    city: City
    source_path: str
    column_map: dict[str, str | list[str]]
    timezone: str = UTC_NATIVE
    records_parsed: int = 0
    records_dropped: dict[str, int] = field(default_factory=lambda: {r: 0 for r in DROP_REASONS})
    raw_rows: int = 0
    notes: list[str] = field(default_factory=list)

    @property
    def dropped_total(self) -> int:
        return sum(self.records_dropped.values())

    def to_json(self) -> str:
        d = asdict(self)
        d["city"] = self.city.value
        return json.dumps(d, sort_keys=True)

    @classmethod
    def from_json(cls, line: str) -> "DatasetManifest":
        d = json.loads(line)
        d["city"] = City(d["city"])
        return cls(**d)


def resolve_zone(zone: str) -> ZoneInfo:
    try:
        return ZoneInfo(zone)
    except (ZoneInfoNotFoundError, ValueError) as exc:
        raise ValueError(f"unknown time zone {zone!r}") from exc


def to_utc(local_ts: datetime, zone: str) -> datetime:
    """Convert a naive local wall-clock time to a UTC instant.

    Ambiguous fall-back times take the earlier (daylight) offset; times inside
    a spring-forward gap keep the pre-transition offset, which moves them
    forward by the gap width.
    """
    if local_ts.tzinfo is not None:
        raise ValueError("to_utc expects a naive timestamp")
    tz = resolve_zone(zone)
    return local_ts.replace(tzinfo=tz, fold=0).astimezone(timezone.utc)


def validate_session(
    station_id: str | None,
    region_id: str | None,
    start: datetime | None,
    end: datetime | None,
    energy_kwh: float | None,
    city: City = City.CUSTOM,
) -> SessionRecord | str:
    """Return an accepted record, or the single primary drop reason."""
    values = (station_id, region_id, start, end, energy_kwh)
    if any(v is None for v in values) or not station_id or not region_id:
        return MISSING
    if isinstance(energy_kwh, float) and math.isnan(energy_kwh):
        return MISSING
    if not end > start:
        return END_NOT_AFTER_START
    if energy_kwh < 0:
        return NEGATIVE_ENERGY
    return SessionRecord(station_id, region_id, city, start, end, float(energy_kwh))


def _source_text(frame: pd.DataFrame, spec: str | Sequence[str]) -> pd.Series:
    cols = [spec] if isinstance(spec, str) else list(spec)
    out = frame[cols[0]]
    for col in cols[1:]:
        # Split date and time fields are joined; a missing part leaves the whole value missing.
        out = out + " " + frame[col]
    return out


def _parse_instants(text: pd.Series, zone: str) -> pd.Series:
    """Parse timestamp text to UTC; unparseable values become NaT."""
    result = pd.Series(pd.NaT, index=text.index, dtype="datetime64[ns, UTC]")
    present = text.notna()
    has_offset = present & text.str.contains(_OFFSET_RE, na=False)
    if has_offset.any():
        result[has_offset] = pd.to_datetime(
            text[has_offset], errors="coerce", utc=True, format="mixed"
        )
    naive = present & ~has_offset
    if naive.any():
        parsed = pd.to_datetime(text[naive], errors="coerce", format="mixed")
        if zone == UTC_NATIVE:
            result[naive] = parsed.dt.tz_localize("UTC")
        else:
            resolve_zone(zone)
            cache: dict[pd.Timestamp, pd.Timestamp] = {}
            converted = []
            for ts in parsed:
                if pd.isna(ts):
                    converted.append(pd.NaT)
                    continue
                hit = cache.get(ts)
                if hit is None:
                    hit = pd.Timestamp(to_utc(ts.to_pydatetime(), zone))
                    cache[ts] = hit
                converted.append(hit)
            result[naive] = pd.to_datetime(pd.Series(converted, index=parsed.index), utc=True)
    return result.dt.floor("s")


def parse_sessions(manifest: DatasetManifest) -> tuple[list[SessionRecord], DatasetManifest]:
    """Read the manifest's CSV and return the accepted records plus updated counts."""
    path = Path(manifest.source_path)
    if not path.is_file():
        raise FileNotFoundError(f"dataset file not found: {path}")
    missing_keys = [f for f in CANONICAL_FIELDS if f not in manifest.column_map]
    if missing_keys:
        raise IngestError(f"column_map lacks canonical fields: {missing_keys}")

    frame = pd.read_csv(path, dtype=str, keep_default_na=True, encoding="utf-8")
    absent = sorted(
        {
            col
            for spec in manifest.column_map.values()
            for col in ([spec] if isinstance(spec, str) else spec)
            if col not in frame.columns
        }
    )
    if absent:
        raise IngestError(f"column_map references columns absent from {path.name}: {absent}")

    cm = manifest.column_map
    station = _source_text(frame, cm["station_id"]).str.strip()
    region = _source_text(frame, cm["region_id"]).str.strip()
    start_text = _source_text(frame, cm["start"]).str.strip()
    end_text = _source_text(frame, cm["end"]).str.strip()
    energy_text = _source_text(frame, cm["energy_kwh"]).str.strip().str.replace(",", "", regex=False)
    energy = pd.to_numeric(energy_text, errors="coerce")

    missing = (
        station.isna() | (station == "") | region.isna() | (region == "")
        | start_text.isna() | (start_text == "") | end_text.isna() | (end_text == "")
        | energy.isna()
    )
    start = _parse_instants(start_text.where(~missing), manifest.timezone)
    end = _parse_instants(end_text.where(~missing), manifest.timezone)
    unparseable = ~missing & (start.isna() | end.isna())
    ok_time = ~missing & ~unparseable
    bad_order = ok_time & ~(end > start)
    negative = ok_time & ~bad_order & (energy < 0)
    accepted = ok_time & ~bad_order & ~negative

    counts = {
        MISSING: int(missing.sum()),
        UNPARSEABLE: int(unparseable.sum()),
        END_NOT_AFTER_START: int(bad_order.sum()),
        NEGATIVE_ENERGY: int(negative.sum()),
    }
    n_ok = int(accepted.sum())
    if n_ok == 0:
        raise IngestError(f"no parseable rows in {path}")

    records = [
        SessionRecord(s, r, manifest.city, a.to_pydatetime(), b.to_pydatetime(), float(e))
        for s, r, a, b, e in zip(
            station[accepted], region[accepted], start[accepted], end[accepted], energy[accepted]
        )
    ]
    updated = DatasetManifest(
        city=manifest.city,
        source_path=str(path),
        column_map=dict(manifest.column_map),
        timezone=manifest.timezone,
        records_parsed=n_ok,
        records_dropped=counts,
        raw_rows=len(frame),
        notes=list(manifest.notes),
    )
    if manifest.timezone != UTC_NATIVE:
        updated.notes.append(f"naive timestamps interpreted in {manifest.timezone}")
    return records, updated


def _rfc3339(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def sessions_to_frame(records: Iterable[SessionRecord]) -> pd.DataFrame:
    rows = [
        (r.city.value, r.station_id, r.region_id, _rfc3339(r.start), _rfc3339(r.end), repr(r.energy_kwh))
        for r in records
    ]
    return pd.DataFrame(rows, columns=SESSION_COLUMNS)


def write_sessions(records: Sequence[SessionRecord], path: str | Path) -> None:
    sessions_to_frame(records).to_csv(path, index=False)


def read_sessions(path: str | Path) -> list[SessionRecord]:
    frame = pd.read_csv(path, dtype=str, keep_default_na=False)
    out = []
    for city, s, r, a, b, e in frame[SESSION_COLUMNS].itertuples(index=False):
        out.append(
            SessionRecord(
                s,
                r,
                City(city),
                datetime.strptime(a, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc),
                datetime.strptime(b, "%Y-%m-%dT%H:%M:%SZ").replace(tzinfo=timezone.utc),
                float(e),
            )
        )
    return out


def write_manifests(manifests: Iterable[DatasetManifest], path: str | Path) -> None:
    Path(path).write_text("".join(m.to_json() + "\n" for m in manifests), encoding="utf-8")


def read_manifests(path: str | Path) -> list[DatasetManifest]:
    lines = Path(path).read_text(encoding="utf-8").splitlines()
    return [DatasetManifest.from_json(line) for line in lines if line.strip()]


def station_regions(records: Iterable[SessionRecord]) -> dict[str, str]:
    """Map each station to its region; a station seen under several regions
    takes the most frequent one (ties broken by region id)."""
    seen: dict[str, Counter] = {}
    for r in records:
        seen.setdefault(r.station_id, Counter())[r.region_id] += 1
    return {
        st: sorted(c.items(), key=lambda kv: (-kv[1], kv[0]))[0][0]
        for st, c in sorted(seen.items())
    }


def energy_total(records: Iterable[SessionRecord]) -> float:
    return float(np.sum([r.energy_kwh for r in records]))


def default_manifest(city: City | str, source_path: str | Path, column_map: Mapping) -> DatasetManifest:
    city = City(city)
    return DatasetManifest(
        city=city,
        source_path=str(source_path),
        column_map=dict(column_map),
        timezone=CITY_ZONES.get(city, UTC_NATIVE),
    )
