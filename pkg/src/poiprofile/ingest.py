"""Parse raw LBSN check-in dumps into a normalized, densely indexed dataset.

Three input layouts are understood (see ``docs/datasets.md``):

``foursquare_tsv``
    The NYC/TKY dump: ``user_id, venue_id, venue_category_id,
    venue_category_name, latitude, longitude, timezone_offset_minutes,
    utc_time`` with ``utc_time`` like ``Tue Apr 03 18:00:09 +0000 2012``.
``gowalla_csv``
    Comma separated ``user_id, poi_id, category_id, category_name,
    latitude, longitude, utc_time`` with an ISO-8601 time; optional header.
``global_tsv``
    Pre-joined global-scale dump: ``user_id, venue_id, utc_time,
    timezone_offset_minutes, latitude, longitude, category_name,
    country_code``.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Iterable, Iterator, Sequence

import numpy as np

log = logging.getLogger(__name__)

FORMATS = ("foursquare_tsv", "gowalla_csv", "global_tsv")
MALFORMED_ABORT_FRACTION = 0.10

_FSQ_TIME = "%a %b %d %H:%M:%S %z %Y"


class IngestError(Exception):
    """Base class for ingestion failures."""


class UnreadableFileError(IngestError):
    pass


class FormatMismatchError(IngestError):
    """Raised when a file does not look like the declared format."""

    def __init__(self, message: str, malformed: int = 0, total: int = 0):
        super().__init__(f"format-mismatch: {message}")
        self.malformed = malformed
        self.total = total


class PolygonError(ValueError):
    """Raised for a boundary polygon that breaks its ring invariants."""


@dataclass(frozen=True)
class CheckIn:
    user_id: int
    poi_id: int
    category_id: int
    category_name: str
    latitude: float
    longitude: float
    timestamp: datetime

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "poi_id": self.poi_id,
            "category_id": self.category_id,
            "category_name": self.category_name,
            "latitude": self.latitude,
            "longitude": self.longitude,
            "timestamp": format_utc(self.timestamp),
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "CheckIn":
        return cls(
            user_id=int(obj["user_id"]),
            poi_id=int(obj["poi_id"]),
            category_id=int(obj["category_id"]),
            category_name=str(obj["category_name"]),
            latitude=float(obj["latitude"]),
            longitude=float(obj["longitude"]),
            timestamp=parse_utc(obj["timestamp"]),
        )


def format_utc(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_utc(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc).replace(microsecond=0)


@dataclass(frozen=True)
class Dataset:
    """Check-ins sorted by ``(timestamp, user_id)`` with dense id maps.

    The index maps go from the raw key found in the source file to the dense
    id, so reports can still name the original venue.
    """

    checkins: tuple[CheckIn, ...]
    user_index: dict[str, int]
    poi_index: dict[str, int]
    category_index: dict[str, int]
    malformed_rows: tuple[int, ...] = ()
    total_rows: int = 0

    @property
    def M(self) -> int:
        return len(self.poi_index)

    @property
    def U(self) -> int:
        return len(self.user_index)

    def poi_categories(self) -> dict[int, str]:
        """Map each dense POI id to its category name."""
        out: dict[int, str] = {}
        for c in self.checkins:
            out.setdefault(c.poi_id, c.category_name)
        return out

    def poi_key(self, poi_id: int) -> str:
        return _invert(self.poi_index)[poi_id]


def _invert(index: dict[str, int]) -> dict[int, str]:
    return {v: k for k, v in index.items()}


@dataclass(frozen=True)
class _RawRow:
    user_key: str
    poi_key: str
    category_key: str
    category_name: str
    latitude: float
    longitude: float
    timestamp: datetime


class _BadRow(ValueError):
    pass


def _coord(text: str, bound: float) -> float:
    try:
        value = float(text)
    except ValueError:
        raise _BadRow(f"bad coordinate {text!r}") from None
    if not math.isfinite(value) or abs(value) > bound:
        raise _BadRow(f"coordinate out of range {text!r}")
    return value


def _key(text: str) -> str:
    key = text.strip()
    if not key:
        raise _BadRow("empty key")
    return key


def _fsq_time(text: str) -> datetime:
    try:
        ts = datetime.strptime(text.strip(), _FSQ_TIME)
        return ts.astimezone(timezone.utc).replace(microsecond=0)
    except (ValueError, OverflowError):
        raise _BadRow(f"bad time {text!r}") from None


def _iso_time(text: str) -> datetime:
    try:
        return parse_utc(text.strip())
    except (ValueError, OverflowError):
        raise _BadRow(f"bad time {text!r}") from None


def _parse_foursquare(fields: list[str]) -> _RawRow:
    if len(fields) != 8:
        raise _BadRow(f"expected 8 fields, got {len(fields)}")
    user, venue, cat_id, cat_name, lat, lon, offset, utc = fields
    try:
        int(offset)
    except ValueError:
        raise _BadRow(f"bad timezone offset {offset!r}") from None
    return _RawRow(
        _key(user), _key(venue), _key(cat_id), cat_name.strip(),
        _coord(lat, 90), _coord(lon, 180), _fsq_time(utc),
    )


def _parse_gowalla(fields: list[str]) -> _RawRow:
    if len(fields) != 7:
        raise _BadRow(f"expected 7 fields, got {len(fields)}")
    user, poi, cat_id, cat_name, lat, lon, utc = fields
    return _RawRow(
        _key(user), _key(poi), _key(cat_id), cat_name.strip(),
        _coord(lat, 90), _coord(lon, 180), _iso_time(utc),
    )


def _parse_global(fields: list[str]) -> _RawRow:
    if len(fields) != 8:
        raise _BadRow(f"expected 8 fields, got {len(fields)}")
    user, venue, utc, offset, lat, lon, cat_name, _country = fields
    try:
        int(offset)
    except ValueError:
        raise _BadRow(f"bad timezone offset {offset!r}") from None
    name = _key(cat_name)
    return _RawRow(
        _key(user), _key(venue), name, name,
        _coord(lat, 90), _coord(lon, 180), _fsq_time(utc),
    )


def _split_rows(text: str, fmt: str) -> Iterator[tuple[int, list[str]]]:
    if fmt == "gowalla_csv":
        reader = csv.reader(io.StringIO(text, newline=""))
        try:
            for lineno, row in enumerate(reader, start=1):
                if not row or all(not f.strip() for f in row):
                    continue
                if lineno == 1 and row[0].strip().lower() == "user_id":
                    continue
                yield lineno, row
        except csv.Error:
            # an unterminated quote swallows the rest of the file
            yield -1, []
        return
    for lineno, line in enumerate(text.splitlines(), start=1):
        if not line.strip():
            continue
        yield lineno, line.split("\t")


_ROW_PARSERS = {
    "foursquare_tsv": _parse_foursquare,
    "gowalla_csv": _parse_gowalla,
    "global_tsv": _parse_global,
}


def parse_checkin_text(text: str, fmt: str) -> Dataset:
    """Parse already-decoded file contents; see :func:`parse_checkin_file`."""
    if fmt not in _ROW_PARSERS:
        raise ValueError(f"unknown format {fmt!r}; expected one of {FORMATS}")
    parse_row = _ROW_PARSERS[fmt]
    rows: list[_RawRow] = []
    bad: list[int] = []
    total = 0
    for lineno, fields in _split_rows(text, fmt):
        total += 1
        try:
            rows.append(parse_row(fields))
        except _BadRow as exc:
            log.debug("line %d malformed: %s", lineno, exc)
            bad.append(lineno)
    if not rows:
        raise FormatMismatchError(f"0 parseable rows out of {total}", len(bad), total)
    if len(bad) > MALFORMED_ABORT_FRACTION * total:
        raise FormatMismatchError(
            f"{len(bad)} of {total} rows malformed (> {MALFORMED_ABORT_FRACTION:.0%})",
            len(bad),
            total,
        )
    if bad:
        log.warning("%d of %d rows malformed and skipped", len(bad), total)
    return _densify(rows, malformed=tuple(bad), total=total)


def parse_checkin_file(path: str | Path, fmt: str) -> Dataset:
    """Read a check-in dump and build a :class:`Dataset`.

    Malformed rows are skipped and reported in ``Dataset.malformed_rows``; when
    more than 10% of rows are malformed the file is assumed to be in another
    format and :class:`FormatMismatchError` is raised.
    """
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise UnreadableFileError(f"cannot read {path}: {exc}") from exc
    try:
        text = data.decode("utf-8")
    except UnicodeDecodeError as exc:
        if fmt != "foursquare_tsv":
            raise UnreadableFileError(f"{path} is not valid UTF-8: {exc}") from exc
        text = data.decode("latin-1")
    return parse_checkin_text(text, fmt)


def _densify(rows: Sequence[_RawRow], malformed: tuple[int, ...] = (), total: int = 0) -> Dataset:
    # user ids follow first appearance in (time, key) order; a second sort by
    # (time, dense user) keeps that order stable and makes ties total
    ordered = sorted(rows, key=lambda r: (r.timestamp, r.user_key))
    user_index: dict[str, int] = {}
    for r in ordered:
        user_index.setdefault(r.user_key, len(user_index))
    ordered = sorted(ordered, key=lambda r: (r.timestamp, user_index[r.user_key]))

    poi_index: dict[str, int] = {}
    category_index: dict[str, int] = {}
    checkins = []
    for r in ordered:
        pid = poi_index.setdefault(r.poi_key, len(poi_index))
        cid = category_index.setdefault(r.category_key, len(category_index))
        checkins.append(
            CheckIn(
                user_id=user_index[r.user_key],
                poi_id=pid,
                category_id=cid,
                category_name=r.category_name,
                latitude=r.latitude,
                longitude=r.longitude,
                timestamp=r.timestamp,
            )
        )
    return Dataset(
        checkins=tuple(checkins),
        user_index=user_index,
        poi_index=poi_index,
        category_index=category_index,
        malformed_rows=malformed,
        total_rows=total or len(rows),
    )


def _to_raw(d: Dataset, keep: Iterable[CheckIn]) -> list[_RawRow]:
    users, pois, cats = _invert(d.user_index), _invert(d.poi_index), _invert(d.category_index)
    return [
        _RawRow(users[c.user_id], pois[c.poi_id], cats[c.category_id], c.category_name,
                c.latitude, c.longitude, c.timestamp)
        for c in keep
    ]


def subset(d: Dataset, keep: Iterable[CheckIn]) -> Dataset:
    """Rebuild a dataset from a subset of its check-ins with fresh dense ids."""
    return _densify(_to_raw(d, keep))


# -- serialization ----------------------------------------------------------

def write_dataset(d: Dataset, directory: str | Path) -> tuple[Path, Path]:
    """Write ``checkins.jsonl`` and the ``index.json`` sidecar."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows_path = directory / "checkins.jsonl"
    index_path = directory / "index.json"
    with rows_path.open("w", encoding="utf-8", newline="\n") as fh:
        for c in d.checkins:
            fh.write(json.dumps(c.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    index = {
        "users": d.user_index,
        "pois": d.poi_index,
        "categories": d.category_index,
        "malformed_rows": list(d.malformed_rows),
        "total_rows": d.total_rows,
        "M": d.M,
        "U": d.U,
    }
    index_path.write_text(json.dumps(index, ensure_ascii=False, indent=1, sort_keys=True) + "\n",
                          encoding="utf-8")
    return rows_path, index_path


def read_dataset(directory: str | Path) -> Dataset:
    directory = Path(directory)
    index = json.loads((directory / "index.json").read_text(encoding="utf-8"))
    with (directory / "checkins.jsonl").open(encoding="utf-8") as fh:
        checkins = tuple(CheckIn.from_dict(json.loads(line)) for line in fh if line.strip())
    return Dataset(
        checkins=checkins,
        user_index={k: int(v) for k, v in index["users"].items()},
        poi_index={k: int(v) for k, v in index["pois"].items()},
        category_index={k: int(v) for k, v in index["categories"].items()},
        malformed_rows=tuple(index.get("malformed_rows", ())),
        total_rows=int(index.get("total_rows", len(checkins))),
    )


# -- boundary filtering -----------------------------------------------------

Point = tuple[float, float]


@dataclass(frozen=True)
class BoundaryPolygon:
    """A city boundary; ``rings[0]`` is the outer ring, the rest are holes.

    Coordinates are ``(latitude, longitude)`` pairs. GeoJSON stores
    ``[lon, lat]``; :meth:`from_geojson` swaps them.
    """

    name: str
    rings: tuple[tuple[Point, ...], ...]
    _validated: bool = field(default=False, repr=False, compare=False)

    def validate(self) -> None:
        if not self.rings:
            raise PolygonError(f"{self.name}: polygon has no rings")
        for i, ring in enumerate(self.rings):
            if len(ring) < 4:
                raise PolygonError(f"{self.name}: ring {i} has {len(ring)} points, need >= 4")
            if tuple(ring[0]) != tuple(ring[-1]):
                raise PolygonError(f"{self.name}: ring {i} is not closed")
            for lat, lon in ring:
                if not (math.isfinite(lat) and math.isfinite(lon)):
                    raise PolygonError(f"{self.name}: ring {i} has a non-finite vertex")
        crossing = _self_intersection(self.rings[0])
        if crossing is not None:
            raise PolygonError(
                f"{self.name}: outer ring self-intersects at segments {crossing[0]} and {crossing[1]}"
            )

    @classmethod
    def from_geojson(cls, obj: dict | str | Path, name: str | None = None) -> "BoundaryPolygon":
        if isinstance(obj, (str, Path)):
            path = Path(obj)
            obj = json.loads(path.read_text(encoding="utf-8"))
            name = name or path.stem
        geom = _geojson_object(obj, "top level")
        if geom.get("type") == "FeatureCollection":
            features = geom.get("features") or []
            if not isinstance(features, list) or not features:
                raise PolygonError("empty FeatureCollection")
            geom = _geojson_object(features[0], "feature")
        if geom.get("type") == "Feature":
            props = geom.get("properties")
            if name is None and isinstance(props, dict) and isinstance(props.get("name"), str):
                name = props["name"]
            geom = _geojson_object(geom.get("geometry") or {}, "geometry")
        if geom.get("type") != "Polygon":
            raise PolygonError(f"expected a GeoJSON Polygon, got {geom.get('type')!r}")
        try:
            rings = tuple(
                tuple((float(lat), float(lon)) for lon, lat, *_ in ring)
                for ring in geom["coordinates"]
            )
        except (KeyError, TypeError, ValueError) as exc:
            raise PolygonError(f"malformed Polygon coordinates: {exc}") from exc
        return cls(name=name or "boundary", rings=rings)

    def contains(self, lat: float, lon: float) -> bool:
        """Even-odd ray casting; points on any edge count as inside."""
        inside = False
        for ring in self.rings:
            for (y1, x1), (y2, x2) in zip(ring, ring[1:]):
                if _on_segment(lat, lon, y1, x1, y2, x2):
                    return True
                if (y1 > lat) != (y2 > lat):
                    x_cross = x1 + (lat - y1) * (x2 - x1) / (y2 - y1)
                    if lon < x_cross:
                        inside = not inside
        return inside


def _geojson_object(value, where: str) -> dict:
    if not isinstance(value, dict):
        raise PolygonError(f"GeoJSON {where} must be an object, got {type(value).__name__}")
    return value


def _on_segment(py: float, px: float, y1: float, x1: float, y2: float, x2: float) -> bool:
    cross = (x2 - x1) * (py - y1) - (y2 - y1) * (px - x1)
    scale = max(abs(x2 - x1), abs(y2 - y1), 1.0)
    if abs(cross) > 1e-12 * scale:
        return False
    return min(x1, x2) <= px <= max(x1, x2) and min(y1, y2) <= py <= max(y1, y2)


def _self_intersection(ring: Sequence[Point]) -> tuple[int, int] | None:
    """Return the first pair of non-adjacent crossing segments, if any."""
    pts = np.asarray(ring, dtype=float)
    a, b = pts[:-1], pts[1:]
    n = len(a)
    for i in range(n - 2):
        j = np.arange(i + 2, n)
        if i == 0:
            j = j[j != n - 1]  # last segment closes onto the first
        if j.size == 0:
            continue
        p, q = a[i], b[i]
        r, s = a[j], b[j]
        d1 = _orient(p, q, r)
        d2 = _orient(p, q, s)
        d3 = _orient_many(r, s, p)
        d4 = _orient_many(r, s, q)
        proper = (d1 * d2 < 0) & (d3 * d4 < 0)
        touch = (
            ((d1 == 0) & _within(p, q, r))
            | ((d2 == 0) & _within(p, q, s))
            | ((d3 == 0) & _within_many(r, s, p))
            | ((d4 == 0) & _within_many(r, s, q))
        )
        hit = np.flatnonzero(proper | touch)
        if hit.size:
            return i, int(j[hit[0]])
    return None


def _orient(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    return np.sign((q[0] - p[0]) * (r[:, 1] - p[1]) - (q[1] - p[1]) * (r[:, 0] - p[0]))


def _orient_many(r: np.ndarray, s: np.ndarray, p: np.ndarray) -> np.ndarray:
    return np.sign((s[:, 0] - r[:, 0]) * (p[1] - r[:, 1]) - (s[:, 1] - r[:, 1]) * (p[0] - r[:, 0]))


def _within(p: np.ndarray, q: np.ndarray, r: np.ndarray) -> np.ndarray:
    return (
        (np.minimum(p[0], q[0]) <= r[:, 0]) & (r[:, 0] <= np.maximum(p[0], q[0]))
        & (np.minimum(p[1], q[1]) <= r[:, 1]) & (r[:, 1] <= np.maximum(p[1], q[1]))
    )


def _within_many(r: np.ndarray, s: np.ndarray, p: np.ndarray) -> np.ndarray:
    return (
        (np.minimum(r[:, 0], s[:, 0]) <= p[0]) & (p[0] <= np.maximum(r[:, 0], s[:, 0]))
        & (np.minimum(r[:, 1], s[:, 1]) <= p[1]) & (p[1] <= np.maximum(r[:, 1], s[:, 1]))
    )


def filter_by_boundary(d: Dataset, poly: BoundaryPolygon) -> Dataset:
    """Keep check-ins whose POI lies inside ``poly``; ids are re-densified."""
    poly.validate()
    verdict: dict[int, bool] = {}
    kept = []
    for c in d.checkins:
        inside = verdict.get(c.poi_id)
        if inside is None:
            inside = verdict[c.poi_id] = poly.contains(c.latitude, c.longitude)
        if inside:
            kept.append(c)
    log.info("boundary %s kept %d of %d check-ins", poly.name, len(kept), len(d.checkins))
    return subset(d, kept)
