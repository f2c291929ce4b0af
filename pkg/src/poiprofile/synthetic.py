"""Deterministic synthetic check-in corpus in the ``foursquare_tsv`` layout.

The bundled ``data/synthetic_nyc.tsv`` (20 users) was produced by
``write_corpus(path, users=20, seed=7)``.
"""

from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone
from importlib import resources
from pathlib import Path

CATEGORIES = (
    ("4bf58dd8d48988d1e0931735", "Coffee Shop"),
    ("4bf58dd8d48988d116941735", "Bar"),
    ("4bf58dd8d48988d175941735", "Gym / Fitness Center"),
    ("4bf58dd8d48988d1fd931735", "Subway"),
    ("4bf58dd8d48988d124941735", "Office"),
    ("4bf58dd8d48988d163941735", "Park"),
    ("4bf58dd8d48988d1c4941735", "Restaurant"),
    ("4bf58dd8d48988d103951735", "Clothing Store"),
    ("4bf58dd8d48988d1e2931735", "Art Gallery"),
    ("4bf58dd8d48988d118951735", "Grocery Store"),
)

# two rough Manhattan venue clusters plus a handful across the Hudson
_CLUSTERS = ((40.758, -73.985), (40.728, -73.995))
_OUTSIDE = (40.720, -74.045)

BOUNDARY_GEOJSON = "manhattan_box.geojson"
CORPUS_TSV = "synthetic_nyc.tsv"


def _venues(rng: random.Random, n: int = 60) -> list[tuple[str, int, float, float]]:
    out = []
    for v in range(n):
        lat0, lon0 = _OUTSIDE if v >= n - 4 else _CLUSTERS[v % 2]
        out.append((
            f"v{v:04d}{rng.randrange(16**6):06x}",
            v % len(CATEGORIES),
            round(lat0 + rng.uniform(-0.012, 0.012), 6),
            round(lon0 + rng.uniform(-0.008, 0.008), 6),
        ))
    return out


def generate_rows(users: int = 20, seed: int = 7) -> list[str]:
    rng = random.Random(seed)
    venues = _venues(rng)
    start = datetime(2012, 4, 3, tzinfo=timezone.utc)
    rows = []
    for u in range(users):
        user_key = str(100 + 37 * u)
        favourites = rng.sample(range(len(venues)), 5)
        n_sessions = rng.randint(6, 16)
        day = start + timedelta(days=rng.randint(0, 5))
        for _ in range(n_sessions):
            t = day + timedelta(hours=rng.randint(7, 11), minutes=rng.randint(0, 59))
            for _ in range(rng.randint(3, 6)):
                v = rng.choice(favourites) if rng.random() < 0.75 else rng.randrange(len(venues))
                key, cat, lat, lon = venues[v]
                cat_id, cat_name = CATEGORIES[cat]
                offset = -240
                stamp = t.strftime("%a %b %d %H:%M:%S +0000 %Y")
                rows.append("\t".join((user_key, key, cat_id, cat_name, f"{lat:.6f}", f"{lon:.6f}",
                                       str(offset), stamp)))
                t += timedelta(minutes=rng.randint(20, 150))
            day += timedelta(days=rng.randint(2, 6))
    return rows


def write_corpus(path: str | Path, users: int = 20, seed: int = 7) -> Path:
    path = Path(path)
    path.write_text("\n".join(generate_rows(users, seed)) + "\n", encoding="utf-8")
    return path


def boundary_geojson() -> dict:
    """A box around the two Manhattan clusters that excludes the Hudson venues."""
    ring = [[-74.02, 40.70], [-73.96, 40.70], [-73.96, 40.78], [-74.02, 40.78], [-74.02, 40.70]]
    return {
        "type": "Feature",
        "properties": {"name": "manhattan-box"},
        "geometry": {"type": "Polygon", "coordinates": [ring]},
    }


def bundled_path(name: str = CORPUS_TSV) -> Path:
    return Path(str(resources.files("poiprofile") / "data" / name))
