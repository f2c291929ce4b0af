"""Trajectory similarity by dynamic time warping, and why profiles scale better.

All-pairs DTW ranking over ``L`` trajectories of mean length ``k`` costs
``O(L^2 k^2)``; generating one profile per user costs ``O(|U|)`` model calls.
:func:`complexity_benchmark` measures both on synthetic data.
"""

from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta, timezone
from typing import Sequence

import numpy as np

from .ingest import CheckIn
from .llm import ChatBackend, EmbeddingBackend, MockBackend, cosine
from .profiler import UserProfile, generate_profile
from .sessionize import Trajectory

log = logging.getLogger(__name__)

EARTH_RADIUS_M = 6_371_000.0
DEFAULT_SHIFT_THRESHOLD = 0.85
CLOCK_FLOOR_S = 5e-3
MIN_DOUBLING_RATIO = 3.0

Points = Sequence[tuple[float, float]]


def haversine(lat1: float, lon1: float, lat2: float, lon2: float) -> float:
    """Great-circle distance in meters."""
    p1, p2 = math.radians(lat1), math.radians(lat2)
    dp = p2 - p1
    dl = math.radians(lon2 - lon1)
    h = math.sin(dp / 2) ** 2 + math.cos(p1) * math.cos(p2) * math.sin(dl / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def _points(t: Trajectory | Points) -> np.ndarray:
    if isinstance(t, Trajectory):
        pts = [(c.latitude, c.longitude) for c in t.checkins]
    else:
        pts = list(t)
    if not pts:
        raise ValueError("DTW needs non-empty trajectories")
    return np.radians(np.asarray(pts, dtype=float))


def _cost_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    lat1, lon1 = a[:, 0:1], a[:, 1:2]
    lat2, lon2 = b[:, 0], b[:, 1]
    h = np.sin((lat2 - lat1) / 2) ** 2 + np.cos(lat1) * np.cos(lat2) * np.sin((lon2 - lon1) / 2) ** 2
    return 2 * EARTH_RADIUS_M * np.arcsin(np.minimum(1.0, np.sqrt(h)))


def dtw_distance(a: Trajectory | Points, b: Trajectory | Points) -> float:
    """Classical unconstrained DTW with haversine point cost, in meters.

    Steps are match ``(i-1, j-1)``, insert ``(i, j-1)`` and delete ``(i-1, j)``.
    """
    cost = _cost_matrix(_points(a), _points(b)).tolist()
    n, m = len(cost), len(cost[0])
    prev = [math.inf] * m
    acc = 0.0
    for j in range(m):
        acc += cost[0][j]
        prev[j] = acc
    for i in range(1, n):
        row = cost[i]
        cur = [0.0] * m
        cur[0] = prev[0] + row[0]
        for j in range(1, m):
            best = prev[j - 1]
            if prev[j] < best:
                best = prev[j]
            if cur[j - 1] < best:
                best = cur[j - 1]
            cur[j] = best + row[j]
        prev = cur
    return prev[-1]


@dataclass
class SimilarityRanking:
    query_id: int
    ranking: list[tuple[int, float]]
    timings: dict[str, float] = field(default_factory=dict)
    dtw_calls: int = 0


def rank_similar(query: Trajectory, candidates: Sequence[Trajectory]) -> SimilarityRanking:
    """All candidates ordered by DTW distance to ``query`` (ties by trajectory id)."""
    if not candidates:
        raise ValueError("no candidates to rank")
    t0 = time.perf_counter()
    scored = [(c.traj_id, dtw_distance(query, c)) for c in candidates]
    t1 = time.perf_counter()
    scored.sort(key=lambda x: (x[1], x[0]))
    t2 = time.perf_counter()
    return SimilarityRanking(query.traj_id, scored, {"dtw_s": t1 - t0, "sort_s": t2 - t1}, len(scored))


# -- benchmark --------------------------------------------------------------

_EPOCH = datetime(2012, 4, 3, tzinfo=timezone.utc)


def synthetic_trajectories(L: int, k: int, seed: int = 0, users: int | None = None) -> list[Trajectory]:
    """``L`` random-walk trajectories of ``k`` check-ins around midtown Manhattan."""
    rng = np.random.default_rng(seed)
    users = users or L
    out = []
    for t in range(L):
        uid = t % users
        lat, lon = 40.75 + rng.normal(0, 0.03), -73.98 + rng.normal(0, 0.03)
        start = _EPOCH + timedelta(hours=int(rng.integers(0, 24 * 300)))
        checkins = []
        for s in range(k):
            lat += rng.normal(0, 0.004)
            lon += rng.normal(0, 0.004)
            poi = int(rng.integers(0, 500))
            checkins.append(CheckIn(uid, poi, poi % 20, f"Category {poi % 20}", float(lat), float(lon),
                                    start + timedelta(minutes=45 * s)))
        out.append(Trajectory(t, uid, tuple(checkins)))
    return out


def all_pairs_ranking(trajs: Sequence[Trajectory]) -> tuple[dict[int, list[tuple[int, float]]], int]:
    """Rank every trajectory against all others using ``C(L, 2)`` DTW calls."""
    n = len(trajs)
    dist = np.zeros((n, n))
    calls = 0
    for i in range(n):
        for j in range(i + 1, n):
            dist[i, j] = dist[j, i] = dtw_distance(trajs[i], trajs[j])
            calls += 1
    ids = [t.traj_id for t in trajs]
    rankings = {
        ids[i]: sorted(((ids[j], float(dist[i, j])) for j in range(n) if j != i), key=lambda x: (x[1], x[0]))
        for i in range(n)
    }
    return rankings, calls


@dataclass
class BenchmarkReport:
    k: int
    dtw: list[dict] = field(default_factory=list)
    profiling: list[dict] = field(default_factory=list)
    dtw_ratios: list[dict] = field(default_factory=list)
    status: str = "ok"
    total_seconds: float = 0.0

    @property
    def dtw_growth_ok(self) -> bool:
        return all(r["ratio"] >= MIN_DOUBLING_RATIO for r in self.dtw_ratios if r["doubling"])

    @property
    def profiling_calls_ok(self) -> bool:
        return all(p["calls"] == p["users"] for p in self.profiling)

    @property
    def dtw_calls_ok(self) -> bool:
        return all(r["calls"] == math.comb(r["L"], 2) for r in self.dtw)

    def to_dict(self) -> dict:
        out = asdict(self)
        out.update(dtw_growth_ok=self.dtw_growth_ok, profiling_calls_ok=self.profiling_calls_ok,
                   dtw_calls_ok=self.dtw_calls_ok)
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True) + "\n"

    def to_markdown(self) -> str:
        lines = [f"Trajectory length k = {self.k}; status: {self.status}", "",
                 "| L | DTW calls | C(L,2) | seconds |", "|---:|---:|---:|---:|"]
        for r in self.dtw:
            lines.append(f"| {r['L']} | {r['calls']} | {math.comb(r['L'], 2)} | {r['seconds']:.4f} |")
        lines += ["", "| L -> L' | time ratio | pair ratio |", "|---|---:|---:|"]
        for r in self.dtw_ratios:
            lines.append(f"| {r['from']} -> {r['to']} | {r['ratio']:.2f} | {r['pair_ratio']:.2f} |")
        lines += ["", "| users | profile calls | seconds |", "|---:|---:|---:|"]
        for p in self.profiling:
            lines.append(f"| {p['users']} | {p['calls']} | {p['seconds']:.4f} |")
        return "\n".join(lines) + "\n"


def _time_all_pairs(L: int, k: int, seed: int, repeats: int) -> tuple[float, int]:
    trajs = synthetic_trajectories(L, k, seed)
    best, calls = math.inf, 0
    for _ in range(repeats):
        t0 = time.perf_counter()
        _, calls = all_pairs_ranking(trajs)
        best = min(best, time.perf_counter() - t0)
    return best, calls


def _time_profiling(n_users: int, k: int, seed: int, backend: ChatBackend | None) -> tuple[float, int]:
    backend = backend or MockBackend(seed=seed)
    trajs = synthetic_trajectories(n_users, k, seed, users=n_users)
    before = getattr(backend, "calls", 0)
    t0 = time.perf_counter()
    for t in trajs:
        generate_profile(t.user_id, [t], backend, max_retries=1, now=_EPOCH)
    return time.perf_counter() - t0, getattr(backend, "calls", 0) - before


def complexity_benchmark(
    sizes: Sequence[int] = (50, 100, 200),
    k: int = 8,
    users: Sequence[int] = (50, 100),
    seed: int = 0,
    repeats: int = 3,
    backend: ChatBackend | None = None,
) -> BenchmarkReport:
    """Time all-pairs DTW ranking at each ``L`` and one-shot profiling at each ``|U|``.

    If the smallest DTW timing is under the clock floor the sizes are doubled
    once; if it is still too small the report is marked ``inconclusive``.
    """
    sizes = list(sizes)
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    start = time.perf_counter()
    report = BenchmarkReport(k=k)
    for attempt in range(2):
        rows = []
        for L in sizes:
            seconds, calls = _time_all_pairs(L, k, seed, repeats)
            rows.append({"L": L, "calls": calls, "seconds": seconds})
        if rows and rows[0]["seconds"] >= CLOCK_FLOOR_S:
            break
        if attempt == 0:
            log.info("DTW timings below %.0e s; doubling sizes", CLOCK_FLOOR_S)
            sizes = [2 * L for L in sizes]
    else:
        report.status = "inconclusive"
    report.dtw = rows
    for a, b in zip(rows, rows[1:]):
        report.dtw_ratios.append({
            "from": a["L"], "to": b["L"],
            "ratio": b["seconds"] / a["seconds"] if a["seconds"] else math.inf,
            "pair_ratio": math.comb(b["L"], 2) / math.comb(a["L"], 2),
            "doubling": b["L"] == 2 * a["L"],
        })
    for n in users:
        seconds, calls = _time_profiling(n, k, seed, backend)
        report.profiling.append({"users": n, "calls": calls, "seconds": seconds})
    report.total_seconds = time.perf_counter() - start
    return report


# -- profile update policy ---------------------------------------------------

@dataclass
class ProfileShiftPolicy:
    """Replace a stored profile only when its embedding has drifted.

    A candidate replaces the old profile iff the cosine similarity of the two
    summaries is below ``threshold``. The default 0.85 is arbitrary.
    """

    embedder: EmbeddingBackend
    threshold: float = DEFAULT_SHIFT_THRESHOLD
    log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not -1.0 <= self.threshold <= 1.0:
            raise ValueError("threshold must lie in [-1, 1]")


@dataclass(frozen=True)
class UpdateDecision:
    decision: str
    similarity: float

    @property
    def replace(self) -> bool:
        return self.decision == "replace"


def maybe_update_profile(old: UserProfile, candidate: UserProfile,
                         policy: ProfileShiftPolicy) -> UpdateDecision:
    if old.user_id != candidate.user_id:
        raise ValueError(f"profiles belong to different users ({old.user_id}, {candidate.user_id})")
    old_vec, new_vec = policy.embedder.embed([old.summary, candidate.summary])
    sim = cosine(old_vec, new_vec)
    decision = "replace" if sim < policy.threshold else "keep"
    policy.log.append({
        "user_id": old.user_id,
        "embedder": policy.embedder.name,
        "threshold": policy.threshold,
        "similarity": sim,
        "decision": decision,
        "old_version": old.version,
    })
    return UpdateDecision(decision, sim)
