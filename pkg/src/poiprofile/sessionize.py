"""Group check-ins into per-user trajectories and split them chronologically."""

from __future__ import annotations

import json
import logging
import random
from collections import Counter, defaultdict
from dataclasses import asdict, dataclass, field
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterable, Sequence

from .ingest import CheckIn, Dataset, format_utc

log = logging.getLogger(__name__)

PROTOCOLS = {
    # (train_end, validation_end) as tenths of the trajectory count
    "chrono_80_10_10": (8, 9),
    "chrono_70_10_20": (7, 8),
}


class TooFewTrajectoriesError(ValueError):
    pass


@dataclass(frozen=True)
class Trajectory:
    traj_id: int
    user_id: int
    checkins: tuple[CheckIn, ...]

    @property
    def start(self) -> datetime:
        return self.checkins[0].timestamp

    @property
    def end(self) -> datetime:
        return self.checkins[-1].timestamp

    @property
    def pois(self) -> set[int]:
        return {c.poi_id for c in self.checkins}

    def __len__(self) -> int:
        return len(self.checkins)

    def to_dict(self) -> dict:
        return {
            "traj_id": self.traj_id,
            "user_id": self.user_id,
            "start": format_utc(self.start),
            "end": format_utc(self.end),
            "checkins": [c.to_dict() for c in self.checkins],
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "Trajectory":
        return cls(
            traj_id=int(obj["traj_id"]),
            user_id=int(obj["user_id"]),
            checkins=tuple(CheckIn.from_dict(c) for c in obj["checkins"]),
        )


@dataclass(frozen=True)
class SplitSpec:
    protocol: str = "chrono_80_10_10"
    delta_t: timedelta = timedelta(hours=24)
    min_sessions_per_user: int = 1
    min_checkins_per_session: int = 2
    test_user_session_range: tuple[int, int] | None = None
    test_cap: int | None = None
    cap_mode: str = "first"
    cap_seed: int = 0

    def __post_init__(self):
        if self.protocol not in PROTOCOLS:
            raise ValueError(f"unknown protocol {self.protocol!r}")
        if self.delta_t <= timedelta(0):
            raise ValueError("delta_t must be positive")
        if self.min_sessions_per_user < 0 or self.min_checkins_per_session < 0:
            raise ValueError("minimum counts must be non-negative")
        if self.test_user_session_range is not None:
            lo, hi = self.test_user_session_range
            if lo > hi:
                raise ValueError(f"empty test_user_session_range {self.test_user_session_range}")
        if self.test_cap is not None and self.test_cap < 0:
            raise ValueError("test_cap must be non-negative")
        if self.cap_mode not in ("first", "random"):
            raise ValueError(f"unknown cap_mode {self.cap_mode!r}")

    @property
    def fractions(self) -> tuple[float, float, float]:
        a, b = PROTOCOLS[self.protocol]
        return a / 10, (b - a) / 10, (10 - b) / 10

    def to_dict(self) -> dict:
        out = asdict(self)
        out["delta_t_seconds"] = int(self.delta_t.total_seconds())
        del out["delta_t"]
        if self.test_user_session_range is not None:
            out["test_user_session_range"] = list(self.test_user_session_range)
        return out

    @classmethod
    def from_dict(cls, obj: dict) -> "SplitSpec":
        obj = dict(obj)
        if "delta_t_seconds" in obj:
            obj["delta_t"] = timedelta(seconds=obj.pop("delta_t_seconds"))
        elif "delta_t_hours" in obj:
            obj["delta_t"] = timedelta(hours=obj.pop("delta_t_hours"))
        rng = obj.get("test_user_session_range")
        if rng is not None:
            obj["test_user_session_range"] = tuple(rng)
        return cls(**obj)


def foursquare_protocol(**overrides) -> SplitSpec:
    """NYC / TKY / CA: 80/10/10 chronological split."""
    return SplitSpec(**{"protocol": "chrono_80_10_10", **overrides})


def global_protocol(**overrides) -> SplitSpec:
    """Moscow / Sao Paulo: 72 h sessions, 5+ sessions of 4+ check-ins, 70/10/20."""
    params = dict(
        protocol="chrono_70_10_20",
        delta_t=timedelta(hours=72),
        min_sessions_per_user=5,
        min_checkins_per_session=4,
        test_user_session_range=(3, 50),
        test_cap=200,
    )
    params.update(overrides)
    return SplitSpec(**params)


@dataclass
class DatasetSplits:
    train: list[Trajectory]
    validation: list[Trajectory]
    test: list[Trajectory]
    provenance: SplitSpec
    counts: dict[str, int] = field(default_factory=dict)

    def all(self) -> list[Trajectory]:
        return [*self.train, *self.validation, *self.test]


def sessionize(d: Dataset, delta_t: timedelta) -> list[Trajectory]:
    """Greedy per-user sessions of span at most ``delta_t``.

    A session opens at a user's check-in and absorbs later check-ins while
    ``t - session_start <= delta_t``. Trajectory ids follow ``(start, user_id)``.
    """
    if delta_t <= timedelta(0):
        raise ValueError("delta_t must be positive")
    by_user: dict[int, list[CheckIn]] = defaultdict(list)
    for c in d.checkins:
        by_user[c.user_id].append(c)

    sessions: list[tuple[CheckIn, ...]] = []
    for user in sorted(by_user):
        current: list[CheckIn] = []
        for c in sorted(by_user[user], key=lambda c: c.timestamp):
            if current and c.timestamp - current[0].timestamp > delta_t:
                sessions.append(tuple(current))
                current = []
            current.append(c)
        if current:
            sessions.append(tuple(current))

    sessions.sort(key=lambda s: (s[0].timestamp, s[0].user_id))
    return [Trajectory(i, s[0].user_id, s) for i, s in enumerate(sessions)]


def filter_sessions(trajs: Sequence[Trajectory], spec: SplitSpec) -> list[Trajectory]:
    """Drop short sessions first, then users left with too few sessions."""
    long_enough = [t for t in trajs if len(t) >= spec.min_checkins_per_session]
    per_user = Counter(t.user_id for t in long_enough)
    return [t for t in long_enough if per_user[t.user_id] >= spec.min_sessions_per_user]


def _chrono(trajs: Iterable[Trajectory]) -> list[Trajectory]:
    return sorted(trajs, key=lambda t: (t.start, t.traj_id))


def split(trajs: Sequence[Trajectory], spec: SplitSpec) -> DatasetSplits:
    """Global chronological split followed by train-entity pruning.

    For the 70/10/20 protocol the test set is further restricted to users whose
    session count (over all input trajectories) lies in
    ``spec.test_user_session_range`` and capped at ``spec.test_cap``.
    """
    n = len(trajs)
    if n < 10:
        raise TooFewTrajectoriesError(f"too-few-trajectories: {n} < 10")
    ordered = _chrono(trajs)
    a, b = PROTOCOLS[spec.protocol]
    i, j = n * a // 10, n * b // 10
    train, validation, test = ordered[:i], ordered[i:j], ordered[j:]
    counts = {"n": n, "train": len(train), "validation_raw": len(validation), "test_raw": len(test)}

    users = {t.user_id for t in train}
    pois = set().union(*(t.pois for t in train)) if train else set()

    def seen(t: Trajectory) -> bool:
        return t.user_id in users and t.pois <= pois

    validation = [t for t in validation if seen(t)]
    test = [t for t in test if seen(t)]
    counts["validation"] = len(validation)
    counts["test_pruned"] = len(test)

    if spec.test_user_session_range is not None:
        lo, hi = spec.test_user_session_range
        sessions = Counter(t.user_id for t in ordered)
        test = [t for t in test if lo <= sessions[t.user_id] <= hi]
    counts["test_uncapped"] = len(test)

    if spec.test_cap is not None and len(test) > spec.test_cap:
        if spec.cap_mode == "random":
            picked = random.Random(spec.cap_seed).sample(range(len(test)), spec.test_cap)
            test = [test[k] for k in sorted(picked)]
        else:
            test = test[: spec.test_cap]
    counts["test"] = len(test)
    log.info("split %s: %s", spec.protocol, counts)
    return DatasetSplits(train, validation, test, spec, counts)


def write_splits(splits: DatasetSplits, directory: str | Path) -> Path:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for name in ("train", "validation", "test"):
        write_trajectories(getattr(splits, name), directory / f"{name}.jsonl")
    manifest = {"split_spec": splits.provenance.to_dict(), "counts": splits.counts}
    path = directory / "manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def read_splits(directory: str | Path) -> DatasetSplits:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text(encoding="utf-8"))
    return DatasetSplits(
        train=read_trajectories(directory / "train.jsonl"),
        validation=read_trajectories(directory / "validation.jsonl"),
        test=read_trajectories(directory / "test.jsonl"),
        provenance=SplitSpec.from_dict(manifest["split_spec"]),
        counts=manifest["counts"],
    )


def write_trajectories(trajs: Iterable[Trajectory], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for t in trajs:
            fh.write(json.dumps(t.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")


def read_trajectories(path: str | Path) -> list[Trajectory]:
    with Path(path).open(encoding="utf-8") as fh:
        return [Trajectory.from_dict(json.loads(line)) for line in fh if line.strip()]
