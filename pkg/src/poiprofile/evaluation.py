"""Prediction parsing, Acc@1, cold-start grouping and preference-shift counts."""

from __future__ import annotations

import json
import re
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .sessionize import Trajectory

GROUPS = ("inactive", "normal", "very_active")
EXTREME_GROUP_FRACTION = (3, 10)

_POI_RE = re.compile(r"POI id\s*([0-9]+)")


@dataclass(frozen=True)
class PredictionRecord:
    example_id: int
    raw_output: str
    parsed_poi_id: int | None
    correct: bool
    user_id: int | None = None
    next_poi_id: int | None = None

    def __post_init__(self):
        if self.correct and (self.parsed_poi_id is None or
                             (self.next_poi_id is not None and self.parsed_poi_id != self.next_poi_id)):
            raise ValueError(f"record {self.example_id} marked correct without a matching parse")


def parse_prediction(raw: str, M: int) -> int | None:
    """First integer after the literal ``POI id``; ``None`` if absent or not in ``[0, M)``."""
    m = _POI_RE.search(raw)
    if m is None:
        return None
    digits = m.group(1).lstrip("0") or "0"
    if len(digits) > len(str(max(M - 1, 0))):
        return None  # also sidesteps int()'s digit limit
    value = int(digits)
    return value if 0 <= value < M else None


def score_prediction(example_id: int, raw: str, next_poi_id: int, M: int,
                     user_id: int | None = None) -> PredictionRecord:
    parsed = parse_prediction(raw, M)
    return PredictionRecord(
        example_id=example_id,
        raw_output=raw,
        parsed_poi_id=parsed,
        correct=parsed is not None and parsed == next_poi_id,
        user_id=user_id,
        next_poi_id=next_poi_id,
    )


def accuracy_at_1(records: Sequence[PredictionRecord]) -> float:
    if not records:
        raise ValueError("accuracy of an empty prediction set is undefined")
    return sum(r.correct for r in records) / len(records)


@dataclass(frozen=True)
class ActivityGrouping:
    groups: dict[int, str]
    train_counts: dict[int, int]
    n_extreme: int

    def members(self, group: str) -> list[int]:
        return sorted(u for u, g in self.groups.items() if g == group)

    def thresholds(self) -> dict[str, tuple[int, int] | None]:
        """Trajectory-count range per group."""
        out = {}
        for g in GROUPS:
            counts = [self.train_counts[u] for u in self.members(g)]
            out[g] = (min(counts), max(counts)) if counts else None
        return out


def group_users_by_activity(train: Iterable[Trajectory]) -> ActivityGrouping:
    """Bottom/top ``floor(0.3 |U|)`` users by training trajectory count.

    Ties are broken by user id ascending, so the sizes are always exact.
    """
    counts = Counter(t.user_id for t in train)
    if not counts:
        raise ValueError("empty training set")
    order = sorted(counts, key=lambda u: (counts[u], u))
    num, den = EXTREME_GROUP_FRACTION
    k = len(order) * num // den
    groups = {u: "normal" for u in order}
    for u in order[:k]:
        groups[u] = "inactive"
    for u in order[len(order) - k:] if k else ():
        groups[u] = "very_active"
    return ActivityGrouping(groups=groups, train_counts=dict(counts), n_extreme=k)


def cold_start_report(
    records: Sequence[PredictionRecord], grouping: ActivityGrouping
) -> dict[str, dict]:
    """Per-group Acc@1 over trajectories; groups with no records report ``None``."""
    buckets: dict[str, list[PredictionRecord]] = {g: [] for g in GROUPS}
    for r in records:
        if r.user_id is None or r.user_id not in grouping.groups:
            raise KeyError(f"record {r.example_id}: user {r.user_id} has no activity group")
        buckets[grouping.groups[r.user_id]].append(r)
    return {
        g: {
            "n": len(rows),
            "users": len(grouping.members(g)),
            "acc_at_1": accuracy_at_1(rows) if rows else None,
        }
        for g, rows in buckets.items()
    }


def cold_start_markdown(report: Mapping[str, Mapping]) -> str:
    lines = ["| User group | Examples | Acc@1 |", "|---|---:|---:|"]
    labels = {"inactive": "Inactive", "normal": "Normal", "very_active": "Very Active"}
    for g in GROUPS:
        row = report[g]
        acc = "n/a" if row["acc_at_1"] is None else f"{row['acc_at_1']:.4f}"
        lines.append(f"| {labels[g]} | {row['n']} | {acc} |")
    return "\n".join(lines) + "\n"


@dataclass(frozen=True)
class CategoryShift:
    category: str
    count_before: int
    count_after: int

    @property
    def delta(self) -> int:
        return self.count_after - self.count_before


def category_shift_report(
    before: Sequence[PredictionRecord],
    after: Sequence[PredictionRecord],
    poi_categories: Mapping[int, str],
    target_category: str,
) -> CategoryShift:
    """Predicted visits to ``target_category`` before and after a profile edit."""
    ids_before = sorted(r.example_id for r in before)
    ids_after = sorted(r.example_id for r in after)
    if ids_before != ids_after:
        raise ValueError("before/after predictions cover different example ids")

    def count(rows: Iterable[PredictionRecord]) -> int:
        return sum(
            1 for r in rows
            if r.parsed_poi_id is not None and poi_categories.get(r.parsed_poi_id) == target_category
        )

    return CategoryShift(target_category, count(before), count(after))


def write_predictions(records: Iterable[PredictionRecord], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for r in records:
            fh.write(json.dumps(asdict(r), ensure_ascii=False, sort_keys=True) + "\n")


def read_raw_predictions(path: str | Path) -> list[dict]:
    """Read a prediction file: JSON lines with at least ``example_id`` and ``raw_output``."""
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                out.append({"example_id": int(obj["example_id"]), "raw_output": str(obj["raw_output"])})
            except (ValueError, KeyError, TypeError, OverflowError) as exc:
                raise ValueError(f"{path}:{lineno}: bad prediction row: {exc}") from None
    return out
