"""LLM-as-judge scoring of generated profiles."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Iterable, Sequence

from .llm import ChatBackend
from .profiler import (
    HallucinationExhaustedError,
    ProfileValidationError,
    UserProfile,
    extract_json_object,
)

log = logging.getLogger(__name__)

METRICS = ("fluency", "informativeness", "conciseness", "relevance")

# "Given the list of reviews" is kept as published even though the judge sees
# a profile built from check-ins.
JUDGE_PROMPT = (
    "Given the following natural language (NL) user profile {profile}, you are to assess the "
    "user profile based on four criteria:\n"
    "- Fluency: Is the NL profile both syntactically and semantically correct?\n"
    "- Informativeness: Does the NL profile provide important information for a user profile?\n"
    "- Conciseness: Is the NL profile written in a concise manner?\n"
    "- Relevance: Given the list of reviews, is the NL profile relevant to the user?\n"
    'Return your response in the JSON format: {{"fluency": 0/1, "informativeness": 0/1, '
    '"conciseness": 0/1, "relevance": 0/1}}'
)


@dataclass(frozen=True)
class JudgeScore:
    user_id: int
    judge_model: str
    fluency: int
    informativeness: int
    conciseness: int
    relevance: int

    def __post_init__(self):
        for m in METRICS:
            if getattr(self, m) not in (0, 1):
                raise ValueError(f"{m} must be 0 or 1")


def build_judge_prompt(profile: UserProfile) -> str:
    return JUDGE_PROMPT.format(profile=profile.summary)


def _parse_scores(reply: str) -> dict[str, int]:
    obj = extract_json_object(reply)
    if not isinstance(obj, dict):
        raise ProfileValidationError("response", "expected a JSON object")
    out = {}
    for m in METRICS:
        if m not in obj:
            raise ProfileValidationError(m, "missing key")
        v = obj[m]
        # true/false are rejected: the prompt asks for 0/1
        if isinstance(v, bool) or v not in (0, 1):
            raise ProfileValidationError(m, f"{v!r} is not 0 or 1")
        out[m] = int(v)
    return out


def judge_profile(profile: UserProfile, backend: ChatBackend, max_retries: int = 3) -> JudgeScore:
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    messages = [{"role": "user", "content": build_judge_prompt(profile)}]
    last: Exception | None = None
    for attempt in range(1, max_retries + 1):
        reply = backend.complete(messages, json_mode=True)
        try:
            scores = _parse_scores(reply)
        except ProfileValidationError as exc:
            log.info("judge %s user %d attempt %d rejected: %s", backend.name, profile.user_id, attempt, exc)
            last = exc
            continue
        return JudgeScore(profile.user_id, backend.name, **scores)
    assert last is not None
    raise HallucinationExhaustedError(profile.user_id, max_retries, last)


def judge_profiles(
    profiles: Iterable[UserProfile], judges: Sequence[ChatBackend], max_retries: int = 3
) -> list[JudgeScore]:
    """One independent score row per (judge, profile)."""
    profiles = sorted(profiles, key=lambda p: p.user_id)
    return [judge_profile(p, j, max_retries) for j in judges for p in profiles]


def _pct(ones: int, n: int) -> Decimal:
    return (Decimal(100 * ones) / Decimal(n)).quantize(Decimal("0.01"), rounding=ROUND_HALF_UP)


def aggregate_judge_scores(scores: Iterable[JudgeScore]) -> dict[str, dict[str, float]]:
    """Percentage of 1s per metric for each judge, rounded to two decimals."""
    scores = list(scores)
    if not scores:
        raise ValueError("no judge scores to aggregate")
    by_judge: dict[str, list[JudgeScore]] = defaultdict(list)
    for s in scores:
        by_judge[s.judge_model].append(s)
    return {
        judge: {m: float(_pct(sum(getattr(s, m) for s in rows), len(rows))) for m in METRICS}
        for judge, rows in sorted(by_judge.items())
    }


def judge_report_markdown(aggregate: dict[str, dict[str, float]], column: str = "Score") -> str:
    lines = [f"| Metric | {column} |", "|---|---:|"]
    for judge, metrics in aggregate.items():
        lines.append(f"| *Judge: {judge}* | |")
        for m in METRICS:
            lines.append(f"| {m.title()} | {metrics[m]:.2f} |")
    return "\n".join(lines) + "\n"


def write_scores(scores: Iterable[JudgeScore], path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="\n") as fh:
        for s in scores:
            fh.write(json.dumps(asdict(s), sort_keys=True) + "\n")


def read_scores(path: str | Path) -> list[JudgeScore]:
    with Path(path).open(encoding="utf-8") as fh:
        return [JudgeScore(**json.loads(line)) for line in fh if line.strip()]
