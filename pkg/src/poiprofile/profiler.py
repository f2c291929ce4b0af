"""Natural-language user profiles generated from check-in histories."""

from __future__ import annotations

import json
import logging
import re
import threading
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

from .ingest import CheckIn, format_utc, parse_utc
from .llm import ChatBackend
from .sessionize import Trajectory

log = logging.getLogger(__name__)

TIME_FORMAT = "%Y-%m-%d %H:%M"

BFI_AXES: tuple[tuple[str, tuple[str, str]], ...] = (
    ("extroversion", ("extroverted", "introverted")),
    ("agreeableness", ("agreeable", "antagonistic")),
    ("conscientiousness", ("conscientious", "unconscientious")),
    ("neuroticism", ("neurotic", "emotionally stable")),
    ("openness", ("open to experience", "closed to experience")),
)
ATTRIBUTE_AXES: tuple[tuple[str, tuple[str, ...]], ...] = (
    ("age", ("child", "adolescent", "adult", "older adult")),
    ("gender", ("male", "female")),
    ("education", ("some schooling", "high school", "college & beyond")),
    ("socioeconomic", ("lower", "middle", "upper")),
)
# the prompt offers "open / closed to experience", so the bare words come back too
_TRAIT_ALIASES = {"open": "open to experience", "closed": "closed to experience"}

PROFILE_KEYS = ("traits", "attributes", "preferences", "routines", "user_profile")

SUMMARY_WORDS_MIN = 50
SUMMARY_WORDS_MAX = 400

PROFILE_PROMPT = (
    "Given the following check-ins of user {user_id}, generate a 200-word user profile summary "
    "to be used as a system prompt to another LLM that simulates this person's behavior, "
    "preferences, routines, hobbies, schedule, etc. Predict this user's Big Five Inventory "
    "traits: (1) extroverted / introverted, (2) agreeable / antagonistic, (3) conscientious / "
    "unconscientious, (4) neurotic / emotionally stable, (5) open / closed to experience. "
    "Also predict their age: child (<13) / adolescent (13-17) / adult (18-64) / older adult "
    "(>64); their gender: male / female; their educational background: some schooling / "
    "high school / college & beyond; and their socioeconomic level: lower / middle / upper. "
    "Also include any patterns that is observed and POI IDs of important places that might be "
    "visited in the future in the user profile summary. This system prompt will be used to "
    "make future check-in predictions. Return your response in JSON format: "
    '{{"traits": [trait1, trait2, trait3, trait4, trait5], '
    '"attributes": [age, gender, edu, socioeco], '
    '"preferences": [preference1, preference2, preference3, ...], '
    '"routines": [routine1, routine2, routine3, ...], '
    '"user_profile": "200-word user profile summary"}} {records}.'
)

CHECKIN_SENTENCE = (
    "At {time}, user {user_id} visited POI id {poi_id} which is a/an {category_name} "
    "with category id {category_id}."
)


class ProfileValidationError(ValueError):
    def __init__(self, field_name: str, message: str):
        super().__init__(f"{field_name}: {message}")
        self.field = field_name


class HallucinationExhaustedError(RuntimeError):
    def __init__(self, user_id: int, attempts: int, last: Exception):
        field_name = getattr(last, "field", "response")
        super().__init__(
            f"hallucination-exhausted: user {user_id} still invalid after {attempts} attempts "
            f"(field {field_name!r}: {last})"
        )
        self.user_id = user_id
        self.attempts = attempts
        self.field = field_name


class StaleVersionError(RuntimeError):
    def __init__(self, user_id: int, expected: int | None, current: int):
        super().__init__(f"stale profile version for user {user_id}: sent {expected}, current {current}")
        self.current = current


@dataclass(frozen=True)
class UserProfile:
    user_id: int
    traits: tuple[str, ...]
    attributes: tuple[str, ...]
    preferences: tuple[str, ...]
    routines: tuple[str, ...]
    summary: str
    generated_at: datetime
    source_model: str
    attempts: int = 1
    version: int = 0
    metadata: Mapping[str, object] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "user_id": self.user_id,
            "traits": list(self.traits),
            "attributes": list(self.attributes),
            "preferences": list(self.preferences),
            "routines": list(self.routines),
            "user_profile": self.summary,
            "generated_at": format_utc(self.generated_at),
            "source_model": self.source_model,
            "attempts": self.attempts,
            "version": self.version,
            "metadata": dict(self.metadata),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), ensure_ascii=False, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_dict(cls, obj: Mapping) -> "UserProfile":
        """Build and validate a profile from its canonical JSON form."""
        content = validate_profile_json(obj)
        return cls(
            user_id=int(obj["user_id"]),
            generated_at=parse_utc(obj["generated_at"]),
            source_model=str(obj.get("source_model", "")),
            attempts=int(obj.get("attempts", 1)),
            version=int(obj.get("version", 0)),
            metadata=dict(obj.get("metadata") or {}),
            **content,
        )

    @property
    def attribute_map(self) -> dict[str, str]:
        return {name: value for (name, _), value in zip(ATTRIBUTE_AXES, self.attributes)}


def format_time(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime(TIME_FORMAT)


def checkin_sentence(c: CheckIn) -> str:
    return CHECKIN_SENTENCE.format(
        time=format_time(c.timestamp),
        user_id=c.user_id,
        poi_id=c.poi_id,
        category_name=c.category_name,
        category_id=c.category_id,
    )


def render_checkins(checkins: Iterable[CheckIn]) -> str:
    """Join check-in sentences; the caller's template supplies the final period."""
    return " ".join(checkin_sentence(c) for c in checkins)[:-1]


def build_profile_prompt(user_id: int, history: Sequence[Trajectory]) -> str:
    if not history:
        raise ValueError(f"user {user_id} has an empty history")
    others = {t.user_id for t in history} - {user_id}
    if others:
        raise ValueError(f"history for user {user_id} contains trajectories of users {sorted(others)}")
    checkins = sorted(
        (c for t in history for c in t.checkins), key=lambda c: c.timestamp
    )
    if not checkins:
        raise ValueError(f"user {user_id} has no check-ins")
    return PROFILE_PROMPT.format(user_id=user_id, records=render_checkins(checkins))


# -- parsing and validation -------------------------------------------------

def _norm(value: object) -> str:
    if not isinstance(value, str):
        raise TypeError
    return " ".join(value.strip().lower().split())


def _text_list(obj: Mapping, key: str) -> tuple[str, ...]:
    value = obj[key]
    if not isinstance(value, list) or not all(isinstance(v, str) for v in value):
        raise ProfileValidationError(key, "expected a list of strings")
    return tuple(v.strip() for v in value)


def validate_profile_json(obj: object) -> dict:
    """Check the five profile keys and normalise categorical values.

    Returns keyword arguments for :class:`UserProfile` (without metadata).
    """
    if not isinstance(obj, Mapping):
        raise ProfileValidationError("response", "expected a JSON object")
    for key in PROFILE_KEYS:
        if key not in obj:
            raise ProfileValidationError(key, "missing key")

    traits = obj["traits"]
    if not isinstance(traits, list) or len(traits) != len(BFI_AXES):
        raise ProfileValidationError("traits", f"expected {len(BFI_AXES)} traits")
    norm_traits = []
    for i, ((axis, allowed), value) in enumerate(zip(BFI_AXES, traits)):
        try:
            v = _norm(value)
        except TypeError:
            raise ProfileValidationError(f"traits[{i}]", f"{axis} is not text") from None
        v = _TRAIT_ALIASES.get(v, v) if i == 4 else v
        if v not in allowed:
            raise ProfileValidationError(f"traits[{i}]", f"{value!r} is not one of {allowed}")
        norm_traits.append(v)

    attrs = obj["attributes"]
    if not isinstance(attrs, list) or len(attrs) != len(ATTRIBUTE_AXES):
        raise ProfileValidationError("attributes", f"expected {len(ATTRIBUTE_AXES)} attributes")
    norm_attrs = []
    for i, ((axis, allowed), value) in enumerate(zip(ATTRIBUTE_AXES, attrs)):
        try:
            v = _norm(value)
        except TypeError:
            raise ProfileValidationError(f"attributes[{i}]", f"{axis} is not text") from None
        if v not in allowed:
            raise ProfileValidationError(f"attributes[{i}]", f"{axis} {value!r} is not one of {allowed}")
        norm_attrs.append(v)

    summary = obj["user_profile"]
    if not isinstance(summary, str) or not summary.strip():
        raise ProfileValidationError("user_profile", "summary is empty")

    return {
        "traits": tuple(norm_traits),
        "attributes": tuple(norm_attrs),
        "preferences": _text_list(obj, "preferences"),
        "routines": _text_list(obj, "routines"),
        "summary": summary.strip(),
    }


_FENCE_RE = re.compile(r"^```(?:json)?\s*|\s*```$", re.IGNORECASE)


def extract_json_object(text: str) -> object:
    """Parse the JSON object in an LLM reply, tolerating code fences and chatter."""
    stripped = _FENCE_RE.sub("", text.strip())
    try:
        return json.loads(stripped)
    except json.JSONDecodeError:
        pass
    start, end = stripped.find("{"), stripped.rfind("}")
    if start < 0 or end <= start:
        raise ProfileValidationError("response", "no JSON object found")
    try:
        return json.loads(stripped[start : end + 1])
    except json.JSONDecodeError as exc:
        raise ProfileValidationError("response", f"invalid JSON: {exc.msg}") from None


def _utcnow() -> datetime:
    return datetime.now(timezone.utc).replace(microsecond=0)


def generate_profile(
    user_id: int,
    history: Sequence[Trajectory],
    backend: ChatBackend,
    max_retries: int = 3,
    now: datetime | Callable[[], datetime] | None = None,
) -> UserProfile:
    """Prompt ``backend`` for a profile, re-asking on schema failures.

    Transport errors from the backend propagate unchanged; invalid replies are
    retried up to ``max_retries`` attempts in total.
    """
    if max_retries < 1:
        raise ValueError("max_retries must be >= 1")
    prompt = build_profile_prompt(user_id, history)
    messages = [{"role": "user", "content": prompt}]
    last: Exception | None = None
    for attempt in range(1, max_retries + 1):
        reply = backend.complete(messages, json_mode=True)
        try:
            content = validate_profile_json(extract_json_object(reply))
        except ProfileValidationError as exc:
            log.info("user %d attempt %d rejected: %s", user_id, attempt, exc)
            last = exc
            continue
        words = len(content["summary"].split())
        if not SUMMARY_WORDS_MIN <= words <= SUMMARY_WORDS_MAX:
            log.warning("user %d summary has %d words (target 200)", user_id, words)
        stamp = now() if callable(now) else (now or _utcnow())
        config = getattr(backend, "config", None)
        return UserProfile(
            user_id=user_id,
            generated_at=stamp,
            source_model=backend.name,
            attempts=attempt,
            metadata={
                "temperature": getattr(config, "temperature", 0.0),
                "json_mode": getattr(config, "json_mode", True),
                "summary_words": words,
            },
            **content,
        )
    assert last is not None
    raise HallucinationExhaustedError(user_id, max_retries, last)


def generate_profiles(
    histories: Mapping[int, Sequence[Trajectory]],
    backend: ChatBackend,
    max_retries: int = 3,
    parallelism: int = 4,
    now: Callable[[int], datetime] | None = None,
) -> dict[int, UserProfile]:
    """Profile every user with at most ``parallelism`` requests in flight."""
    users = sorted(histories)

    def one(uid: int) -> UserProfile:
        stamp = (lambda: now(uid)) if now else None
        return generate_profile(uid, histories[uid], backend, max_retries, now=stamp)

    with ThreadPoolExecutor(max_workers=max(1, parallelism)) as pool:
        results = list(pool.map(one, users))
    return dict(zip(users, results))


def histories_by_user(trajs: Iterable[Trajectory]) -> dict[int, list[Trajectory]]:
    out: dict[int, list[Trajectory]] = {}
    for t in trajs:
        out.setdefault(t.user_id, []).append(t)
    return out


# -- storage ----------------------------------------------------------------

class ProfileStore:
    """Append-only directory of ``user_<id>.v<n>.json`` files."""

    _NAME = re.compile(r"^user_(\d+)\.v(\d+)\.json$")

    def __init__(self, directory: str | Path):
        self.directory = Path(directory)
        self.directory.mkdir(parents=True, exist_ok=True)
        self._locks: dict[int, threading.Lock] = {}
        self._guard = threading.Lock()

    def _lock(self, user_id: int) -> threading.Lock:
        with self._guard:
            return self._locks.setdefault(user_id, threading.Lock())

    def _versions(self, user_id: int) -> list[int]:
        out = []
        for p in self.directory.glob(f"user_{user_id}.v*.json"):
            m = self._NAME.match(p.name)
            if m and int(m.group(1)) == user_id:
                out.append(int(m.group(2)))
        return sorted(out)

    def current_version(self, user_id: int) -> int:
        versions = self._versions(user_id)
        return versions[-1] if versions else 0

    def users(self) -> list[int]:
        ids = set()
        for p in self.directory.glob("user_*.v*.json"):
            m = self._NAME.match(p.name)
            if m:
                ids.add(int(m.group(1)))
        return sorted(ids)

    def save(self, profile: UserProfile, expected_version: int | None = None) -> UserProfile:
        """Write a new version; with ``expected_version`` reject stale writers."""
        with self._lock(profile.user_id):
            current = self.current_version(profile.user_id)
            if expected_version is not None and expected_version != current:
                raise StaleVersionError(profile.user_id, expected_version, current)
            stored = replace(profile, version=current + 1)
            path = self.directory / f"user_{profile.user_id}.v{current + 1}.json"
            with path.open("x", encoding="utf-8", newline="\n") as fh:
                fh.write(stored.to_json())
            return stored

    def load(self, user_id: int, version: int | None = None) -> UserProfile:
        version = version or self.current_version(user_id)
        if not version:
            raise KeyError(f"no profile stored for user {user_id}")
        path = self.directory / f"user_{user_id}.v{version}.json"
        return UserProfile.from_dict(json.loads(path.read_text(encoding="utf-8")))

    def latest(self) -> dict[int, UserProfile]:
        return {uid: self.load(uid) for uid in self.users()}

    def history(self, user_id: int) -> list[UserProfile]:
        return [self.load(user_id, v) for v in self._versions(user_id)]


# -- distributions ----------------------------------------------------------

def _label(value: str) -> str:
    return " ".join(w if w == "to" else w.capitalize() for w in value.split())


@dataclass
class DistributionReport:
    traits: dict[str, dict[str, int]]
    attributes: dict[str, dict[str, int]]
    n: int

    def to_dict(self) -> dict:
        return {"n": self.n, "traits": self.traits, "attributes": self.attributes}

    def to_markdown(self, column: str = "Count") -> str:
        lines = ["| Trait | " + column + " |", "|---|---:|"]
        for axis, _ in BFI_AXES:
            for value, count in self.traits[axis].items():
                lines.append(f"| {_label(value)} | {count} |")
        lines += ["", "| Attribute | Value | " + column + " |", "|---|---|---:|"]
        for axis, _ in ATTRIBUTE_AXES:
            label = axis.title()
            for value, count in self.attributes[axis].items():
                lines.append(f"| {label} | {_label(value)} | {count} |")
                label = ""
        return "\n".join(lines) + "\n"


def profile_distribution_report(profiles: Iterable[UserProfile]) -> DistributionReport:
    profiles = list(profiles)
    traits = {axis: Counter() for axis, _ in BFI_AXES}
    attrs = {axis: Counter() for axis, _ in ATTRIBUTE_AXES}
    for p in profiles:
        for (axis, _), value in zip(BFI_AXES, p.traits):
            traits[axis][value] += 1
        for (axis, _), value in zip(ATTRIBUTE_AXES, p.attributes):
            attrs[axis][value] += 1
    return DistributionReport(
        traits={axis: {v: traits[axis][v] for v in allowed} for axis, allowed in BFI_AXES},
        attributes={axis: {v: attrs[axis][v] for v in allowed} for axis, allowed in ATTRIBUTE_AXES},
        n=len(profiles),
    )
