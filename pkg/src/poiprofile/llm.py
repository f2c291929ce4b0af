"""Chat-completion and embedding backends.

Real backends speak the OpenAI-style HTTP protocol (``/chat/completions`` and
``/embeddings``). The mock backends are deterministic functions of their seed
and the request, so whole pipeline runs can be compared byte for byte.
"""

from __future__ import annotations

import hashlib
import json
import math
import os
import random
import re
import threading
from collections import Counter
from dataclasses import dataclass
from datetime import date
from typing import Any, Callable, Protocol, Sequence

import httpx

Message = dict[str, str]


class BackendError(RuntimeError):
    """Transport-level failure talking to a model endpoint."""


class ChatBackend(Protocol):
    name: str

    def complete(self, messages: Sequence[Message], json_mode: bool | None = None) -> str: ...


class EmbeddingBackend(Protocol):
    name: str

    def embed(self, texts: Sequence[str]) -> list[list[float]]: ...


class _CallCounter:
    def __init__(self) -> None:
        self._lock = threading.Lock()
        self.calls = 0

    def _tick(self) -> None:
        with self._lock:
            self.calls += 1


@dataclass
class EndpointConfig:
    base_url: str | None = None
    model: str = "gpt-4o-mini-2024-07-18"
    temperature: float = 0.0
    max_tokens: int = 1024
    timeout: float = 60.0
    api_key_env: str = "OPENAI_API_KEY"
    base_url_env: str = "OPENAI_BASE_URL"
    json_mode: bool = True

    def resolve_base_url(self) -> str:
        url = self.base_url or os.environ.get(self.base_url_env) or "https://api.openai.com/v1"
        return url.rstrip("/")


class HTTPChatBackend(_CallCounter):
    """Chat-completion client; responses are returned as untrusted text."""

    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        super().__init__()
        self.config = config
        self.name = config.model
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def _headers(self) -> dict[str, str]:
        key = os.environ.get(self.config.api_key_env)
        return {"Authorization": f"Bearer {key}"} if key else {}

    def complete(self, messages: Sequence[Message], json_mode: bool | None = None) -> str:
        cfg = self.config
        body: dict[str, Any] = {
            "model": cfg.model,
            "messages": list(messages),
            "temperature": cfg.temperature,
            "max_tokens": cfg.max_tokens,
        }
        if cfg.json_mode if json_mode is None else json_mode:
            body["response_format"] = {"type": "json_object"}
        self._tick()
        try:
            resp = self._client.post(
                f"{cfg.resolve_base_url()}/chat/completions", json=body, headers=self._headers()
            )
            resp.raise_for_status()
            return resp.json()["choices"][0]["message"]["content"] or ""
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"{cfg.model}: chat completion failed: {exc}") from exc


class HTTPEmbeddingBackend(_CallCounter):
    def __init__(self, config: EndpointConfig, transport: httpx.BaseTransport | None = None):
        super().__init__()
        self.config = config
        self.name = config.model
        self._client = httpx.Client(timeout=config.timeout, transport=transport)

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        cfg = self.config
        key = os.environ.get(cfg.api_key_env)
        headers = {"Authorization": f"Bearer {key}"} if key else {}
        self._tick()
        try:
            resp = self._client.post(
                f"{cfg.resolve_base_url()}/embeddings",
                json={"model": cfg.model, "input": list(texts)},
                headers=headers,
            )
            resp.raise_for_status()
            data = sorted(resp.json()["data"], key=lambda d: d["index"])
            return [list(map(float, d["embedding"])) for d in data]
        except (httpx.HTTPError, KeyError, IndexError, TypeError, ValueError) as exc:
            raise BackendError(f"{cfg.model}: embedding request failed: {exc}") from exc


class ScriptedBackend(_CallCounter):
    """Replays canned responses in order (the last one repeats).

    ``responses`` may also be a callable ``(messages, call_index) -> str``.
    Every request is kept in ``requests`` for inspection.
    """

    def __init__(self, responses: Sequence[str] | Callable[[Sequence[Message], int], str],
                 name: str = "scripted"):
        super().__init__()
        self.name = name
        self._responses = responses
        self.requests: list[list[Message]] = []

    def complete(self, messages: Sequence[Message], json_mode: bool | None = None) -> str:
        idx = self.calls
        self._tick()
        self.requests.append(list(messages))
        if callable(self._responses):
            return self._responses(messages, idx)
        if not self._responses:
            raise BackendError("scripted backend has no responses")
        return self._responses[min(idx, len(self._responses) - 1)]


# -- deterministic mock -----------------------------------------------------

_CHECKIN_RE = re.compile(
    r"At (\d{4}-\d{2}-\d{2} \d{2}:\d{2}), user (\d+) visited POI id (\d+) "
    r"which is a/an (.+?) with category id (\d+)(?=\.)"
)
_QUESTION_RE = re.compile(r"at time (\d{4}-\d{2}-\d{2} \d{2}:\d{2}), which POI id will user (\d+) visit")
_RANGE_RE = re.compile(r"range from 0 to (\d+)")
_WANTS_RE = re.compile(r"Today, this user really wants to visit a (.+?) place\.")
_PROFILE_USER_RE = re.compile(r"check-ins of user (\d+)")

_TRAITS = (
    ("extroverted", "introverted"),
    ("agreeable", "antagonistic"),
    ("conscientious", "unconscientious"),
    ("neurotic", "emotionally stable"),
    ("open to experience", "closed to experience"),
)
_AGES = ("adolescent", "adult", "adult", "adult", "older adult")
_GENDERS = ("male", "female")
_EDU = ("some schooling", "high school", "college & beyond", "college & beyond")
_SES = ("lower", "middle", "middle", "upper")


def _rng(seed: int, messages: Sequence[Message]) -> random.Random:
    digest = hashlib.sha256(
        json.dumps([seed, list(messages)], sort_keys=True, ensure_ascii=False).encode("utf-8")
    ).digest()
    return random.Random(int.from_bytes(digest[:8], "big"))


def _part_of_day(hour: int) -> str:
    if 5 <= hour < 12:
        return "morning"
    if 12 <= hour < 17:
        return "afternoon"
    if 17 <= hour < 22:
        return "evening"
    return "late night"


class MockBackend(_CallCounter):
    """Deterministic stand-in for profile, judge and predictor models.

    The request type is recognised from the prompt text. Profile requests get a
    schema-valid profile summarising the visited categories; judge requests get
    0/1 scores (conciseness fails for summaries over 115 words); prediction
    requests get the most visited POI of the current trajectory, or the latest
    POI of an injected preferred category when the system prompt asks for one.
    """

    def __init__(self, seed: int = 0, name: str = "mock"):
        super().__init__()
        self.seed = seed
        self.name = name

    def complete(self, messages: Sequence[Message], json_mode: bool | None = None) -> str:
        self._tick()
        text = "\n".join(m.get("content", "") for m in messages)
        rng = _rng(self.seed, messages)
        if "generate a 200-word user profile summary" in text:
            return self._profile(text, rng)
        if "you are to assess the user profile based on four criteria" in text:
            return self._judge(text)
        if "which POI id will user" in text:
            return self._predict(messages)
        return json.dumps({"error": "unrecognised request"})

    def _profile(self, text: str, rng: random.Random) -> str:
        m = _PROFILE_USER_RE.search(text)
        user = m.group(1) if m else "?"
        visits = _CHECKIN_RE.findall(text)
        cats = Counter(v[3] for v in visits)
        pois = Counter(v[2] for v in visits)
        hours = Counter(_part_of_day(int(v[0][11:13])) for v in visits)
        weekend = sum(1 for v in visits if _weekday(v[0]) >= 5)
        top_cats = [c for c, _ in cats.most_common(3)] or ["various places"]
        top_pois = [p for p, _ in pois.most_common(3)]
        top_time = hours.most_common(1)[0][0] if hours else "daytime"

        traits = [pair[0] if rng.random() < 0.7 else pair[1] for pair in _TRAITS]
        attributes = [rng.choice(_AGES), rng.choice(_GENDERS), rng.choice(_EDU), rng.choice(_SES)]
        preferences = [f"enjoys visiting {c} venues" for c in top_cats]
        routines = [f"most check-ins happen in the {top_time}"]
        if weekend:
            routines.append(f"active on weekends with {weekend} weekend check-ins")
        routines.append(f"returns regularly to POI id {top_pois[0]}" if top_pois else "no fixed places")

        summary = (
            f"User {user} is {_article(attributes[0])} {attributes[0]} {attributes[1]} city dweller whose check-in history "
            f"shows {len(visits)} visits across {len(cats)} kinds of places. "
            f"They are {traits[0]} and {traits[4]}, with {_article(attributes[3])} {attributes[3]} socioeconomic "
            f"background and an education level of {attributes[2]}. "
            f"Their favourite kinds of places are {', '.join(top_cats)}, "
            f"and they are usually out in the {top_time}. "
            + (
                f"Important places that they are likely to visit again include POI ids "
                f"{', '.join(top_pois)}. "
                if top_pois else ""
            )
            + "They tend to follow a stable routine, revisiting familiar venues near their "
            "usual areas while occasionally exploring new spots that match their interests. "
            "When simulating this person, favour the places and times above and keep "
            "predictions consistent with their habits and schedule."
        )
        return json.dumps(
            {
                "traits": traits,
                "attributes": attributes,
                "preferences": preferences,
                "routines": routines,
                "user_profile": summary,
            },
            ensure_ascii=False,
        )

    def _judge(self, text: str) -> str:
        start = text.find("user profile ") + len("user profile ")
        end = text.find(", you are to assess")
        words = len(text[start:end].split()) if 0 < start < end else 0
        return json.dumps(
            {"fluency": 1, "informativeness": 1, "conciseness": int(words <= 115), "relevance": 1}
        )

    def _predict(self, messages: Sequence[Message]) -> str:
        system = " ".join(m["content"] for m in messages if m.get("role") == "system")
        text = "\n".join(m.get("content", "") for m in messages)
        visits = _CHECKIN_RE.findall(text)
        q = _QUESTION_RE.search(text)
        when, user = (q.group(1), q.group(2)) if q else ("unknown time", "?")
        wanted = _WANTS_RE.findall(system) or _WANTS_RE.findall(text)
        choice = None
        if wanted:
            matching = [v[2] for v in visits if v[3] == wanted[-1]]
            if matching:
                choice = matching[-1]
        if choice is None and visits:
            counts = Counter(v[2] for v in visits)
            last_seen = {v[2]: i for i, v in enumerate(visits)}
            choice = max(counts, key=lambda p: (counts[p], last_seen[p]))
        if choice is None:
            r = _RANGE_RE.search(text)
            choice = "0" if r is None else str(int(r.group(1)) // 2)
        return f"At {when}, user {user} will visit POI id {choice}."


def _article(word: str) -> str:
    return "an" if word[:1] in "aeiou" else "a"


def _weekday(stamp: str) -> int:
    y, m, d = int(stamp[:4]), int(stamp[5:7]), int(stamp[8:10])
    try:
        return date(y, m, d).weekday()
    except ValueError:
        return 0


class MockEmbedding(_CallCounter):
    """Feature-hashing bag of words; identical text gives an identical vector."""

    def __init__(self, dim: int = 256, seed: int = 0, name: str = "mock-embedding"):
        super().__init__()
        self.dim = dim
        self.seed = seed
        self.name = name

    def embed(self, texts: Sequence[str]) -> list[list[float]]:
        self._tick()
        return [self._one(t) for t in texts]

    def _one(self, text: str) -> list[float]:
        vec = [0.0] * self.dim
        for word in re.findall(r"\w+", text.lower()):
            h = hashlib.sha256(f"{self.seed}:{word}".encode("utf-8")).digest()
            idx = int.from_bytes(h[:4], "big") % self.dim
            vec[idx] += 1.0 if h[4] & 1 else -1.0
        return vec


def cosine(a: Sequence[float], b: Sequence[float]) -> float:
    if len(a) != len(b):
        raise ValueError("embedding dimensions differ")
    na = math.sqrt(sum(x * x for x in a))
    nb = math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    if list(a) == list(b):
        return 1.0
    return max(-1.0, min(1.0, sum(x * y for x, y in zip(a, b)) / (na * nb)))


# -- construction from config -----------------------------------------------

def chat_backend_from_config(cfg: dict | None, default_seed: int = 0) -> ChatBackend:
    """Build a chat backend from a config mapping.

    ``{"kind": "mock", "seed": 1}`` or ``{"kind": "http", "model": ..., ...}``.
    """
    cfg = dict(cfg or {"kind": "mock"})
    kind = cfg.pop("kind", "mock")
    if kind == "mock":
        return MockBackend(seed=cfg.get("seed", default_seed), name=cfg.get("name", "mock"))
    if kind == "http":
        return HTTPChatBackend(EndpointConfig(**cfg))
    raise ValueError(f"unknown backend kind {kind!r}")


def embedding_backend_from_config(cfg: dict | None, default_seed: int = 0) -> EmbeddingBackend:
    cfg = dict(cfg or {"kind": "mock"})
    kind = cfg.pop("kind", "mock")
    if kind == "mock":
        return MockEmbedding(dim=cfg.get("dim", 256), seed=cfg.get("seed", default_seed))
    if kind == "http":
        cfg.setdefault("model", "text-embedding-3-small")
        cfg.pop("json_mode", None)
        return HTTPEmbeddingBackend(EndpointConfig(**cfg))
    raise ValueError(f"unknown embedding backend kind {kind!r}")


def is_deterministic(*backends: object) -> bool:
    return all(isinstance(b, (MockBackend, MockEmbedding, ScriptedBackend)) for b in backends)
