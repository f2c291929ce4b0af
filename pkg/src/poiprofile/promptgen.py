"""Next-POI question/answer prompts conditioned on a user profile."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, replace
from datetime import datetime
from pathlib import Path
from typing import Iterable, Mapping, Sequence

from .ingest import format_utc, parse_utc
from .profiler import UserProfile, format_time, render_checkins
from .sessionize import Trajectory

log = logging.getLogger(__name__)

CONTEXT_BUDGET_TOKENS = 16_384
CHAT_TEMPLATES = ("llama2_chat", "plain")

ATTRIBUTES_SENTENCE = (
    "You are user {user_id} and your basic information is as follows: Age: {age}; "
    "Gender: {gender}; Education: {education}; SocioEco: {socioeco}."
)
TRAJECTORY_BLOCK = "The following is a trajectory of user {user_id}: {records}."
INSTRUCTION_BLOCK = (
    "Given the data, at time {time}, which POI id will user {user_id} visit? "
    "Note that POI id is an integer in the range from 0 to {max_id}."
)
TARGET_BLOCK = "At {time}, user {user_id} will visit POI id {poi_id}."
PREFERENCE_SENTENCE = "Today, this user really wants to visit a {category} place."

# the hyperparameters used to fine-tune on these files; recorded, not executed
TRAINING_HYPERPARAMETERS = {
    "peft": "lora",
    "lora_rank": 8,
    "lora_target_modules": ["q_proj", "k_proj", "v_proj", "o_proj"],
    "quantization": "nf4",
    "double_quantization": True,
    "compute_dtype": "bfloat16",
    "epochs": 3,
    "lr_scheduler": "linear",
    "warmup_steps": 20,
    "weight_decay": 0.0,
    "context_length": CONTEXT_BUDGET_TOKENS,
    "attention_kernel": "flash_attention_2",
    "extra_kernels": ["liger"],
    "trainer": "trl.SFTTrainer",
}

# full-scale Acc@1 reported for models trained on these files; not reproducible here
REFERENCE_TARGETS = {
    "acc_at_1": {
        "profile-sft-llama-2-7B": {"NYC": 0.2575, "TKY": 0.1699, "CA": 0.1094, "Moscow": 0.180, "Sao Paulo": 0.205},
        "profile-sft-llama-3.1-8B": {"NYC": 0.2582, "TKY": 0.2127, "CA": 0.1339, "Moscow": 0.170, "Sao Paulo": 0.205},
        "profile-sft-llama-3.2-1B": {"NYC": 0.2484, "TKY": 0.1851, "CA": 0.1267, "Moscow": 0.180, "Sao Paulo": 0.205},
    },
    "preference_shift_nyc_llama_3_2_1b": {
        "Coffee Shop": [61, 68],
        "Bar": [94, 105],
        "Gym / Fitness Center": [102, 123],
        "Subway": [53, 65],
    },
}


@dataclass(frozen=True)
class SystemPromptConfig:
    include_summary: bool = True
    include_routines_preferences: bool = True
    include_attributes: bool = True
    include_traits: bool = True

    def __post_init__(self):
        extras = self.include_routines_preferences or self.include_attributes or self.include_traits
        if extras and not self.include_summary:
            raise ValueError("profile components need include_summary; they extend the summary")

    @property
    def uses_profile(self) -> bool:
        return self.include_summary

    @classmethod
    def from_dict(cls, obj: Mapping | None) -> "SystemPromptConfig":
        return cls(**dict(obj or {}))


@dataclass(frozen=True)
class SFTExample:
    example_id: int
    user_id: int
    traj_id: int
    system_prompt: str
    input_prompt: str
    target: str
    next_timestamp: datetime
    next_poi_id: int
    token_estimate: int
    chat_template: str = "llama2_chat"
    over_budget: bool = False
    context_checkins: int = 0

    @property
    def prompt(self) -> str:
        """What the model sees at inference: template-wrapped, without the target."""
        return render_prompt(self.system_prompt, self.input_prompt, self.chat_template)

    @property
    def text(self) -> str:
        """Full training sequence including the target."""
        if self.chat_template == "llama2_chat":
            return f"{self.prompt} {self.target} </s>"
        return f"{self.prompt}\n{self.target}"

    def messages(self) -> list[dict[str, str]]:
        out = [{"role": "system", "content": self.system_prompt}] if self.system_prompt else []
        return out + [{"role": "user", "content": self.input_prompt}]

    def to_dict(self) -> dict:
        out = asdict(self)
        out["next_timestamp"] = format_utc(self.next_timestamp)
        out["system"] = out.pop("system_prompt")
        out["input"] = out.pop("input_prompt")
        out["prompt"] = self.prompt
        out["text"] = self.text
        return out

    @classmethod
    def from_dict(cls, obj: Mapping) -> "SFTExample":
        return cls(
            example_id=int(obj["example_id"]),
            user_id=int(obj["user_id"]),
            traj_id=int(obj["traj_id"]),
            system_prompt=obj["system"],
            input_prompt=obj["input"],
            target=obj["target"],
            next_timestamp=parse_utc(obj["next_timestamp"]),
            next_poi_id=int(obj["next_poi_id"]),
            token_estimate=int(obj["token_estimate"]),
            chat_template=obj.get("chat_template", "llama2_chat"),
            over_budget=bool(obj.get("over_budget", False)),
            context_checkins=int(obj.get("context_checkins", 0)),
        )


def render_prompt(system: str, user: str, chat_template: str) -> str:
    if chat_template == "llama2_chat":
        if system:
            return f"<s>[INST] <<SYS>> {system} <</SYS>> {user} [/INST]"
        return f"<s>[INST] {user} [/INST]"
    if chat_template == "plain":
        return f"{system}\n\n{user}" if system else user
    raise ValueError(f"unknown chat template {chat_template!r}")


def _items(values: Iterable[str]) -> str:
    return ", ".join(v.strip().rstrip(".") for v in values)


def build_system_prompt(profile: UserProfile | None, cfg: SystemPromptConfig) -> str:
    """Render the enabled profile sections in a fixed order.

    Order: attributes, traits, preferences, routines, summary. Turning a
    section on only inserts text; the other sections are unchanged.
    """
    if not cfg.uses_profile:
        return ""
    if profile is None:
        raise ValueError("a profile is required when include_summary is set")
    parts = []
    if cfg.include_attributes:
        age, gender, education, socioeco = profile.attributes
        parts.append(ATTRIBUTES_SENTENCE.format(
            user_id=profile.user_id, age=age, gender=gender, education=education, socioeco=socioeco,
        ))
    if cfg.include_traits:
        parts.append(f"You have the following traits: {_items(profile.traits)}.")
    if cfg.include_routines_preferences:
        if profile.preferences:
            parts.append(f"You have the following preferences: {_items(profile.preferences)}.")
        if profile.routines:
            parts.append(f"You have the following routines: {_items(profile.routines)}.")
    parts.append(profile.summary)
    return " ".join(parts)


def _input_prompt(traj: Trajectory, context: Sequence, M: int) -> str:
    target = traj.checkins[-1]
    return " ".join((
        TRAJECTORY_BLOCK.format(user_id=traj.user_id, records=render_checkins(context)),
        INSTRUCTION_BLOCK.format(time=format_time(target.timestamp), user_id=traj.user_id, max_id=M - 1),
    ))


def estimate_tokens(text: str) -> int:
    return math.ceil(len(text) / 4)


def build_sft_example(
    traj: Trajectory,
    profile: UserProfile | None,
    cfg: SystemPromptConfig,
    M: int,
    chat_template: str = "llama2_chat",
    example_id: int = 0,
    budget: int = CONTEXT_BUDGET_TOKENS,
    over_budget: str = "flag",
) -> SFTExample:
    """Turn a trajectory into one question/answer pair.

    The last check-in is the target; the others form the current-trajectory
    block. With ``over_budget="truncate"`` the oldest context check-ins are
    dropped (keeping one) until the estimate fits ``budget``.
    """
    if len(traj.checkins) < 2:
        raise ValueError(f"trajectory {traj.traj_id} is too short: need at least 2 check-ins")
    if chat_template not in CHAT_TEMPLATES:
        raise ValueError(f"unknown chat template {chat_template!r}")
    if over_budget not in ("flag", "truncate"):
        raise ValueError(f"unknown over-budget policy {over_budget!r}")
    if profile is not None and profile.user_id != traj.user_id:
        raise ValueError(f"profile of user {profile.user_id} given for trajectory of user {traj.user_id}")
    target = traj.checkins[-1]
    if not 0 <= target.poi_id < M:
        raise ValueError(f"target POI {target.poi_id} outside [0, {M})")

    system = build_system_prompt(profile, cfg)
    context = list(traj.checkins[:-1])
    target_text = TARGET_BLOCK.format(
        time=format_time(target.timestamp), user_id=traj.user_id, poi_id=target.poi_id
    )

    def make(ctx: Sequence) -> SFTExample:
        ex = SFTExample(
            example_id=example_id,
            user_id=traj.user_id,
            traj_id=traj.traj_id,
            system_prompt=system,
            input_prompt=_input_prompt(traj, ctx, M),
            target=target_text,
            next_timestamp=target.timestamp,
            next_poi_id=target.poi_id,
            token_estimate=0,
            chat_template=chat_template,
            context_checkins=len(ctx),
        )
        tokens = estimate_tokens(ex.text)
        return replace(ex, token_estimate=tokens, over_budget=tokens > budget)

    ex = make(context)
    while ex.over_budget and over_budget == "truncate" and len(context) > 1:
        context = context[1:]
        ex = make(context)
    if ex.over_budget:
        log.warning("example %d needs ~%d tokens (budget %d)", example_id, ex.token_estimate, budget)
    return ex


def build_sft_examples(
    trajs: Iterable[Trajectory],
    profiles: Mapping[int, UserProfile],
    cfg: SystemPromptConfig,
    M: int,
    chat_template: str = "llama2_chat",
    **kwargs,
) -> list[SFTExample]:
    """Examples for every trajectory with a context check-in; ids are sequential."""
    out: list[SFTExample] = []
    skipped = 0
    for t in trajs:
        if len(t.checkins) < 2:
            skipped += 1
            continue
        profile = profiles.get(t.user_id) if cfg.uses_profile else None
        if cfg.uses_profile and profile is None:
            raise KeyError(f"no profile for user {t.user_id}")
        out.append(build_sft_example(t, profile, cfg, M, chat_template, example_id=len(out), **kwargs))
    if skipped:
        log.info("skipped %d single check-in trajectories", skipped)
    return out


def inject_preference(profile: UserProfile, category_name: str) -> UserProfile:
    """Copy of ``profile`` with a short-term category preference appended to the summary."""
    if not category_name or not category_name.strip():
        raise ValueError("category_name must be non-empty")
    sentence = PREFERENCE_SENTENCE.format(category=category_name)
    return replace(profile, summary=f"{profile.summary} {sentence}")


def emit_sft_dataset(
    examples: Sequence[SFTExample],
    path: str | Path,
    include_manifest: bool = True,
    provenance: Mapping | None = None,
    cfg: SystemPromptConfig | None = None,
) -> list[Path]:
    """Write examples as JSON lines, plus ``<name>.manifest.json`` when asked."""
    if not examples:
        raise ValueError("no examples to emit")
    path = Path(path)
    try:
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for ex in examples:
                fh.write(json.dumps(ex.to_dict(), ensure_ascii=False, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"cannot write SFT dataset to {path}: {exc}") from exc
    written = [path]
    if include_manifest:
        manifest = {
            "dataset_file": path.name,
            "counts": {
                "examples": len(examples),
                "users": len({e.user_id for e in examples}),
                "over_budget": sum(e.over_budget for e in examples),
                "max_token_estimate": max(e.token_estimate for e in examples),
            },
            "chat_templates": sorted({e.chat_template for e in examples}),
            "system_prompt_config": asdict(cfg) if cfg else None,
            "provenance": dict(provenance or {}),
            "hyperparameters": TRAINING_HYPERPARAMETERS,
            "reference_targets": REFERENCE_TARGETS,
        }
        mpath = path.with_name(path.stem + ".manifest.json")
        mpath.write_text(json.dumps(manifest, ensure_ascii=False, indent=1, sort_keys=True) + "\n",
                         encoding="utf-8")
        written.append(mpath)
    return written


def load_sft_dataset(path: str | Path) -> list[SFTExample]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SFTExample.from_dict(json.loads(line)))
            except (ValueError, KeyError, TypeError, AttributeError, OverflowError) as exc:
                raise ValueError(f"{path}:{lineno}: bad SFT example: {exc}") from None
    return out
