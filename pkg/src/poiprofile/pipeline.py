"""File-based pipeline stages.

Each stage reads the artifacts of earlier stages from the output directory and
writes its own; nothing is passed in memory between stages. Layout::

    dataset/    checkins.jsonl, index.json
    sessions/   trajectories.jsonl
    splits/     train|validation|test.jsonl, manifest.json
    profiles/   user_<id>.v<n>.json, distribution.json, distribution.md
    judge/      scores.jsonl, report.json, report.md
    sft/        train|validation|test.jsonl (+ .manifest.json)
    predictions/test.jsonl
    eval/       records.jsonl, report.json, report.md, coldstart.json, coldstart.md
    inject/     <category>.json, <category>.predictions.jsonl
    bench/      report.json, report.md
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import evaluation, ingest, judge, profiler, promptgen, sessionize, trajsim
from .llm import ChatBackend, chat_backend_from_config, embedding_backend_from_config, is_deterministic

log = logging.getLogger(__name__)


class PrerequisiteError(FileNotFoundError):
    """A stage was run before the stage producing its inputs."""


@dataclass
class PipelineConfig:
    dataset_path: Path | None = None
    dataset_format: str = "foursquare_tsv"
    boundary_path: Path | None = None
    split: sessionize.SplitSpec = field(default_factory=sessionize.foursquare_protocol)
    profile_backend: dict = field(default_factory=lambda: {"kind": "mock"})
    judge_backends: list[dict] = field(default_factory=lambda: [
        {"kind": "mock", "seed": 1, "name": "mock-judge-a"},
        {"kind": "mock", "seed": 2, "name": "mock-judge-b"},
    ])
    predictor_backend: dict = field(default_factory=lambda: {"kind": "mock"})
    embedding_backend: dict = field(default_factory=lambda: {"kind": "mock"})
    system_prompt: promptgen.SystemPromptConfig = field(default_factory=promptgen.SystemPromptConfig)
    chat_template: str = "llama2_chat"
    over_budget: str = "flag"
    output_dir: Path = Path("out")
    seed: int = 0
    max_retries: int = 3
    parallelism: int = 4
    inject_categories: list[str] = field(default_factory=lambda: ["Bar"])
    bench: dict = field(default_factory=dict)
    # published statistics to compare against, e.g. {"users": ..., "pois": ..., "test": ...}
    reference_counts: dict[str, int] = field(default_factory=dict)

    @classmethod
    def from_mapping(cls, obj: Mapping[str, Any], base_dir: Path | None = None) -> "PipelineConfig":
        base_dir = base_dir or Path.cwd()

        def path(value):
            if value is None:
                return None
            p = Path(value)
            return (p if p.is_absolute() else base_dir / p).resolve()

        ds = obj.get("dataset") or {}
        backends = obj.get("backends") or {}
        cfg = cls(
            dataset_path=path(ds.get("path")),
            dataset_format=ds.get("format", "foursquare_tsv"),
            boundary_path=path(ds.get("boundary")),
            split=sessionize.SplitSpec.from_dict(obj.get("split") or {}),
            system_prompt=promptgen.SystemPromptConfig.from_dict(obj.get("system_prompt")),
            chat_template=obj.get("chat_template", "llama2_chat"),
            over_budget=obj.get("over_budget", "flag"),
            output_dir=path(obj.get("output_dir", "out")),
            seed=int(obj.get("seed", 0)),
            max_retries=int(obj.get("max_retries", 3)),
            parallelism=int(obj.get("parallelism", 4)),
            inject_categories=list(obj.get("inject_categories", ["Bar"])),
            bench=dict(obj.get("bench") or {}),
            reference_counts={str(k): int(v) for k, v in (ds.get("reference_counts") or {}).items()},
        )
        if "profile" in backends:
            cfg.profile_backend = backends["profile"]
        if "judges" in backends:
            cfg.judge_backends = list(backends["judges"])
        if "predictor" in backends:
            cfg.predictor_backend = backends["predictor"]
        if "embedding" in backends:
            cfg.embedding_backend = backends["embedding"]
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> "PipelineConfig":
        path = Path(path)
        obj = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
        cfg = cls.from_mapping(obj, base_dir=path.parent)
        for p in (cfg.dataset_path, cfg.boundary_path):
            if p is not None and not p.exists():
                raise PrerequisiteError(f"config {path}: {p} does not exist")
        return cfg


def _require(path: Path, stage: str) -> Path:
    if not path.exists():
        raise PrerequisiteError(f"{stage}: missing prerequisite {path} (run the producing stage first)")
    return path


def _dump(obj: Any, path: Path) -> Path:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, ensure_ascii=False, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    return path


def _slug(text: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", text.lower()).strip("-") or "category"


class Pipeline:
    def __init__(self, cfg: PipelineConfig, backends: Mapping[str, Any] | None = None):
        self.cfg = cfg
        self.out = Path(cfg.output_dir)
        self._backends = dict(backends or {})

    # backends are built lazily so stages without model calls never touch the network
    def backend(self, role: str) -> Any:
        if role not in self._backends:
            cfg = self.cfg
            if role == "profile":
                b = chat_backend_from_config(cfg.profile_backend, cfg.seed)
            elif role == "judges":
                b = [chat_backend_from_config(j, cfg.seed) for j in cfg.judge_backends]
            elif role == "predictor":
                b = chat_backend_from_config(cfg.predictor_backend, cfg.seed)
            elif role == "embedding":
                b = embedding_backend_from_config(cfg.embedding_backend, cfg.seed)
            else:
                raise KeyError(role)
            self._backends[role] = b
        return self._backends[role]

    # -- artifact accessors --

    @property
    def dataset_dir(self) -> Path:
        return self.out / "dataset"

    def dataset(self, stage: str) -> ingest.Dataset:
        _require(self.dataset_dir / "index.json", stage)
        return ingest.read_dataset(self.dataset_dir)

    def splits(self, stage: str) -> sessionize.DatasetSplits:
        _require(self.out / "splits" / "manifest.json", stage)
        return sessionize.read_splits(self.out / "splits")

    def profile_store(self) -> profiler.ProfileStore:
        return profiler.ProfileStore(self.out / "profiles")

    def profiles(self, stage: str) -> dict[int, profiler.UserProfile]:
        _require(self.out / "profiles", stage)
        found = self.profile_store().latest()
        if not found:
            raise PrerequisiteError(f"{stage}: no profiles in {self.out / 'profiles'} (run `profile` first)")
        return found

    def sft_examples(self, split: str, stage: str) -> list[promptgen.SFTExample]:
        return promptgen.load_sft_dataset(_require(self.out / "sft" / f"{split}.jsonl", stage))

    # -- stages --

    def ingest(self) -> ingest.Dataset:
        if self.cfg.dataset_path is None:
            raise PrerequisiteError("ingest: no dataset path configured")
        d = ingest.parse_checkin_file(self.cfg.dataset_path, self.cfg.dataset_format)
        if self.cfg.boundary_path is not None:
            d = ingest.filter_by_boundary(d, ingest.BoundaryPolygon.from_geojson(self.cfg.boundary_path))
        ingest.write_dataset(d, self.dataset_dir)
        return d

    def sessionize(self) -> list[sessionize.Trajectory]:
        d = self.dataset("sessionize")
        trajs = sessionize.sessionize(d, self.cfg.split.delta_t)
        kept = sessionize.filter_sessions(trajs, self.cfg.split)
        path = self.out / "sessions" / "trajectories.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        sessionize.write_trajectories(kept, path)
        _dump({"sessions": len(trajs), "kept": len(kept)}, self.out / "sessions" / "counts.json")
        return kept

    def split(self) -> sessionize.DatasetSplits:
        path = _require(self.out / "sessions" / "trajectories.jsonl", "split")
        splits = sessionize.split(sessionize.read_trajectories(path), self.cfg.split)
        sessionize.write_splits(splits, self.out / "splits")
        if self.cfg.reference_counts:
            self._check_reference_counts(splits)
        return splits

    def _check_reference_counts(self, splits: sessionize.DatasetSplits) -> dict:
        """Compare observed counts with ``reference_counts`` and report any mismatch."""
        d = self.dataset("split")
        observed = {"users": d.U, "pois": d.M, "checkins": len(d.checkins), **splits.counts}
        rows = {}
        for key, expected in sorted(self.cfg.reference_counts.items()):
            got = observed.get(key)
            rows[key] = {"expected": expected, "observed": got,
                         "delta": None if got is None else got - expected}
            if got != expected:
                log.warning("count mismatch for %s: expected %d, observed %s", key, expected, got)
        report = {"counts": rows, "mismatches": sorted(k for k, r in rows.items() if r["delta"] != 0)}
        _dump(report, self.out / "splits" / "reference_check.json")
        return report

    def profile(self, force: bool = False) -> dict[int, profiler.UserProfile]:
        splits = self.splits("profile")
        store = self.profile_store()
        if force:
            for p in store.directory.glob("user_*.v*.json"):
                p.unlink()
        histories = profiler.histories_by_user(splits.train)
        todo = {u: h for u, h in histories.items() if not store.current_version(u)}
        backend = self.backend("profile")
        # mock runs stamp profiles with the last training check-in so reruns are byte-identical
        stamp = (lambda uid: histories[uid][-1].end) if is_deterministic(backend) else None
        generated = profiler.generate_profiles(
            todo, backend, self.cfg.max_retries, self.cfg.parallelism, now=stamp
        )
        for uid in sorted(generated):
            store.save(generated[uid])
        latest = store.latest()
        report = profiler.profile_distribution_report(latest.values())
        _dump(report.to_dict(), self.out / "profiles" / "distribution.json")
        (self.out / "profiles" / "distribution.md").write_text(report.to_markdown(), encoding="utf-8")
        return latest

    def judge(self) -> dict[str, dict[str, float]]:
        profiles = self.profiles("judge")
        scores = judge.judge_profiles(profiles.values(), self.backend("judges"), self.cfg.max_retries)
        (self.out / "judge").mkdir(parents=True, exist_ok=True)
        judge.write_scores(scores, self.out / "judge" / "scores.jsonl")
        agg = judge.aggregate_judge_scores(scores)
        _dump(agg, self.out / "judge" / "report.json")
        (self.out / "judge" / "report.md").write_text(judge.judge_report_markdown(agg), encoding="utf-8")
        return agg

    def _build_examples(self, trajs, profiles, M) -> list[promptgen.SFTExample]:
        return promptgen.build_sft_examples(
            trajs, profiles, self.cfg.system_prompt, M, self.cfg.chat_template, over_budget=self.cfg.over_budget
        )

    def emit_sft(self) -> dict[str, int]:
        d = self.dataset("emit-sft")
        splits = self.splits("emit-sft")
        profiles = self.profiles("emit-sft") if self.cfg.system_prompt.uses_profile else {}
        counts = {}
        for name in ("train", "validation", "test"):
            examples = self._build_examples(getattr(splits, name), profiles, d.M)
            counts[name] = len(examples)
            if not examples:
                log.warning("emit-sft: %s split produced no examples", name)
                continue
            promptgen.emit_sft_dataset(
                examples,
                self.out / "sft" / f"{name}.jsonl",
                include_manifest=True,
                provenance={"split": name, "split_spec": splits.provenance.to_dict(),
                            "split_counts": splits.counts, "M": d.M, "U": d.U},
                cfg=self.cfg.system_prompt,
            )
        return counts

    def _predict(self, examples: Sequence[promptgen.SFTExample], backend: ChatBackend) -> list[dict]:
        rows = []
        for ex in examples:
            raw = backend.complete(ex.messages(), json_mode=False)
            rows.append({"example_id": ex.example_id, "user_id": ex.user_id, "traj_id": ex.traj_id,
                         "raw_output": raw})
        return rows

    def predict(self) -> list[dict]:
        examples = self.sft_examples("test", "predict")
        rows = self._predict(examples, self.backend("predictor"))
        path = self.out / "predictions" / "test.jsonl"
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", encoding="utf-8", newline="\n") as fh:
            for r in rows:
                fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
        return rows

    def score(self, raw_rows: Sequence[Mapping], examples: Sequence[promptgen.SFTExample],
              M: int) -> list[evaluation.PredictionRecord]:
        by_id = {ex.example_id: ex for ex in examples}
        records = []
        for row in raw_rows:
            ex = by_id.get(row["example_id"])
            if ex is None:
                raise KeyError(f"prediction for unknown example {row['example_id']}")
            records.append(evaluation.score_prediction(ex.example_id, row["raw_output"], ex.next_poi_id, M,
                                                       user_id=ex.user_id))
        return records

    def eval(self, predictions: Path | None = None, examples: Path | None = None,
             M: int | None = None) -> dict:
        pred_path = _require(predictions or self.out / "predictions" / "test.jsonl", "eval")
        ex_path = _require(examples or self.out / "sft" / "test.jsonl", "eval")
        if M is None:
            M = self.dataset("eval").M
        records = self.score(evaluation.read_raw_predictions(pred_path), promptgen.load_sft_dataset(ex_path), M)
        acc = evaluation.accuracy_at_1(records)
        report = {"n": len(records), "correct": sum(r.correct for r in records),
                  "unparsed": sum(r.parsed_poi_id is None for r in records), "acc_at_1": acc}
        out = self.out / "eval"
        out.mkdir(parents=True, exist_ok=True)
        evaluation.write_predictions(records, out / "records.jsonl")
        _dump(report, out / "report.json")
        (out / "report.md").write_text(
            "| Examples | Correct | Unparsed | Acc@1 |\n|---:|---:|---:|---:|\n"
            f"| {report['n']} | {report['correct']} | {report['unparsed']} | {acc:.4f} |\n",
            encoding="utf-8",
        )
        return report

    def coldstart(self) -> dict:
        splits = self.splits("coldstart")
        path = _require(self.out / "eval" / "records.jsonl", "coldstart")
        with path.open(encoding="utf-8") as fh:
            records = [evaluation.PredictionRecord(**json.loads(line)) for line in fh if line.strip()]
        grouping = evaluation.group_users_by_activity(splits.train)
        report = evaluation.cold_start_report(records, grouping)
        result = {"groups": report, "thresholds": grouping.thresholds(), "n_extreme": grouping.n_extreme}
        _dump(result, self.out / "eval" / "coldstart.json")
        (self.out / "eval" / "coldstart.md").write_text(evaluation.cold_start_markdown(report), encoding="utf-8")
        return result

    def inject(self, categories: Sequence[str] | None = None) -> dict[str, dict]:
        d = self.dataset("inject")
        splits = self.splits("inject")
        profiles = self.profiles("inject")
        base = self.sft_examples("test", "inject")
        base_rows = evaluation.read_raw_predictions(_require(self.out / "predictions" / "test.jsonl", "inject"))
        before = self.score(base_rows, base, d.M)
        poi_categories = d.poi_categories()
        backend = self.backend("predictor")
        results = {}
        for category in categories or self.cfg.inject_categories:
            injected = {u: promptgen.inject_preference(p, category) for u, p in profiles.items()}
            examples = self._build_examples(splits.test, injected, d.M)
            rows = self._predict(examples, backend)
            after = self.score(rows, examples, d.M)
            shift = evaluation.category_shift_report(before, after, poi_categories, category)
            results[category] = {"category": category, "before": shift.count_before,
                                 "after": shift.count_after, "delta": shift.delta,
                                 "n": len(after)}
            slug = _slug(category)
            _dump(results[category], self.out / "inject" / f"{slug}.json")
            with (self.out / "inject" / f"{slug}.predictions.jsonl").open("w", encoding="utf-8", newline="\n") as fh:
                for r in rows:
                    fh.write(json.dumps(r, ensure_ascii=False, sort_keys=True) + "\n")
        return results

    def trajsim_bench(self) -> trajsim.BenchmarkReport:
        bench = self.cfg.bench
        report = trajsim.complexity_benchmark(
            sizes=bench.get("sizes", (50, 100, 200)),
            k=bench.get("k", 8),
            users=bench.get("users", (50, 100)),
            seed=self.cfg.seed,
        )
        out = self.out / "bench"
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.json").write_text(report.to_json(), encoding="utf-8")
        (out / "report.md").write_text(report.to_markdown(), encoding="utf-8")
        return report

    def run_all(self) -> None:
        for stage in ("ingest", "sessionize", "split", "profile", "judge", "emit_sft", "predict",
                      "eval", "coldstart", "inject"):
            log.info("stage %s", stage)
            getattr(self, stage)()


def find_trajectory(splits: sessionize.DatasetSplits, traj_id: int) -> tuple[str, sessionize.Trajectory]:
    for name in ("train", "validation", "test"):
        for t in getattr(splits, name):
            if t.traj_id == traj_id:
                return name, t
    raise KeyError(f"no trajectory {traj_id}")

