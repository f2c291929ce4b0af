"""``poiprofile`` command line: one subcommand per pipeline stage."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .ingest import IngestError, PolygonError
from .llm import BackendError
from .pipeline import Pipeline, PipelineConfig, PrerequisiteError
from .profiler import HallucinationExhaustedError

STAGES = ("ingest", "sessionize", "split", "profile", "judge", "emit-sft", "predict", "eval",
          "coldstart", "inject", "trajsim-bench", "serve", "run-all")

log = logging.getLogger("poiprofile")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="poiprofile", description=__doc__)
    p.add_argument("-c", "--config", type=Path, help="YAML pipeline config")
    p.add_argument("-o", "--output-dir", type=Path, help="override output_dir from the config")
    p.add_argument("-v", "--verbose", action="count", default=0)
    sub = p.add_subparsers(dest="command", required=True)
    for name in STAGES:
        s = sub.add_parser(name)
        if name == "profile":
            s.add_argument("--force", action="store_true", help="discard stored profiles first")
        if name == "eval":
            s.add_argument("--predictions", type=Path)
            s.add_argument("--examples", type=Path, help="SFT JSONL holding the ground truth")
            s.add_argument("--num-pois", type=int, help="M; defaults to the ingested dataset")
        if name == "inject":
            s.add_argument("--category", action="append", help="repeatable; defaults to the config list")
        if name == "serve":
            s.add_argument("--host", default="127.0.0.1")
            s.add_argument("--port", type=int, default=8000)
    return p


def _load_config(args) -> PipelineConfig:
    cfg = PipelineConfig.load(args.config) if args.config else PipelineConfig()
    if args.output_dir:
        cfg.output_dir = args.output_dir
    return cfg


def run_subcommand(name: str, pipe: Pipeline, args: argparse.Namespace | None = None) -> int:
    args = args or argparse.Namespace()
    if name == "ingest":
        d = pipe.ingest()
        print(f"users={d.U} pois={d.M} checkins={len(d.checkins)} malformed={len(d.malformed_rows)}")
    elif name == "sessionize":
        print(f"trajectories={len(pipe.sessionize())}")
    elif name == "split":
        print(json.dumps(pipe.split().counts, sort_keys=True))
    elif name == "profile":
        print(f"profiles={len(pipe.profile(force=getattr(args, 'force', False)))}")
    elif name == "judge":
        print(json.dumps(pipe.judge(), sort_keys=True))
    elif name == "emit-sft":
        print(json.dumps(pipe.emit_sft(), sort_keys=True))
    elif name == "predict":
        print(f"predictions={len(pipe.predict())}")
    elif name == "eval":
        report = pipe.eval(getattr(args, "predictions", None), getattr(args, "examples", None),
                           getattr(args, "num_pois", None))
        print(f"{report['acc_at_1']:.4f}")
    elif name == "coldstart":
        for group, row in pipe.coldstart()["groups"].items():
            acc = "n/a" if row["acc_at_1"] is None else f"{row['acc_at_1']:.4f}"
            print(f"{group}\t{row['n']}\t{acc}")
    elif name == "inject":
        for cat, r in pipe.inject(getattr(args, "category", None)).items():
            print(f"{cat}\t{r['before']}\t{r['after']}\t{r['delta']:+d}")
    elif name == "trajsim-bench":
        report = pipe.trajsim_bench()
        print(report.to_markdown())
        ok = report.dtw_calls_ok and report.dtw_growth_ok and report.profiling_calls_ok
        return 0 if ok and report.status == "ok" else 1
    elif name == "serve":
        import uvicorn

        from .service import create_app

        uvicorn.run(create_app(pipe), host=args.host, port=args.port)
    elif name == "run-all":
        pipe.run_all()
        print(f"{pipe.out / 'eval' / 'report.json'}")
    else:
        raise ValueError(f"unknown subcommand {name!r}")
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING - 10 * args.verbose,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        pipe = Pipeline(_load_config(args))
        return run_subcommand(args.command, pipe, args)
    except (PrerequisiteError, IngestError, PolygonError) as exc:
        print(f"poiprofile {args.command}: {exc}", file=sys.stderr)
        return 2
    except (BackendError, HallucinationExhaustedError) as exc:
        print(f"poiprofile {args.command}: backend failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
