from __future__ import annotations

import json
import shutil
from pathlib import Path

import pytest
from conftest import make_profile, make_traj
from fastapi.testclient import TestClient

from poiprofile.cli import main, run_subcommand
from poiprofile.llm import BackendError, ScriptedBackend
from poiprofile.pipeline import Pipeline, PipelineConfig, PrerequisiteError
from poiprofile.promptgen import SystemPromptConfig, build_sft_examples, emit_sft_dataset
from poiprofile.service import create_app

CONFIG = Path(__file__).resolve().parents[1] / "configs" / "synthetic.yaml"


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    out = tmp_path_factory.mktemp("pipeline")
    assert main(["-c", str(CONFIG), "-o", str(out), "run-all"]) == 0
    return out


@pytest.fixture
def pipe(built, tmp_path):
    out = tmp_path / "out"
    shutil.copytree(built, out)
    cfg = PipelineConfig.load(CONFIG)
    cfg.output_dir = out
    return Pipeline(cfg)


def test_eval_prints_two_of_eight(tmp_path, capsys):
    trajs = [make_traj(k, k % 2, [k % 10, (k + 3) % 10], start_hours=k) for k in range(8)]
    exs = build_sft_examples(trajs, {0: make_profile(0), 1: make_profile(1)}, SystemPromptConfig(), M=10)
    emit_sft_dataset(exs, tmp_path / "examples.jsonl")
    with (tmp_path / "preds.jsonl").open("w") as fh:
        for ex in exs:
            guess = ex.next_poi_id if ex.example_id in (2, 5) else (ex.next_poi_id + 1) % 10
            fh.write(json.dumps({"example_id": ex.example_id, "raw_output": f"... POI id {guess}."}) + "\n")
    code = main(["-o", str(tmp_path / "o"), "eval", "--predictions", str(tmp_path / "preds.jsonl"),
                 "--examples", str(tmp_path / "examples.jsonl"), "--num-pois", "10"])
    assert code == 0
    assert capsys.readouterr().out.strip() == "0.2500"


def test_full_run_artifacts(built):
    for rel in ("dataset/index.json", "splits/manifest.json", "profiles", "judge/report.md",
                "sft/train.jsonl", "sft/train.manifest.json", "sft/test.jsonl", "predictions/test.jsonl",
                "eval/report.json", "eval/coldstart.md", "inject/bar.json"):
        assert (built / rel).exists(), rel
    report = json.loads((built / "eval" / "report.json").read_text())
    assert 0.0 <= report["acc_at_1"] <= 1.0 and report["n"] > 0


def test_missing_prerequisite_is_named(tmp_path, capsys):
    assert main(["-c", str(CONFIG), "-o", str(tmp_path), "emit-sft"]) == 2
    assert "index.json" in capsys.readouterr().err
    with pytest.raises(PrerequisiteError):
        Pipeline(PipelineConfig(output_dir=tmp_path)).ingest()


def test_config_with_missing_dataset(tmp_path):
    cfg = tmp_path / "c.yaml"
    cfg.write_text("dataset: {path: nowhere.tsv}\n")
    assert main(["-c", str(cfg), "ingest"]) == 2


def test_backend_failure_propagates(pipe):
    def boom(messages, i):
        raise BackendError("endpoint down")

    failing = Pipeline(pipe.cfg, backends={"predictor": ScriptedBackend(boom)})
    with pytest.raises(BackendError):
        run_subcommand("predict", failing)


def test_stage_rerun_is_byte_identical(pipe):
    before = (pipe.out / "sft" / "test.jsonl").read_bytes()
    pipe.emit_sft()
    assert (pipe.out / "sft" / "test.jsonl").read_bytes() == before


# -- REST service ----------------------------------------------------------------

def client_for(pipe, predictor=None):
    return TestClient(create_app(pipe, predictor))


def test_users_and_profile(pipe):
    c = client_for(pipe)
    users = c.get("/users").json()
    assert users == sorted(users) and len(users) > 0
    prof = c.get(f"/users/{users[0]}/profile").json()
    assert prof["user_id"] == users[0] and prof["version"] == 1
    assert c.get("/users/99999/profile").status_code == 404


def test_put_is_version_checked(pipe):
    c = client_for(pipe)
    uid = c.get("/users").json()[0]
    prof = c.get(f"/users/{uid}/profile").json()
    edited = {**prof, "user_profile": "Edited by hand."}
    r = c.put(f"/users/{uid}/profile", json=edited)
    assert r.status_code == 200 and r.json()["version"] == 2
    assert r.json()["user_profile"] == "Edited by hand."
    stale = c.put(f"/users/{uid}/profile", json={**prof, "user_profile": "late"})
    assert stale.status_code == 409
    assert stale.json()["detail"] == {"error": "stale-version", "current_version": 2}
    no_version = {k: v for k, v in edited.items() if k != "version"}
    assert c.put(f"/users/{uid}/profile", json=no_version).status_code == 428
    bad = {**prof, "version": 2, "traits": ["friendly"] * 5}
    r = c.put(f"/users/{uid}/profile", json=bad)
    assert r.status_code == 422 and r.json()["detail"]["field"] == "traits[0]"
    assert c.get(f"/users/{uid}/profile").json()["version"] == 2


def test_inject_preference_endpoint(pipe):
    c = client_for(pipe)
    uid = c.get("/users").json()[0]
    r = c.post(f"/users/{uid}/inject-preference", json={"category": "Bar"})
    assert r.status_code == 200
    assert r.json()["user_profile"].endswith("Today, this user really wants to visit a Bar place.")
    assert c.post(f"/users/{uid}/inject-preference", json={"category": "Bar", "version": 1}).status_code == 409
    assert c.post(f"/users/{uid}/inject-preference", json={"category": " "}).status_code == 422


def test_trajectories_and_predict(pipe):
    c = client_for(pipe)
    uid = c.get("/users").json()[0]
    trajs = c.get(f"/users/{uid}/trajectories").json()
    assert {t["split"] for t in trajs} <= {"train", "validation", "test"}
    multi = next(t for t in trajs if len(t["checkins"]) >= 2)
    r = c.post(f"/users/{uid}/predict", json={"trajectory_id": multi["traj_id"]})
    body = r.json()
    assert r.status_code == 200
    assert body["parsed_poi_id"] is not None
    assert body["raw_output"].endswith(f"POI id {body['parsed_poi_id']}.")
    assert body["category_name"] == pipe.dataset("t").poi_categories()[body["parsed_poi_id"]]
    other = next(t for t in pipe.splits("t").train if t.user_id != uid)
    assert c.post(f"/users/{uid}/predict", json={"trajectory_id": other.traj_id}).status_code == 422
    assert c.post(f"/users/{uid}/predict", json={"trajectory_id": 10**6}).status_code == 404


def test_edit_then_predict_loop_uses_one_call_each(pipe):
    predictor = ScriptedBackend(["At t, user u will visit POI id 0."])
    c = client_for(pipe, predictor)
    uid = c.get("/users").json()[0]
    prof = c.get(f"/users/{uid}/profile").json()
    traj = next(t for t in c.get(f"/users/{uid}/trajectories").json() if len(t["checkins"]) >= 2)
    dataset_before = (pipe.out / "dataset" / "checkins.jsonl").read_bytes()
    splits_before = (pipe.out / "splits" / "train.jsonl").read_bytes()

    assert c.put(f"/users/{uid}/profile", json={**prof, "user_profile": "Now loves bars."}).status_code == 200
    body = c.post(f"/users/{uid}/predict", json={"trajectory_id": traj["traj_id"]}).json()
    assert predictor.calls == 1
    assert "Now loves bars." in predictor.requests[0][0]["content"]
    assert body["profile_version"] == 2 and body["parsed_poi_id"] == 0
    assert (pipe.out / "dataset" / "checkins.jsonl").read_bytes() == dataset_before
    assert (pipe.out / "splits" / "train.jsonl").read_bytes() == splits_before


def test_backend_failure_exit_code(pipe, tmp_path, capsys):
    cfg = tmp_path / "down.yaml"
    cfg.write_text(
        f"output_dir: {pipe.out}\n"
        "backends:\n  predictor: {kind: http, base_url: 'http://127.0.0.1:9/v1', timeout: 2}\n"
    )
    assert main(["-c", str(cfg), "predict"]) == 3
    assert "backend failure" in capsys.readouterr().err


def test_reference_count_mismatch_is_reported(pipe, caplog):
    manifest = json.loads((pipe.out / "splits" / "manifest.json").read_text())
    pipe.cfg.reference_counts = {"train": manifest["counts"]["train"], "users": 10**4, "bogus": 1}
    with caplog.at_level("WARNING"):
        pipe.split()
    report = json.loads((pipe.out / "splits" / "reference_check.json").read_text())
    assert report["mismatches"] == ["bogus", "users"]
    assert report["counts"]["train"]["delta"] == 0
    assert report["counts"]["bogus"]["observed"] is None
    assert "count mismatch for users" in caplog.text
