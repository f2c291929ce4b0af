from __future__ import annotations

import itertools
import json
from dataclasses import fields, replace
from datetime import datetime, timezone

import pytest
from conftest import make_profile, make_traj

from poiprofile.profiler import UserProfile, checkin_sentence
from poiprofile.promptgen import (
    SFTExample,
    SystemPromptConfig,
    build_sft_example,
    build_sft_examples,
    build_system_prompt,
    emit_sft_dataset,
    estimate_tokens,
    inject_preference,
    load_sft_dataset,
    render_prompt,
)
from poiprofile.sessionize import Trajectory

ALL = SystemPromptConfig()
SUMMARY_ONLY = SystemPromptConfig(True, False, False, False)


def test_all_flags_in_order():
    text = build_system_prompt(make_profile(1, summary="The summary."), ALL)
    markers = ["Age:", "You have the following traits:", "You have the following preferences:",
               "You have the following routines:", "The summary."]
    positions = [text.index(m) for m in markers]
    assert positions == sorted(positions)
    assert text.startswith("You are user 1 and your basic information is as follows: Age: adult; "
                           "Gender: female; Education: college & beyond; SocioEco: middle.")
    assert text.endswith("The summary.")


def test_summary_only_is_the_summary():
    assert build_system_prompt(make_profile(summary="Just me."), SUMMARY_ONLY) == "Just me."


def test_routines_preferences_without_attributes():
    cfg = SystemPromptConfig(True, True, False, False)
    text = build_system_prompt(make_profile(), cfg)
    assert "Age:" not in text and "preferences" in text


def test_no_profile_config():
    cfg = SystemPromptConfig(False, False, False, False)
    assert build_system_prompt(None, cfg) == ""
    with pytest.raises(ValueError):
        SystemPromptConfig(False, True, False, False)
    with pytest.raises(ValueError):
        build_system_prompt(None, ALL)


def test_empty_lists_are_skipped():
    text = build_system_prompt(make_profile(preferences=(), routines=()), ALL)
    assert "preferences" not in text and "routines" not in text


def test_enabling_a_flag_only_adds_text():
    profile = make_profile(summary="Summary here.")
    flags = [c for c in itertools.product((False, True), repeat=3)]
    rendered = {f: build_system_prompt(profile, SystemPromptConfig(True, *f)) for f in flags}
    for a, b in itertools.product(flags, repeat=2):
        if all(x <= y for x, y in zip(a, b)):
            small, big = rendered[a], rendered[b]
            # every section of the smaller prompt survives verbatim and in order
            it = iter(big.split(" "))
            assert all(word in it for word in small.split(" "))
            assert len(big) >= len(small)


def test_three_checkins_two_sentences():
    traj = make_traj(0, 1, [4, 5, 6])
    ex = build_sft_example(traj, make_profile(1), ALL, M=100)
    assert ex.input_prompt.count(" visited POI id ") == 2
    assert ex.next_poi_id == 6 and ex.target.endswith("will visit POI id 6.")
    assert checkin_sentence(traj.checkins[-1]) not in ex.input_prompt
    assert checkin_sentence(traj.checkins[-1])[:-1] not in ex.text.split("[/INST]")[0]
    assert ex.context_checkins == 2


def test_range_text():
    ex = build_sft_example(make_traj(0, 1, [4, 5]), make_profile(1), ALL, M=100)
    assert "range from 0 to 99" in ex.input_prompt


def test_target_format():
    c = make_traj(0, 12, [3, 431]).checkins
    last = replace(c[1], timestamp=datetime(2012, 10, 1, 9, 0, tzinfo=timezone.utc))
    traj = Trajectory(0, 12, (replace(c[0], timestamp=datetime(2012, 10, 1, 8, 0, tzinfo=timezone.utc)), last))
    ex = build_sft_example(traj, make_profile(12), ALL, M=500)
    assert ex.target == "At 2012-10-01 09:00, user 12 will visit POI id 431."
    assert "at time 2012-10-01 09:00, which POI id will user 12 visit?" in ex.input_prompt


def test_llama2_wrapper_and_token_estimate():
    ex = build_sft_example(make_traj(0, 1, [4, 5]), make_profile(1, summary="S"), SUMMARY_ONLY, M=10)
    assert ex.prompt == f"<s>[INST] <<SYS>> S <</SYS>> {ex.input_prompt} [/INST]"
    assert ex.text == f"{ex.prompt} {ex.target} </s>"
    assert ex.token_estimate == -(-len(ex.text) // 4) == estimate_tokens(ex.text)
    assert render_prompt("", "u", "llama2_chat") == "<s>[INST] u [/INST]"
    assert render_prompt("s", "u", "plain") == "s\n\nu"


@pytest.mark.parametrize(
    "traj, kwargs",
    [
        (make_traj(0, 1, [4]), {}),
        (make_traj(0, 1, [4, 5]), {"chat_template": "chatml"}),
        (make_traj(0, 1, [4, 50]), {}),
        (make_traj(0, 2, [4, 5]), {}),
    ],
)
def test_invalid_examples(traj, kwargs):
    with pytest.raises(ValueError):
        build_sft_example(traj, make_profile(1), ALL, 10, **kwargs)


def test_budget_flag_and_truncation():
    traj = make_traj(0, 1, list(range(40)))
    flagged = build_sft_example(traj, make_profile(1), ALL, M=50, budget=500)
    assert flagged.over_budget and flagged.context_checkins == 39
    cut = build_sft_example(traj, make_profile(1), ALL, M=50, budget=500, over_budget="truncate")
    assert not cut.over_budget and cut.token_estimate <= 500
    assert 1 <= cut.context_checkins < 39
    # the newest context check-ins are the ones kept
    assert checkin_sentence(traj.checkins[-2])[:-1] in cut.input_prompt


def test_injection_appends_one_sentence():
    p = make_profile(summary="S")
    q = inject_preference(p, "Bar")
    assert q.summary == "S Today, this user really wants to visit a Bar place."
    assert p.summary == "S"
    changed = [f.name for f in fields(UserProfile) if getattr(p, f.name) != getattr(q, f.name)]
    assert changed == ["summary"]
    assert inject_preference(q, "Bar").summary.count("Today") == 2
    with pytest.raises(ValueError):
        inject_preference(p, " ")


def _examples():
    trajs = [make_traj(0, 1, [4, 5, 6]), make_traj(1, 2, [7]), make_traj(2, 2, [1, 2], start_hours=5)]
    return build_sft_examples(trajs, {1: make_profile(1), 2: make_profile(2)}, ALL, M=10)


def test_build_examples_skips_single_checkins():
    exs = _examples()
    assert [(e.example_id, e.traj_id) for e in exs] == [(0, 0), (1, 2)]
    with pytest.raises(KeyError):
        build_sft_examples([make_traj(0, 3, [1, 2])], {}, ALL, M=10)


def test_emit_is_deterministic_and_round_trips(tmp_path):
    exs = _examples()
    a = emit_sft_dataset(exs, tmp_path / "a" / "train.jsonl", provenance={"split": "train"}, cfg=ALL)
    b = emit_sft_dataset(exs, tmp_path / "b" / "train.jsonl", provenance={"split": "train"}, cfg=ALL)
    assert [p.name for p in a] == ["train.jsonl", "train.manifest.json"]
    for x, y in zip(a, b):
        assert x.read_bytes() == y.read_bytes()
    assert len(a[0].read_text().splitlines()) == 2
    assert load_sft_dataset(a[0]) == exs
    manifest = json.loads(a[1].read_text())
    assert manifest["hyperparameters"]["lora_rank"] == 8
    assert manifest["hyperparameters"]["context_length"] == 16384
    assert manifest["counts"]["examples"] == 2
    line = json.loads(a[0].read_text().splitlines()[0])
    assert {"system", "input", "target", "prompt", "text"} <= set(line)
    with pytest.raises(ValueError):
        emit_sft_dataset([], tmp_path / "c.jsonl")


def test_example_dict_round_trip():
    ex = _examples()[0]
    assert SFTExample.from_dict(json.loads(json.dumps(ex.to_dict()))) == ex
