from __future__ import annotations

import json
import random
import threading
from collections import Counter
from dataclasses import replace
from datetime import datetime, timezone

import pytest
from conftest import T0, VALID_PROFILE_JSON, make_checkin, make_profile, make_traj

from poiprofile.llm import MockBackend, ScriptedBackend
from poiprofile.profiler import (
    ATTRIBUTE_AXES,
    BFI_AXES,
    HallucinationExhaustedError,
    ProfileStore,
    ProfileValidationError,
    StaleVersionError,
    UserProfile,
    build_profile_prompt,
    extract_json_object,
    generate_profile,
    generate_profiles,
    histories_by_user,
    profile_distribution_report,
    validate_profile_json,
)
from poiprofile.sessionize import Trajectory

NOW = datetime(2012, 11, 1, tzinfo=timezone.utc)


def test_prompt_opening_clause():
    prompt = build_profile_prompt(42, [make_traj(0, 42, [3])])
    assert prompt.startswith("Given the following check-ins of user 42, generate")


def test_prompt_checkin_record():
    c = make_checkin(5, 7, 0, cat=12, name="Coffee Shop")
    c = replace(c, timestamp=datetime(2012, 4, 13, 8, 0, tzinfo=timezone.utc))
    prompt = build_profile_prompt(5, [Trajectory(0, 5, (c,))])
    assert "visited POI id 7 which is a/an Coffee Shop with category id 12" in prompt
    assert prompt.endswith(
        '"user_profile": "200-word user profile summary"} '
        "At 2012-04-13 08:00, user 5 visited POI id 7 which is a/an Coffee Shop with category id 12."
    )


def test_prompt_orders_checkins_across_trajectories():
    late = make_traj(1, 3, [8, 9], start_hours=50)
    early = make_traj(0, 3, [1, 2])
    prompt = build_profile_prompt(3, [late, early])
    assert prompt.index("POI id 1 ") < prompt.index("POI id 2 ") < prompt.index("POI id 8 ")
    assert prompt.count("visited POI id") == 4
    assert prompt.endswith("category id 0.") and not prompt.endswith("..")


def test_prompt_rejects_foreign_or_empty_history():
    with pytest.raises(ValueError):
        build_profile_prompt(1, [])
    with pytest.raises(ValueError):
        build_profile_prompt(1, [make_traj(0, 2, [1])])


def test_happy_path_attempts_1():
    backend = ScriptedBackend([json.dumps(VALID_PROFILE_JSON)])
    p = generate_profile(1, [make_traj(0, 1, [1, 2])], backend, now=NOW)
    assert p.attempts == 1 and backend.calls == 1
    assert p.traits[0] == "extroverted" and p.traits[3] == "emotionally stable"
    assert p.attributes == ("adult", "male", "college & beyond", "middle")
    assert p.preferences == ("coffee", "bars")
    assert p.summary == "A friendly commuter who likes coffee."
    assert p.generated_at == NOW


def test_retry_after_bad_key():
    bad = {k: v for k, v in VALID_PROFILE_JSON.items() if k != "routines"}
    backend = ScriptedBackend([json.dumps(bad), json.dumps(VALID_PROFILE_JSON)])
    p = generate_profile(1, [make_traj(0, 1, [1, 2])], backend, now=NOW)
    assert p.attempts == 2 and backend.calls == 2


def test_hallucinated_trait_exhausts_retries():
    reply = json.dumps({**VALID_PROFILE_JSON, "traits": ["friendly", *VALID_PROFILE_JSON["traits"][1:]]})
    backend = ScriptedBackend(lambda messages, i: reply)
    with pytest.raises(HallucinationExhaustedError, match="hallucination-exhausted") as err:
        generate_profile(1, [make_traj(0, 1, [1, 2])], backend, max_retries=3)
    assert err.value.field == "traits[0]"
    assert err.value.attempts == 3 and backend.calls == 3
    assert "friendly" in str(err.value)


@pytest.mark.parametrize(
    "mutate, field",
    [
        (lambda o: o.pop("user_profile"), "user_profile"),
        (lambda o: o.__setitem__("traits", o["traits"][:4]), "traits"),
        (lambda o: o.__setitem__("attributes", ["teen", "male", "high school", "middle"]), "attributes[0]"),
        (lambda o: o.__setitem__("attributes", ["adult", "male", "phd", "middle"]), "attributes[2]"),
        (lambda o: o.__setitem__("preferences", "coffee"), "preferences"),
        (lambda o: o.__setitem__("user_profile", "   "), "user_profile"),
        (lambda o: o.__setitem__("traits", [1, 2, 3, 4, 5]), "traits[0]"),
    ],
)
def test_validation_names_the_field(mutate, field):
    obj = json.loads(json.dumps(VALID_PROFILE_JSON))
    mutate(obj)
    with pytest.raises(ProfileValidationError) as err:
        validate_profile_json(obj)
    assert err.value.field == field


def test_validation_normalizes_case_whitespace_and_aliases():
    obj = {**VALID_PROFILE_JSON, "traits": ["  INTROVERTED", "Antagonistic", "unconscientious ",
                                            "Neurotic", "Open"],
           "attributes": ["Older  Adult", "FEMALE", "Some Schooling", "Upper"]}
    out = validate_profile_json(obj)
    assert out["traits"] == ("introverted", "antagonistic", "unconscientious", "neurotic", "open to experience")
    assert out["attributes"] == ("older adult", "female", "some schooling", "upper")


def test_extract_json_from_fenced_and_chatty_replies():
    body = json.dumps(VALID_PROFILE_JSON)
    assert extract_json_object("```json\n" + body + "\n```") == VALID_PROFILE_JSON
    assert extract_json_object("Sure! Here it is: " + body + " Hope it helps.") == VALID_PROFILE_JSON
    with pytest.raises(ProfileValidationError):
        extract_json_object("no json here")


def test_mock_profiles_are_reproducible():
    history = [make_traj(0, 4, [1, 2, 3]), make_traj(1, 4, [2, 5], start_hours=40)]
    a = generate_profile(4, history, MockBackend(seed=3), now=NOW)
    b = generate_profile(4, history, MockBackend(seed=3), now=NOW)
    assert a.to_json() == b.to_json()
    assert a.attempts == 1


def test_generate_profiles_one_call_per_user():
    trajs = [make_traj(k, k % 7, [k, k + 1], start_hours=k) for k in range(30)]
    backend = MockBackend(seed=1)
    out = generate_profiles(histories_by_user(trajs), backend, parallelism=4, now=lambda uid: NOW)
    assert sorted(out) == list(range(7))
    assert backend.calls == 7
    serial = generate_profiles(histories_by_user(trajs), MockBackend(seed=1), parallelism=1, now=lambda uid: NOW)
    assert {u: p.to_json() for u, p in out.items()} == {u: p.to_json() for u, p in serial.items()}


def test_profile_serialization_round_trip(profile):
    again = UserProfile.from_dict(json.loads(profile.to_json()))
    assert again == profile
    assert json.loads(profile.to_json())["user_profile"] == "S"


# -- store --------------------------------------------------------------------

def test_store_versions_and_staleness(tmp_path):
    store = ProfileStore(tmp_path)
    with pytest.raises(KeyError):
        store.load(1)
    v1 = store.save(make_profile(1))
    assert v1.version == 1
    v2 = store.save(replace(v1, summary="edited"), expected_version=1)
    assert v2.version == 2 and store.load(1).summary == "edited"
    with pytest.raises(StaleVersionError) as err:
        store.save(replace(v1, summary="late"), expected_version=1)
    assert err.value.current == 2
    assert [p.summary for p in store.history(1)] == ["S", "edited"]
    assert store.load(1, version=1).summary == "S"
    assert store.users() == [1]


def test_store_concurrent_writers_only_one_wins(tmp_path):
    store = ProfileStore(tmp_path)
    store.save(make_profile(2))
    results = []

    def writer(i):
        try:
            store.save(make_profile(2, summary=f"w{i}"), expected_version=1)
            results.append("ok")
        except StaleVersionError:
            results.append("stale")

    threads = [threading.Thread(target=writer, args=(i,)) for i in range(8)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert Counter(results) == {"ok": 1, "stale": 7}
    assert store.current_version(2) == 2


# -- distributions --------------------------------------------------------------

def test_two_adults():
    report = profile_distribution_report([make_profile(1), make_profile(2)])
    assert report.attributes["age"] == {"child": 0, "adolescent": 0, "adult": 2, "older adult": 0}
    assert "| Open to Experience | 2 |" in report.to_markdown()


def test_nyc_reference_marginals():
    # the published NYC column: 736 extroverted and 311 introverted
    base = make_profile()
    profiles = [replace(base, user_id=i, traits=("extroverted" if i < 736 else "introverted",) + base.traits[1:])
                for i in range(1047)]
    report = profile_distribution_report(profiles)
    assert report.traits["extroversion"] == {"extroverted": 736, "introverted": 311}
    assert sum(report.traits["extroversion"].values()) == 1047


def test_random_profiles_counting_oracle():
    rng = random.Random(0)
    profiles = [
        make_profile(i, traits=tuple(rng.choice(v) for _, v in BFI_AXES),
                     attributes=tuple(rng.choice(v) for _, v in ATTRIBUTE_AXES))
        for i in range(100)
    ]
    report = profile_distribution_report(profiles)
    for k, (axis, values) in enumerate(BFI_AXES):
        assert sum(report.traits[axis].values()) == 100
        assert report.traits[axis] == {v: sum(p.traits[k] == v for p in profiles) for v in values}
    for k, (axis, values) in enumerate(ATTRIBUTE_AXES):
        assert sum(report.attributes[axis].values()) == 100
        assert report.attributes[axis] == {v: sum(p.attributes[k] == v for p in profiles) for v in values}


def test_timestamps_in_prompt_are_utc():
    c = replace(make_checkin(1, 1, 0), timestamp=T0)
    assert "At 2012-04-03 08:00, user 1 visited" in build_profile_prompt(1, [Trajectory(0, 1, (c,))])
