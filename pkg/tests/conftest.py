from __future__ import annotations

from datetime import datetime, timedelta, timezone

import pytest

from poiprofile.ingest import CheckIn
from poiprofile.profiler import UserProfile
from poiprofile.sessionize import Trajectory

T0 = datetime(2012, 4, 3, 8, 0, tzinfo=timezone.utc)


def make_checkin(user=0, poi=0, hours=0.0, cat=0, name="Coffee Shop", lat=40.75, lon=-73.98):
    return CheckIn(user, poi, cat, name, lat, lon, T0 + timedelta(hours=hours))


def make_traj(traj_id, user, pois, start_hours=0.0, step_hours=1.0, names=None, cats=None):
    names = names or ["Coffee Shop"] * len(pois)
    cats = cats or [0] * len(pois)
    return Trajectory(
        traj_id,
        user,
        tuple(
            make_checkin(user, p, start_hours + i * step_hours, cats[i], names[i])
            for i, p in enumerate(pois)
        ),
    )


def make_profile(user_id=1, **overrides) -> UserProfile:
    base = dict(
        user_id=user_id,
        traits=("extroverted", "agreeable", "conscientious", "emotionally stable", "open to experience"),
        attributes=("adult", "female", "college & beyond", "middle"),
        preferences=("coffee in the morning", "live music"),
        routines=("commutes by subway on weekdays",),
        summary="S",
        generated_at=T0,
        source_model="test",
    )
    base.update(overrides)
    return UserProfile(**base)


VALID_PROFILE_JSON = {
    "traits": ["Extroverted", "agreeable", "conscientious", "Emotionally Stable", "open to experience"],
    "attributes": ["adult", "male", "college & beyond", "middle"],
    "preferences": ["coffee", "bars"],
    "routines": ["morning commute"],
    "user_profile": "A friendly commuter who likes coffee.",
}


@pytest.fixture
def profile():
    return make_profile()


# lines printed by the acceptance suite, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)
