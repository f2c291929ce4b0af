"""REST service behind the profile scrutability UI.

Reads dataset, split and profile artifacts from a pipeline output directory.
Only profiles are ever written, as new versions in the profile store; a PUT
must name the version it was edited from and is rejected with 409 otherwise.
"""

from __future__ import annotations

from dataclasses import replace
from datetime import datetime, timezone
from typing import Any

from fastapi import Body, FastAPI, HTTPException
from fastapi.middleware.cors import CORSMiddleware
from pydantic import BaseModel

from . import evaluation, promptgen
from .llm import ChatBackend
from .pipeline import Pipeline, find_trajectory
from .profiler import ProfileValidationError, StaleVersionError, UserProfile, validate_profile_json


class InjectRequest(BaseModel):
    category: str
    version: int | None = None


class PredictRequest(BaseModel):
    trajectory_id: int


def create_app(pipeline: Pipeline, predictor: ChatBackend | None = None) -> FastAPI:
    app = FastAPI(title="poiprofile profile service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"], allow_headers=["*"])
    store = pipeline.profile_store()
    dataset = pipeline.dataset("serve")
    splits = pipeline.splits("serve")
    categories = dataset.poi_categories()
    backend = predictor or pipeline.backend("predictor")

    def latest(user_id: int) -> UserProfile:
        try:
            return store.load(user_id)
        except KeyError:
            raise HTTPException(404, f"no profile for user {user_id}") from None

    def save(profile: UserProfile, expected: int | None) -> dict:
        try:
            return store.save(profile, expected_version=expected).to_dict()
        except StaleVersionError as exc:
            raise HTTPException(409, {"error": "stale-version", "current_version": exc.current}) from None

    @app.get("/users")
    def users() -> list[int]:
        return store.users()

    @app.get("/users/{user_id}/profile")
    def get_profile(user_id: int) -> dict:
        return latest(user_id).to_dict()

    @app.put("/users/{user_id}/profile")
    def put_profile(user_id: int, body: dict[str, Any] = Body(...)) -> dict:
        current = latest(user_id)
        if "version" not in body:
            raise HTTPException(428, "the edited profile must carry the version it was based on")
        if int(body.get("user_id", user_id)) != user_id:
            raise HTTPException(422, "user_id in body does not match the URL")
        try:
            content = validate_profile_json(body)
        except ProfileValidationError as exc:
            raise HTTPException(422, {"error": "invalid-profile", "field": exc.field, "detail": str(exc)}) from None
        edited = replace(
            current,
            **content,
            generated_at=datetime.now(timezone.utc).replace(microsecond=0),
            source_model="user-edit",
            attempts=0,
            metadata={"edited_from_version": int(body["version"])},
        )
        return save(edited, int(body["version"]))

    @app.post("/users/{user_id}/inject-preference")
    def inject(user_id: int, req: InjectRequest) -> dict:
        current = latest(user_id)
        try:
            injected = promptgen.inject_preference(current, req.category)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        injected = replace(injected, source_model="preference-injection",
                           metadata={"injected_category": req.category, "edited_from_version": current.version})
        return save(injected, current.version if req.version is None else req.version)

    @app.get("/users/{user_id}/trajectories")
    def trajectories(user_id: int) -> list[dict]:
        out = []
        for name in ("train", "validation", "test"):
            for t in getattr(splits, name):
                if t.user_id == user_id:
                    out.append({"split": name, **t.to_dict()})
        if not out:
            raise HTTPException(404, f"no trajectories for user {user_id}")
        return out

    @app.post("/users/{user_id}/predict")
    def predict(user_id: int, req: PredictRequest) -> dict:
        try:
            _, traj = find_trajectory(splits, req.trajectory_id)
        except KeyError:
            raise HTTPException(404, f"no trajectory {req.trajectory_id}") from None
        if traj.user_id != user_id:
            raise HTTPException(422, f"trajectory {req.trajectory_id} belongs to user {traj.user_id}")
        profile = latest(user_id)
        try:
            ex = promptgen.build_sft_example(
                traj, profile, pipeline.cfg.system_prompt, dataset.M, pipeline.cfg.chat_template
            )
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None
        raw = backend.complete(ex.messages(), json_mode=False)
        parsed = evaluation.parse_prediction(raw, dataset.M)
        return {
            "raw_output": raw,
            "parsed_poi_id": parsed,
            "category_name": categories.get(parsed) if parsed is not None else None,
            "profile_version": profile.version,
            "next_poi_id": ex.next_poi_id,
        }

    return app
