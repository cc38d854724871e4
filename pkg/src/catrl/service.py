"""Live adaptive-testing sessions over HTTP.

The service loads one policy checkpoint and one item bank at startup and
runs any number of concurrent test sessions. Each session is a sequence of
deterministic mean-action policy evaluations: the design output picks the
next bank item, the estimate output extends the ability trajectory.
Sessions persist as append-only event logs and are rebuilt by replay, which
reproduces recommendations and trajectories exactly because deployment
actions carry no sampling noise.
"""

from __future__ import annotations

import json
import threading
import time
import uuid
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import pydantic

from .calibration import ItemBank, nearest_item
from .env import Observation, TrialRecord
from .nnet import Policy


class SessionNotFound(KeyError):
    pass


class SessionConflict(RuntimeError):
    pass


class SessionValidationError(ValueError):
    pass


@dataclass(frozen=True)
class ServiceConfig:
    checkpoint_path: str
    bank_path: str
    horizon: int = 10
    persist_dir: str | None = None
    host: str = "127.0.0.1"
    port: int = 8080

    def __post_init__(self) -> None:
        if self.horizon < 1:
            raise ValueError("horizon must be >= 1")


@dataclass
class Session:
    id: str
    horizon: int
    history: list[dict] = field(default_factory=list)  # item_index, difficulty, outcome
    trajectory: list[float] = field(default_factory=list)
    recommendation: dict | None = None
    status: str = "active"
    created_at: float = 0.0
    updated_at: float = 0.0

    @property
    def response_count(self) -> int:
        return len(self.history)

    def snapshot(self) -> dict:
        return {
            "id": self.id,
            "status": self.status,
            "horizon": self.horizon,
            "response_count": self.response_count,
            "recommended_item": dict(self.recommendation) if self.recommendation else None,
            "trajectory": list(self.trajectory),
            "history": [dict(h) for h in self.history],
            "created_at": self.created_at,
            "updated_at": self.updated_at,
        }


class SessionService:
    """Session registry with per-session serialization and event-log persistence."""

    def __init__(self, policy: Policy, bank: ItemBank, horizon: int = 10,
                 persist_dir: str | Path | None = None):
        self.policy = policy
        self.bank = bank
        self.horizon = horizon
        self.persist_dir = Path(persist_dir) if persist_dir else None
        self._sessions: dict[str, Session] = {}
        self._locks: dict[str, threading.Lock] = {}
        self._registry_lock = threading.Lock()
        difficulties = np.sort(bank.difficulties)
        self._band_edges = (float(np.quantile(difficulties, 1 / 3)),
                            float(np.quantile(difficulties, 2 / 3)))
        if self.persist_dir is not None:
            self.persist_dir.mkdir(parents=True, exist_ok=True)
            self._replay_all()

    @classmethod
    def from_config(cls, config: ServiceConfig) -> "SessionService":
        checkpoint = Path(config.checkpoint_path)
        bank_path = Path(config.bank_path)
        if not checkpoint.is_file():
            raise FileNotFoundError(f"policy checkpoint not found: {checkpoint}")
        if not bank_path.is_file():
            raise FileNotFoundError(f"item bank not found: {bank_path}")
        return cls(Policy.load(checkpoint), ItemBank.load(bank_path),
                   horizon=config.horizon, persist_dir=config.persist_dir)

    # -- policy plumbing ---------------------------------------------------

    def _observation(self, session: Session) -> Observation:
        return tuple(
            TrialRecord(corrupted_design=h["difficulty"], outcome=h["outcome"],
                        outcome_revealed=1)
            for h in session.history
        )

    def _band(self, difficulty: float) -> str:
        if difficulty <= self._band_edges[0]:
            return "easy"
        if difficulty <= self._band_edges[1]:
            return "medium"
        return "hard"

    def _recommend(self, session: Session) -> dict:
        action = self.policy.mean_action(self._observation(session))
        index, difficulty = nearest_item(action.design, self.bank)
        return {"index": index, "difficulty": difficulty, "band": self._band(difficulty)}

    # -- session operations --------------------------------------------------

    def create_session(self, session_id: str | None = None, *,
                       created_at: float | None = None, persist: bool = True) -> dict:
        session = Session(
            id=session_id or uuid.uuid4().hex,
            horizon=self.horizon,
            created_at=created_at if created_at is not None else time.time(),
        )
        session.updated_at = session.created_at
        session.recommendation = self._recommend(session)
        with self._registry_lock:
            if session.id in self._sessions:
                raise SessionConflict(f"session {session.id} already exists")
            self._sessions[session.id] = session
            self._locks[session.id] = threading.Lock()
        if persist:
            self._append_event(session.id, {"event": "created", "id": session.id,
                                            "horizon": self.horizon,
                                            "ts": session.created_at})
        return session.snapshot()

    def _get(self, session_id: str) -> Session:
        try:
            return self._sessions[session_id]
        except KeyError:
            raise SessionNotFound(f"unknown session {session_id!r}") from None

    def get_session(self, session_id: str) -> dict:
        with self._registry_lock:
            session = self._get(session_id)
        with self._locks[session.id]:
            return session.snapshot()

    def submit_response(self, session_id: str, outcome: int,
                        step: int | None = None, *,
                        ts: float | None = None, persist: bool = True) -> dict:
        """Record one outcome for the outstanding recommendation.

        ``step`` is an optimistic-concurrency token: when given it must equal
        the session's current response count, so of two racing submissions
        for the same recommendation exactly one wins and the other conflicts.
        """
        if outcome not in (0, 1):
            raise SessionValidationError("outcome must be 0 or 1")
        with self._registry_lock:
            session = self._get(session_id)
            lock = self._locks[session_id]
        with lock:
            if session.status != "active":
                raise SessionConflict(f"session {session_id} is completed")
            if step is not None and step != session.response_count:
                raise SessionConflict(
                    f"stale submission: expected step {session.response_count}, got {step}")
            item = session.recommendation
            session.history.append({
                "step": session.response_count + 1,
                "item_index": item["index"],
                "difficulty": item["difficulty"],
                "outcome": int(outcome),
            })
            action = self.policy.mean_action(self._observation(session))
            session.history[-1]["estimate"] = action.estimate
            session.trajectory.append(action.estimate)
            if session.response_count >= session.horizon:
                session.status = "completed"
                session.recommendation = None
            else:
                index, difficulty = nearest_item(action.design, self.bank)
                session.recommendation = {"index": index, "difficulty": difficulty,
                                          "band": self._band(difficulty)}
            session.updated_at = ts if ts is not None else time.time()
            snapshot = session.snapshot()
        if persist:
            self._append_event(session_id, {"event": "response", "outcome": int(outcome),
                                            "step": snapshot["response_count"],
                                            "ts": session.updated_at})
        return snapshot

    def session_ids(self) -> list[str]:
        with self._registry_lock:
            return sorted(self._sessions)

    # -- persistence -----------------------------------------------------------

    def _log_path(self, session_id: str) -> Path:
        return self.persist_dir / f"{session_id}.jsonl"

    def _append_event(self, session_id: str, event: dict) -> None:
        if self.persist_dir is None:
            return
        with open(self._log_path(session_id), "a") as fh:
            fh.write(json.dumps(event) + "\n")
            fh.flush()

    def _replay_all(self) -> None:
        for path in sorted(self.persist_dir.glob("*.jsonl")):
            events = [json.loads(line) for line in path.read_text().splitlines() if line]
            if not events or events[0].get("event") != "created":
                continue
            created = events[0]
            self.create_session(session_id=created["id"], created_at=created["ts"],
                                persist=False)
            for event in events[1:]:
                if event.get("event") == "response":
                    self.submit_response(created["id"], event["outcome"],
                                         ts=event["ts"], persist=False)


class ResponseBody(pydantic.BaseModel):
    """Submission payload: the outcome plus an optional concurrency token."""

    outcome: int
    step: int | None = None


def build_app(service: SessionService, ui_dir: str | Path | None = None):
    """FastAPI application exposing the session protocol.

    ``ui_dir`` optionally mounts a built web console under ``/ui``; CORS is
    open so a console served from another origin can also talk to the API.
    """
    from fastapi import FastAPI, Request
    from fastapi.exceptions import RequestValidationError
    from fastapi.middleware.cors import CORSMiddleware
    from fastapi.responses import JSONResponse

    app = FastAPI(title="adaptive-testing session service")
    app.add_middleware(CORSMiddleware, allow_origins=["*"], allow_methods=["*"],
                       allow_headers=["*"])

    def error(status: int, code: str, message: str) -> JSONResponse:
        return JSONResponse(status_code=status, content={"code": code, "message": message})

    @app.exception_handler(SessionNotFound)
    async def _not_found(_req: Request, exc: SessionNotFound):
        return error(404, "not_found", str(exc))

    @app.exception_handler(SessionConflict)
    async def _conflict(_req: Request, exc: SessionConflict):
        return error(409, "conflict", str(exc))

    @app.exception_handler(SessionValidationError)
    async def _invalid(_req: Request, exc: SessionValidationError):
        return error(422, "validation_error", str(exc))

    @app.exception_handler(RequestValidationError)
    async def _schema(_req: Request, exc: RequestValidationError):
        return error(422, "validation_error", str(exc))

    @app.get("/healthz")
    def healthz():
        return {"status": "ok"}

    @app.post("/sessions", status_code=201)
    def create_session():
        return service.create_session()

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return service.get_session(session_id)

    @app.post("/sessions/{session_id}/responses")
    def submit_response(session_id: str, body: ResponseBody):
        return service.submit_response(session_id, body.outcome, step=body.step)

    if ui_dir is not None:
        from fastapi.staticfiles import StaticFiles

        app.mount("/ui", StaticFiles(directory=str(ui_dir), html=True), name="ui")

    return app
