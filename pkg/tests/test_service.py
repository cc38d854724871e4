"""Tests for the live session service and its HTTP API."""

import threading

import numpy as np
import pytest
from fastapi.testclient import TestClient

from catrl.calibration import ItemBank
from catrl.nnet import NetConfig, Policy
from catrl.service import (
    ServiceConfig,
    SessionConflict,
    SessionNotFound,
    SessionService,
    build_app,
)


def make_policy(seed=0, randomize=True):
    policy = Policy.create(NetConfig(hidden=8), np.random.default_rng(seed))
    if randomize:
        rng = np.random.default_rng(seed + 50)
        for name in ("pol1.W", "pol1.b", "val1.W", "val1.b"):
            policy.params[name] = rng.normal(0, 0.2, policy.params[name].shape)
    return policy


def make_bank():
    return ItemBank(difficulties=np.array([-2.0, -1.0, -0.5, 0.0, 0.5, 1.0, 2.0]),
                    source="true", provenance={})


@pytest.fixture()
def service(tmp_path):
    return SessionService(make_policy(), make_bank(), horizon=10,
                          persist_dir=tmp_path / "sessions")


class TestSessionLifecycle:
    def test_fresh_session(self, service):
        snap = service.create_session()
        assert snap["status"] == "active"
        assert snap["response_count"] == 0
        assert snap["history"] == []
        assert 0 <= snap["recommended_item"]["index"] < 7

    def test_distinct_ids(self, service):
        a = service.create_session()
        b = service.create_session()
        assert a["id"] != b["id"]

    def test_zero_init_policy_recommends_item_nearest_zero(self, tmp_path):
        """Zero-initialized heads request design 0, mapping to the 0.0 item."""
        service = SessionService(make_policy(randomize=False), make_bank(), horizon=5)
        snap = service.create_session()
        assert snap["recommended_item"]["difficulty"] == 0.0

    def test_full_session_completes(self, service):
        snap = service.create_session()
        sid = snap["id"]
        for k in range(10):
            snap = service.submit_response(sid, k % 2)
        assert snap["status"] == "completed"
        assert snap["recommended_item"] is None
        assert snap["response_count"] == 10
        assert len(snap["trajectory"]) == 10
        with pytest.raises(SessionConflict):
            service.submit_response(sid, 1)

    def test_trajectory_tracks_history_length(self, service):
        sid = service.create_session()["id"]
        for k in range(4):
            snap = service.submit_response(sid, 1)
            assert len(snap["trajectory"]) == k + 1
            assert snap["history"][-1]["estimate"] == snap["trajectory"][-1]

    def test_deterministic_recommendations(self, tmp_path):
        s1 = SessionService(make_policy(3), make_bank(), horizon=10)
        s2 = SessionService(make_policy(3), make_bank(), horizon=10)
        outcomes = [1, 0, 1, 1, 0, 1, 0, 0, 1, 1]
        sid1 = s1.create_session()["id"]
        sid2 = s2.create_session()["id"]
        for y in outcomes:
            snap1 = s1.submit_response(sid1, y)
            snap2 = s2.submit_response(sid2, y)
            assert snap1["trajectory"] == snap2["trajectory"]
            assert snap1["recommended_item"] == snap2["recommended_item"]

    def test_get_session_side_effect_free(self, service):
        sid = service.create_session()["id"]
        service.submit_response(sid, 1)
        a = service.get_session(sid)
        b = service.get_session(sid)
        assert a == b

    def test_validation(self, service):
        sid = service.create_session()["id"]
        with pytest.raises(Exception):
            service.submit_response(sid, 2)
        with pytest.raises(SessionNotFound):
            service.get_session("nope")

    def test_stale_step_conflicts(self, service):
        sid = service.create_session()["id"]
        service.submit_response(sid, 1, step=0)
        with pytest.raises(SessionConflict):
            service.submit_response(sid, 0, step=0)  # same recommendation again

    def test_concurrent_submissions_single_winner(self, service):
        """Two racing submissions for one recommendation: exactly one wins."""
        sid = service.create_session()["id"]
        results = []

        def submit():
            try:
                results.append(("ok", service.submit_response(sid, 1, step=0)))
            except SessionConflict as exc:
                results.append(("conflict", str(exc)))

        threads = [threading.Thread(target=submit) for _ in range(2)]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        outcomes = sorted(tag for tag, _ in results)
        assert outcomes == ["conflict", "ok"]
        assert service.get_session(sid)["response_count"] == 1


class TestPersistence:
    def test_replay_reproduces_state(self, tmp_path):
        persist = tmp_path / "sessions"
        service = SessionService(make_policy(7), make_bank(), horizon=10,
                                 persist_dir=persist)
        sid = service.create_session()["id"]
        outcomes = [1, 1, 0, 1, 0, 0]
        for y in outcomes:
            before = service.submit_response(sid, y)

        # simulate a crash/restart: new service over the same log directory
        revived = SessionService(make_policy(7), make_bank(), horizon=10,
                                 persist_dir=persist)
        after = revived.get_session(sid)
        assert after["trajectory"] == before["trajectory"]
        assert after["history"] == before["history"]
        assert after["recommended_item"] == before["recommended_item"]
        assert after["status"] == before["status"]

        # the revived session keeps accepting responses
        snap = revived.submit_response(sid, 1)
        assert snap["response_count"] == 7

    def test_completed_session_survives_restart(self, tmp_path):
        persist = tmp_path / "sessions"
        service = SessionService(make_policy(8), make_bank(), horizon=3,
                                 persist_dir=persist)
        sid = service.create_session()["id"]
        for y in (1, 0, 1):
            service.submit_response(sid, y)
        revived = SessionService(make_policy(8), make_bank(), horizon=3,
                                 persist_dir=persist)
        assert revived.get_session(sid)["status"] == "completed"


class TestConfig:
    def test_missing_files_fail_at_startup(self, tmp_path):
        config = ServiceConfig(checkpoint_path=str(tmp_path / "missing.npz"),
                               bank_path=str(tmp_path / "missing.json"))
        with pytest.raises(FileNotFoundError):
            SessionService.from_config(config)

    def test_from_config(self, tmp_path):
        ckpt = tmp_path / "p.npz"
        bank_path = tmp_path / "b.json"
        make_policy().save(ckpt)
        make_bank().save(bank_path)
        config = ServiceConfig(checkpoint_path=str(ckpt), bank_path=str(bank_path),
                               horizon=4)
        service = SessionService.from_config(config)
        assert service.horizon == 4


class TestHttpApi:
    @pytest.fixture()
    def client(self, tmp_path):
        service = SessionService(make_policy(9), make_bank(), horizon=10,
                                 persist_dir=tmp_path / "sessions")
        return TestClient(build_app(service))

    def test_healthz(self, client):
        resp = client.get("/healthz")
        assert resp.status_code == 200
        assert resp.json()["status"] == "ok"

    def test_create_and_get(self, client):
        resp = client.post("/sessions")
        assert resp.status_code == 201
        body = resp.json()
        assert body["status"] == "active"
        assert "index" in body["recommended_item"]
        assert "difficulty" in body["recommended_item"]
        got = client.get(f"/sessions/{body['id']}")
        assert got.status_code == 200
        assert got.json() == body

    def test_full_http_session(self, client):
        sid = client.post("/sessions").json()["id"]
        for k in range(10):
            resp = client.post(f"/sessions/{sid}/responses", json={"outcome": 1})
            assert resp.status_code == 200, resp.text
        snap = resp.json()
        assert snap["status"] == "completed"
        resp = client.post(f"/sessions/{sid}/responses", json={"outcome": 1})
        assert resp.status_code == 409
        assert resp.json()["code"] == "conflict"

    def test_unknown_session_404(self, client):
        resp = client.get("/sessions/missing")
        assert resp.status_code == 404
        body = resp.json()
        assert body["code"] == "not_found" and "message" in body

    def test_invalid_outcome_422(self, client):
        sid = client.post("/sessions").json()["id"]
        resp = client.post(f"/sessions/{sid}/responses", json={"outcome": 3})
        assert resp.status_code == 422
        assert resp.json()["code"] == "validation_error"

    def test_malformed_body_422(self, client):
        sid = client.post("/sessions").json()["id"]
        resp = client.post(f"/sessions/{sid}/responses", json={"nope": True})
        assert resp.status_code == 422
        assert resp.json()["code"] == "validation_error"

    def test_step_token_conflict(self, client):
        sid = client.post("/sessions").json()["id"]
        assert client.post(f"/sessions/{sid}/responses",
                           json={"outcome": 1, "step": 0}).status_code == 200
        resp = client.post(f"/sessions/{sid}/responses", json={"outcome": 1, "step": 0})
        assert resp.status_code == 409

    def test_golden_transcript_replay(self, client):
        """Same outcome script -> bit-identical trajectory on a fresh session."""
        outcomes = [1, 0, 1, 1, 0, 1, 0, 1, 0, 0]
        transcripts = []
        for _ in range(2):
            sid = client.post("/sessions").json()["id"]
            for y in outcomes:
                snap = client.post(f"/sessions/{sid}/responses",
                                   json={"outcome": y}).json()
            transcripts.append((snap["trajectory"],
                                [h["item_index"] for h in snap["history"]]))
        assert transcripts[0] == transcripts[1]
