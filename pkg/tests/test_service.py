"""HTTP API tests: gate checks, event settlement, reviews, audit, recovery."""

from __future__ import annotations

import json
import threading
from datetime import datetime, timedelta, timezone

import pytest
from fastapi.testclient import TestClient

from cagg.clock import VirtualClock
from cagg.intensity import IntensitySeries
from cagg.ledger import ProvenanceLedger, StorageFailure
from cagg.policy import PolicyConfig
from cagg.service import GateService, create_app

EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)
HOUR = 3600.0

PR = "release:v1/pipeline:ci/pr:42"
TRACE = IntensitySeries(
    start=EPOCH - timedelta(hours=1),
    step=HOUR,
    values=(200.0, 100.0, 400.0, 120.0, 480.0, 90.0, 150.0, 220.0),
)


def make_service(tmp_path, policy=None, now=EPOCH):
    return GateService(
        data_dir=tmp_path / "data",
        policy=policy or PolicyConfig(),
        intensity=TRACE,
        clock=VirtualClock(now),
    )


@pytest.fixture()
def service(tmp_path):
    return make_service(tmp_path)


@pytest.fixture()
def client(service):
    return TestClient(create_app(service))


def set_budget(client, scope=PR, allocation=50.0, soft=0.8):
    response = client.put(f"/budgets/{scope}", json={"allocation": allocation, "soft_threshold": soft})
    assert response.status_code == 200, response.text
    return response.json()


def gate_body(risk=0.2, est=5.0, deferrable=0.0, loop_id=None):
    return {
        "scope": PR,
        "gate_kind": "pr_validation",
        "risk": {"score": risk, "source": "static_checks"},
        "est_carbon": est,
        "deferrable_by": deferrable,
        "loop_id": loop_id,
    }


class TestGateCheck:
    def test_all_clear(self, client):
        set_budget(client)
        response = client.post("/gates/check", json=gate_body())
        assert response.status_code == 200
        body = response.json()
        assert body["verdict"] == "allow"
        assert body["reservation_id"]
        assert body["rationale"] == ["budget.ok", "intensity.ok", "plan.light"]

    def test_unknown_scope_404(self, client):
        response = client.post("/gates/check", json=gate_body())
        assert response.status_code == 404

    def test_malformed_400(self, client):
        response = client.post("/gates/check", json={"scope": PR})
        assert response.status_code == 400

    def test_verdicts_are_data_not_transport_errors(self, client):
        set_budget(client, allocation=10.0)
        response = client.post("/gates/check", json=gate_body(est=50.0))
        assert response.status_code == 200
        assert response.json()["verdict"] == "escalate"


class TestEvents:
    def test_settle_against_reservation(self, client, service):
        set_budget(client)
        decision = client.post("/gates/check", json=gate_body(est=20.0)).json()
        rid = decision["reservation_id"]
        before = len(service.ledger)
        response = client.post(
            "/events",
            json={
                "kind": "inference",
                "tier": "small",
                "tokens_in": 400_000,
                "tokens_out": 464_000,
                "reservation_id": rid,
                "intensity": 100.0,
                "pue": 1.0,
            },
        )
        assert response.status_code == 200, response.text
        body = response.json()
        # 864000 tokens * 0.5 J / 3.6e6 = 0.12 kWh; * 100 g/kWh = 12 g
        assert body["carbon"] == pytest.approx(12.0, rel=1e-9)
        assert len(service.ledger) == before + 1
        status = client.get(f"/budgets/{PR}").json()
        assert status["consumed"] == pytest.approx(12.0)
        assert status["reserved"] == pytest.approx(0.0)

    def test_unknown_reservation_404(self, client):
        set_budget(client)
        response = client.post(
            "/events",
            json={"kind": "inference", "tier": "small", "tokens_in": 10, "reservation_id": "res-9"},
        )
        assert response.status_code == 404

    def test_double_settle_409(self, client):
        set_budget(client)
        decision = client.post("/gates/check", json=gate_body(est=20.0)).json()
        rid = decision["reservation_id"]
        event = {
            "kind": "inference",
            "tier": "small",
            "tokens_in": 1000,
            "reservation_id": rid,
        }
        assert client.post("/events", json=event).status_code == 200
        assert client.post("/events", json=event).status_code == 409

    def test_unbudgeted_scope_allowed(self, client):
        response = client.post(
            "/events",
            json={"kind": "validation_run", "tier": "small", "duration": 60.0, "scope": "release:vX"},
        )
        assert response.status_code == 200

    def test_budgeted_scope_without_reservation_400(self, client):
        set_budget(client)
        response = client.post(
            "/events",
            json={"kind": "validation_run", "tier": "small", "duration": 60.0, "scope": PR},
        )
        assert response.status_code == 400

    def test_unknown_tier_400(self, client):
        response = client.post(
            "/events",
            json={"kind": "inference", "tier": "gigantic", "tokens_in": 10, "scope": "release:vX"},
        )
        assert response.status_code == 400


class TestReviews:
    def test_pending_empty(self, client):
        assert client.get("/reviews/pending").json() == {"reviews": []}

    def test_regeneration_review_approve_extends_cap(self, client, service):
        for _ in range(3):
            response = client.post("/loops/gen-1/attempt", json={"scope": PR})
            assert response.status_code == 200
        assert response.json()["state"] == "blocked"
        pending = client.get("/reviews/pending").json()["reviews"]
        assert len(pending) == 1
        review = pending[0]
        assert review["trigger"] == "regeneration_cap"
        response = client.post(
            f"/reviews/{review['review_id']}/decision",
            json={"outcome": "approve", "approver": "alice", "note": "one more pass", "extension": 2},
        )
        assert response.status_code == 200
        assert response.json()["loop"]["cap"] == 5
        assert response.json()["loop"]["state"] == "active"
        assert client.get("/reviews/pending").json()["reviews"] == []

    def test_regen_approve_requires_note(self, client):
        client.post("/loops/gen-1/attempt", json={"scope": PR})
        client.post("/loops/gen-1/attempt", json={"scope": PR})
        client.post("/loops/gen-1/attempt", json={"scope": PR})
        review = client.get("/reviews/pending").json()["reviews"][0]
        response = client.post(
            f"/reviews/{review['review_id']}/decision",
            json={"outcome": "approve", "approver": "alice", "note": "   ", "extension": 2},
        )
        assert response.status_code == 400

    def test_budget_review_deny_then_recheck_denies_nothing_extra(self, client):
        set_budget(client, allocation=10.0)
        decision = client.post("/gates/check", json=gate_body(est=50.0)).json()
        response = client.post(
            f"/reviews/{decision['review_id']}/decision",
            json={"outcome": "deny", "approver": "alice", "note": "over budget"},
        )
        assert response.status_code == 200
        assert response.json()["decision"]["verdict"] == "deny"

    def test_double_resolution_409(self, client):
        set_budget(client, allocation=10.0)
        decision = client.post("/gates/check", json=gate_body(est=50.0)).json()
        body = {"outcome": "deny", "approver": "alice", "note": "no"}
        assert client.post(f"/reviews/{decision['review_id']}/decision", json=body).status_code == 200
        assert client.post(f"/reviews/{decision['review_id']}/decision", json=body).status_code == 409

    def test_concurrent_resolution_one_winner(self, service):
        set_budget(TestClient(create_app(service)), allocation=10.0)
        client = TestClient(create_app(service))
        decision = client.post("/gates/check", json=gate_body(est=50.0)).json()
        review_id = decision["review_id"]
        outcomes = []
        barrier = threading.Barrier(2)

        def resolve(who):
            barrier.wait()
            try:
                service.resolve_review(review_id, "deny", who, "race")
                outcomes.append("ok")
            except Exception as exc:
                outcomes.append(type(exc).__name__)

        threads = [threading.Thread(target=resolve, args=(w,)) for w in ("a", "b")]
        for t in threads:
            t.start()
        for t in threads:
            t.join()
        assert sorted(outcomes) == ["AlreadyResolved", "ok"]


class TestAuditAndIntensity:
    def test_audit_totals(self, client):
        grams = []
        for tokens in (100_000, 200_000, 400_000):
            body = client.post(
                "/events",
                json={
                    "kind": "inference",
                    "tier": "small",
                    "tokens_in": tokens,
                    "scope": "release:vX",
                    "intensity": 100.0,
                    "pue": 1.0,
                },
            ).json()
            grams.append(body["carbon"])
        audit = client.get("/ledger/audit").json()
        assert audit["chain_valid"] is True
        assert audit["total_carbon"] == pytest.approx(sum(grams), abs=1e-6)

    def test_lines_export(self, client):
        client.post(
            "/events",
            json={"kind": "validation_run", "tier": "small", "duration": 10.0, "scope": "release:vX"},
        )
        lines = client.get("/ledger/audit", params={"format": "lines"})
        assert lines.status_code == 200
        assert lines.text.count("\n") == 1

    def test_intensity_now(self, client):
        body = client.get("/intensity/now").json()
        assert body["intensity"] == 100.0  # EPOCH sits in the second step

    def test_recent_decisions(self, client):
        set_budget(client)
        client.post("/gates/check", json=gate_body())
        client.post("/gates/check", json=gate_body(risk=0.9))
        body = client.get("/ledger/recent", params={"limit": 1}).json()
        assert len(body["decisions"]) == 1
        latest = body["decisions"][0]
        assert latest["kind"] == "gate"
        assert latest["verdict"] == "allow"
        assert latest["rationale"]

    def test_intensity_window(self, client):
        body = client.get(
            "/intensity/window", params={"duration": HOUR, "deadline": 5 * HOUR}
        ).json()
        assert body["mean_intensity"] == pytest.approx(90.0)


class TestLoops:
    def test_attempt_justify_terminate_roundtrip(self, client):
        for _ in range(3):
            client.post("/loops/gen-2/attempt", json={"scope": PR})
        response = client.post(
            "/loops/gen-2/justify",
            json={"approver": "alice", "text": "flaky suite", "extension": 1},
        )
        assert response.json()["cap"] == 4
        response = client.post(
            "/loops/gen-2/terminate", json={"approver": "alice", "text": "done"}
        )
        assert response.json()["state"] == "terminated"
        assert client.post("/loops/gen-2/attempt", json={"scope": PR}).status_code == 409

    def test_get_unknown_loop_404(self, client):
        assert client.get("/loops/nope").status_code == 404


class TestAuth:
    def test_token_required_when_configured(self, service):
        client = TestClient(create_app(service, token="sekrit"))
        assert client.get("/reviews/pending").status_code == 401
        ok = client.get("/reviews/pending", headers={"Authorization": "Bearer sekrit"})
        assert ok.status_code == 200
        assert client.get("/healthz").status_code == 200  # health stays open


class TestPersistenceAndRecovery:
    def test_restart_preserves_everything(self, tmp_path):
        service = make_service(tmp_path)
        client = TestClient(create_app(service))
        set_budget(client)
        decision = client.post("/gates/check", json=gate_body(est=20.0)).json()
        client.post(
            "/events",
            json={
                "kind": "inference", "tier": "small", "tokens_in": 720_000,
                "reservation_id": decision["reservation_id"],
                "intensity": 100.0, "pue": 1.0,
            },
        )
        for _ in range(3):
            client.post("/loops/gen-1/attempt", json={"scope": PR})

        restarted = make_service(tmp_path)
        rclient = TestClient(create_app(restarted))
        status = rclient.get(f"/budgets/{PR}").json()
        assert status["consumed"] == pytest.approx(10.0)
        assert rclient.get("/loops/gen-1").json()["state"] == "blocked"
        assert len(rclient.get("/reviews/pending").json()["reviews"]) == 1
        audit = rclient.get("/ledger/audit").json()
        assert audit["chain_valid"] is True

    def test_torn_ledger_tail_recovered(self, tmp_path):
        service = make_service(tmp_path)
        client = TestClient(create_app(service))
        for i in range(3):
            client.post(
                "/events",
                json={"kind": "validation_run", "tier": "small", "duration": 5.0, "scope": "release:vX"},
            )
        ledger_path = tmp_path / "data" / "ledger.ndjson"
        raw = ledger_path.read_bytes()
        ledger_path.write_bytes(raw[:-20])  # torn final record
        restarted = make_service(tmp_path)
        assert len(restarted.ledger) == 2
        assert restarted.ledger.verify_chain().chain_valid

    def test_tampered_ledger_refuses_start(self, tmp_path):
        service = make_service(tmp_path)
        client = TestClient(create_app(service))
        for _ in range(3):
            client.post(
                "/events",
                json={"kind": "validation_run", "tier": "small", "duration": 5.0, "scope": "release:vX"},
            )
        ledger_path = tmp_path / "data" / "ledger.ndjson"
        lines = ledger_path.read_bytes().splitlines()
        mutated = bytearray(lines[0])
        mutated[30] ^= 0x02
        lines[0] = bytes(mutated)
        ledger_path.write_bytes(b"\n".join(lines) + b"\n")
        with pytest.raises(StorageFailure):
            make_service(tmp_path)
        report = ProvenanceLedger.verify_file(ledger_path)
        assert report.first_invalid_seq == 0


class TestDeterminism:
    def script(self, client):
        set_budget(client, allocation=100.0)
        client.post("/gates/check", json=gate_body(risk=0.7, est=10.0))
        decision = client.post("/gates/check", json=gate_body(risk=0.2, est=20.0)).json()
        client.post(
            "/events",
            json={
                "kind": "inference", "tier": "small", "tokens_in": 100_000,
                "reservation_id": decision["reservation_id"],
                "intensity": 100.0, "pue": 1.0,
            },
        )
        for _ in range(3):
            client.post("/loops/gen-1/attempt", json={"scope": PR})
        review = client.get("/reviews/pending").json()["reviews"][0]
        client.post(
            f"/reviews/{review['review_id']}/decision",
            json={"outcome": "approve", "approver": "alice", "note": "go", "extension": 2},
        )
        return client.get("/ledger/audit", params={"format": "lines"}).content

    def test_identical_sessions_identical_ledgers(self, tmp_path):
        first = self.script(TestClient(create_app(make_service(tmp_path / "a"))))
        second = self.script(TestClient(create_app(make_service(tmp_path / "b"))))
        assert first == second
        assert first  # non-empty
