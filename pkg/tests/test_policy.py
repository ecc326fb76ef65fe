"""Tests for the budgeted governance gate engine."""

from __future__ import annotations

import random
from datetime import datetime, timedelta, timezone

import pytest
import yaml

from cagg.budget import BudgetManager
from cagg.clock import VirtualClock
from cagg.core import ScopeId
from cagg.intensity import IntensitySeries, OutOfCoverage
from cagg.ledger import GateDecisionRecord, ProvenanceLedger
from cagg.orchestrator import LoopRegistry, RiskSignal
from cagg.policy import (
    AlreadyResolved,
    GateEngine,
    GateKind,
    GateRequest,
    IntensityRule,
    InvalidPolicy,
    PolicyConfig,
    ReviewTrigger,
    UnknownReview,
    Verdict,
)
from cagg.service import ReviewQueue

EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)
HOUR = 3600.0

PR = ScopeId.parse("release:v1/pipeline:ci/pr:42")
TRACE = IntensitySeries(start=EPOCH, step=HOUR, values=(500.0, 400.0, 100.0, 120.0, 480.0))


def build_engine(
    *,
    config: PolicyConfig | None = None,
    series: IntensitySeries = TRACE,
    now: datetime = EPOCH + timedelta(hours=2),
    allocation: float = 1000.0,
    consumed: float = 0.0,
):
    config = config or PolicyConfig()
    clock = VirtualClock(now)
    budget = BudgetManager(clock=clock)
    budget.set_budget(PR, allocation, 0.8)
    if consumed:
        budget.check_and_consume(PR, consumed)
    ledger = ProvenanceLedger()
    loops = LoopRegistry(default_cap=config.regeneration_cap, clock=clock)
    reviews = ReviewQueue(clock=clock)
    engine = GateEngine(
        config=config,
        budget=budget,
        ledger=ledger,
        loops=loops,
        reviews=reviews,
        series_provider=lambda: series,
        clock=clock,
    )
    return engine, budget, ledger, loops, reviews, clock


def request(risk=0.2, est=5.0, deferrable=0.0, loop_id=None, kind=GateKind.PULL_REQUEST_VALIDATION):
    return GateRequest(
        scope=PR,
        gate_kind=kind,
        risk=RiskSignal(risk),
        est_carbon=est,
        deferrable_by=deferrable,
        loop_id=loop_id,
    )


class TestAllClear:
    def test_allow_with_reservation(self):
        engine, budget, ledger, _, _, _ = build_engine()
        decision = engine.evaluate(request(risk=0.2))
        assert decision.verdict is Verdict.ALLOW
        assert decision.rationale == ("budget.ok", "intensity.ok", "plan.light")
        assert decision.reservation_id is not None
        assert budget.status(PR).reserved == pytest.approx(5.0)

    def test_decision_is_ledgered_once(self):
        engine, _, ledger, _, _, _ = build_engine()
        engine.evaluate(request())
        records = ledger.records()
        assert len(records) == 1
        payload = records[0].payload
        assert isinstance(payload, GateDecisionRecord)
        assert payload.verdict == "allow"
        assert payload.rationale


class TestBudgetRule:
    def test_hard_exceeded_escalates_without_reservation(self):
        engine, budget, ledger, _, reviews, _ = build_engine(allocation=50.0)
        decision = engine.evaluate(request(est=60.0))
        assert decision.verdict is Verdict.ESCALATE
        assert decision.review_id is not None
        assert decision.reservation_id is None
        assert "budget.hard" in decision.rationale
        status = budget.status(PR)
        assert status.consumed == 0.0
        assert status.reserved == 0.0
        item = reviews.get(decision.review_id)
        assert item.trigger is ReviewTrigger.BUDGET_HARD_EXCEEDED

    def test_hard_exceeded_deny_action(self):
        config = PolicyConfig(hard_exceed_action="deny")
        engine, _, _, _, reviews, _ = build_engine(config=config, allocation=50.0)
        decision = engine.evaluate(request(est=60.0))
        assert decision.verdict is Verdict.DENY
        assert reviews.pending() == []

    def test_soft_breach_downgrades_and_rereserves(self):
        engine, budget, _, _, _, _ = build_engine(allocation=100.0, consumed=75.0)
        decision = engine.evaluate(request(risk=0.7, est=10.0))
        assert decision.verdict is Verdict.DOWNGRADE
        assert decision.to_tier == "small"
        assert "budget.soft" in decision.rationale
        assert "downgrade.to:small" in decision.rationale
        assert decision.reservation_id is not None
        assert decision.est_carbon < 10.0  # re-estimated at the cheaper tier
        assert budget.status(PR).reserved == pytest.approx(decision.est_carbon)

    def test_soft_breach_escalate_action(self):
        config = PolicyConfig(soft_breach_action="escalate")
        engine, budget, _, _, reviews, _ = build_engine(
            config=config, allocation=100.0, consumed=75.0
        )
        decision = engine.evaluate(request(risk=0.7, est=10.0))
        assert decision.verdict is Verdict.ESCALATE
        assert reviews.get(decision.review_id).trigger is ReviewTrigger.BUDGET_SOFT_BREACHED
        assert budget.status(PR).reserved == 0.0  # escalation holds nothing

    def test_soft_breach_light_plan_defers_when_deferrable(self):
        # light-only plan cannot step down a tier; it defers to a better window
        engine, budget, _, _, _, _ = build_engine(
            now=EPOCH, allocation=100.0, consumed=75.0
        )
        decision = engine.evaluate(request(risk=0.2, est=10.0, deferrable=5 * HOUR))
        assert decision.verdict is Verdict.DEFER
        assert "downgrade.floor" in decision.rationale
        assert decision.defer_until == EPOCH + timedelta(hours=2)
        assert budget.status(PR).reserved == 0.0

    def test_soft_breach_light_plan_escalates_when_not_deferrable(self):
        engine, _, _, _, reviews, _ = build_engine(allocation=100.0, consumed=75.0)
        decision = engine.evaluate(request(risk=0.2, est=10.0, deferrable=0.0))
        assert decision.verdict is Verdict.ESCALATE
        assert reviews.get(decision.review_id).trigger is ReviewTrigger.BUDGET_SOFT_BREACHED


class TestIntensityRule:
    def test_defer_to_best_window(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(threshold=150.0)})
        engine, _, _, _, _, _ = build_engine(config=config, now=EPOCH)
        decision = engine.evaluate(request(est=5.0, deferrable=5 * HOUR))
        assert decision.verdict is Verdict.DEFER
        assert decision.defer_until == EPOCH + timedelta(hours=2)
        assert "intensity.high" in decision.rationale
        assert "intensity.defer" in decision.rationale

    def test_high_intensity_not_deferrable_allows(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(threshold=150.0)})
        engine, _, _, _, _, _ = build_engine(config=config, now=EPOCH)
        decision = engine.evaluate(request(est=5.0, deferrable=0.0))
        assert decision.verdict is Verdict.ALLOW
        assert "intensity.high" in decision.rationale

    def test_already_in_best_window_no_defer(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(threshold=50.0)})
        engine, _, _, _, _, _ = build_engine(
            config=config, now=EPOCH + timedelta(hours=2)
        )
        # above threshold everywhere; now (100) is the cheapest step in reach
        decision = engine.evaluate(request(est=5.0, deferrable=2 * HOUR))
        assert decision.verdict is Verdict.ALLOW
        assert "intensity.high" in decision.rationale

    def test_best_window_mode_defers_without_threshold(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(mode="best_window")})
        engine, _, _, _, _, _ = build_engine(config=config, now=EPOCH)
        decision = engine.evaluate(request(est=5.0, deferrable=5 * HOUR))
        assert decision.verdict is Verdict.DEFER
        assert decision.defer_until == EPOCH + timedelta(hours=2)

    def test_out_of_coverage_deferral_rejected(self):
        engine, _, _, _, _, _ = build_engine(now=EPOCH)
        with pytest.raises(OutOfCoverage):
            engine.evaluate(request(deferrable=10 * HOUR))

    def test_off_mode(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(mode="off")})
        engine, _, _, _, _, _ = build_engine(config=config, now=EPOCH)
        decision = engine.evaluate(request(est=5.0, deferrable=5 * HOUR))
        assert decision.verdict is Verdict.ALLOW
        assert "intensity.off" in decision.rationale


class TestRegenerationRule:
    def test_blocked_loop_escalates(self):
        engine, _, _, loops, reviews, _ = build_engine()
        for _ in range(3):
            loops.record_regeneration_attempt("loop-1", PR)
        decision = engine.evaluate(request(loop_id="loop-1"))
        assert decision.verdict is Verdict.ESCALATE
        assert "regen.blocked" in decision.rationale
        assert reviews.get(decision.review_id).trigger is ReviewTrigger.REGENERATION_CAP

    def test_active_loop_allows(self):
        engine, _, _, loops, _, _ = build_engine()
        loops.record_regeneration_attempt("loop-1", PR)
        decision = engine.evaluate(request(loop_id="loop-1"))
        assert decision.verdict is Verdict.ALLOW
        assert "regen.ok" in decision.rationale

    def test_terminated_loop_denies(self):
        engine, _, _, loops, _, _ = build_engine()
        loops.record_regeneration_attempt("loop-1", PR)
        loops.terminate("loop-1", "alice", "pointless")
        decision = engine.evaluate(request(loop_id="loop-1"))
        assert decision.verdict is Verdict.DENY
        assert "regen.terminated" in decision.rationale


class TestPrecedence:
    def test_escalate_beats_defer(self):
        config = PolicyConfig(intensity_rules={"default": IntensityRule(threshold=150.0)})
        engine, _, _, loops, _, _ = build_engine(config=config, now=EPOCH)
        for _ in range(3):
            loops.record_regeneration_attempt("loop-1", PR)
        decision = engine.evaluate(request(deferrable=5 * HOUR, loop_id="loop-1"))
        assert decision.verdict is Verdict.ESCALATE

    def test_deny_beats_escalate(self):
        config = PolicyConfig(hard_exceed_action="deny")
        engine, _, _, loops, _, _ = build_engine(config=config, allocation=50.0)
        for _ in range(3):
            loops.record_regeneration_attempt("loop-1", PR)
        decision = engine.evaluate(request(est=60.0, loop_id="loop-1"))
        assert decision.verdict is Verdict.DENY

    def test_custom_precedence_validated(self):
        with pytest.raises(InvalidPolicy):
            PolicyConfig(precedence=(Verdict.DENY, Verdict.ALLOW))


class TestReviews:
    def test_approve_budget_escalation_allows_with_override(self):
        engine, budget, ledger, _, _, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        assert escalated.verdict is Verdict.ESCALATE
        decision = engine.apply_review_outcome(
            escalated.review_id, "approve", "alice", "deadline week"
        )
        assert decision.verdict is Verdict.ALLOW
        assert "budget.override" in decision.rationale
        assert decision.reservation_id is not None
        override_records = [
            r.payload
            for r in ledger.records()
            if isinstance(r.payload, GateDecisionRecord) and r.payload.override
        ]
        assert len(override_records) == 1
        assert override_records[0].approver == "alice"
        # override reserves even beyond the allocation
        assert budget.status(PR).reserved == pytest.approx(60.0)

    def test_deny_review(self):
        engine, budget, _, _, _, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        decision = engine.apply_review_outcome(escalated.review_id, "deny", "alice", "no")
        assert decision.verdict is Verdict.DENY
        assert decision.reservation_id is None
        assert budget.status(PR).reserved == 0.0

    def test_double_resolution_rejected(self):
        engine, _, _, _, _, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        engine.apply_review_outcome(escalated.review_id, "deny", "alice", "no")
        with pytest.raises(AlreadyResolved):
            engine.apply_review_outcome(escalated.review_id, "approve", "bob", "yes")

    def test_unknown_review(self):
        engine, _, _, _, _, _ = build_engine()
        with pytest.raises(UnknownReview):
            engine.apply_review_outcome("rev-999999", "approve", "alice")

    def test_pending_review_reused_for_same_cause(self):
        engine, _, _, _, reviews, _ = build_engine(allocation=50.0)
        first = engine.evaluate(request(est=60.0))
        second = engine.evaluate(request(est=60.0))
        assert first.review_id == second.review_id
        assert len(reviews.pending()) == 1

    def test_denied_review_becomes_deny_precedent(self):
        engine, _, _, _, reviews, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        engine.apply_review_outcome(escalated.review_id, "deny", "alice", "over budget")
        recheck = engine.evaluate(request(est=60.0))
        assert recheck.verdict is Verdict.DENY
        assert "review.denied_precedent" in recheck.rationale
        assert reviews.pending() == []  # no review spam after a human said no

    def test_approved_review_is_not_a_precedent(self):
        engine, budget, _, _, reviews, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        approved = engine.apply_review_outcome(escalated.review_id, "approve", "alice", "ship it")
        assert approved.verdict is Verdict.ALLOW
        budget.settle(approved.reservation_id, 60.0)
        recheck = engine.evaluate(request(est=60.0))
        assert recheck.verdict is Verdict.ESCALATE  # each overspend needs its own approval
        assert recheck.review_id != escalated.review_id

    def test_precedent_clears_when_budget_recovers(self):
        engine, budget, _, _, _, _ = build_engine(allocation=50.0)
        escalated = engine.evaluate(request(est=60.0))
        engine.apply_review_outcome(escalated.review_id, "deny", "alice", "no")
        budget.set_budget(PR, 500.0, 0.8)
        decision = engine.evaluate(request(est=60.0))
        assert decision.verdict is Verdict.ALLOW


class TestInvariants:
    def test_no_allow_while_hard_exceeded_without_override(self):
        engine, budget, ledger, _, _, _ = build_engine(allocation=20.0)
        budget.check_and_consume(PR, 20.0)  # fully exhausted
        rng = random.Random(3)
        for _ in range(50):
            decision = engine.evaluate(request(risk=rng.random(), est=rng.uniform(0.1, 30.0)))
            assert decision.verdict is not Verdict.ALLOW
            assert decision.verdict is not Verdict.DOWNGRADE
        for record in ledger.records():
            payload = record.payload
            if payload.verdict == "allow":
                assert payload.override

    def test_every_evaluate_appends_exactly_one_gate_record(self):
        engine, _, ledger, _, _, _ = build_engine()
        rng = random.Random(5)
        n = 30
        for _ in range(n):
            engine.evaluate(request(risk=rng.random(), est=rng.uniform(0, 3)))
        gates = [
            r.payload
            for r in ledger.records()
            if isinstance(r.payload, GateDecisionRecord) and r.payload.kind == "gate"
        ]
        assert len(gates) == n
        assert all(g.rationale for g in gates)

    def test_reservation_leak_check(self):
        engine, budget, _, _, _, _ = build_engine(allocation=100.0)
        rng = random.Random(8)
        for _ in range(40):
            decision = engine.evaluate(request(risk=rng.random(), est=rng.uniform(0, 8)))
            if decision.verdict in (Verdict.ALLOW, Verdict.DOWNGRADE):
                assert decision.reservation_id is not None
                budget.settle(decision.reservation_id, decision.est_carbon * rng.uniform(0, 1))
            else:
                assert decision.reservation_id is None
        assert budget.status(PR).reserved == pytest.approx(0.0, abs=1e-9)

    def test_determinism_across_fresh_replays(self):
        def run():
            engine, _, ledger, loops, _, _ = build_engine(allocation=60.0)
            loops.record_regeneration_attempt("loop-1", PR)
            decisions = []
            rng = random.Random(17)
            for _ in range(20):
                decisions.append(
                    engine.evaluate(
                        request(risk=rng.random(), est=rng.uniform(0, 20), loop_id="loop-1")
                    )
                )
            return decisions, ledger.export_audit("lines")

        first_decisions, first_export = run()
        second_decisions, second_export = run()
        assert first_decisions == second_decisions
        assert first_export == second_export


class TestPolicyFile:
    def test_round_trip(self, tmp_path):
        config = PolicyConfig(
            soft_breach_action="escalate",
            hard_exceed_action="deny",
            intensity_rules={
                "default": IntensityRule(threshold=350.0),
                "release_review": IntensityRule(mode="best_window", window_duration=7200.0),
            },
        )
        path = tmp_path / "policy.yaml"
        path.write_text(yaml.safe_dump(config.to_dict()))
        loaded = PolicyConfig.from_file(path)
        assert loaded.soft_breach_action == "escalate"
        assert loaded.hard_exceed_action == "deny"
        assert loaded.ladder == config.ladder
        assert loaded.intensity_rule(GateKind.RELEASE_REVIEW).mode == "best_window"
        assert loaded.intensity_rule(GateKind.PIPELINE_STAGE).threshold == 350.0

    def test_unversioned_rejected(self, tmp_path):
        path = tmp_path / "policy.yaml"
        path.write_text("deep_threshold: 0.5\n")
        with pytest.raises(InvalidPolicy):
            PolicyConfig.from_file(path)

    def test_bad_action_rejected(self):
        with pytest.raises(InvalidPolicy):
            PolicyConfig(soft_breach_action="explode")
