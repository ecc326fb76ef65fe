"""The budgeted governance gate: one declarative policy evaluation that
composes regeneration state, budget reservations, grid intensity, and the
validation plan into a single ledgered verdict.

Rules run in a fixed order (regeneration cap, budget, intensity, plan) and
every rule leaves a rationale entry; the final verdict is the strongest
fired verdict under the configured precedence. Evaluation is deterministic:
identical inputs, configuration, and clock yield the identical decision.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Any, Mapping, Optional

import yaml

from .budget import BudgetManager, BudgetStatus
from .clock import Clock, SystemClock
from .core import CaggError, ModelTier, ScopeId, TierNotInLadder, validate_ladder
from .intensity import InfeasibleWindow, IntensitySeries, OutOfCoverage, best_window
from .ledger import GateDecisionRecord, ProvenanceLedger
from .orchestrator import (
    LoopRegistry,
    LoopState,
    PlanningParams,
    RiskSignal,
    ValidationPlan,
    downgrade_plan,
    plan_validation,
)


class InvalidPolicy(CaggError):
    pass


class UnknownReview(CaggError):
    pass


class AlreadyResolved(CaggError):
    pass


class GateKind(str, Enum):
    PULL_REQUEST_VALIDATION = "pr_validation"
    PIPELINE_STAGE = "pipeline_stage"
    RELEASE_REVIEW = "release_review"


class Verdict(str, Enum):
    ALLOW = "allow"
    DOWNGRADE = "downgrade"
    DEFER = "defer"
    ESCALATE = "escalate"
    DENY = "deny"


class ReviewTrigger(str, Enum):
    BUDGET_HARD_EXCEEDED = "budget_hard_exceeded"
    BUDGET_SOFT_BREACHED = "budget_soft_breached"
    REGENERATION_CAP = "regeneration_cap"


DEFAULT_PRECEDENCE = (
    Verdict.DENY,
    Verdict.ESCALATE,
    Verdict.DEFER,
    Verdict.DOWNGRADE,
    Verdict.ALLOW,
)


@dataclass(frozen=True)
class GateRequest:
    scope: ScopeId
    gate_kind: GateKind
    risk: RiskSignal
    est_carbon: float  # pre-flight estimate, grams
    deferrable_by: float = 0.0  # seconds
    loop_id: Optional[str] = None

    def __post_init__(self) -> None:
        if self.est_carbon < 0:
            raise ValueError(f"est_carbon must be >= 0, got {self.est_carbon}")
        if self.deferrable_by < 0:
            raise ValueError(f"deferrable_by must be >= 0, got {self.deferrable_by}")


@dataclass(frozen=True)
class GateDecision:
    decision_id: str
    verdict: Verdict
    rationale: tuple[str, ...]
    est_carbon: float = 0.0  # grams actually reserved (0 when nothing is held)
    reservation_id: Optional[str] = None
    to_tier: Optional[str] = None
    defer_until: Optional[datetime] = None
    review_id: Optional[str] = None
    plan: Optional[ValidationPlan] = None


@dataclass(frozen=True)
class IntensityRule:
    mode: str = "threshold"  # threshold | best_window | off
    threshold: float = 400.0  # gCO2e/kWh, used by threshold mode
    window_duration: Optional[float] = None  # seconds; None means one series step

    def __post_init__(self) -> None:
        if self.mode not in ("threshold", "best_window", "off"):
            raise InvalidPolicy(f"unknown intensity mode {self.mode!r}")


def default_ladder() -> tuple[ModelTier, ...]:
    return (
        ModelTier("small", energy_per_token=0.5, avg_power=80.0, assurance_value=0.45),
        ModelTier("medium", energy_per_token=2.0, avg_power=300.0, assurance_value=0.7),
        ModelTier("large", energy_per_token=8.0, avg_power=900.0, assurance_value=0.9),
    )


@dataclass(frozen=True)
class PolicyConfig:
    """Declarative gate policy; the file form is a versioned YAML document."""

    ladder: tuple[ModelTier, ...] = field(default_factory=default_ladder)
    escalation_thresholds: Mapping[str, float] = field(
        default_factory=lambda: {"small": 0.4, "medium": 0.75, "large": 1.0}
    )
    deep_threshold: float = 0.5
    regeneration_cap: int = 3
    light_duration_s: float = 300.0
    deep_tokens: int = 200_000
    pue: float = 1.2
    intensity_rules: Mapping[str, IntensityRule] = field(
        default_factory=lambda: {"default": IntensityRule()}
    )
    soft_breach_action: str = "downgrade"  # downgrade | escalate
    hard_exceed_action: str = "escalate"  # escalate | deny
    precedence: tuple[Verdict, ...] = DEFAULT_PRECEDENCE
    schema_version: int = 1

    def __post_init__(self) -> None:
        validate_ladder(self.ladder)
        if self.soft_breach_action not in ("downgrade", "escalate"):
            raise InvalidPolicy(f"bad soft_breach_action {self.soft_breach_action!r}")
        if self.hard_exceed_action not in ("escalate", "deny"):
            raise InvalidPolicy(f"bad hard_exceed_action {self.hard_exceed_action!r}")
        if sorted(v.value for v in self.precedence) != sorted(v.value for v in Verdict):
            raise InvalidPolicy("precedence must order all five verdicts")
        if self.regeneration_cap < 1:
            raise InvalidPolicy("regeneration_cap must be >= 1")

    def tier(self, name: str) -> ModelTier:
        for tier in self.ladder:
            if tier.name == name:
                return tier
        raise TierNotInLadder(f"tier {name!r} not in policy ladder")

    def intensity_rule(self, gate_kind: GateKind) -> IntensityRule:
        rules = self.intensity_rules
        return rules.get(gate_kind.value) or rules.get("default") or IntensityRule(mode="off")

    def planning_params(self, intensity: float) -> PlanningParams:
        return PlanningParams(
            deep_threshold=self.deep_threshold,
            escalation_thresholds=self.escalation_thresholds,
            light_duration_s=self.light_duration_s,
            deep_tokens=self.deep_tokens,
            pue=self.pue,
            intensity=intensity,
        )

    def severity(self, verdict: Verdict) -> int:
        return self.precedence.index(verdict)

    @classmethod
    def from_file(cls, path: Path) -> "PolicyConfig":
        try:
            raw = yaml.safe_load(Path(path).read_text())
        except (OSError, yaml.YAMLError) as exc:
            raise InvalidPolicy(f"cannot read policy {path}: {exc}") from exc
        if not isinstance(raw, dict):
            raise InvalidPolicy(f"policy {path} is not a mapping")
        return cls.from_dict(raw)

    @classmethod
    def from_dict(cls, raw: dict) -> "PolicyConfig":
        version = raw.get("schema_version")
        if version != 1:
            raise InvalidPolicy(f"unsupported policy schema_version {version!r}")
        kwargs: dict[str, Any] = {"schema_version": 1}
        if "ladder" in raw:
            ladder = []
            thresholds = {}
            for entry in raw["ladder"]:
                ladder.append(
                    ModelTier(
                        name=entry["name"],
                        energy_per_token=float(entry["energy_per_token"]),
                        avg_power=float(entry["avg_power"]),
                        assurance_value=float(entry["assurance_value"]),
                    )
                )
                thresholds[entry["name"]] = float(entry.get("escalation_threshold", 1.0))
            kwargs["ladder"] = tuple(ladder)
            kwargs["escalation_thresholds"] = thresholds
        for key in (
            "deep_threshold", "regeneration_cap", "light_duration_s",
            "deep_tokens", "pue", "soft_breach_action", "hard_exceed_action",
        ):
            if key in raw:
                kwargs[key] = raw[key]
        if "precedence" in raw:
            kwargs["precedence"] = tuple(Verdict(v) for v in raw["precedence"])
        if "intensity" in raw:
            rules = {}
            for kind, entry in raw["intensity"].items():
                rules[kind] = IntensityRule(
                    mode=entry.get("mode", "threshold"),
                    threshold=float(entry.get("threshold", 400.0)),
                    window_duration=(
                        None
                        if entry.get("window_duration") is None
                        else float(entry["window_duration"])
                    ),
                )
            kwargs["intensity_rules"] = rules
        try:
            return cls(**kwargs)
        except (KeyError, TypeError, ValueError) as exc:
            raise InvalidPolicy(f"bad policy document: {exc}") from exc

    def to_dict(self) -> dict:
        return {
            "schema_version": self.schema_version,
            "deep_threshold": self.deep_threshold,
            "regeneration_cap": self.regeneration_cap,
            "light_duration_s": self.light_duration_s,
            "deep_tokens": self.deep_tokens,
            "pue": self.pue,
            "soft_breach_action": self.soft_breach_action,
            "hard_exceed_action": self.hard_exceed_action,
            "precedence": [v.value for v in self.precedence],
            "ladder": [
                {
                    "name": t.name,
                    "energy_per_token": t.energy_per_token,
                    "avg_power": t.avg_power,
                    "assurance_value": t.assurance_value,
                    "escalation_threshold": self.escalation_thresholds.get(t.name, 1.0),
                }
                for t in self.ladder
            ],
            "intensity": {
                kind: {
                    "mode": rule.mode,
                    "threshold": rule.threshold,
                    "window_duration": rule.window_duration,
                }
                for kind, rule in self.intensity_rules.items()
            },
        }


@dataclass
class _Candidate:
    verdict: Verdict
    trigger: Optional[ReviewTrigger] = None
    to_tier: Optional[str] = None
    defer_until: Optional[datetime] = None


class DecisionIds:
    """Monotonic decision-id allocator; deterministic for replay, unique
    across restarts when seeded from the existing ledger."""

    def __init__(self, start: int = 0):
        self._next = start
        self._lock = threading.Lock()

    def next(self) -> str:
        with self._lock:
            n = self._next
            self._next += 1
        return f"d{n:08d}"

    @classmethod
    def from_ledger(cls, ledger: ProvenanceLedger) -> "DecisionIds":
        highest = -1
        for record in ledger.records():
            payload = record.payload
            if isinstance(payload, GateDecisionRecord) and payload.decision_id.startswith("d"):
                try:
                    highest = max(highest, int(payload.decision_id[1:]))
                except ValueError:
                    continue
        return cls(start=highest + 1)


class GateEngine:
    """Evaluates gate requests against policy and ledgers every decision."""

    def __init__(
        self,
        config: PolicyConfig,
        budget: BudgetManager,
        ledger: ProvenanceLedger,
        loops: LoopRegistry,
        reviews: Any,  # service.ReviewQueue or any duck with the same surface
        series_provider,  # callable -> IntensitySeries
        clock: Optional[Clock] = None,
        decision_ids: Optional[DecisionIds] = None,
    ):
        self.config = config
        self._budget = budget
        self._ledger = ledger
        self._loops = loops
        self._reviews = reviews
        self._series_provider = series_provider
        self._clock = clock if clock is not None else SystemClock()
        self.ids = decision_ids if decision_ids is not None else DecisionIds.from_ledger(ledger)

    def _series(self) -> IntensitySeries:
        return self._series_provider()

    # -- evaluation ----------------------------------------------------------

    def evaluate(
        self,
        request: GateRequest,
        override_trigger: Optional[ReviewTrigger] = None,
        override_review_id: Optional[str] = None,
        approver: Optional[str] = None,
        note: Optional[str] = None,
    ) -> GateDecision:
        now = self._clock.now()
        series = self._series()
        now_offset = series.offset_of(now)
        if now_offset < 0 or now_offset >= series.coverage:
            raise OutOfCoverage(f"now {now} outside intensity coverage")
        if now_offset + request.deferrable_by > series.coverage + 1e-9:
            raise OutOfCoverage(
                f"deferral window extends {request.deferrable_by}s past coverage"
            )
        current_intensity = series.intensity_at(now)
        params = self.config.planning_params(current_intensity)
        plan = plan_validation(request.risk, self.config.ladder, params)

        rationale: list[str] = []
        candidates: list[_Candidate] = []
        reservation_id: Optional[str] = None
        est_reserved = 0.0
        wants_defer_fallback = False

        # rule 1: regeneration cap
        if request.loop_id is not None:
            loop = self._loops.get(request.loop_id)
            if loop is not None and loop.state is LoopState.TERMINATED:
                rationale.append("regen.terminated")
                candidates.append(_Candidate(Verdict.DENY))
            elif (
                loop is not None
                and loop.state is LoopState.BLOCKED
                and override_trigger is not ReviewTrigger.REGENERATION_CAP
            ):
                rationale.append("regen.blocked")
                candidates.append(
                    self._escalate(ReviewTrigger.REGENERATION_CAP, request, rationale)
                )
            else:
                rationale.append("regen.ok")

        # rule 2: budget reservation
        budget_override = override_trigger in (
            ReviewTrigger.BUDGET_HARD_EXCEEDED,
            ReviewTrigger.BUDGET_SOFT_BREACHED,
        )
        outcome = self._budget.reserve(request.scope, request.est_carbon, force=budget_override)
        if budget_override:
            rationale.append("budget.override")
            reservation_id = outcome.reservation_id
            est_reserved = request.est_carbon
        elif outcome.status is BudgetStatus.HARD_EXCEEDED:
            rationale.append("budget.hard")
            candidates.append(self._hard_action(request, rationale))
        elif outcome.status is BudgetStatus.SOFT_BREACHED:
            rationale.append("budget.soft")
            reservation_id = outcome.reservation_id
            est_reserved = request.est_carbon
            if self.config.soft_breach_action == "escalate":
                candidates.append(
                    self._escalate(ReviewTrigger.BUDGET_SOFT_BREACHED, request, rationale)
                )
            else:
                lower = downgrade_plan(plan, self.config.ladder, params)
                if lower is None:
                    # nothing cheaper to run: defer instead when allowed
                    rationale.append("downgrade.floor")
                    if request.deferrable_by > 0:
                        wants_defer_fallback = True
                    else:
                        candidates.append(
                            self._escalate(
                                ReviewTrigger.BUDGET_SOFT_BREACHED, request, rationale
                            )
                        )
                else:
                    scaled = request.est_carbon * (
                        lower.est_carbon / plan.est_carbon if plan.est_carbon > 0 else 1.0
                    )
                    self._budget.cancel(reservation_id)
                    reservation_id = None
                    est_reserved = 0.0
                    retry = self._budget.reserve(request.scope, scaled)
                    if retry.status is BudgetStatus.HARD_EXCEEDED:
                        rationale.append("budget.hard")
                        candidates.append(self._hard_action(request, rationale))
                    else:
                        reservation_id = retry.reservation_id
                        est_reserved = scaled
                        plan = lower
                        to_tier = lower.deep_tier.name
                        rationale.append(f"downgrade.to:{to_tier}")
                        candidates.append(_Candidate(Verdict.DOWNGRADE, to_tier=to_tier))
        else:
            rationale.append("budget.ok")
            reservation_id = outcome.reservation_id
            est_reserved = request.est_carbon

        # rule 3: carbon-intensity scheduling
        rule = self.config.intensity_rule(request.gate_kind)
        defer_until = self._intensity_verdict(
            rule, series, now_offset, current_intensity, request.deferrable_by,
            rationale, force_window=wants_defer_fallback,
        )
        if defer_until is not None:
            candidates.append(_Candidate(Verdict.DEFER, defer_until=defer_until))
        elif wants_defer_fallback:
            # no better window either; hand it to a human
            candidates.append(
                self._escalate(ReviewTrigger.BUDGET_SOFT_BREACHED, request, rationale)
            )

        # rule 4: validation plan
        deep = plan.deep_tier
        rationale.append(f"plan.deep:{deep.name}" if deep else "plan.light")

        # verdict by precedence; Allow when nothing stronger fired
        final = _Candidate(Verdict.ALLOW)
        for candidate in candidates:
            if self.config.severity(candidate.verdict) < self.config.severity(final.verdict):
                final = candidate

        review_id = override_review_id
        if final.verdict is Verdict.ESCALATE:
            review_id = self._reviews.open_review(
                final.trigger, request, loop_id=request.loop_id
            )
            rationale.append(f"review.opened:{review_id}")

        if final.verdict not in (Verdict.ALLOW, Verdict.DOWNGRADE) and reservation_id:
            self._budget.cancel(reservation_id)
            reservation_id = None
            est_reserved = 0.0

        decision = self._ledger_decision(
            request=request,
            verdict=final,
            rationale=tuple(rationale),
            reservation_id=reservation_id,
            est_reserved=est_reserved,
            review_id=review_id,
            plan=plan,
            override=override_trigger is not None,
            approver=approver,
            note=note,
            now=now,
        )
        return decision

    def _hard_action(self, request: GateRequest, rationale: list[str]) -> _Candidate:
        if self.config.hard_exceed_action == "deny":
            return _Candidate(Verdict.DENY)
        return self._escalate(ReviewTrigger.BUDGET_HARD_EXCEEDED, request, rationale)

    def _escalate(
        self, trigger: ReviewTrigger, request: GateRequest, rationale: list[str]
    ) -> _Candidate:
        """Escalate to review, unless a review for this same cause was already
        denied by a human: re-asking the same question is review spam, so the
        standing denial becomes a Deny verdict."""
        latest = self._reviews.latest_resolution(
            trigger, request.scope.path(), request.loop_id
        )
        if latest == "denied":
            rationale.append("review.denied_precedent")
            return _Candidate(Verdict.DENY)
        return _Candidate(Verdict.ESCALATE, trigger=trigger)

    def _intensity_verdict(
        self,
        rule: IntensityRule,
        series: IntensitySeries,
        now_offset: float,
        current_intensity: float,
        deferrable_by: float,
        rationale: list[str],
        force_window: bool = False,
    ) -> Optional[datetime]:
        """Returns the defer-until instant when a strictly later, strictly
        better window exists under the configured rule."""
        if rule.mode == "off" and not force_window:
            rationale.append("intensity.off")
            return None
        duration = rule.window_duration or series.step
        high = current_intensity > rule.threshold
        if rule.mode == "threshold" and not high and not force_window:
            rationale.append("intensity.ok")
            return None
        if rule.mode == "threshold" and high:
            rationale.append("intensity.high")
        if deferrable_by <= 0:
            if rule.mode == "best_window":
                rationale.append("intensity.ok")
            return None
        try:
            choice = best_window(
                series,
                duration=duration,
                deadline=now_offset + deferrable_by,
                earliest=now_offset,
            )
        except InfeasibleWindow:
            if rule.mode == "best_window":
                rationale.append("intensity.ok")
            return None
        immediate = series.mean_over(
            now_offset, min(duration, series.coverage - now_offset)
        )
        if choice.start_offset > now_offset + 1e-9 and choice.mean_intensity < immediate - 1e-9:
            rationale.append("intensity.defer")
            return series.start + timedelta(seconds=choice.start_offset)
        if rule.mode == "best_window":
            rationale.append("intensity.ok")
        return None

    def _ledger_decision(
        self,
        request: GateRequest,
        verdict: _Candidate,
        rationale: tuple[str, ...],
        reservation_id: Optional[str],
        est_reserved: float,
        review_id: Optional[str],
        plan: ValidationPlan,
        override: bool,
        approver: Optional[str],
        note: Optional[str],
        now: datetime,
    ) -> GateDecision:
        decision_id = self.ids.next()
        record = GateDecisionRecord(
            decision_id=decision_id,
            kind="gate",
            scope=request.scope,
            gate_kind=request.gate_kind.value,
            verdict=verdict.verdict.value,
            rationale=rationale,
            est_carbon=est_reserved if reservation_id else request.est_carbon,
            to_tier=verdict.to_tier,
            defer_until=verdict.defer_until,
            review_id=review_id,
            loop_id=request.loop_id,
            reservation_id=reservation_id,
            approver=approver,
            note=note,
            override=override,
            timestamp=now,
        )
        self._ledger.append(record)
        return GateDecision(
            decision_id=decision_id,
            verdict=verdict.verdict,
            rationale=rationale,
            est_carbon=est_reserved,
            reservation_id=reservation_id,
            to_tier=verdict.to_tier,
            defer_until=verdict.defer_until,
            review_id=review_id,
            plan=plan,
        )

    # -- review outcomes -----------------------------------------------------

    def apply_review_outcome(
        self, review_id: str, outcome: str, approver: str, note: str = ""
    ) -> GateDecision:
        """Resolve a budget-triggered review: Approve re-runs the gate with the
        triggering rule overridden to allow; Deny denies outright."""
        item = self._reviews.get(review_id)
        if item is None:
            raise UnknownReview(f"unknown review {review_id!r}")
        if item.trigger is ReviewTrigger.REGENERATION_CAP:
            raise InvalidPolicy(
                "regeneration reviews resolve through loop justification/termination"
            )
        if outcome not in ("approve", "deny"):
            raise ValueError(f"outcome must be approve|deny, got {outcome!r}")
        resolved = "approved" if outcome == "approve" else "denied"
        self._reviews.resolve(review_id, resolved, approver, note)  # AlreadyResolved guards here
        if outcome == "deny":
            now = self._clock.now()
            decision_id = self.ids.next()
            self._ledger.append(
                GateDecisionRecord(
                    decision_id=decision_id,
                    kind="review",
                    scope=item.request.scope,
                    gate_kind=item.request.gate_kind.value,
                    verdict=Verdict.DENY.value,
                    rationale=("review.denied",),
                    review_id=review_id,
                    loop_id=item.request.loop_id,
                    approver=approver,
                    note=note or None,
                    timestamp=now,
                )
            )
            return GateDecision(
                decision_id=decision_id,
                verdict=Verdict.DENY,
                rationale=("review.denied",),
                review_id=review_id,
            )
        return self.evaluate(
            item.request,
            override_trigger=item.trigger,
            override_review_id=review_id,
            approver=approver,
            note=note or None,
        )
