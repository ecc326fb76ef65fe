"""Green validation orchestration: two-phase planning, model-tier escalation,
and capped regeneration loops with human justification.

Planning is pure; loop state transitions are serialized per loop id.
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Callable, Mapping, Optional, Sequence

from .clock import Clock, SystemClock
from .core import (
    CaggError,
    ModelTier,
    ScopeId,
    TierNotInLadder,
    combined_assurance,
    estimate_duration,
    estimate_inference,
    validate_ladder,
)


class LoopTerminated(CaggError):
    pass


class LoopBlocked(CaggError):
    pass


class NotBlocked(CaggError):
    pass


class EmptyJustification(CaggError):
    pass


class AlreadyTerminated(CaggError):
    pass


class UnknownLoop(CaggError):
    pass


class RiskSource(str, Enum):
    STATIC_CHECKS = "static_checks"
    PRIOR_FAILURES = "prior_failures"
    MANUAL = "manual"


@dataclass(frozen=True)
class RiskSignal:
    """Caller-supplied failure-risk estimate in [0,1]; the engine never
    computes risk from code itself."""

    score: float
    source: RiskSource = RiskSource.MANUAL

    def __post_init__(self) -> None:
        if not 0.0 <= self.score <= 1.0:
            raise ValueError(f"risk score must be in [0,1], got {self.score}")


class PhaseKind(str, Enum):
    LIGHTWEIGHT = "lightweight"
    DEEP = "deep"


@dataclass(frozen=True)
class ValidationPhase:
    kind: PhaseKind
    tier: ModelTier
    est_tokens: Optional[int] = None  # deep phases are token-metered
    est_duration: Optional[float] = None  # lightweight phases are time-metered


@dataclass(frozen=True)
class ValidationPlan:
    phases: tuple[ValidationPhase, ...]
    est_carbon: float  # gCO2e
    est_assurance: float

    @property
    def deep_tier(self) -> Optional[ModelTier]:
        for phase in self.phases:
            if phase.kind is PhaseKind.DEEP:
                return phase.tier
        return None


@dataclass(frozen=True)
class PlanningParams:
    """Policy knobs plus the ambient estimate context (PUE, grid intensity)."""

    deep_threshold: float = 0.5
    escalation_thresholds: Mapping[str, float] = field(default_factory=dict)
    light_duration_s: float = 300.0
    deep_tokens: int = 200_000
    pue: float = 1.2
    intensity: float = 300.0

    def threshold_for(self, tier: ModelTier) -> float:
        return self.escalation_thresholds.get(tier.name, 1.0)


def _phase_estimate(phase: ValidationPhase, params: PlanningParams) -> float:
    if phase.kind is PhaseKind.DEEP:
        return estimate_inference(phase.est_tokens, phase.tier, params.pue, params.intensity).carbon
    return estimate_duration(phase.est_duration, phase.tier, params.pue, params.intensity).carbon


def _build_plan(phases: Sequence[ValidationPhase], params: PlanningParams) -> ValidationPlan:
    return ValidationPlan(
        phases=tuple(phases),
        est_carbon=sum(_phase_estimate(p, params) for p in phases),
        est_assurance=combined_assurance([p.tier for p in phases]),
    )


def choose_deep_tier(
    risk: RiskSignal, ladder: Sequence[ModelTier], params: PlanningParams
) -> ModelTier:
    """Lowest tier whose escalation threshold exceeds the risk, else the top."""
    for tier in ladder:
        if params.threshold_for(tier) > risk.score:
            return tier
    return ladder[-1]


def plan_validation(
    risk: RiskSignal, ladder: Sequence[ModelTier], params: PlanningParams
) -> ValidationPlan:
    """Two-phase plan: lightweight always runs on the lowest tier; a deep
    phase is added only when risk strictly exceeds the deep threshold."""
    ladder = validate_ladder(ladder)
    phases = [
        ValidationPhase(
            kind=PhaseKind.LIGHTWEIGHT, tier=ladder[0], est_duration=params.light_duration_s
        )
    ]
    if risk.score > params.deep_threshold:
        deep = choose_deep_tier(risk, ladder, params)
        phases.append(
            ValidationPhase(kind=PhaseKind.DEEP, tier=deep, est_tokens=params.deep_tokens)
        )
    return _build_plan(phases, params)


def always_deep_plan(ladder: Sequence[ModelTier], params: PlanningParams) -> ValidationPlan:
    """The unconditional-depth baseline: lightweight plus deep on the top tier."""
    ladder = validate_ladder(ladder)
    phases = [
        ValidationPhase(
            kind=PhaseKind.LIGHTWEIGHT, tier=ladder[0], est_duration=params.light_duration_s
        ),
        ValidationPhase(kind=PhaseKind.DEEP, tier=ladder[-1], est_tokens=params.deep_tokens),
    ]
    return _build_plan(phases, params)


def downgrade_plan(
    plan: ValidationPlan, ladder: Sequence[ModelTier], params: PlanningParams
) -> Optional[ValidationPlan]:
    """The same plan one deep tier lower, or None when already at the bottom."""
    ladder = validate_ladder(ladder)
    deep = plan.deep_tier
    if deep is None:
        return None
    index = next((i for i, t in enumerate(ladder) if t.name == deep.name), None)
    if index is None:
        raise TierNotInLadder(f"tier {deep.name!r} not in ladder")
    if index == 0:
        return None
    phases = [
        p if p.kind is not PhaseKind.DEEP else ValidationPhase(
            kind=PhaseKind.DEEP, tier=ladder[index - 1], est_tokens=p.est_tokens
        )
        for p in plan.phases
    ]
    return _build_plan(phases, params)


def escalate_tier(
    current: ModelTier,
    risk: RiskSignal,
    ladder: Sequence[ModelTier],
    params: PlanningParams,
) -> ModelTier:
    """One rung up when risk exceeds the current tier's threshold; the top rung
    is a ceiling."""
    ladder = validate_ladder(ladder)
    index = next((i for i, t in enumerate(ladder) if t.name == current.name), None)
    if index is None:
        raise TierNotInLadder(f"tier {current.name!r} not in ladder")
    if risk.score > params.threshold_for(current):
        return ladder[min(index + 1, len(ladder) - 1)]
    return current


class LoopState(str, Enum):
    ACTIVE = "active"
    BLOCKED = "blocked"
    TERMINATED = "terminated"


@dataclass(frozen=True)
class Justification:
    approver: str
    text: str
    granted_extension: int
    timestamp: datetime


@dataclass(frozen=True)
class RegenerationLoopState:
    loop_id: str
    scope: ScopeId
    attempts: int
    cap: int
    state: LoopState
    justifications: tuple[Justification, ...] = ()


@dataclass
class _Loop:
    loop_id: str
    scope: ScopeId
    cap: int
    attempts: int = 0
    state: LoopState = LoopState.ACTIVE
    justifications: list[Justification] = field(default_factory=list)

    def snapshot(self) -> RegenerationLoopState:
        return RegenerationLoopState(
            loop_id=self.loop_id,
            scope=self.scope,
            attempts=self.attempts,
            cap=self.cap,
            state=self.state,
            justifications=tuple(self.justifications),
        )


# Called when a loop blocks, so a review item can be opened.
BlockedHook = Callable[[RegenerationLoopState], None]
# Called with ("justification" | "termination", loop, approver, text, extension)
# so the decision lands in the provenance ledger.
DecisionSink = Callable[[str, RegenerationLoopState, str, str, Optional[int]], None]


class LoopRegistry:
    """Stop-and-justify regeneration loops, serialized per loop id."""

    def __init__(
        self,
        default_cap: int = 3,
        clock: Optional[Clock] = None,
        on_blocked: Optional[BlockedHook] = None,
        decision_sink: Optional[DecisionSink] = None,
    ):
        if default_cap < 1:
            raise ValueError(f"regeneration cap must be >= 1, got {default_cap}")
        self._default_cap = default_cap
        self._clock = clock if clock is not None else SystemClock()
        self._on_blocked = on_blocked
        self._sink = decision_sink
        self._registry_lock = threading.Lock()
        self._locks: dict[str, threading.Lock] = {}
        self._loops: dict[str, _Loop] = {}

    def _loop_lock(self, loop_id: str) -> threading.Lock:
        with self._registry_lock:
            return self._locks.setdefault(loop_id, threading.Lock())

    def get(self, loop_id: str) -> Optional[RegenerationLoopState]:
        with self._registry_lock:
            loop = self._loops.get(loop_id)
            return loop.snapshot() if loop else None

    def snapshot_all(self) -> list[RegenerationLoopState]:
        with self._registry_lock:
            return [loop.snapshot() for loop in self._loops.values()]

    def record_regeneration_attempt(self, loop_id: str, scope: ScopeId) -> RegenerationLoopState:
        blocked_now: Optional[RegenerationLoopState] = None
        with self._loop_lock(loop_id):
            with self._registry_lock:
                loop = self._loops.get(loop_id)
                if loop is None:
                    loop = _Loop(loop_id=loop_id, scope=scope, cap=self._default_cap)
                    self._loops[loop_id] = loop
            if loop.state is LoopState.TERMINATED:
                raise LoopTerminated(f"loop {loop_id!r} is terminated")
            if loop.state is LoopState.BLOCKED:
                raise LoopBlocked(
                    f"loop {loop_id!r} hit its cap of {loop.cap}; justification required"
                )
            loop.attempts += 1
            if loop.attempts >= loop.cap:
                loop.state = LoopState.BLOCKED
                blocked_now = loop.snapshot()
            result = loop.snapshot()
        if blocked_now is not None and self._on_blocked is not None:
            self._on_blocked(blocked_now)
        return result

    def justify(
        self, loop_id: str, approver: str, text: str, extension: int = 1
    ) -> RegenerationLoopState:
        if extension < 1:
            raise ValueError(f"extension must be >= 1, got {extension}")
        if not text.strip():
            raise EmptyJustification("justification text must be non-empty")
        if not approver.strip():
            raise EmptyJustification("approver must be non-empty")
        with self._loop_lock(loop_id):
            loop = self._require(loop_id)
            if loop.state is LoopState.TERMINATED:
                raise LoopTerminated(f"loop {loop_id!r} is terminated")
            if loop.state is not LoopState.BLOCKED:
                raise NotBlocked(f"loop {loop_id!r} is not blocked")
            loop.cap += extension
            loop.state = LoopState.ACTIVE
            loop.justifications.append(
                Justification(
                    approver=approver,
                    text=text,
                    granted_extension=extension,
                    timestamp=self._clock.now(),
                )
            )
            result = loop.snapshot()
        if self._sink is not None:
            self._sink("justification", result, approver, text, extension)
        return result

    def terminate(self, loop_id: str, approver: str, reason: str) -> RegenerationLoopState:
        with self._loop_lock(loop_id):
            loop = self._require(loop_id)
            if loop.state is LoopState.TERMINATED:
                raise AlreadyTerminated(f"loop {loop_id!r} already terminated")
            loop.state = LoopState.TERMINATED
            result = loop.snapshot()
        if self._sink is not None:
            self._sink("termination", result, approver, reason, None)
        return result

    def _require(self, loop_id: str) -> _Loop:
        with self._registry_lock:
            loop = self._loops.get(loop_id)
        if loop is None:
            raise UnknownLoop(f"unknown loop {loop_id!r}")
        return loop

    # -- persistence hooks (the service owns the file) -----------------------

    def to_state(self) -> dict:
        from .core import format_rfc3339

        with self._registry_lock:
            return {
                loop_id: {
                    "scope": loop.scope.path(),
                    "cap": loop.cap,
                    "attempts": loop.attempts,
                    "state": loop.state.value,
                    "justifications": [
                        {
                            "approver": j.approver,
                            "text": j.text,
                            "granted_extension": j.granted_extension,
                            "timestamp": format_rfc3339(j.timestamp),
                        }
                        for j in loop.justifications
                    ],
                }
                for loop_id, loop in self._loops.items()
            }

    def load_state(self, state: dict) -> None:
        from .core import parse_rfc3339

        with self._registry_lock:
            for loop_id, raw in state.items():
                self._loops[loop_id] = _Loop(
                    loop_id=loop_id,
                    scope=ScopeId.parse(raw["scope"]),
                    cap=raw["cap"],
                    attempts=raw["attempts"],
                    state=LoopState(raw["state"]),
                    justifications=[
                        Justification(
                            approver=j["approver"],
                            text=j["text"],
                            granted_extension=j["granted_extension"],
                            timestamp=parse_rfc3339(j["timestamp"]),
                        )
                        for j in raw["justifications"]
                    ],
                )
