"""HTTP gate service: exposes gate checks, workload recording, budgets,
regeneration loops, reviews, intensity, and ledger audit to CI clients and
the review console. Owns the data directory and all persistence wiring.

Data directory layout:
    ledger.ndjson   append-only provenance ledger
    budgets.json    budget snapshot (consumed/reserved survive restart)
    workflow.json   loop and review state
"""

from __future__ import annotations

import json
import os
import threading
from dataclasses import dataclass
from datetime import datetime, timedelta
from enum import Enum
from pathlib import Path
from typing import Optional

from fastapi import Depends, FastAPI, Header, HTTPException, Query, Request
from fastapi.exceptions import RequestValidationError
from fastapi.responses import JSONResponse, PlainTextResponse
from pydantic import BaseModel, Field

from .budget import (
    BudgetManager,
    InvalidAllocation,
    ReservationSettled,
    UnknownReservation,
    UnknownScope,
)
from .clock import Clock, SystemClock
from .core import (
    CaggError,
    EventKind,
    InvalidScope,
    NonPositiveIntensity,
    ScopeId,
    TierNotInLadder,
    format_rfc3339,
    make_workload_event,
    parse_rfc3339,
)
from .intensity import (
    InfeasibleWindow,
    IntensitySeries,
    OutOfCoverage,
    best_window,
    load_trace,
    synthetic_series,
)
from .ledger import GateDecisionRecord, InvalidPayload, ProvenanceLedger, StorageFailure
from .orchestrator import (
    AlreadyTerminated,
    EmptyJustification,
    LoopBlocked,
    LoopRegistry,
    LoopTerminated,
    NotBlocked,
    RegenerationLoopState,
    RiskSignal,
    RiskSource,
    UnknownLoop,
)
from .policy import (
    AlreadyResolved,
    DecisionIds,
    GateDecision,
    GateEngine,
    GateKind,
    GateRequest,
    InvalidPolicy,
    PolicyConfig,
    ReviewTrigger,
    UnknownReview,
    Verdict,
)

SCHEMA_VERSION = 1


class ReviewStatus(str, Enum):
    PENDING = "pending"
    APPROVED = "approved"
    DENIED = "denied"


@dataclass
class ReviewItem:
    """A human-review work item; resolved items are immutable."""

    review_id: str
    created: datetime
    scope: ScopeId
    trigger: ReviewTrigger
    request: GateRequest
    status: ReviewStatus = ReviewStatus.PENDING
    loop_id: Optional[str] = None
    resolved_by: Optional[str] = None
    resolution_note: Optional[str] = None


class ReviewQueue:
    """Pending review items with exactly-once resolution."""

    def __init__(self, clock: Optional[Clock] = None, on_change=None):
        self._clock = clock if clock is not None else SystemClock()
        self._on_change = on_change
        self._lock = threading.Lock()
        self._items: dict[str, ReviewItem] = {}
        self._next_id = 0

    def open_review(
        self, trigger: ReviewTrigger, request: GateRequest, loop_id: Optional[str] = None
    ) -> str:
        with self._lock:
            for item in self._items.values():
                if (
                    item.status is ReviewStatus.PENDING
                    and item.trigger is trigger
                    and item.scope.path() == request.scope.path()
                    and item.loop_id == loop_id
                ):
                    return item.review_id  # keep one live item per cause
            review_id = f"rev-{self._next_id:06d}"
            self._next_id += 1
            self._items[review_id] = ReviewItem(
                review_id=review_id,
                created=self._clock.now(),
                scope=request.scope,
                trigger=trigger,
                request=request,
                loop_id=loop_id,
            )
        if self._on_change:
            self._on_change()
        return review_id

    def get(self, review_id: str) -> Optional[ReviewItem]:
        with self._lock:
            return self._items.get(review_id)

    def pending(self) -> list[ReviewItem]:
        with self._lock:
            items = [i for i in self._items.values() if i.status is ReviewStatus.PENDING]
        return sorted(items, key=lambda i: (i.created, i.review_id))

    def latest_resolution(
        self, trigger: ReviewTrigger, scope_path: str, loop_id: Optional[str]
    ) -> Optional[str]:
        """Status of the most recent resolved review for this cause, if any."""
        with self._lock:
            matches = [
                item
                for item in self._items.values()
                if item.status is not ReviewStatus.PENDING
                and item.trigger is trigger
                and item.scope.path() == scope_path
                and item.loop_id == loop_id
            ]
        if not matches:
            return None
        latest = max(matches, key=lambda i: (i.created, i.review_id))
        return latest.status.value

    def resolve(self, review_id: str, status: str, approver: str, note: str = "") -> ReviewItem:
        with self._lock:
            item = self._items.get(review_id)
            if item is None:
                raise UnknownReview(f"unknown review {review_id!r}")
            if item.status is not ReviewStatus.PENDING:
                raise AlreadyResolved(f"review {review_id!r} already {item.status.value}")
            item.status = ReviewStatus(status)
            item.resolved_by = approver
            item.resolution_note = note or None
        if self._on_change:
            self._on_change()
        return item

    # -- persistence ----------------------------------------------------------

    def to_state(self) -> dict:
        with self._lock:
            return {
                "next_id": self._next_id,
                "items": {
                    rid: {
                        "created": format_rfc3339(item.created),
                        "scope": item.scope.path(),
                        "trigger": item.trigger.value,
                        "request": request_to_dict(item.request),
                        "status": item.status.value,
                        "loop_id": item.loop_id,
                        "resolved_by": item.resolved_by,
                        "resolution_note": item.resolution_note,
                    }
                    for rid, item in self._items.items()
                },
            }

    def load_state(self, state: dict) -> None:
        with self._lock:
            self._next_id = state["next_id"]
            for rid, raw in state["items"].items():
                self._items[rid] = ReviewItem(
                    review_id=rid,
                    created=parse_rfc3339(raw["created"]),
                    scope=ScopeId.parse(raw["scope"]),
                    trigger=ReviewTrigger(raw["trigger"]),
                    request=request_from_dict(raw["request"]),
                    status=ReviewStatus(raw["status"]),
                    loop_id=raw["loop_id"],
                    resolved_by=raw["resolved_by"],
                    resolution_note=raw["resolution_note"],
                )


def request_to_dict(request: GateRequest) -> dict:
    return {
        "scope": request.scope.path(),
        "gate_kind": request.gate_kind.value,
        "risk": {"score": request.risk.score, "source": request.risk.source.value},
        "est_carbon": request.est_carbon,
        "deferrable_by": request.deferrable_by,
        "loop_id": request.loop_id,
    }


def request_from_dict(raw: dict) -> GateRequest:
    return GateRequest(
        scope=ScopeId.parse(raw["scope"]),
        gate_kind=GateKind(raw["gate_kind"]),
        risk=RiskSignal(score=raw["risk"]["score"], source=RiskSource(raw["risk"]["source"])),
        est_carbon=raw["est_carbon"],
        deferrable_by=raw.get("deferrable_by", 0.0),
        loop_id=raw.get("loop_id"),
    )


def decision_to_dict(decision: GateDecision) -> dict:
    plan = None
    if decision.plan is not None:
        plan = {
            "phases": [
                {
                    "kind": p.kind.value,
                    "tier": p.tier.name,
                    "est_tokens": p.est_tokens,
                    "est_duration": p.est_duration,
                }
                for p in decision.plan.phases
            ],
            "est_carbon": decision.plan.est_carbon,
            "est_assurance": decision.plan.est_assurance,
        }
    return {
        "schema_version": SCHEMA_VERSION,
        "decision_id": decision.decision_id,
        "verdict": decision.verdict.value,
        "rationale": list(decision.rationale),
        "est_carbon": decision.est_carbon,
        "reservation_id": decision.reservation_id,
        "to_tier": decision.to_tier,
        "defer_until": None if decision.defer_until is None else format_rfc3339(decision.defer_until),
        "review_id": decision.review_id,
        "plan": plan,
    }


def review_to_dict(item: ReviewItem) -> dict:
    return {
        "review_id": item.review_id,
        "created": format_rfc3339(item.created),
        "scope": item.scope.path(),
        "trigger": item.trigger.value,
        "status": item.status.value,
        "loop_id": item.loop_id,
        "request": request_to_dict(item.request),
        "resolved_by": item.resolved_by,
        "resolution_note": item.resolution_note,
    }


def budget_to_dict(snapshot) -> dict:
    return {
        "scope": snapshot.scope.path(),
        "allocation": snapshot.allocation,
        "consumed": snapshot.consumed,
        "reserved": snapshot.reserved,
        "remaining": snapshot.remaining,
        "soft_threshold": snapshot.soft_threshold,
        "period": None
        if snapshot.period is None
        else [format_rfc3339(snapshot.period[0]), format_rfc3339(snapshot.period[1])],
    }


def loop_to_dict(state: RegenerationLoopState) -> dict:
    return {
        "loop_id": state.loop_id,
        "scope": state.scope.path(),
        "attempts": state.attempts,
        "cap": state.cap,
        "state": state.state.value,
        "justifications": [
            {
                "approver": j.approver,
                "text": j.text,
                "granted_extension": j.granted_extension,
                "timestamp": format_rfc3339(j.timestamp),
            }
            for j in state.justifications
        ],
    }


class GateService:
    """In-process facade over all engine components; the HTTP layer and the
    CLI --local mode are both thin shims over this."""

    def __init__(
        self,
        data_dir: Path,
        policy: Optional[PolicyConfig] = None,
        intensity: Optional[IntensitySeries] = None,
        clock: Optional[Clock] = None,
    ):
        self.data_dir = Path(data_dir)
        self.data_dir.mkdir(parents=True, exist_ok=True)
        self.clock = clock if clock is not None else SystemClock()
        self.policy = policy if policy is not None else PolicyConfig()
        self._series = intensity if intensity is not None else synthetic_series(
            start=self.clock.now() - timedelta(hours=1), hours=14 * 24
        )

        self.ledger = ProvenanceLedger(self.data_dir / "ledger.ndjson")
        self.budget = BudgetManager(self.data_dir / "budgets.json", clock=self.clock)
        self._ids = DecisionIds.from_ledger(self.ledger)
        self._event_ids = _EventIds.from_ledger(self.ledger)
        self.reviews = ReviewQueue(clock=self.clock, on_change=self._persist_workflow)
        self.loops = LoopRegistry(
            default_cap=self.policy.regeneration_cap,
            clock=self.clock,
            on_blocked=self._on_loop_blocked,
            decision_sink=self._ledger_loop_decision,
        )
        self._workflow_path = self.data_dir / "workflow.json"
        if self._workflow_path.exists():
            state = json.loads(self._workflow_path.read_text())
            self.loops.load_state(state.get("loops", {}))
            self.reviews.load_state(state.get("reviews", {"next_id": 0, "items": {}}))
        self.engine = GateEngine(
            config=self.policy,
            budget=self.budget,
            ledger=self.ledger,
            loops=self.loops,
            reviews=self.reviews,
            series_provider=lambda: self._series,
            clock=self.clock,
            decision_ids=self._ids,
        )

    # -- wiring callbacks ------------------------------------------------------

    def _persist_workflow(self) -> None:
        state = {"loops": self.loops.to_state(), "reviews": self.reviews.to_state()}
        tmp = self._workflow_path.with_suffix(".tmp")
        tmp.write_text(json.dumps(state))
        os.replace(tmp, self._workflow_path)

    def _on_loop_blocked(self, loop: RegenerationLoopState) -> None:
        # Synthesize the request context: the block came from an attempt, not a gate.
        request = GateRequest(
            scope=loop.scope,
            gate_kind=GateKind.PULL_REQUEST_VALIDATION,
            risk=RiskSignal(0.0, RiskSource.MANUAL),
            est_carbon=0.0,
            loop_id=loop.loop_id,
        )
        self.reviews.open_review(ReviewTrigger.REGENERATION_CAP, request, loop_id=loop.loop_id)
        self._persist_workflow()

    def _ledger_loop_decision(
        self,
        kind: str,
        loop: RegenerationLoopState,
        approver: str,
        text: str,
        extension: Optional[int],
    ) -> None:
        self.ledger.append(
            GateDecisionRecord(
                decision_id=self._ids.next(),
                kind=kind,
                scope=loop.scope,
                rationale=(f"regen.{'justified' if kind == 'justification' else 'terminated'}",),
                loop_id=loop.loop_id,
                approver=approver,
                note=text,
                extension=extension,
                timestamp=self.clock.now(),
            )
        )
        self._persist_workflow()

    # -- operations --------------------------------------------------------------

    def check_gate(self, request: GateRequest) -> GateDecision:
        decision = self.engine.evaluate(request)
        self._persist_workflow()
        return decision

    def record_event(
        self,
        kind: EventKind,
        tier_name: str,
        tokens_in: int = 0,
        tokens_out: int = 0,
        duration: float = 0.0,
        reservation_id: Optional[str] = None,
        scope: Optional[ScopeId] = None,
        event_id: Optional[str] = None,
        intensity: Optional[float] = None,
        pue: Optional[float] = None,
        timestamp: Optional[datetime] = None,
    ) -> dict:
        tier = self.policy.tier(tier_name)
        when = timestamp if timestamp is not None else self.clock.now()
        if intensity is None:
            intensity = self._series.intensity_at(when)
        if pue is None:
            pue = self.policy.pue
        if reservation_id is not None:
            scope = self.budget.reservation_scope(reservation_id)
        elif scope is None:
            raise InvalidScope("report must name a reservation_id or a scope")
        elif self._is_budgeted(scope):
            raise InvalidScope(
                f"scope {scope.path()!r} is budgeted; reports must settle a reservation"
            )
        event = make_workload_event(
            event_id=event_id if event_id else self._event_ids.next(),
            scope=scope,
            kind=kind,
            tier=tier,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            duration=duration,
            timestamp=when,
            pue=pue,
            intensity=intensity,
        )
        settle_status = None
        if reservation_id is not None:
            outcome = self.budget.settle(reservation_id, event.carbon)
            settle_status = outcome.status.value
            if outcome.overflow > 0:
                self.ledger.append(
                    GateDecisionRecord(
                        decision_id=self._ids.next(),
                        kind="budget_overflow",
                        scope=scope,
                        rationale=("budget.overflow",),
                        reservation_id=reservation_id,
                        amount=outcome.overflow,
                        timestamp=when,
                    )
                )
        record = self.ledger.append(event)
        return {
            "schema_version": SCHEMA_VERSION,
            "seq": record.seq,
            "event_id": event.event_id,
            "energy": event.energy,
            "carbon": event.carbon,
            "settle_status": settle_status,
        }

    def _is_budgeted(self, scope: ScopeId) -> bool:
        budgets = self.budget.snapshot_all()
        return any(node.path() in budgets for node in scope.chain())

    def resolve_review(
        self, review_id: str, outcome: str, approver: str, note: str = "", extension: int = 1
    ) -> dict:
        item = self.reviews.get(review_id)
        if item is None:
            raise UnknownReview(f"unknown review {review_id!r}")
        if item.trigger is ReviewTrigger.REGENERATION_CAP:
            if item.status is not ReviewStatus.PENDING:
                raise AlreadyResolved(f"review {review_id!r} already {item.status.value}")
            if outcome == "approve":
                if not note.strip():
                    raise EmptyJustification("cap extensions require a justification note")
                loop = self.loops.justify(item.loop_id, approver, note, extension)
                self.reviews.resolve(review_id, "approved", approver, note)
                result: dict = {"loop": loop_to_dict(loop)}
            elif outcome == "deny":
                self.reviews.resolve(review_id, "denied", approver, note)
                self.ledger.append(
                    GateDecisionRecord(
                        decision_id=self._ids.next(),
                        kind="review",
                        scope=item.scope,
                        verdict=Verdict.DENY.value,
                        rationale=("review.denied",),
                        review_id=review_id,
                        loop_id=item.loop_id,
                        approver=approver,
                        note=note or None,
                        timestamp=self.clock.now(),
                    )
                )
                result = {"loop": loop_to_dict(self.loops.get(item.loop_id))}
            else:
                raise ValueError(f"outcome must be approve|deny, got {outcome!r}")
        else:
            decision = self.engine.apply_review_outcome(review_id, outcome, approver, note)
            result = {"decision": decision_to_dict(decision)}
        self._persist_workflow()
        result["review"] = review_to_dict(self.reviews.get(review_id))
        return result

    def recent_decisions(self, limit: int = 20) -> list[dict]:
        """Newest ledgered governance decisions, oldest first within the tail."""
        out = []
        for record in self.ledger.records():
            payload = record.payload
            if not isinstance(payload, GateDecisionRecord):
                continue
            out.append(
                {
                    "seq": record.seq,
                    "decision_id": payload.decision_id,
                    "kind": payload.kind,
                    "scope": payload.scope.path(),
                    "verdict": payload.verdict,
                    "rationale": list(payload.rationale),
                    "est_carbon": payload.est_carbon,
                    "review_id": payload.review_id,
                    "loop_id": payload.loop_id,
                    "approver": payload.approver,
                    "override": payload.override,
                    "timestamp": format_rfc3339(payload.timestamp),
                }
            )
        return out[-limit:]

    def intensity_now(self) -> dict:
        now = self.clock.now()
        return {
            "time": format_rfc3339(now),
            "intensity": self._series.intensity_at(now),
            "series_start": format_rfc3339(self._series.start),
            "step": self._series.step,
            "values": list(self._series.values),
        }

    def intensity_window(self, duration: float, deadline: float) -> dict:
        now_offset = self._series.offset_of(self.clock.now())
        choice = best_window(
            self._series,
            duration=duration,
            deadline=now_offset + deadline,
            earliest=now_offset,
        )
        return {
            "start": format_rfc3339(
                self._series.start + timedelta(seconds=choice.start_offset)
            ),
            "start_offset": choice.start_offset,
            "mean_intensity": choice.mean_intensity,
        }

    def reload_policy(self, path: Path) -> None:
        self.policy = PolicyConfig.from_file(path)
        self.engine.config = self.policy

    def set_intensity_series(self, series: IntensitySeries) -> None:
        self._series = series


class _EventIds:
    def __init__(self, start: int = 0):
        self._next = start
        self._lock = threading.Lock()

    def next(self) -> str:
        with self._lock:
            n = self._next
            self._next += 1
        return f"e{n:08d}"

    @classmethod
    def from_ledger(cls, ledger: ProvenanceLedger) -> "_EventIds":
        highest = -1
        for record in ledger.records():
            payload = record.payload
            if hasattr(payload, "event_id") and payload.event_id.startswith("e"):
                try:
                    highest = max(highest, int(payload.event_id[1:]))
                except ValueError:
                    continue
        return cls(start=highest + 1)


# --- HTTP layer ---------------------------------------------------------------


class RiskBody(BaseModel):
    score: float = Field(ge=0.0, le=1.0)
    source: str = "manual"


class GateCheckBody(BaseModel):
    scope: str
    gate_kind: str
    risk: RiskBody
    est_carbon: float = Field(ge=0.0)
    deferrable_by: float = Field(default=0.0, ge=0.0)
    loop_id: Optional[str] = None


class EventBody(BaseModel):
    kind: str
    tier: str
    tokens_in: int = Field(default=0, ge=0)
    tokens_out: int = Field(default=0, ge=0)
    duration: float = Field(default=0.0, ge=0.0)
    reservation_id: Optional[str] = None
    scope: Optional[str] = None
    event_id: Optional[str] = None
    intensity: Optional[float] = None
    pue: Optional[float] = None
    timestamp: Optional[str] = None


class ReviewDecisionBody(BaseModel):
    outcome: str
    approver: str
    note: str = ""
    extension: int = Field(default=1, ge=1)


class BudgetPutBody(BaseModel):
    allocation: float
    soft_threshold: float = 0.8
    period: Optional[list[str]] = None


class LoopAttemptBody(BaseModel):
    scope: str


class LoopActionBody(BaseModel):
    approver: str
    text: str = ""
    extension: int = Field(default=1, ge=1)


_BAD_REQUEST = (
    InvalidScope, InvalidAllocation, InvalidPayload, InvalidPolicy,
    TierNotInLadder, NonPositiveIntensity, EmptyJustification,
    InfeasibleWindow, OutOfCoverage, ValueError,
)
_NOT_FOUND = (UnknownScope, UnknownReservation, UnknownReview, UnknownLoop)
_CONFLICT = (
    ReservationSettled, AlreadyResolved, AlreadyTerminated,
    LoopBlocked, LoopTerminated, NotBlocked,
)


def create_app(service: GateService, token: Optional[str] = None) -> FastAPI:
    app = FastAPI(title="cagg gate service", version="0.1.0")

    async def check_auth(authorization: Optional[str] = Header(default=None)):
        if token and authorization != f"Bearer {token}":
            raise HTTPException(status_code=401, detail="missing or bad bearer token")

    @app.exception_handler(RequestValidationError)
    async def malformed(request: Request, exc: RequestValidationError):
        return JSONResponse(status_code=400, content={"error": str(exc)})

    @app.exception_handler(CaggError)
    async def domain_error(request: Request, exc: CaggError):
        if isinstance(exc, _NOT_FOUND):
            status = 404
        elif isinstance(exc, _CONFLICT):
            status = 409
        elif isinstance(exc, StorageFailure):
            status = 503
        elif isinstance(exc, _BAD_REQUEST):
            status = 400
        else:
            status = 500
        return JSONResponse(
            status_code=status, content={"error": type(exc).__name__, "detail": str(exc)}
        )

    @app.exception_handler(ValueError)
    async def value_error(request: Request, exc: ValueError):
        return JSONResponse(
            status_code=400, content={"error": "ValueError", "detail": str(exc)}
        )

    dep = [Depends(check_auth)]

    @app.get("/healthz")
    async def healthz():
        return {"status": "ok", "schema_version": SCHEMA_VERSION}

    @app.post("/gates/check", dependencies=dep)
    async def gates_check(body: GateCheckBody):
        request = GateRequest(
            scope=ScopeId.parse(body.scope),
            gate_kind=GateKind(body.gate_kind),
            risk=RiskSignal(body.risk.score, RiskSource(body.risk.source)),
            est_carbon=body.est_carbon,
            deferrable_by=body.deferrable_by,
            loop_id=body.loop_id,
        )
        return decision_to_dict(service.check_gate(request))

    @app.post("/events", dependencies=dep)
    async def events(body: EventBody):
        return service.record_event(
            kind=EventKind(body.kind),
            tier_name=body.tier,
            tokens_in=body.tokens_in,
            tokens_out=body.tokens_out,
            duration=body.duration,
            reservation_id=body.reservation_id,
            scope=None if body.scope is None else ScopeId.parse(body.scope),
            event_id=body.event_id,
            intensity=body.intensity,
            pue=body.pue,
            timestamp=None if body.timestamp is None else parse_rfc3339(body.timestamp),
        )

    @app.get("/reviews/pending", dependencies=dep)
    async def reviews_pending():
        return {"reviews": [review_to_dict(item) for item in service.reviews.pending()]}

    @app.post("/reviews/{review_id}/decision", dependencies=dep)
    async def review_decision(review_id: str, body: ReviewDecisionBody):
        return service.resolve_review(
            review_id, body.outcome, body.approver, body.note, body.extension
        )

    @app.get("/budgets/{scope:path}", dependencies=dep)
    async def budget_get(scope: str):
        return budget_to_dict(service.budget.status(ScopeId.parse(scope)))

    @app.put("/budgets/{scope:path}", dependencies=dep)
    async def budget_put(scope: str, body: BudgetPutBody):
        period = None
        if body.period is not None:
            if len(body.period) != 2:
                raise HTTPException(status_code=400, detail="period must be [start, end]")
            period = (parse_rfc3339(body.period[0]), parse_rfc3339(body.period[1]))
        snapshot = service.budget.set_budget(
            ScopeId.parse(scope), body.allocation, body.soft_threshold, period
        )
        return budget_to_dict(snapshot)

    @app.get("/ledger/audit", dependencies=dep)
    async def ledger_audit(format: str = Query(default="summary")):
        if format == "lines":
            return PlainTextResponse(service.ledger.export_audit("lines"))
        report = service.ledger.verify_chain()
        return report.to_dict()

    @app.get("/ledger/recent", dependencies=dep)
    async def ledger_recent(limit: int = Query(default=20, ge=1, le=500)):
        return {"decisions": service.recent_decisions(limit)}

    @app.get("/intensity/now", dependencies=dep)
    async def intensity_now():
        return service.intensity_now()

    @app.get("/intensity/window", dependencies=dep)
    async def intensity_window(duration: float, deadline: float):
        return service.intensity_window(duration, deadline)

    @app.post("/loops/{loop_id}/attempt", dependencies=dep)
    async def loop_attempt(loop_id: str, body: LoopAttemptBody):
        state = service.loops.record_regeneration_attempt(loop_id, ScopeId.parse(body.scope))
        service._persist_workflow()
        return loop_to_dict(state)

    @app.post("/loops/{loop_id}/justify", dependencies=dep)
    async def loop_justify(loop_id: str, body: LoopActionBody):
        return loop_to_dict(
            service.loops.justify(loop_id, body.approver, body.text, body.extension)
        )

    @app.post("/loops/{loop_id}/terminate", dependencies=dep)
    async def loop_terminate(loop_id: str, body: LoopActionBody):
        return loop_to_dict(service.loops.terminate(loop_id, body.approver, body.text))

    @app.get("/loops/{loop_id}", dependencies=dep)
    async def loop_get(loop_id: str):
        state = service.loops.get(loop_id)
        if state is None:
            raise HTTPException(status_code=404, detail=f"unknown loop {loop_id!r}")
        return loop_to_dict(state)

    @app.post("/policy/reload", dependencies=dep)
    async def policy_reload():
        path = os.environ.get("CAGG_POLICY_PATH")
        if not path:
            raise HTTPException(status_code=400, detail="CAGG_POLICY_PATH not set")
        service.reload_policy(Path(path))
        return {"status": "reloaded"}

    return app


def service_from_env() -> tuple[GateService, Optional[str]]:
    """Build a service from CAGG_DATA_DIR / CAGG_POLICY_PATH /
    CAGG_INTENSITY_TRACE / CAGG_TOKEN."""
    data_dir = Path(os.environ.get("CAGG_DATA_DIR", "./cagg-data"))
    policy = None
    policy_path = os.environ.get("CAGG_POLICY_PATH")
    if policy_path:
        policy = PolicyConfig.from_file(Path(policy_path))
    intensity = None
    trace_path = os.environ.get("CAGG_INTENSITY_TRACE")
    if trace_path:
        intensity = load_trace(Path(trace_path))
    service = GateService(data_dir=data_dir, policy=policy, intensity=intensity)
    return service, os.environ.get("CAGG_TOKEN")
