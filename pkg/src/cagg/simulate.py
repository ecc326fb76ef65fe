"""Deterministic workflow simulator: replays synthetic development traces
through the full in-process engine under a virtual clock, and against an
ungoverned always-deep baseline, so policies can be compared on carbon and
assurance before they gate anything real.
"""

from __future__ import annotations

import heapq
import json
import math
import random
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Optional

from .budget import BudgetManager
from .clock import VirtualClock
from .core import (
    CaggError,
    EventKind,
    ScopeId,
    assurance_per_carbon,
    combined_assurance,
    estimate_duration,
    estimate_inference,
    format_rfc3339,
    make_workload_event,
    parse_rfc3339,
)
from .intensity import IntensitySeries, synthetic_series
from .ledger import GateDecisionRecord, ProvenanceLedger
from .orchestrator import (
    LoopRegistry,
    PhaseKind,
    RiskSignal,
    RiskSource,
    always_deep_plan,
    choose_deep_tier,
)
from .policy import (
    DecisionIds,
    GateEngine,
    GateKind,
    GateRequest,
    PolicyConfig,
    ReviewTrigger,
    Verdict,
)
from .service import ReviewQueue

SIM_EPOCH = datetime(2026, 1, 1, tzinfo=timezone.utc)


class InvalidTrace(CaggError):
    pass


class InfeasiblePolicy(CaggError):
    pass


@dataclass(frozen=True)
class TraceEntry:
    offset: float  # seconds from trace start
    scope: ScopeId
    gate_kind: GateKind
    risk: float
    tokens: int  # deep-phase volume if a deep phase runs
    duration: float  # lightweight-phase wall time, seconds
    regeneration: bool = False
    loop_id: Optional[str] = None
    deferrable_by: float = 0.0


@dataclass(frozen=True)
class WorkloadTrace:
    seed: int
    start: datetime
    entries: tuple[TraceEntry, ...]

    def span(self) -> float:
        return self.entries[-1].offset if self.entries else 0.0

    def max_deferrable(self) -> float:
        return max((e.deferrable_by for e in self.entries), default=0.0)


def generate_trace(
    seed: int,
    entries: int,
    start: datetime = SIM_EPOCH,
    mean_gap_s: float = 120.0,
    pull_requests: int = 0,
    regen_fraction: float = 0.15,
) -> WorkloadTrace:
    """Seeded synthetic trace: uniform risk, log-uniform token volumes,
    Poisson-spaced arrivals over a small release/pipeline/PR hierarchy."""
    rng = random.Random(seed)
    if pull_requests <= 0:
        pull_requests = max(4, entries // 25)
    release = ScopeId.parse("release:sim")
    pipes = [ScopeId.parse(f"release:sim/pipeline:p{i}") for i in range(2)]
    prs = [
        ScopeId.parse(f"{rng.choice(pipes).path()}/pr:{i:04d}") for i in range(pull_requests)
    ]
    out = []
    t = 0.0
    for _ in range(entries):
        t += rng.expovariate(1.0 / mean_gap_s)
        pr = rng.choice(prs)
        regen = rng.random() < regen_fraction
        out.append(
            TraceEntry(
                offset=round(t, 3),
                scope=pr,
                gate_kind=GateKind.PULL_REQUEST_VALIDATION,
                risk=rng.random(),
                tokens=int(math.exp(rng.uniform(math.log(2e4), math.log(5e5)))),
                duration=rng.uniform(60.0, 600.0),
                regeneration=regen,
                loop_id=f"gen-{pr.chain()[-1].id}" if regen else None,
                deferrable_by=rng.choice([0.0, 0.0, 3600.0, 7200.0, 14400.0]),
            )
        )
    return WorkloadTrace(seed=seed, start=start, entries=tuple(out))


def save_trace_file(trace: WorkloadTrace, path: Path) -> None:
    doc = {
        "seed": trace.seed,
        "start": format_rfc3339(trace.start),
        "entries": [
            {
                "offset": e.offset,
                "scope": e.scope.path(),
                "gate_kind": e.gate_kind.value,
                "risk": e.risk,
                "tokens": e.tokens,
                "duration": e.duration,
                "regeneration": e.regeneration,
                "loop_id": e.loop_id,
                "deferrable_by": e.deferrable_by,
            }
            for e in trace.entries
        ],
    }
    Path(path).write_text(json.dumps(doc, indent=2) + "\n")


def load_trace_file(path: Path) -> WorkloadTrace:
    try:
        doc = json.loads(Path(path).read_text())
        entries = tuple(
            TraceEntry(
                offset=float(e["offset"]),
                scope=ScopeId.parse(e["scope"]),
                gate_kind=GateKind(e["gate_kind"]),
                risk=float(e["risk"]),
                tokens=int(e["tokens"]),
                duration=float(e["duration"]),
                regeneration=bool(e.get("regeneration", False)),
                loop_id=e.get("loop_id"),
                deferrable_by=float(e.get("deferrable_by", 0.0)),
            )
            for e in doc["entries"]
        )
        trace = WorkloadTrace(
            seed=int(doc.get("seed", 0)),
            start=parse_rfc3339(doc["start"]),
            entries=entries,
        )
    except (KeyError, TypeError, ValueError, OSError) as exc:
        raise InvalidTrace(f"unreadable trace {path}: {exc}") from exc
    offsets = [e.offset for e in trace.entries]
    if offsets != sorted(offsets):
        raise InvalidTrace("trace entries must be ordered by arrival offset")
    return trace


@dataclass
class SimulationReport:
    entries: int
    executed: int
    total_carbon: float  # gCO2e
    total_energy: float  # kWh
    mean_assurance: float
    decisions: dict[str, int]
    deferred_count: int
    escalated_count: int
    apc_ratio: Optional[float]
    ledger_root: str

    def to_dict(self) -> dict:
        return {
            "schema_version": 1,
            "entries": self.entries,
            "executed": self.executed,
            "total_carbon": self.total_carbon,
            "total_energy": self.total_energy,
            "mean_assurance": self.mean_assurance,
            "decisions": {k: self.decisions[k] for k in sorted(self.decisions)},
            "deferred_count": self.deferred_count,
            "escalated_count": self.escalated_count,
            "apc_ratio": self.apc_ratio,
            "ledger_root": self.ledger_root,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def default_series_for(trace: WorkloadTrace) -> IntensitySeries:
    hours = int(math.ceil((trace.span() + trace.max_deferrable()) / 3600.0)) + 2
    return synthetic_series(start=trace.start, hours=hours)


def _check_coverage(trace: WorkloadTrace, series: IntensitySeries) -> None:
    for entry in trace.entries:
        start_off = (trace.start - series.start).total_seconds() + entry.offset
        if start_off < 0 or start_off + entry.deferrable_by >= series.coverage:
            raise InfeasiblePolicy(
                f"intensity trace does not cover entry at offset {entry.offset}s "
                f"(+{entry.deferrable_by}s deferral)"
            )


def _provision_budgets(
    trace: WorkloadTrace, budget: BudgetManager, config: PolicyConfig, generous: bool
) -> None:
    """Size budgets from the trace's ungoverned cost so the release envelope
    binds without choking the run; baseline runs get effectively no limit."""
    params = config.planning_params(intensity=300.0)
    nominal = sum(
        always_deep_plan(config.ladder, params).est_carbon for _ in trace.entries
    ) or 1.0
    scopes: dict[str, ScopeId] = {}
    for entry in trace.entries:
        for node in entry.scope.chain():
            scopes.setdefault(node.path(), node)
    prs = [s for s in scopes.values() if len(s.chain()) == 3]
    for scope in scopes.values():
        depth = len(scope.chain())
        if generous:
            allocation = 1e15
        elif depth == 1:
            allocation = 0.6 * nominal
        elif depth == 2:
            allocation = 0.4 * nominal
        else:
            allocation = 1.5 * nominal / max(len(prs), 1)
        budget.set_budget(scope, allocation, 0.8)


@dataclass
class _Sim:
    """Mutable replay state shared by the event loop handlers."""

    engine: GateEngine
    budget: BudgetManager
    ledger: ProvenanceLedger
    loops: LoopRegistry
    reviews: ReviewQueue
    clock: VirtualClock
    series: IntensitySeries
    config: PolicyConfig
    auto: str  # none | approve | deny
    trace_start: datetime = SIM_EPOCH
    first_verdict: dict[int, str] = field(default_factory=dict)
    executed_assurance: list[float] = field(default_factory=list)
    deferred: set[int] = field(default_factory=set)
    escalated: set[int] = field(default_factory=set)


def run_simulation(
    trace: WorkloadTrace,
    config: Optional[PolicyConfig] = None,
    series: Optional[IntensitySeries] = None,
    baseline: bool = False,
    auto: str = "none",
    return_ledger: bool = False,
):
    """Replay the trace; returns the report, or (report, ledger) with
    return_ledger=True so callers can audit the simulated history."""
    config = config if config is not None else PolicyConfig()
    series = series if series is not None else default_series_for(trace)
    _check_coverage(trace, series)
    if baseline:
        return _run_baseline(trace, config, series, return_ledger)

    clock = VirtualClock(trace.start)
    budget = BudgetManager(clock=clock)
    _provision_budgets(trace, budget, config, generous=False)
    ledger = ProvenanceLedger()
    ids = DecisionIds(0)
    reviews = ReviewQueue(clock=clock)
    loops = LoopRegistry(
        default_cap=config.regeneration_cap,
        clock=clock,
        decision_sink=_loop_sink(ledger, ids, clock),
    )
    engine = GateEngine(
        config=config,
        budget=budget,
        ledger=ledger,
        loops=loops,
        reviews=reviews,
        series_provider=lambda: series,
        clock=clock,
        decision_ids=ids,
    )
    sim = _Sim(
        engine=engine, budget=budget, ledger=ledger, loops=loops, reviews=reviews,
        clock=clock, series=series, config=config, auto=auto, trace_start=trace.start,
    )

    # chronological event loop: (time_offset, order, entry_index, retry)
    queue: list[tuple[float, int, int, bool]] = []
    order = 0
    for i, entry in enumerate(trace.entries):
        heapq.heappush(queue, (entry.offset, order, i, False))
        order += 1
    while queue:
        offset, _, i, retry = heapq.heappop(queue)
        entry = trace.entries[i]
        sim.clock.advance_to(trace.start + timedelta(seconds=offset))
        followup = _gate_and_execute(sim, i, entry, retry=retry)
        if followup is not None:
            heapq.heappush(queue, (followup, order, i, True))
            order += 1

    report = _report(sim, trace)
    return (report, ledger) if return_ledger else report


def _loop_sink(ledger: ProvenanceLedger, ids: DecisionIds, clock: VirtualClock):
    def sink(kind, loop, approver, text, extension):
        ledger.append(
            GateDecisionRecord(
                decision_id=ids.next(),
                kind=kind,
                scope=loop.scope,
                rationale=(f"regen.{'justified' if kind == 'justification' else 'terminated'}",),
                loop_id=loop.loop_id,
                approver=approver,
                note=text,
                extension=extension,
                timestamp=clock.now(),
            )
        )

    return sink


def _entry_request(sim: _Sim, entry: TraceEntry, deferrable: float) -> GateRequest:
    # pre-flight estimate from the entry's own magnitudes under the policy's
    # plan shape at the current grid intensity
    intensity = sim.series.intensity_at(sim.clock.now())
    params = sim.config.planning_params(intensity)
    light = estimate_duration(entry.duration, sim.config.ladder[0], params.pue, intensity).carbon
    est = light
    risk = RiskSignal(entry.risk, RiskSource.STATIC_CHECKS)
    if entry.risk > sim.config.deep_threshold:
        tier = choose_deep_tier(risk, sim.config.ladder, params)
        est += estimate_inference(entry.tokens, tier, params.pue, intensity).carbon
    return GateRequest(
        scope=entry.scope,
        gate_kind=entry.gate_kind,
        risk=risk,
        est_carbon=est,
        deferrable_by=deferrable,
        loop_id=entry.loop_id,
    )


def _gate_and_execute(sim: _Sim, i: int, entry: TraceEntry, retry: bool) -> Optional[float]:
    """Evaluate the gate for one entry and execute/settle when permitted.
    Returns a follow-up offset when the entry defers."""
    deferrable = 0.0 if retry else entry.deferrable_by
    request = _entry_request(sim, entry, deferrable)
    decision = sim.engine.evaluate(request)
    if i not in sim.first_verdict:
        sim.first_verdict[i] = decision.verdict.value

    if decision.verdict is Verdict.DEFER:
        sim.deferred.add(i)
        return (decision.defer_until - sim.trace_start).total_seconds()

    if decision.verdict is Verdict.ESCALATE:
        sim.escalated.add(i)
        if sim.auto == "none" or retry:
            return None
        item = sim.reviews.get(decision.review_id)
        if sim.auto == "deny":
            if item.trigger is ReviewTrigger.REGENERATION_CAP:
                sim.reviews.resolve(decision.review_id, "denied", "auto", "simulated")
                sim.ledger.append(
                    GateDecisionRecord(
                        decision_id=sim.engine.ids.next(),
                        kind="review",
                        scope=entry.scope,
                        verdict=Verdict.DENY.value,
                        rationale=("review.denied",),
                        review_id=decision.review_id,
                        loop_id=entry.loop_id,
                        approver="auto",
                        note="simulated",
                        timestamp=sim.clock.now(),
                    )
                )
            else:
                sim.engine.apply_review_outcome(decision.review_id, "deny", "auto", "simulated")
            return None
        # auto-approve
        if item.trigger is ReviewTrigger.REGENERATION_CAP:
            sim.loops.justify(entry.loop_id, "auto", "simulated extension", 1)
            sim.reviews.resolve(decision.review_id, "approved", "auto", "simulated")
            return _gate_retry_now(sim, i, entry)
        decision = sim.engine.apply_review_outcome(
            decision.review_id, "approve", "auto", "simulated"
        )
        if decision.verdict not in (Verdict.ALLOW, Verdict.DOWNGRADE):
            return None

    if decision.verdict in (Verdict.ALLOW, Verdict.DOWNGRADE):
        _execute(sim, i, entry, decision)
    return None


def _gate_retry_now(sim: _Sim, i: int, entry: TraceEntry) -> None:
    decision = sim.engine.evaluate(_entry_request(sim, entry, 0.0))
    if decision.verdict in (Verdict.ALLOW, Verdict.DOWNGRADE):
        _execute(sim, i, entry, decision)
    return None


def _execute(sim: _Sim, i: int, entry: TraceEntry, decision) -> None:
    if entry.regeneration and entry.loop_id:
        # the gate allowed it; meter the attempt against the loop cap
        sim.loops.record_regeneration_attempt(entry.loop_id, entry.scope)
    now = sim.clock.now()
    intensity = sim.series.intensity_at(now)
    total = 0.0
    tiers = []
    for phase in decision.plan.phases:
        tiers.append(phase.tier)
        if phase.kind is PhaseKind.LIGHTWEIGHT:
            kind = EventKind.VALIDATION_RUN
            tokens_in = tokens_out = 0
            duration = entry.duration
        else:
            kind = EventKind.REGENERATION if entry.regeneration else EventKind.INFERENCE
            tokens_in = entry.tokens // 2
            tokens_out = entry.tokens - tokens_in
            duration = 0.0
        event = make_workload_event(
            event_id=f"sim-{i:05d}-{phase.kind.value[0]}",
            scope=entry.scope,
            kind=kind,
            tier=phase.tier,
            tokens_in=tokens_in,
            tokens_out=tokens_out,
            duration=duration,
            timestamp=now,
            pue=sim.config.pue,
            intensity=intensity,
        )
        total += event.carbon
        sim.ledger.append(event)
    outcome = sim.budget.settle(decision.reservation_id, total)
    if outcome.overflow > 0:
        sim.ledger.append(
            GateDecisionRecord(
                decision_id=sim.engine.ids.next(),
                kind="budget_overflow",
                scope=entry.scope,
                rationale=("budget.overflow",),
                reservation_id=decision.reservation_id,
                amount=outcome.overflow,
                timestamp=now,
            )
        )
    sim.executed_assurance.append(combined_assurance(tiers))


def _report(sim: _Sim, trace: WorkloadTrace) -> SimulationReport:
    audit = sim.ledger.verify_chain()
    histogram: dict[str, int] = {}
    for verdict in sim.first_verdict.values():
        histogram[verdict] = histogram.get(verdict, 0) + 1
    executed = len(sim.executed_assurance)
    mean_assurance = (
        sum(sim.executed_assurance) / executed if executed else 0.0
    )
    apc = None
    if audit.total_carbon > 0 and 0.0 < mean_assurance <= 1.0:
        apc = assurance_per_carbon(mean_assurance, audit.total_carbon).ratio
    return SimulationReport(
        entries=len(trace.entries),
        executed=executed,
        total_carbon=audit.total_carbon,
        total_energy=audit.total_energy,
        mean_assurance=mean_assurance,
        decisions=histogram,
        deferred_count=len(sim.deferred),
        escalated_count=len(sim.escalated),
        apc_ratio=apc,
        ledger_root=sim.ledger.root_hash,
    )


def _run_baseline(
    trace: WorkloadTrace,
    config: PolicyConfig,
    series: IntensitySeries,
    return_ledger: bool = False,
):
    """Ungoverned replay: every entry runs the full always-deep plan at its
    arrival time; no budgets, no deferral, no caps."""
    clock = VirtualClock(trace.start)
    ledger = ProvenanceLedger()
    assurances = []
    for i, entry in enumerate(trace.entries):
        clock.advance_to(trace.start + timedelta(seconds=entry.offset))
        now = clock.now()
        intensity = series.intensity_at(now)
        plan = always_deep_plan(config.ladder, config.planning_params(intensity))
        tiers = []
        for phase in plan.phases:
            tiers.append(phase.tier)
            if phase.kind is PhaseKind.LIGHTWEIGHT:
                event = make_workload_event(
                    event_id=f"base-{i:05d}-l",
                    scope=entry.scope,
                    kind=EventKind.VALIDATION_RUN,
                    tier=phase.tier,
                    tokens_in=0,
                    tokens_out=0,
                    duration=entry.duration,
                    timestamp=now,
                    pue=config.pue,
                    intensity=intensity,
                )
            else:
                event = make_workload_event(
                    event_id=f"base-{i:05d}-d",
                    scope=entry.scope,
                    kind=EventKind.REGENERATION if entry.regeneration else EventKind.INFERENCE,
                    tier=phase.tier,
                    tokens_in=entry.tokens // 2,
                    tokens_out=entry.tokens - entry.tokens // 2,
                    duration=0.0,
                    timestamp=now,
                    pue=config.pue,
                    intensity=intensity,
                )
            ledger.append(event)
        assurances.append(combined_assurance(tiers))
    audit = ledger.verify_chain()
    mean_assurance = sum(assurances) / len(assurances) if assurances else 0.0
    apc = None
    if audit.total_carbon > 0 and 0.0 < mean_assurance <= 1.0:
        apc = assurance_per_carbon(mean_assurance, audit.total_carbon).ratio
    report = SimulationReport(
        entries=len(trace.entries),
        executed=len(trace.entries),
        total_carbon=audit.total_carbon,
        total_energy=audit.total_energy,
        mean_assurance=mean_assurance,
        decisions={"allow": len(trace.entries)} if trace.entries else {},
        deferred_count=0,
        escalated_count=0,
        apc_ratio=apc,
        ledger_root=ledger.root_hash,
    )
    return (report, ledger) if return_ledger else report


def compare_reports(governed: SimulationReport, baseline: SimulationReport) -> dict:
    saved = baseline.total_carbon - governed.total_carbon
    return {
        "governed": governed.to_dict(),
        "baseline": baseline.to_dict(),
        "delta": {
            "carbon_saved": saved,
            "carbon_saved_pct": (
                100.0 * saved / baseline.total_carbon if baseline.total_carbon > 0 else 0.0
            ),
            "assurance_delta": governed.mean_assurance - baseline.mean_assurance,
        },
    }
