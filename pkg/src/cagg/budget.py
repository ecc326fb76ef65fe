"""Hierarchical carbon budget manager with reservations.

Budgets live at PR, pipeline, and release scopes. A consumption or
reservation must pass a hard check (consumed + reserved + amount <=
allocation) at every budgeted level of the scope chain and is applied
all-or-nothing; hard failures name the violating scope closest to the
root. All mutating operations are linearizable behind one lock.
"""

from __future__ import annotations

import json
import os
import tempfile
import threading
from dataclasses import dataclass, replace
from datetime import datetime
from enum import Enum
from pathlib import Path
from typing import Optional

from .core import CaggError, CARBON_ABS_TOL, ScopeId, format_rfc3339, parse_rfc3339
from .clock import Clock, SystemClock


class InvalidAllocation(CaggError):
    pass


class UnknownScope(CaggError):
    pass


class UnknownReservation(CaggError):
    pass


class ReservationSettled(CaggError):
    """The reservation was already settled or cancelled (idempotency guard)."""


class BudgetStatus(str, Enum):
    OK = "ok"
    SOFT_BREACHED = "soft_breached"
    HARD_EXCEEDED = "hard_exceeded"


@dataclass(frozen=True)
class CarbonBudget:
    """Immutable snapshot of one scope's budget state."""

    scope: ScopeId
    allocation: float  # gCO2e
    consumed: float
    reserved: float
    soft_threshold: float
    period: Optional[tuple[datetime, datetime]] = None

    @property
    def remaining(self) -> float:
        return self.allocation - self.consumed - self.reserved


@dataclass(frozen=True)
class ConsumeOutcome:
    status: BudgetStatus
    remaining: float  # headroom at the target scope after the operation
    breached_scope: Optional[ScopeId] = None
    applied: float = 0.0  # grams actually added to consumed
    overflow: float = 0.0  # grams that did not fit when a settle was capped


@dataclass(frozen=True)
class ReserveOutcome:
    status: BudgetStatus
    remaining: float
    breached_scope: Optional[ScopeId] = None
    reservation_id: Optional[str] = None


@dataclass
class _Budget:
    scope: ScopeId
    allocation: float
    consumed: float = 0.0
    reserved: float = 0.0
    soft_threshold: float = 0.8
    period: Optional[tuple[datetime, datetime]] = None

    def snapshot(self) -> CarbonBudget:
        return CarbonBudget(
            scope=self.scope,
            allocation=self.allocation,
            consumed=self.consumed,
            reserved=self.reserved,
            soft_threshold=self.soft_threshold,
            period=self.period,
        )


@dataclass
class _Reservation:
    reservation_id: str
    scope: ScopeId
    amount: float
    paths: tuple[str, ...]  # budgeted chain the amount is held against


class BudgetManager:
    """Tracks and atomically enforces budgets across the scope hierarchy."""

    def __init__(
        self,
        snapshot_path: Optional[Path] = None,
        clock: Optional[Clock] = None,
    ):
        self._path = Path(snapshot_path) if snapshot_path is not None else None
        self._clock = clock if clock is not None else SystemClock()
        self._lock = threading.Lock()
        self._budgets: dict[str, _Budget] = {}
        self._reservations: dict[str, _Reservation] = {}
        self._settled: set[str] = set()
        self._next_reservation = 0
        if self._path is not None and self._path.exists():
            self._load()

    # -- provisioning -------------------------------------------------------

    def set_budget(
        self,
        scope: ScopeId,
        allocation: float,
        soft_threshold: float = 0.8,
        period: Optional[tuple[datetime, datetime]] = None,
    ) -> CarbonBudget:
        if allocation <= 0:
            raise InvalidAllocation(f"allocation must be > 0, got {allocation}")
        if not 0.0 < soft_threshold <= 1.0:
            raise InvalidAllocation(f"soft_threshold must be in (0,1], got {soft_threshold}")
        with self._lock:
            path = scope.path()
            existing = self._budgets.get(path)
            budget = _Budget(
                scope=scope,
                allocation=allocation,
                consumed=existing.consumed if existing else 0.0,
                reserved=existing.reserved if existing else 0.0,
                soft_threshold=soft_threshold,
                period=period,
            )
            self._budgets[path] = budget
            self._persist()
            return budget.snapshot()

    def status(self, scope: ScopeId) -> CarbonBudget:
        with self._lock:
            budget = self._live(scope.path())
            if budget is None:
                raise UnknownScope(f"no budget for scope {scope.path()!r}")
            return budget.snapshot()

    def snapshot_all(self) -> dict[str, CarbonBudget]:
        with self._lock:
            return {path: b.snapshot() for path, b in self._budgets.items()}

    # -- consumption --------------------------------------------------------

    def check_and_consume(self, scope: ScopeId, amount: float) -> ConsumeOutcome:
        if amount < 0:
            raise ValueError(f"amount must be >= 0, got {amount}")
        with self._lock:
            chain = self._chain(scope)
            violator = self._hard_violator(chain, amount)
            if violator is not None:
                return ConsumeOutcome(
                    status=BudgetStatus.HARD_EXCEEDED,
                    remaining=max(violator.allocation - violator.consumed - violator.reserved, 0.0),
                    breached_scope=violator.scope,
                )
            for budget in chain:
                budget.consumed += amount
            breached = self._soft_violator(chain, include_reserved=False)
            self._persist()
            return ConsumeOutcome(
                status=BudgetStatus.SOFT_BREACHED if breached else BudgetStatus.OK,
                remaining=chain[-1].allocation - chain[-1].consumed - chain[-1].reserved,
                breached_scope=breached.scope if breached else None,
                applied=amount,
            )

    def reserve(self, scope: ScopeId, amount: float, force: bool = False) -> ReserveOutcome:
        """Hold `amount` against every budgeted level pending a settle.

        With force=True (human override) the hard check is skipped; callers
        must ledger an override marker alongside.
        """
        if amount < 0:
            raise ValueError(f"amount must be >= 0, got {amount}")
        with self._lock:
            chain = self._chain(scope)
            if not force:
                violator = self._hard_violator(chain, amount)
                if violator is not None:
                    return ReserveOutcome(
                        status=BudgetStatus.HARD_EXCEEDED,
                        remaining=max(
                            violator.allocation - violator.consumed - violator.reserved, 0.0
                        ),
                        breached_scope=violator.scope,
                    )
            for budget in chain:
                budget.reserved += amount
            rid = f"res-{self._next_reservation:06d}"
            self._next_reservation += 1
            self._reservations[rid] = _Reservation(
                reservation_id=rid,
                scope=scope,
                amount=amount,
                paths=tuple(b.scope.path() for b in chain),
            )
            breached = self._soft_violator(chain, include_reserved=True)
            self._persist()
            return ReserveOutcome(
                status=BudgetStatus.SOFT_BREACHED if breached else BudgetStatus.OK,
                remaining=chain[-1].allocation - chain[-1].consumed - chain[-1].reserved,
                breached_scope=breached.scope if breached else None,
                reservation_id=rid,
            )

    def settle(self, reservation_id: str, actual: float) -> ConsumeOutcome:
        """Release the reservation and consume the measured amount.

        The actual may exceed the reservation up to the chain's remaining
        headroom; beyond that, consumption is capped at allocation and the
        excess is reported as overflow for the caller to ledger.
        """
        if actual < 0:
            raise ValueError(f"actual must be >= 0, got {actual}")
        with self._lock:
            reservation = self._take_reservation(reservation_id)
            chain = self._release(reservation)
            headroom = min(
                (b.allocation - b.consumed - b.reserved for b in chain),
                default=float("inf"),
            )
            if actual <= headroom + CARBON_ABS_TOL:
                applied, overflow = actual, 0.0
                capped = None
            else:
                applied, overflow = max(headroom, 0.0), actual - max(headroom, 0.0)
                capped = next(
                    b for b in chain
                    if b.allocation - b.consumed - b.reserved < actual - CARBON_ABS_TOL
                )
            for budget in chain:
                budget.consumed += applied
            breached = self._soft_violator(chain, include_reserved=False)
            self._persist()
            if capped is not None:
                return ConsumeOutcome(
                    status=BudgetStatus.HARD_EXCEEDED,
                    remaining=chain[-1].allocation - chain[-1].consumed - chain[-1].reserved,
                    breached_scope=capped.scope,
                    applied=applied,
                    overflow=overflow,
                )
            return ConsumeOutcome(
                status=BudgetStatus.SOFT_BREACHED if breached else BudgetStatus.OK,
                remaining=chain[-1].allocation - chain[-1].consumed - chain[-1].reserved,
                breached_scope=breached.scope if breached else None,
                applied=applied,
            )

    def cancel(self, reservation_id: str) -> None:
        """Release a reservation without consuming anything."""
        with self._lock:
            reservation = self._take_reservation(reservation_id)
            self._release(reservation)
            self._persist()

    def reservation_scope(self, reservation_id: str) -> ScopeId:
        with self._lock:
            reservation = self._reservations.get(reservation_id)
            if reservation is None:
                if reservation_id in self._settled:
                    raise ReservationSettled(f"reservation {reservation_id!r} already settled")
                raise UnknownReservation(f"unknown reservation {reservation_id!r}")
            return reservation.scope

    # -- internals ----------------------------------------------------------

    def _take_reservation(self, reservation_id: str) -> _Reservation:
        reservation = self._reservations.pop(reservation_id, None)
        if reservation is None:
            if reservation_id in self._settled:
                raise ReservationSettled(f"reservation {reservation_id!r} already settled")
            raise UnknownReservation(f"unknown reservation {reservation_id!r}")
        self._settled.add(reservation_id)
        return reservation

    def _release(self, reservation: _Reservation) -> list[_Budget]:
        chain = []
        for path in reservation.paths:
            budget = self._budgets.get(path)
            if budget is None:
                continue  # deprovisioned while reserved; nothing to release
            budget.reserved = max(budget.reserved - reservation.amount, 0.0)
            chain.append(budget)
        if not chain:
            # every level vanished; settle against the scope chain as it is now
            chain = self._chain(reservation.scope)
        return chain

    def _live(self, path: str) -> Optional[_Budget]:
        """The budget at `path`, expiring it if its period has ended."""
        budget = self._budgets.get(path)
        if budget is None:
            return None
        if budget.period is not None and self._clock.now() >= budget.period[1]:
            # period reset: zero the counters and deprovision until replaced
            del self._budgets[path]
            self._persist()
            return None
        return budget

    def _chain(self, scope: ScopeId) -> list[_Budget]:
        """Budgeted levels root-to-leaf; unbudgeted ancestors are skipped."""
        chain = [
            budget
            for node in scope.chain()
            if (budget := self._live(node.path())) is not None
        ]
        if not chain:
            raise UnknownScope(f"no budget at any level of {scope.path()!r}")
        return chain

    @staticmethod
    def _hard_violator(chain: list[_Budget], amount: float) -> Optional[_Budget]:
        for budget in chain:  # root first: report the shallowest violator
            if budget.consumed + budget.reserved + amount > budget.allocation + CARBON_ABS_TOL:
                return budget
        return None

    @staticmethod
    def _soft_violator(chain: list[_Budget], include_reserved: bool) -> Optional[_Budget]:
        # Consumption breaches on realized spend; reservations breach on the
        # forward-looking commitment so gates can downgrade before overspend.
        for budget in chain:
            held = budget.consumed + (budget.reserved if include_reserved else 0.0)
            if held / budget.allocation > budget.soft_threshold:
                return budget
        return None

    # -- persistence --------------------------------------------------------

    def _persist(self) -> None:
        if self._path is None:
            return
        state = {
            "budgets": {
                path: {
                    "scope": b.scope.path(),
                    "allocation": b.allocation,
                    "consumed": b.consumed,
                    "reserved": b.reserved,
                    "soft_threshold": b.soft_threshold,
                    "period": None
                    if b.period is None
                    else [format_rfc3339(b.period[0]), format_rfc3339(b.period[1])],
                }
                for path, b in sorted(self._budgets.items())
            },
            "reservations": {
                rid: {"scope": r.scope.path(), "amount": r.amount, "paths": list(r.paths)}
                for rid, r in sorted(self._reservations.items())
            },
            "settled": sorted(self._settled),
            "next_reservation": self._next_reservation,
        }
        fd, tmp = tempfile.mkstemp(dir=self._path.parent, prefix=".budgets-")
        try:
            with os.fdopen(fd, "w") as fh:
                json.dump(state, fh)
            os.replace(tmp, self._path)
        except OSError:
            if os.path.exists(tmp):
                os.unlink(tmp)
            raise

    def _load(self) -> None:
        state = json.loads(self._path.read_text())
        for path, raw in state["budgets"].items():
            period = None
            if raw["period"] is not None:
                period = (parse_rfc3339(raw["period"][0]), parse_rfc3339(raw["period"][1]))
            self._budgets[path] = _Budget(
                scope=ScopeId.parse(raw["scope"]),
                allocation=raw["allocation"],
                consumed=raw["consumed"],
                reserved=raw["reserved"],
                soft_threshold=raw["soft_threshold"],
                period=period,
            )
        for rid, raw in state["reservations"].items():
            self._reservations[rid] = _Reservation(
                reservation_id=rid,
                scope=ScopeId.parse(raw["scope"]),
                amount=raw["amount"],
                paths=tuple(raw["paths"]),
            )
        self._settled = set(state["settled"])
        self._next_reservation = state["next_reservation"]
