"""Shared domain types, the emission estimation model, and the assurance/carbon metric.

All carbon quantities are grams of CO2-equivalent, all energy is kWh, all
grid intensities are gCO2e/kWh. Types here are immutable values and every
operation is a pure function.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from datetime import datetime, timezone
from enum import Enum
from typing import Optional, Sequence

JOULES_PER_KWH = 3_600_000.0

# Comparisons on gram-scale quantities; anything below this is noise.
CARBON_ABS_TOL = 1e-9
REL_TOL = 1e-9


class CaggError(Exception):
    """Base class for all governance-engine errors."""


class NonPositiveIntensity(CaggError):
    pass


class EmptyPlan(CaggError):
    pass


class ZeroCarbon(CaggError):
    pass


class InvalidScope(CaggError):
    pass


class InvalidTier(CaggError):
    pass


class EmptyLadder(CaggError):
    pass


class TierNotInLadder(CaggError):
    pass


def utc_now() -> datetime:
    return datetime.now(timezone.utc)


def format_rfc3339(ts: datetime) -> str:
    """Render a UTC instant as RFC 3339 with a Z suffix (canonical form)."""
    if ts.tzinfo is None:
        raise ValueError("naive datetime; all timestamps must be UTC-aware")
    ts = ts.astimezone(timezone.utc)
    if ts.microsecond:
        return ts.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"
    return ts.strftime("%Y-%m-%dT%H:%M:%SZ")


def parse_rfc3339(text: str) -> datetime:
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        ts = ts.replace(tzinfo=timezone.utc)
    return ts.astimezone(timezone.utc)


def close(a: float, b: float, rel: float = REL_TOL) -> bool:
    return math.isclose(a, b, rel_tol=rel, abs_tol=CARBON_ABS_TOL)


class ScopeKind(str, Enum):
    PULL_REQUEST = "pr"
    PIPELINE = "pipeline"
    RELEASE = "release"


# parent kind allowed for each scope kind; Release is always a root
_PARENT_KIND = {
    ScopeKind.PULL_REQUEST: ScopeKind.PIPELINE,
    ScopeKind.PIPELINE: ScopeKind.RELEASE,
    ScopeKind.RELEASE: None,
}


@dataclass(frozen=True)
class ScopeId:
    """A node in the PR -> pipeline -> release governance hierarchy."""

    kind: ScopeKind
    id: str
    parent: Optional["ScopeId"] = None

    def __post_init__(self) -> None:
        if not self.id:
            raise InvalidScope("scope id must be non-empty")
        if "/" in self.id or ":" in self.id:
            raise InvalidScope(f"scope id may not contain '/' or ':': {self.id!r}")
        if self.parent is not None:
            allowed = _PARENT_KIND[self.kind]
            if allowed is None or self.parent.kind is not allowed:
                raise InvalidScope(
                    f"{self.kind.value} scope cannot have a {self.parent.kind.value} parent"
                )

    def chain(self) -> tuple["ScopeId", ...]:
        """Scopes from the root down to this one (length <= 3 by construction)."""
        if self.parent is None:
            return (self,)
        return self.parent.chain() + (self,)

    def path(self) -> str:
        return "/".join(f"{s.kind.value}:{s.id}" for s in self.chain())

    @classmethod
    def parse(cls, path: str) -> "ScopeId":
        scope: Optional[ScopeId] = None
        for segment in path.split("/"):
            kind_token, sep, ident = segment.partition(":")
            if not sep:
                raise InvalidScope(f"bad scope segment {segment!r} in {path!r}")
            try:
                kind = ScopeKind(kind_token)
            except ValueError:
                raise InvalidScope(f"unknown scope kind {kind_token!r}") from None
            scope = cls(kind=kind, id=ident, parent=scope)
        if scope is None:
            raise InvalidScope("empty scope path")
        return scope

    def __str__(self) -> str:
        return self.path()


@dataclass(frozen=True)
class ModelTier:
    """One rung of the model escalation ladder.

    assurance_value is the configured detection confidence a validation pass
    on this tier contributes; it is an input, not a learned quantity.
    """

    name: str
    energy_per_token: float  # joules/token
    avg_power: float  # watts
    assurance_value: float

    def __post_init__(self) -> None:
        if not self.name:
            raise InvalidTier("tier name must be non-empty")
        if self.energy_per_token <= 0:
            raise InvalidTier(f"energy_per_token must be > 0, got {self.energy_per_token}")
        if self.avg_power <= 0:
            raise InvalidTier(f"avg_power must be > 0, got {self.avg_power}")
        if not 0.0 <= self.assurance_value <= 1.0:
            raise InvalidTier(f"assurance_value must be in [0,1], got {self.assurance_value}")


def validate_ladder(ladder: Sequence[ModelTier]) -> tuple[ModelTier, ...]:
    """Check the ladder ordering invariants and return it as a tuple."""
    if not ladder:
        raise EmptyLadder("model ladder must be non-empty")
    for lower, upper in zip(ladder, ladder[1:]):
        if upper.energy_per_token <= lower.energy_per_token:
            raise InvalidTier(
                f"ladder not strictly increasing in energy_per_token at {upper.name!r}"
            )
        if upper.assurance_value <= lower.assurance_value:
            raise InvalidTier(
                f"ladder not strictly increasing in assurance_value at {upper.name!r}"
            )
    return tuple(ladder)


class EventKind(str, Enum):
    INFERENCE = "inference"
    VALIDATION_RUN = "validation_run"
    REGENERATION = "regeneration"


class EstimateBasis(str, Enum):
    TOKEN_BASED = "token_based"
    DURATION_BASED = "duration_based"


# Event kinds whose energy is token-driven; validation runs are time-driven.
TOKEN_BASED_KINDS = frozenset({EventKind.INFERENCE, EventKind.REGENERATION})


@dataclass(frozen=True)
class EmissionEstimate:
    energy: float  # kWh
    carbon: float  # gCO2e
    basis: EstimateBasis


def _check_factors(pue: float, intensity: float) -> None:
    if intensity <= 0:
        raise NonPositiveIntensity(f"grid intensity must be > 0, got {intensity}")
    if pue < 1.0:
        raise ValueError(f"PUE must be >= 1, got {pue}")


def estimate_inference(
    tokens_total: int, tier: ModelTier, pue: float, intensity: float
) -> EmissionEstimate:
    """Token-driven emission estimate: energy = tokens * J/token, carbon = energy * PUE * intensity."""
    _check_factors(pue, intensity)
    if tokens_total < 0:
        raise ValueError(f"tokens_total must be >= 0, got {tokens_total}")
    energy = tokens_total * tier.energy_per_token / JOULES_PER_KWH
    return EmissionEstimate(
        energy=energy,
        carbon=(energy * pue) * intensity,
        basis=EstimateBasis.TOKEN_BASED,
    )


def estimate_duration(
    duration: float, tier: ModelTier, pue: float, intensity: float
) -> EmissionEstimate:
    """Time-driven emission estimate for workloads metered by wall time."""
    _check_factors(pue, intensity)
    if duration < 0:
        raise ValueError(f"duration must be >= 0, got {duration}")
    energy = duration * tier.avg_power / JOULES_PER_KWH
    return EmissionEstimate(
        energy=energy,
        carbon=(energy * pue) * intensity,
        basis=EstimateBasis.DURATION_BASED,
    )


def combined_assurance(tiers_executed: Sequence[ModelTier]) -> float:
    """Assurance of running several validation passes, assuming independent detection."""
    if not tiers_executed:
        raise EmptyPlan("cannot combine assurance over an empty plan")
    miss = 1.0
    for tier in tiers_executed:
        miss *= 1.0 - tier.assurance_value
    return 1.0 - miss


@dataclass(frozen=True)
class AssurancePerCarbon:
    assurance: float
    carbon: float  # gCO2e
    ratio: float  # 1/gCO2e


def assurance_per_carbon(assurance: float, carbon: float) -> AssurancePerCarbon:
    """Validation confidence gained per gram of CO2e spent."""
    if carbon <= 0:
        raise ZeroCarbon(f"ratio undefined for carbon <= 0, got {carbon}")
    if not 0.0 < assurance <= 1.0:
        raise ValueError(f"assurance must be in (0,1], got {assurance}")
    return AssurancePerCarbon(assurance=assurance, carbon=carbon, ratio=assurance / carbon)


@dataclass(frozen=True)
class WorkloadEvent:
    """One metered unit of AI work, as stored in the provenance ledger.

    The PUE used for the estimate is carried so that the carbon identity
    carbon = energy * pue * intensity_at_time is checkable from the record alone.
    """

    event_id: str
    scope: ScopeId
    kind: EventKind
    tier: str  # tier name; parameters live in policy configuration
    tokens_in: int
    tokens_out: int
    duration: float  # seconds
    timestamp: datetime
    energy: float  # kWh
    carbon: float  # gCO2e
    intensity_at_time: float  # gCO2e/kWh
    pue: float = 1.0

    def __post_init__(self) -> None:
        if not self.event_id:
            raise ValueError("event_id must be non-empty")
        if self.tokens_in < 0 or self.tokens_out < 0:
            raise ValueError("token counts must be >= 0")
        if self.duration < 0:
            raise ValueError("duration must be >= 0")
        if self.energy < 0 or self.carbon < 0:
            raise ValueError("energy and carbon must be >= 0")
        if self.intensity_at_time <= 0:
            raise NonPositiveIntensity(
                f"intensity_at_time must be > 0, got {self.intensity_at_time}"
            )
        if self.pue < 1.0:
            raise ValueError(f"PUE must be >= 1, got {self.pue}")
        if self.timestamp.tzinfo is None:
            raise ValueError("timestamp must be timezone-aware UTC")
        expected = (self.energy * self.pue) * self.intensity_at_time
        if not close(self.carbon, expected):
            raise ValueError(
                f"carbon {self.carbon} inconsistent with energy*pue*intensity = {expected}"
            )


def make_workload_event(
    event_id: str,
    scope: ScopeId,
    kind: EventKind,
    tier: ModelTier,
    tokens_in: int,
    tokens_out: int,
    duration: float,
    timestamp: datetime,
    pue: float,
    intensity: float,
) -> WorkloadEvent:
    """Build an event whose energy follows the estimation formula for its kind."""
    if kind in TOKEN_BASED_KINDS:
        est = estimate_inference(tokens_in + tokens_out, tier, pue, intensity)
    else:
        est = estimate_duration(duration, tier, pue, intensity)
    return WorkloadEvent(
        event_id=event_id,
        scope=scope,
        kind=kind,
        tier=tier.name,
        tokens_in=tokens_in,
        tokens_out=tokens_out,
        duration=duration,
        timestamp=timestamp,
        energy=est.energy,
        carbon=est.carbon,
        intensity_at_time=intensity,
        pue=pue,
    )
