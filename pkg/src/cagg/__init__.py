"""Carbon-aware governance gates for AI-assisted development pipelines."""

from .core import (
    AssurancePerCarbon,
    EmissionEstimate,
    EventKind,
    ModelTier,
    ScopeId,
    ScopeKind,
    WorkloadEvent,
    assurance_per_carbon,
    combined_assurance,
    estimate_duration,
    estimate_inference,
)
from .budget import BudgetManager, BudgetStatus, CarbonBudget, ConsumeOutcome
from .intensity import IntensitySeries, WindowChoice, best_window
from .ledger import AuditReport, GateDecisionRecord, ProvenanceLedger, ProvenanceRecord
from .orchestrator import (
    LoopRegistry,
    PlanningParams,
    RegenerationLoopState,
    RiskSignal,
    ValidationPlan,
    plan_validation,
)
from .policy import GateDecision, GateEngine, GateKind, GateRequest, PolicyConfig, Verdict
from .service import GateService, create_app

__version__ = "0.1.0"

__all__ = [
    "AssurancePerCarbon", "AuditReport", "BudgetManager", "BudgetStatus",
    "CarbonBudget", "ConsumeOutcome", "EmissionEstimate", "EventKind",
    "GateDecision", "GateDecisionRecord", "GateEngine", "GateKind",
    "GateRequest", "GateService", "IntensitySeries", "LoopRegistry",
    "ModelTier", "PlanningParams", "PolicyConfig", "ProvenanceLedger",
    "ProvenanceRecord", "RegenerationLoopState", "RiskSignal", "ScopeId",
    "ScopeKind", "ValidationPlan", "Verdict", "WindowChoice", "WorkloadEvent",
    "assurance_per_carbon", "best_window", "combined_assurance", "create_app",
    "estimate_duration", "estimate_inference", "plan_validation",
]
