"""cagg command line: gate client for CI scripts, admin commands, and the
policy simulator.

Gate verdict exit codes let pipelines branch without parsing output:
0 allow/downgrade, 10 defer, 20 escalate, 30 deny, 1 transport or usage error.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path
from typing import Optional

import requests

from .core import CaggError, EventKind, ScopeId
from .intensity import load_trace
from .orchestrator import RiskSignal, RiskSource
from .policy import GateKind, GateRequest, PolicyConfig
from .service import (
    GateService,
    decision_to_dict,
    budget_to_dict,
    loop_to_dict,
    service_from_env,
)
from .simulate import (
    compare_reports,
    default_series_for,
    generate_trace,
    load_trace_file,
    run_simulation,
    save_trace_file,
)

VERDICT_EXIT = {"allow": 0, "downgrade": 0, "defer": 10, "escalate": 20, "deny": 30}


class Remote:
    """Thin JSON client for the gate service API."""

    def __init__(self, url: str, token: Optional[str] = None):
        self.url = url.rstrip("/")
        self.headers = {"Authorization": f"Bearer {token}"} if token else {}

    def request(self, method: str, path: str, body=None, params=None) -> dict:
        response = requests.request(
            method, self.url + path, json=body, params=params,
            headers=self.headers, timeout=30,
        )
        if response.status_code >= 400:
            raise RuntimeError(f"{method} {path} -> {response.status_code}: {response.text}")
        if response.headers.get("content-type", "").startswith("application/json"):
            return response.json()
        return {"raw": response.text}


def emit(doc) -> None:
    print(json.dumps(doc, indent=2, sort_keys=True))


def local_service() -> GateService:
    service, _ = service_from_env()
    return service


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="cagg", description="carbon-aware governance gates"
    )
    parser.add_argument(
        "--url",
        default=os.environ.get("CAGG_URL", "http://127.0.0.1:8080"),
        help="gate service base URL (default: CAGG_URL or http://127.0.0.1:8080)",
    )
    parser.add_argument(
        "--local",
        action="store_true",
        help="run the engine in-process against CAGG_DATA_DIR instead of a service",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    serve = sub.add_parser("serve", help="run the HTTP gate service")
    serve.add_argument(
        "--listen", default=os.environ.get("CAGG_LISTEN_ADDR", "127.0.0.1:8080")
    )

    gate = sub.add_parser("gate", help="gate operations")
    gate_sub = gate.add_subparsers(dest="gate_command", required=True)
    check = gate_sub.add_parser("check", help="evaluate a governance gate")
    check.add_argument("--scope", required=True)
    check.add_argument(
        "--gate-kind", default="pr_validation",
        choices=[k.value for k in GateKind],
    )
    check.add_argument("--risk", type=float, required=True)
    check.add_argument(
        "--risk-source", default="manual", choices=[s.value for s in RiskSource]
    )
    check.add_argument("--est-carbon", type=float, required=True)
    check.add_argument("--deferrable-by", type=float, default=0.0)
    check.add_argument("--loop-id")

    record = sub.add_parser("record", help="report an executed workload")
    record.add_argument("--reservation")
    record.add_argument("--scope")
    record.add_argument("--kind", default="inference", choices=[k.value for k in EventKind])
    record.add_argument("--tier", required=True)
    record.add_argument("--tokens-in", type=int, default=0)
    record.add_argument("--tokens-out", type=int, default=0)
    record.add_argument("--duration", type=float, default=0.0)
    record.add_argument("--intensity", type=float)
    record.add_argument("--pue", type=float)
    record.add_argument("--event-id")

    budget = sub.add_parser("budget", help="budget administration")
    budget_sub = budget.add_subparsers(dest="budget_command", required=True)
    bset = budget_sub.add_parser("set")
    bset.add_argument("--scope", required=True)
    bset.add_argument("--allocation", type=float, required=True)
    bset.add_argument("--soft-threshold", type=float, default=0.8)
    bshow = budget_sub.add_parser("show")
    bshow.add_argument("--scope", required=True)

    ledger = sub.add_parser("ledger", help="provenance ledger audit")
    ledger_sub = ledger.add_subparsers(dest="ledger_command", required=True)
    ledger_sub.add_parser("verify")
    lexport = ledger_sub.add_parser("export")
    lexport.add_argument("--format", default="lines", choices=["lines", "summary"])

    loops = sub.add_parser("loops", help="regeneration loop operations")
    loops_sub = loops.add_subparsers(dest="loops_command", required=True)
    attempt = loops_sub.add_parser("attempt")
    attempt.add_argument("--loop", required=True)
    attempt.add_argument("--scope", required=True)
    justify = loops_sub.add_parser("justify")
    justify.add_argument("--loop", required=True)
    justify.add_argument("--approver", required=True)
    justify.add_argument("--text", required=True)
    justify.add_argument("--extension", type=int, default=1)
    terminate = loops_sub.add_parser("terminate")
    terminate.add_argument("--loop", required=True)
    terminate.add_argument("--approver", required=True)
    terminate.add_argument("--text", default="terminated")

    sim = sub.add_parser("simulate", help="replay a workload trace through the engine")
    sim.add_argument("--seed", type=int, default=0)
    sim.add_argument("--entries", type=int, default=200)
    sim.add_argument("--trace", help="replay this trace file instead of generating one")
    sim.add_argument("--save-trace", help="write the generated trace here")
    sim.add_argument("--policy", help="policy YAML (default: built-in policy)")
    sim.add_argument("--intensity-trace", help="grid intensity trace file")
    sim.add_argument("--baseline", action="store_true",
                     help="also run the ungoverned always-deep baseline and report deltas")
    auto = sim.add_mutually_exclusive_group()
    auto.add_argument("--auto-approve", action="store_true",
                      help="auto-approve escalations during replay")
    auto.add_argument("--auto-deny", action="store_true",
                      help="auto-deny escalations during replay")
    sim.add_argument("--report", help="also write the report JSON to this path")

    return parser


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    service, token = service_from_env()
    app = create_app(service, token=token)
    host, _, port = args.listen.partition(":")
    uvicorn.run(app, host=host or "127.0.0.1", port=int(port or 8080), log_level="info")
    return 0


def cmd_gate_check(args) -> int:
    if args.local:
        service = local_service()
        request = GateRequest(
            scope=ScopeId.parse(args.scope),
            gate_kind=GateKind(args.gate_kind),
            risk=RiskSignal(args.risk, RiskSource(args.risk_source)),
            est_carbon=args.est_carbon,
            deferrable_by=args.deferrable_by,
            loop_id=args.loop_id,
        )
        decision = decision_to_dict(service.check_gate(request))
    else:
        remote = Remote(args.url, os.environ.get("CAGG_TOKEN"))
        decision = remote.request(
            "POST",
            "/gates/check",
            body={
                "scope": args.scope,
                "gate_kind": args.gate_kind,
                "risk": {"score": args.risk, "source": args.risk_source},
                "est_carbon": args.est_carbon,
                "deferrable_by": args.deferrable_by,
                "loop_id": args.loop_id,
            },
        )
    emit(decision)
    return VERDICT_EXIT.get(decision["verdict"], 1)


def cmd_record(args) -> int:
    body = {
        "kind": args.kind,
        "tier": args.tier,
        "tokens_in": args.tokens_in,
        "tokens_out": args.tokens_out,
        "duration": args.duration,
        "reservation_id": args.reservation,
        "scope": args.scope,
        "event_id": args.event_id,
        "intensity": args.intensity,
        "pue": args.pue,
    }
    if args.local:
        service = local_service()
        result = service.record_event(
            kind=EventKind(args.kind),
            tier_name=args.tier,
            tokens_in=args.tokens_in,
            tokens_out=args.tokens_out,
            duration=args.duration,
            reservation_id=args.reservation,
            scope=None if args.scope is None else ScopeId.parse(args.scope),
            event_id=args.event_id,
            intensity=args.intensity,
            pue=args.pue,
        )
    else:
        result = Remote(args.url, os.environ.get("CAGG_TOKEN")).request(
            "POST", "/events", body=body
        )
    emit(result)
    return 0


def cmd_budget(args) -> int:
    if args.local:
        service = local_service()
        if args.budget_command == "set":
            snapshot = service.budget.set_budget(
                ScopeId.parse(args.scope), args.allocation, args.soft_threshold
            )
        else:
            snapshot = service.budget.status(ScopeId.parse(args.scope))
        emit(budget_to_dict(snapshot))
        return 0
    remote = Remote(args.url, os.environ.get("CAGG_TOKEN"))
    if args.budget_command == "set":
        result = remote.request(
            "PUT",
            f"/budgets/{args.scope}",
            body={"allocation": args.allocation, "soft_threshold": args.soft_threshold},
        )
    else:
        result = remote.request("GET", f"/budgets/{args.scope}")
    emit(result)
    return 0


def cmd_ledger(args) -> int:
    if args.local:
        service = local_service()
        if args.ledger_command == "verify":
            report = service.ledger.verify_chain()
            emit(report.to_dict())
            return 0 if report.chain_valid else 1
        sys.stdout.write(service.ledger.export_audit(args.format).decode("utf-8"))
        return 0
    remote = Remote(args.url, os.environ.get("CAGG_TOKEN"))
    if args.ledger_command == "verify":
        report = remote.request("GET", "/ledger/audit", params={"format": "summary"})
        emit(report)
        return 0 if report.get("chain_valid") else 1
    result = remote.request("GET", "/ledger/audit", params={"format": args.format})
    if "raw" in result:
        sys.stdout.write(result["raw"])
    else:
        emit(result)
    return 0


def cmd_loops(args) -> int:
    if args.local:
        service = local_service()
        if args.loops_command == "attempt":
            state = service.loops.record_regeneration_attempt(
                args.loop, ScopeId.parse(args.scope)
            )
            service._persist_workflow()
        elif args.loops_command == "justify":
            state = service.loops.justify(args.loop, args.approver, args.text, args.extension)
        else:
            state = service.loops.terminate(args.loop, args.approver, args.text)
        emit(loop_to_dict(state))
        return 0
    remote = Remote(args.url, os.environ.get("CAGG_TOKEN"))
    if args.loops_command == "attempt":
        result = remote.request(
            "POST", f"/loops/{args.loop}/attempt", body={"scope": args.scope}
        )
    elif args.loops_command == "justify":
        result = remote.request(
            "POST",
            f"/loops/{args.loop}/justify",
            body={"approver": args.approver, "text": args.text, "extension": args.extension},
        )
    else:
        result = remote.request(
            "POST",
            f"/loops/{args.loop}/terminate",
            body={"approver": args.approver, "text": args.text},
        )
    emit(result)
    return 0


def cmd_simulate(args) -> int:
    if args.trace:
        trace = load_trace_file(Path(args.trace))
    else:
        trace = generate_trace(seed=args.seed, entries=args.entries)
    if args.save_trace:
        save_trace_file(trace, Path(args.save_trace))
    config = PolicyConfig.from_file(Path(args.policy)) if args.policy else PolicyConfig()
    series = load_trace(Path(args.intensity_trace)) if args.intensity_trace else default_series_for(trace)
    auto = "approve" if args.auto_approve else "deny" if args.auto_deny else "none"
    governed = run_simulation(trace, config=config, series=series, auto=auto)
    if args.baseline:
        baseline = run_simulation(trace, config=config, series=series, baseline=True)
        doc = compare_reports(governed, baseline)
    else:
        doc = governed.to_dict()
    rendered = json.dumps(doc, indent=2, sort_keys=True)
    print(rendered)
    if args.report:
        Path(args.report).write_text(rendered + "\n")
    return 0


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "serve":
            return cmd_serve(args)
        if args.command == "gate":
            return cmd_gate_check(args)
        if args.command == "record":
            return cmd_record(args)
        if args.command == "budget":
            return cmd_budget(args)
        if args.command == "ledger":
            return cmd_ledger(args)
        if args.command == "loops":
            return cmd_loops(args)
        if args.command == "simulate":
            return cmd_simulate(args)
        return 1
    except (CaggError, RuntimeError, requests.RequestException, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
