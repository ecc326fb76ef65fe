"""Append-only, hash-chained energy and carbon provenance ledger.

Every workload event and every gate decision is wrapped in a record whose
SHA-256 hash covers (seq, payload, prev_hash) in a canonical byte encoding,
so any mutation of stored history is detectable. Persistence is a single
newline-delimited file of canonical records; appends are fsynced before
returning.
"""

from __future__ import annotations

import hashlib
import json
import os
import threading
from dataclasses import dataclass, field
from datetime import datetime
from pathlib import Path
from typing import Optional, Sequence, Union

from .core import (
    CaggError,
    EventKind,
    ScopeId,
    WorkloadEvent,
    format_rfc3339,
    parse_rfc3339,
)

GENESIS_HASH = "0" * 64

# One tolerance for summing gram-scale floats across a whole ledger.
SUM_TOL = 1e-6


class StorageFailure(CaggError):
    pass


class InvalidPayload(CaggError):
    pass


@dataclass(frozen=True)
class GateDecisionRecord:
    """A governance decision as ledgered: gate verdicts, review resolutions,
    loop justifications/terminations, and budget overflow flags."""

    decision_id: str
    kind: str  # gate | review | justification | termination | budget_overflow
    scope: ScopeId
    rationale: tuple[str, ...]
    timestamp: datetime
    verdict: Optional[str] = None
    gate_kind: Optional[str] = None
    est_carbon: Optional[float] = None
    to_tier: Optional[str] = None
    defer_until: Optional[datetime] = None
    review_id: Optional[str] = None
    loop_id: Optional[str] = None
    reservation_id: Optional[str] = None
    approver: Optional[str] = None
    note: Optional[str] = None
    extension: Optional[int] = None
    amount: Optional[float] = None  # overflow grams for budget_overflow records
    override: bool = False

    def __post_init__(self) -> None:
        if not self.decision_id:
            raise InvalidPayload("decision_id must be non-empty")
        if not self.rationale:
            raise InvalidPayload("rationale must be non-empty")
        if self.timestamp.tzinfo is None:
            raise InvalidPayload("timestamp must be timezone-aware UTC")


Payload = Union[WorkloadEvent, GateDecisionRecord]

# Canonical payload field orders. Changing these breaks every stored chain;
# treat as frozen.
_EVENT_FIELDS = (
    "record_type", "event_id", "scope", "kind", "tier", "tokens_in",
    "tokens_out", "duration", "timestamp", "energy", "carbon",
    "intensity_at_time", "pue",
)
_DECISION_FIELDS = (
    "record_type", "decision_id", "kind", "scope", "gate_kind", "verdict",
    "rationale", "est_carbon", "to_tier", "defer_until", "review_id",
    "loop_id", "reservation_id", "approver", "note", "extension", "amount",
    "override", "timestamp",
)


def _payload_to_dict(payload: Payload) -> dict:
    if isinstance(payload, WorkloadEvent):
        values = {
            "record_type": "event",
            "event_id": payload.event_id,
            "scope": payload.scope.path(),
            "kind": payload.kind.value,
            "tier": payload.tier,
            "tokens_in": payload.tokens_in,
            "tokens_out": payload.tokens_out,
            "duration": float(payload.duration),
            "timestamp": format_rfc3339(payload.timestamp),
            "energy": float(payload.energy),
            "carbon": float(payload.carbon),
            "intensity_at_time": float(payload.intensity_at_time),
            "pue": float(payload.pue),
        }
        return {name: values[name] for name in _EVENT_FIELDS}
    if isinstance(payload, GateDecisionRecord):
        values = {
            "record_type": "decision",
            "decision_id": payload.decision_id,
            "kind": payload.kind,
            "scope": payload.scope.path(),
            "gate_kind": payload.gate_kind,
            "verdict": payload.verdict,
            "rationale": list(payload.rationale),
            "est_carbon": None if payload.est_carbon is None else float(payload.est_carbon),
            "to_tier": payload.to_tier,
            "defer_until": None if payload.defer_until is None else format_rfc3339(payload.defer_until),
            "review_id": payload.review_id,
            "loop_id": payload.loop_id,
            "reservation_id": payload.reservation_id,
            "approver": payload.approver,
            "note": payload.note,
            "extension": payload.extension,
            "amount": None if payload.amount is None else float(payload.amount),
            "override": payload.override,
            "timestamp": format_rfc3339(payload.timestamp),
        }
        return {name: values[name] for name in _DECISION_FIELDS}
    raise InvalidPayload(f"unsupported payload type {type(payload).__name__}")


def _payload_from_dict(data: dict) -> Payload:
    record_type = data.get("record_type")
    if record_type == "event":
        return WorkloadEvent(
            event_id=data["event_id"],
            scope=ScopeId.parse(data["scope"]),
            kind=EventKind(data["kind"]),
            tier=data["tier"],
            tokens_in=int(data["tokens_in"]),
            tokens_out=int(data["tokens_out"]),
            duration=float(data["duration"]),
            timestamp=parse_rfc3339(data["timestamp"]),
            energy=float(data["energy"]),
            carbon=float(data["carbon"]),
            intensity_at_time=float(data["intensity_at_time"]),
            pue=float(data["pue"]),
        )
    if record_type == "decision":
        return GateDecisionRecord(
            decision_id=data["decision_id"],
            kind=data["kind"],
            scope=ScopeId.parse(data["scope"]),
            gate_kind=data["gate_kind"],
            verdict=data["verdict"],
            rationale=tuple(data["rationale"]),
            est_carbon=data["est_carbon"],
            to_tier=data["to_tier"],
            defer_until=None if data["defer_until"] is None else parse_rfc3339(data["defer_until"]),
            review_id=data["review_id"],
            loop_id=data["loop_id"],
            reservation_id=data["reservation_id"],
            approver=data["approver"],
            note=data["note"],
            extension=data["extension"],
            amount=data["amount"],
            override=bool(data["override"]),
            timestamp=parse_rfc3339(data["timestamp"]),
        )
    raise InvalidPayload(f"unknown record_type {record_type!r}")


def _canonical_json(obj) -> str:
    # Compact separators, ASCII-only escapes, insertion-ordered keys; floats
    # render as shortest round-trip decimals via float.__repr__.
    return json.dumps(obj, separators=(",", ":"), ensure_ascii=True)


def record_hash(seq: int, payload_dict: dict, prev_hash: str) -> str:
    body = _canonical_json({"seq": seq, "payload": payload_dict, "prev_hash": prev_hash})
    return hashlib.sha256(body.encode("utf-8")).hexdigest()


@dataclass(frozen=True)
class ProvenanceRecord:
    seq: int
    payload: Payload
    prev_hash: str
    hash: str

    def to_line(self) -> str:
        return _canonical_json(
            {
                "seq": self.seq,
                "payload": _payload_to_dict(self.payload),
                "prev_hash": self.prev_hash,
                "hash": self.hash,
            }
        )


@dataclass
class AuditReport:
    total_records: int
    total_energy: float  # kWh
    total_carbon: float  # gCO2e
    per_scope_carbon: dict[str, float]
    chain_valid: bool
    first_invalid_seq: Optional[int] = None

    def to_dict(self) -> dict:
        return {
            "total_records": self.total_records,
            "total_energy": self.total_energy,
            "total_carbon": self.total_carbon,
            "per_scope_carbon": {k: self.per_scope_carbon[k] for k in sorted(self.per_scope_carbon)},
            "chain_valid": self.chain_valid,
            "first_invalid_seq": self.first_invalid_seq,
        }


def _verify_lines(lines: Sequence[str]) -> AuditReport:
    """Recompute every hash from canonical bytes and total up the energy ledger.

    Scanning stops at the first invalid record; totals cover the valid prefix.
    Scope carbon is rolled up to every ancestor, so per_scope_carbon[s] is the
    carbon of s and everything under it.
    """
    total_energy = 0.0
    total_carbon = 0.0
    per_scope: dict[str, float] = {}
    prev_hash = GENESIS_HASH
    first_invalid: Optional[int] = None

    for index, line in enumerate(lines):
        try:
            data = json.loads(line)
            seq = data["seq"]
            payload_dict = data["payload"]
            stored_prev = data["prev_hash"]
            stored_hash = data["hash"]
            if seq != index or stored_prev != prev_hash:
                raise ValueError("sequence or linkage mismatch")
            if record_hash(seq, payload_dict, stored_prev) != stored_hash:
                raise ValueError("hash mismatch")
            payload = _payload_from_dict(payload_dict)
        except Exception:
            first_invalid = index
            break
        prev_hash = stored_hash
        if isinstance(payload, WorkloadEvent):
            total_energy += payload.energy
            total_carbon += payload.carbon
            for ancestor in payload.scope.chain():
                key = ancestor.path()
                per_scope[key] = per_scope.get(key, 0.0) + payload.carbon

    return AuditReport(
        total_records=len(lines),
        total_energy=total_energy,
        total_carbon=total_carbon,
        per_scope_carbon=per_scope,
        chain_valid=first_invalid is None,
        first_invalid_seq=first_invalid,
    )


def _scope_matches(record_scope: str, query_scope: str) -> bool:
    return record_scope == query_scope or record_scope.startswith(query_scope + "/")


class ProvenanceLedger:
    """Single-writer, multi-reader ledger backed by an append-only file.

    With path=None the ledger is memory-only (used by the simulator and by
    tests); otherwise the file is loaded at construction, a torn final line
    from an unclean shutdown is truncated away, and the chain is verified.
    """

    def __init__(self, path: Optional[Path] = None, verify_on_load: bool = True):
        self._path = Path(path) if path is not None else None
        self._lock = threading.Lock()
        self._records: list[ProvenanceRecord] = []
        self._lines: list[str] = []
        if self._path is not None and self._path.exists():
            self._load(verify_on_load)

    def _load(self, verify: bool) -> None:
        raw = self._path.read_bytes()
        offset = 0
        good_end = 0
        lines: list[str] = []
        torn = False
        for chunk in raw.split(b"\n"):
            if not chunk:
                offset += 1
                continue
            end = offset + len(chunk)
            complete = end < len(raw) and raw[end : end + 1] == b"\n"
            try:
                text = chunk.decode("utf-8")
                record = json.loads(text)
                payload = _payload_from_dict(record["payload"])
                parsed = ProvenanceRecord(
                    seq=record["seq"],
                    payload=payload,
                    prev_hash=record["prev_hash"],
                    hash=record["hash"],
                )
            except Exception as exc:
                if complete:
                    raise StorageFailure(
                        f"unreadable ledger record at line {len(lines)}: {exc}"
                    ) from exc
                torn = True  # incomplete trailing write; drop it
                break
            lines.append(text)
            self._records.append(parsed)
            good_end = end + 1
            offset = end + 1
        self._lines = lines
        if torn:
            with open(self._path, "r+b") as fh:
                fh.truncate(good_end)
        if verify:
            report = _verify_lines(self._lines)
            if not report.chain_valid:
                raise StorageFailure(
                    f"ledger chain invalid at seq {report.first_invalid_seq}"
                )

    def __len__(self) -> int:
        with self._lock:
            return len(self._records)

    def next_seq(self) -> int:
        with self._lock:
            return len(self._records)

    @property
    def root_hash(self) -> str:
        """Hash of the newest record; the genesis digest for an empty ledger."""
        with self._lock:
            return self._records[-1].hash if self._records else GENESIS_HASH

    def append(self, payload: Payload) -> ProvenanceRecord:
        payload_dict = _payload_to_dict(payload)  # raises InvalidPayload on bad types
        with self._lock:
            seq = len(self._records)
            prev_hash = self._records[-1].hash if self._records else GENESIS_HASH
            digest = record_hash(seq, payload_dict, prev_hash)
            record = ProvenanceRecord(seq=seq, payload=payload, prev_hash=prev_hash, hash=digest)
            line = record.to_line()
            if self._path is not None:
                try:
                    with open(self._path, "ab") as fh:
                        fh.write(line.encode("utf-8") + b"\n")
                        fh.flush()
                        os.fsync(fh.fileno())
                except OSError as exc:
                    raise StorageFailure(f"ledger append failed: {exc}") from exc
            self._records.append(record)
            self._lines.append(line)
            return record

    def records(self) -> list[ProvenanceRecord]:
        with self._lock:
            return list(self._records)

    def verify_chain(self) -> AuditReport:
        with self._lock:
            lines = list(self._lines)
        return _verify_lines(lines)

    @classmethod
    def verify_file(cls, path: Path) -> AuditReport:
        """Read-only verification of a ledger file, tolerant of any corruption."""
        try:
            raw = Path(path).read_bytes()
        except OSError as exc:
            raise StorageFailure(f"cannot read ledger file: {exc}") from exc
        lines = [chunk.decode("utf-8", errors="replace") for chunk in raw.split(b"\n") if chunk]
        return _verify_lines(lines)

    def query(
        self,
        scope: ScopeId,
        time_range: Optional[tuple[datetime, datetime]] = None,
    ) -> list[ProvenanceRecord]:
        """Records whose payload scope equals or descends from `scope`, by seq."""
        target = scope.path()
        out = []
        for record in self.records():
            if not _scope_matches(record.payload.scope.path(), target):
                continue
            if time_range is not None:
                start, end = time_range
                ts = record.payload.timestamp
                if not (start <= ts < end):
                    continue
            out.append(record)
        return out

    def export_audit(self, format: str = "lines") -> bytes:
        if format == "lines":
            with self._lock:
                return "".join(line + "\n" for line in self._lines).encode("utf-8")
        if format == "summary":
            report = self.verify_chain()
            return (_canonical_json(report.to_dict()) + "\n").encode("utf-8")
        raise ValueError(f"unknown export format {format!r}")
