/**
 * Wire types mirroring the gate service JSON. The console never recomputes
 * carbon: every number it shows comes straight from one of these fields.
 */

export type ReviewTrigger =
  | 'budget_hard_exceeded'
  | 'budget_soft_breached'
  | 'regeneration_cap';

export type ReviewStatus = 'pending' | 'approved' | 'denied';

export interface RiskSignal {
  score: number;
  source: string;
}

export interface GateRequestSnapshot {
  scope: string;
  gate_kind: string;
  risk: RiskSignal;
  est_carbon: number;
  deferrable_by: number;
  loop_id: string | null;
}

export interface ReviewItem {
  review_id: string;
  created: string; // RFC 3339
  scope: string;
  trigger: ReviewTrigger;
  status: ReviewStatus;
  loop_id: string | null;
  request: GateRequestSnapshot;
  resolved_by: string | null;
  resolution_note: string | null;
}

export interface BudgetSnapshot {
  scope: string;
  allocation: number;
  consumed: number;
  reserved: number;
  remaining: number;
  soft_threshold: number;
  period: [string, string] | null;
}

export interface IntensityNow {
  time: string;
  intensity: number;
  series_start: string;
  step: number;
  values: number[];
}

export interface LoopState {
  loop_id: string;
  scope: string;
  attempts: number;
  cap: number;
  state: 'active' | 'blocked' | 'terminated';
}

export interface LedgerDecision {
  seq: number;
  decision_id: string;
  kind: string;
  scope: string;
  verdict: string | null;
  rationale: string[];
  est_carbon: number | null;
  review_id: string | null;
  loop_id: string | null;
  approver: string | null;
  override: boolean;
  timestamp: string;
}

export interface DecisionOutcome {
  review: ReviewItem;
  loop?: LoopState;
  decision?: { verdict: string; rationale: string[] };
}

export interface DecisionSubmission {
  outcome: 'approve' | 'deny';
  approver: string;
  note: string;
  extension: number;
}
