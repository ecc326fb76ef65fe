/**
 * Pure view-model builders. Geometry (bar widths, sparkline points) is
 * computed here; displayed numbers are passed through from service fields
 * untouched.
 */

import type { BudgetSnapshot, IntensityNow, ReviewItem, ReviewTrigger } from './types.js';

export const TRIGGER_LABELS: Record<ReviewTrigger, string> = {
  budget_hard_exceeded: 'Budget hard-exceeded',
  budget_soft_breached: 'Budget soft-breached',
  regeneration_cap: 'Regeneration cap reached',
};

export interface ReviewRow {
  reviewId: string;
  created: string;
  triggerLabel: string;
  trigger: ReviewTrigger;
  scopeChain: string[]; // root-to-leaf segments, e.g. ["release:v2", "pipeline:ci", "pr:7"]
  estCarbon: number;
  riskScore: number;
  loopId: string | null;
  needsNote: boolean; // approve requires a justification note
}

/** Pending reviews oldest-first, ready to render. */
export function reviewQueue(items: ReviewItem[]): ReviewRow[] {
  return [...items]
    .sort((a, b) =>
      a.created === b.created
        ? a.review_id.localeCompare(b.review_id)
        : a.created.localeCompare(b.created),
    )
    .map((item) => ({
      reviewId: item.review_id,
      created: item.created,
      triggerLabel: TRIGGER_LABELS[item.trigger],
      trigger: item.trigger,
      scopeChain: item.scope.split('/'),
      estCarbon: item.request.est_carbon,
      riskScore: item.request.risk.score,
      loopId: item.loop_id,
      needsNote: item.trigger === 'regeneration_cap',
    }));
}

/**
 * Client-side validation before a decision POST. Approving a regeneration-cap
 * review without a justification note is blocked here, before any request.
 */
export function validateDecision(
  row: ReviewRow,
  outcome: 'approve' | 'deny',
  approver: string,
  note: string,
): string | null {
  if (!approver.trim()) {
    return 'Approver name is required.';
  }
  if (outcome === 'approve' && row.needsNote && !note.trim()) {
    return 'A justification note is mandatory to extend a regeneration cap.';
  }
  return null;
}

export interface GaugeView {
  scope: string;
  allocation: number;
  consumed: number;
  reserved: number;
  remaining: number;
  softThreshold: number;
  consumedFraction: number; // bar geometry, clamped to [0,1]
  reservedFraction: number;
  softMarkerFraction: number;
  pastSoft: boolean;
}

export function budgetGauge(budget: BudgetSnapshot): GaugeView {
  const clamp = (x: number) => Math.min(Math.max(x, 0), 1);
  const consumedFraction = clamp(budget.consumed / budget.allocation);
  const reservedFraction = clamp((budget.consumed + budget.reserved) / budget.allocation);
  return {
    scope: budget.scope,
    allocation: budget.allocation,
    consumed: budget.consumed,
    reserved: budget.reserved,
    remaining: budget.remaining,
    softThreshold: budget.soft_threshold,
    consumedFraction,
    reservedFraction,
    softMarkerFraction: clamp(budget.soft_threshold),
    pastSoft: reservedFraction > budget.soft_threshold,
  };
}

export interface SparklineView {
  values: number[];
  current: number;
  currentIndex: number;
  aboveThreshold: boolean;
  threshold: number | null;
}

export function intensitySparkline(
  now: IntensityNow,
  threshold: number | null = null,
): SparklineView {
  const elapsedMs = Date.parse(now.time) - Date.parse(now.series_start);
  const index = Math.floor(elapsedMs / 1000 / now.step);
  const currentIndex = Math.min(Math.max(index, 0), now.values.length - 1);
  return {
    values: now.values,
    current: now.intensity,
    currentIndex,
    aboveThreshold: threshold !== null && now.intensity > threshold,
    threshold,
  };
}

/** Data freshness: stale once the last successful fetch is older than the poll interval. */
export function isStale(lastFetchMs: number | null, nowMs: number, pollIntervalMs: number): boolean {
  if (lastFetchMs === null) {
    return true;
  }
  return nowMs - lastFetchMs > pollIntervalMs;
}
