import { describe, expect, it } from 'vitest';

import {
  budgetGauge,
  intensitySparkline,
  isStale,
  reviewQueue,
  validateDecision,
} from '../src/model.js';
import { renderGauge, renderRecentDecisions, renderReviewRow, esc } from '../src/render.js';
import { sparklineGeometry } from '../src/sparkline.js';
import type { BudgetSnapshot, IntensityNow, ReviewItem } from '../src/types.js';

function review(overrides: Partial<ReviewItem> = {}): ReviewItem {
  return {
    review_id: 'rev-000001',
    created: '2026-01-01T00:05:00Z',
    scope: 'release:v2/pipeline:ci/pr:7',
    trigger: 'budget_hard_exceeded',
    status: 'pending',
    loop_id: null,
    request: {
      scope: 'release:v2/pipeline:ci/pr:7',
      gate_kind: 'pr_validation',
      risk: { score: 0.7, source: 'static_checks' },
      est_carbon: 12.5,
      deferrable_by: 0,
      loop_id: null,
    },
    resolved_by: null,
    resolution_note: null,
    ...overrides,
  };
}

describe('reviewQueue', () => {
  it('orders oldest first, review id as tie-break', () => {
    const items = [
      review({ review_id: 'rev-3', created: '2026-01-01T02:00:00Z' }),
      review({ review_id: 'rev-2', created: '2026-01-01T01:00:00Z' }),
      review({ review_id: 'rev-1', created: '2026-01-01T01:00:00Z' }),
    ];
    expect(reviewQueue(items).map((r) => r.reviewId)).toEqual(['rev-1', 'rev-2', 'rev-3']);
  });

  it('splits the scope chain and passes numbers through untouched', () => {
    const [row] = reviewQueue([review()]);
    expect(row!.scopeChain).toEqual(['release:v2', 'pipeline:ci', 'pr:7']);
    expect(row!.estCarbon).toBe(12.5);
    expect(row!.riskScore).toBe(0.7);
  });

  it('marks only regeneration-cap reviews as needing a note', () => {
    const rows = reviewQueue([
      review({ review_id: 'a', trigger: 'regeneration_cap', loop_id: 'gen-7' }),
      review({ review_id: 'b', trigger: 'budget_soft_breached' }),
    ]);
    expect(rows.map((r) => r.needsNote)).toEqual([true, false]);
  });
});

describe('validateDecision', () => {
  const capRow = reviewQueue([review({ trigger: 'regeneration_cap', loop_id: 'gen-7' })])[0]!;
  const budgetRow = reviewQueue([review()])[0]!;

  it('blocks approving a cap review without a note', () => {
    expect(validateDecision(capRow, 'approve', 'alice', '   ')).toMatch(/justification/i);
  });

  it('allows approving a cap review with a note', () => {
    expect(validateDecision(capRow, 'approve', 'alice', 'flaky suite')).toBeNull();
  });

  it('denying never requires a note', () => {
    expect(validateDecision(capRow, 'deny', 'alice', '')).toBeNull();
  });

  it('budget approvals do not require a note', () => {
    expect(validateDecision(budgetRow, 'approve', 'alice', '')).toBeNull();
  });

  it('requires an approver name', () => {
    expect(validateDecision(budgetRow, 'approve', ' ', 'x')).toMatch(/approver/i);
  });
});

const BUDGET: BudgetSnapshot = {
  scope: 'release:v2/pipeline:ci/pr:7',
  allocation: 50,
  consumed: 42.125,
  reserved: 3.5,
  remaining: 4.375,
  soft_threshold: 0.8,
  period: null,
};

describe('budgetGauge', () => {
  it('computes bar geometry and keeps numbers verbatim', () => {
    const gauge = budgetGauge(BUDGET);
    expect(gauge.consumed).toBe(42.125);
    expect(gauge.reserved).toBe(3.5);
    expect(gauge.remaining).toBe(4.375);
    expect(gauge.consumedFraction).toBeCloseTo(42.125 / 50, 12);
    expect(gauge.reservedFraction).toBeCloseTo(45.625 / 50, 12);
    expect(gauge.pastSoft).toBe(true);
  });

  it('clamps overspent gauges to a full bar', () => {
    const gauge = budgetGauge({ ...BUDGET, consumed: 80, remaining: -30 });
    expect(gauge.consumedFraction).toBe(1);
    expect(gauge.remaining).toBe(-30); // still the service's number
  });
});

describe('rendered numbers are service numbers', () => {
  it('gauge markup contains the exact figures', () => {
    const html = renderGauge(budgetGauge(BUDGET));
    expect(html).toContain('consumed 42.125 g');
    expect(html).toContain('reserved 3.5 g');
    expect(html).toContain('of 50 g');
    expect(html).toContain('remaining 4.375 g');
  });

  it('review markup contains the exact estimate and risk', () => {
    const html = renderReviewRow(reviewQueue([review()])[0]!);
    expect(html).toContain('12.5 g');
    expect(html).toContain('0.7');
  });

  it('recent decisions render newest first', () => {
    const html = renderRecentDecisions([
      {
        seq: 1, decision_id: 'd1', kind: 'gate', scope: 'release:v2', verdict: 'allow',
        rationale: ['budget.ok'], est_carbon: 1, review_id: null, loop_id: null,
        approver: null, override: false, timestamp: '2026-01-01T00:00:00Z',
      },
      {
        seq: 2, decision_id: 'd2', kind: 'gate', scope: 'release:v2', verdict: 'deny',
        rationale: ['budget.hard'], est_carbon: 2, review_id: null, loop_id: null,
        approver: null, override: false, timestamp: '2026-01-01T00:01:00Z',
      },
    ]);
    expect(html.indexOf('deny')).toBeLessThan(html.indexOf('allow'));
  });

  it('escapes markup in service strings', () => {
    expect(esc('<img onerror=alert(1)>')).toBe('&lt;img onerror=alert(1)&gt;');
  });
});

const INTENSITY: IntensityNow = {
  time: '2026-01-01T02:30:00Z',
  intensity: 100,
  series_start: '2026-01-01T00:00:00Z',
  step: 3600,
  values: [500, 400, 100, 120, 480],
};

describe('intensitySparkline', () => {
  it('locates the current step and compares against the threshold', () => {
    const view = intensitySparkline(INTENSITY, 150);
    expect(view.currentIndex).toBe(2);
    expect(view.current).toBe(100);
    expect(view.aboveThreshold).toBe(false);
  });

  it('flags above-threshold styling', () => {
    const view = intensitySparkline({ ...INTENSITY, intensity: 480 }, 150);
    expect(view.aboveThreshold).toBe(true);
  });

  it('builds sparkline geometry covering all points', () => {
    const geo = sparklineGeometry(intensitySparkline(INTENSITY, 150));
    expect(geo.path.startsWith('M')).toBe(true);
    expect(geo.path.split('L')).toHaveLength(INTENSITY.values.length);
    expect(geo.thresholdY).not.toBeNull();
  });
});

describe('isStale', () => {
  it('is stale before any fetch', () => {
    expect(isStale(null, 1_000, 5_000)).toBe(true);
  });

  it('is fresh within the interval and stale after it', () => {
    expect(isStale(10_000, 14_000, 5_000)).toBe(false);
    expect(isStale(10_000, 15_001, 5_000)).toBe(true);
  });
});
