/**
 * Console state store: polling snapshot plus optimistic decision submission
 * with conflict rollback.
 *
 * A submitted decision produces exactly one POST. The item leaves the queue
 * immediately; a 409 (someone else resolved it first) puts it back with a
 * "resolved elsewhere" notice, any other failure puts it back with the error.
 * Nothing is retried without a fresh user action.
 */

import { ApiError, GateServiceClient } from './api.js';
import type {
  BudgetSnapshot,
  DecisionOutcome,
  DecisionSubmission,
  IntensityNow,
  LedgerDecision,
  ReviewItem,
} from './types.js';

export interface Notice {
  reviewId: string;
  kind: 'conflict' | 'error';
  message: string;
}

export interface ConsoleState {
  reviews: ReviewItem[];
  budgets: BudgetSnapshot[];
  intensity: IntensityNow | null;
  recentDecisions: LedgerDecision[];
  connectionError: string | null;
  notices: Notice[];
  lastFetchMs: number | null;
  inFlight: Set<string>; // review ids with a POST outstanding
}

export type Listener = (state: ConsoleState) => void;

export class ConsoleStore {
  private state: ConsoleState = {
    reviews: [],
    budgets: [],
    intensity: null,
    recentDecisions: [],
    connectionError: null,
    notices: [],
    lastFetchMs: null,
    inFlight: new Set(),
  };
  private listeners: Listener[] = [];
  private refreshing = false;

  constructor(
    private readonly client: GateServiceClient,
    private readonly watchedScopes: string[] = [],
    private readonly now: () => number = () => Date.now(),
  ) {}

  getState(): ConsoleState {
    return this.state;
  }

  subscribe(listener: Listener): () => void {
    this.listeners.push(listener);
    return () => {
      this.listeners = this.listeners.filter((l) => l !== listener);
    };
  }

  private update(patch: Partial<ConsoleState>): void {
    this.state = { ...this.state, ...patch };
    for (const listener of this.listeners) {
      listener(this.state);
    }
  }

  watchScope(scope: string): void {
    if (!this.watchedScopes.includes(scope)) {
      this.watchedScopes.push(scope);
    }
  }

  /** One poll cycle; overlapping calls coalesce into the running one. */
  async refresh(): Promise<void> {
    if (this.refreshing) {
      return;
    }
    this.refreshing = true;
    try {
      const [reviews, intensity, recentDecisions] = await Promise.all([
        this.client.listPending(),
        this.client.intensityNow(),
        this.client.recentDecisions(20),
      ]);
      // budgets for watched scopes plus everything the queue references
      const scopes = new Set(this.watchedScopes);
      for (const item of reviews) {
        scopes.add(item.scope);
      }
      const budgets: BudgetSnapshot[] = [];
      for (const scope of [...scopes].sort()) {
        try {
          budgets.push(await this.client.getBudget(scope));
        } catch (error) {
          if (!(error instanceof ApiError && error.status === 404)) {
            throw error;
          }
          // unbudgeted scope: nothing to gauge
        }
      }
      this.update({
        reviews,
        intensity,
        recentDecisions,
        budgets,
        connectionError: null,
        lastFetchMs: this.now(),
      });
    } catch (error) {
      this.update({ connectionError: describe(error) });
    } finally {
      this.refreshing = false;
    }
  }

  /**
   * Submit a decision optimistically. Returns the service outcome on success,
   * null when the POST failed (state already rolled back).
   */
  async submitDecision(
    reviewId: string,
    submission: DecisionSubmission,
  ): Promise<DecisionOutcome | null> {
    const item = this.state.reviews.find((r) => r.review_id === reviewId);
    if (!item || this.state.inFlight.has(reviewId)) {
      return null;
    }
    const snapshot = this.state.reviews;
    const inFlight = new Set(this.state.inFlight);
    inFlight.add(reviewId);
    this.update({
      reviews: snapshot.filter((r) => r.review_id !== reviewId),
      notices: this.state.notices.filter((n) => n.reviewId !== reviewId),
      inFlight,
    });
    try {
      const outcome = await this.client.submitDecision(reviewId, submission);
      return outcome;
    } catch (error) {
      const conflict = error instanceof ApiError && error.status === 409;
      const notice: Notice = conflict
        ? {
            reviewId,
            kind: 'conflict',
            message: `Review ${reviewId} was already resolved elsewhere.`,
          }
        : { reviewId, kind: 'error', message: describe(error) };
      // restore the row with the notice; the next poll reconciles with the service
      this.update({
        reviews: restore(this.state.reviews, item, snapshot),
        notices: [...this.state.notices, notice],
      });
      return null;
    } finally {
      const done = new Set(this.state.inFlight);
      done.delete(reviewId);
      this.update({ inFlight: done });
    }
  }

  dismissNotice(reviewId: string): void {
    this.update({ notices: this.state.notices.filter((n) => n.reviewId !== reviewId) });
  }
}

function restore(current: ReviewItem[], item: ReviewItem, original: ReviewItem[]): ReviewItem[] {
  const index = original.findIndex((r) => r.review_id === item.review_id);
  const next = [...current];
  next.splice(Math.min(index, next.length), 0, item);
  return next;
}

function describe(error: unknown): string {
  if (error instanceof ApiError) {
    return error.message;
  }
  if (error instanceof Error) {
    return `Cannot reach the gate service: ${error.message}`;
  }
  return String(error);
}
