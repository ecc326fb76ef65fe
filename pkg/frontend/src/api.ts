/**
 * Thin typed client over the gate service HTTP API.
 * Fetch is injectable so logic tests run without a network.
 */

import type {
  BudgetSnapshot,
  DecisionOutcome,
  DecisionSubmission,
  IntensityNow,
  LedgerDecision,
  ReviewItem,
} from './types.js';

export interface ConsoleConfig {
  baseUrl: string;
  token?: string;
}

export class ApiError extends Error {
  constructor(
    readonly status: number,
    message: string,
  ) {
    super(message);
    this.name = 'ApiError';
  }
}

export type FetchLike = (input: string, init?: RequestInit) => Promise<Response>;

export class GateServiceClient {
  private readonly baseUrl: string;
  private readonly headers: Record<string, string>;

  constructor(
    config: ConsoleConfig,
    private readonly fetchFn: FetchLike = (input, init) => fetch(input, init),
  ) {
    this.baseUrl = config.baseUrl.replace(/\/+$/, '');
    this.headers = { 'Content-Type': 'application/json' };
    if (config.token) {
      this.headers['Authorization'] = `Bearer ${config.token}`;
    }
  }

  private async request<T>(method: string, path: string, body?: unknown): Promise<T> {
    const response = await this.fetchFn(this.baseUrl + path, {
      method,
      headers: this.headers,
      body: body === undefined ? undefined : JSON.stringify(body),
    });
    if (!response.ok) {
      let detail = response.statusText;
      try {
        const parsed = (await response.json()) as { detail?: string; error?: string };
        detail = parsed.detail ?? parsed.error ?? detail;
      } catch {
        // non-JSON error body; keep the status text
      }
      throw new ApiError(response.status, `${method} ${path}: ${detail}`);
    }
    return (await response.json()) as T;
  }

  async listPending(): Promise<ReviewItem[]> {
    const body = await this.request<{ reviews: ReviewItem[] }>('GET', '/reviews/pending');
    return body.reviews;
  }

  submitDecision(reviewId: string, submission: DecisionSubmission): Promise<DecisionOutcome> {
    return this.request('POST', `/reviews/${reviewId}/decision`, submission);
  }

  getBudget(scope: string): Promise<BudgetSnapshot> {
    return this.request('GET', `/budgets/${scope}`);
  }

  intensityNow(): Promise<IntensityNow> {
    return this.request('GET', '/intensity/now');
  }

  async recentDecisions(limit = 20): Promise<LedgerDecision[]> {
    const body = await this.request<{ decisions: LedgerDecision[] }>(
      'GET',
      `/ledger/recent?limit=${limit}`,
    );
    return body.decisions;
  }

  async health(): Promise<boolean> {
    try {
      await this.request('GET', '/healthz');
      return true;
    } catch {
      return false;
    }
  }
}
