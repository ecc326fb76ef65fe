/**
 * Browser bootstrap: one endpoint+token form (token held in sessionStorage),
 * a poll loop (default 5 s), and event delegation for review decisions.
 */

import { GateServiceClient } from './api.js';
import {
  budgetGauge,
  intensitySparkline,
  isStale,
  reviewQueue,
  validateDecision,
} from './model.js';
import { renderConsole } from './render.js';
import { ConsoleStore } from './store.js';

const POLL_INTERVAL_MS = 5000;
const CONFIG_KEY = 'cagg-console-config';

interface StoredConfig {
  baseUrl: string;
  token: string;
  approver: string;
  threshold: number | null;
}

function loadConfig(): StoredConfig | null {
  const raw = sessionStorage.getItem(CONFIG_KEY);
  return raw ? (JSON.parse(raw) as StoredConfig) : null;
}

function renderConfigForm(root: HTMLElement): void {
  root.innerHTML = `
<form id="config" class="config-form">
  <h2>Connect to a gate service</h2>
  <label>Service URL <input name="baseUrl" value="http://127.0.0.1:8080" required></label>
  <label>Bearer token <input name="token" type="password" placeholder="leave empty if none"></label>
  <label>Your name <input name="approver" required placeholder="reviewer name for the ledger"></label>
  <label>Intensity threshold line <input name="threshold" type="number" placeholder="optional, g/kWh"></label>
  <button type="submit">Connect</button>
</form>`;
  const form = root.querySelector<HTMLFormElement>('#config')!;
  form.addEventListener('submit', (event) => {
    event.preventDefault();
    const data = new FormData(form);
    const config: StoredConfig = {
      baseUrl: String(data.get('baseUrl')),
      token: String(data.get('token') ?? ''),
      approver: String(data.get('approver')),
      threshold: data.get('threshold') ? Number(data.get('threshold')) : null,
    };
    sessionStorage.setItem(CONFIG_KEY, JSON.stringify(config));
    start(root, config);
  });
}

function start(root: HTMLElement, config: StoredConfig): void {
  const client = new GateServiceClient({
    baseUrl: config.baseUrl,
    token: config.token || undefined,
  });
  const store = new ConsoleStore(client);

  const paint = () => {
    const state = store.getState();
    const rows = reviewQueue(state.reviews);
    const gauges = state.budgets.map(budgetGauge);
    const spark = state.intensity ? intensitySparkline(state.intensity, config.threshold) : null;
    const stale = isStale(state.lastFetchMs, Date.now(), POLL_INTERVAL_MS * 1.5);
    root.innerHTML = renderConsole(state, rows, gauges, spark, stale);
  };

  store.subscribe(paint);
  void store.refresh();
  setInterval(() => void store.refresh(), POLL_INTERVAL_MS);

  root.addEventListener('click', (event) => {
    const target = event.target as HTMLElement;
    const action = target.dataset['action'];
    const reviewId = target.dataset['review'];
    if (!action || !reviewId) {
      return;
    }
    if (action === 'dismiss') {
      store.dismissNotice(reviewId);
      return;
    }
    if (action !== 'approve' && action !== 'deny') {
      return;
    }
    const state = store.getState();
    const rows = reviewQueue(state.reviews);
    const row = rows.find((r) => r.reviewId === reviewId);
    if (!row) {
      return;
    }
    const note =
      root.querySelector<HTMLInputElement>(`input.note[data-review="${reviewId}"]`)?.value ?? '';
    const extensionInput = root.querySelector<HTMLInputElement>(
      `input.extension[data-review="${reviewId}"]`,
    );
    const extension = extensionInput ? Number(extensionInput.value) || 1 : 1;
    const problem = validateDecision(row, action, config.approver, note);
    if (problem) {
      const slot = root.querySelector(`.validation[data-review="${reviewId}"]`);
      if (slot) {
        slot.textContent = problem;
      }
      return;
    }
    void store.submitDecision(reviewId, {
      outcome: action,
      approver: config.approver,
      note,
      extension,
    });
  });
}

export function boot(): void {
  const root = document.getElementById('app');
  if (!root) {
    throw new Error('missing #app mount point');
  }
  const config = loadConfig();
  if (config) {
    start(root, config);
  } else {
    renderConfigForm(root);
  }
}

if (typeof document !== 'undefined' && document.getElementById('app')) {
  boot();
}
