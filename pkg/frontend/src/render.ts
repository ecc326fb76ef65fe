/**
 * HTML string templates for the console panels. Values land in the markup
 * exactly as the service reported them (after HTML escaping).
 */

import type { GaugeView, ReviewRow, SparklineView } from './model.js';
import { renderSparklineSvg } from './sparkline.js';
import type { LedgerDecision } from './types.js';
import type { ConsoleState, Notice } from './store.js';

export function esc(text: string): string {
  return text
    .replaceAll('&', '&amp;')
    .replaceAll('<', '&lt;')
    .replaceAll('>', '&gt;')
    .replaceAll('"', '&quot;')
    .replaceAll("'", '&#39;');
}

export function renderConnectionBanner(error: string | null): string {
  if (!error) {
    return '';
  }
  return `<div class="banner error" role="alert">${esc(error)}</div>`;
}

export function renderStaleBadge(stale: boolean): string {
  return stale ? '<span class="badge stale">stale data</span>' : '';
}

export function renderNotices(notices: Notice[]): string {
  return notices
    .map(
      (n) =>
        `<div class="banner ${n.kind === 'conflict' ? 'conflict' : 'error'}" data-review="${esc(n.reviewId)}">
          ${esc(n.message)}
          <button class="dismiss" data-action="dismiss" data-review="${esc(n.reviewId)}">×</button>
        </div>`,
    )
    .join('\n');
}

export function renderReviewRow(row: ReviewRow): string {
  const chain = row.scopeChain.map((s) => `<span class="scope-seg">${esc(s)}</span>`).join(' / ');
  const extension = row.needsNote
    ? `<label>extension <input type="number" min="1" value="2" class="extension" data-review="${esc(row.reviewId)}"></label>`
    : '';
  return `<li class="review" data-review="${esc(row.reviewId)}">
  <div class="review-head">
    <span class="trigger ${esc(row.trigger)}">${esc(row.triggerLabel)}</span>
    <time datetime="${esc(row.created)}">${esc(row.created)}</time>
  </div>
  <div class="review-body">
    <div class="scope-chain">${chain}</div>
    <dl>
      <dt>estimated carbon</dt><dd>${row.estCarbon} g</dd>
      <dt>risk</dt><dd>${row.riskScore}</dd>
    </dl>
  </div>
  <div class="review-actions">
    <input type="text" class="note" placeholder="${row.needsNote ? 'justification (required to approve)' : 'note'}" data-review="${esc(row.reviewId)}">
    ${extension}
    <button data-action="approve" data-review="${esc(row.reviewId)}">Approve</button>
    <button data-action="deny" data-review="${esc(row.reviewId)}">Deny</button>
    <span class="validation" data-review="${esc(row.reviewId)}"></span>
  </div>
</li>`;
}

export function renderReviewQueue(rows: ReviewRow[]): string {
  if (rows.length === 0) {
    return '<p class="empty">No pending reviews. Pipelines are flowing.</p>';
  }
  return `<ul class="reviews">\n${rows.map(renderReviewRow).join('\n')}\n</ul>`;
}

export function renderGauge(gauge: GaugeView): string {
  return `<div class="gauge${gauge.pastSoft ? ' past-soft' : ''}" data-scope="${esc(gauge.scope)}">
  <div class="gauge-title">${esc(gauge.scope)}</div>
  <div class="gauge-bar">
    <div class="fill reserved" style="width:${(gauge.reservedFraction * 100).toFixed(2)}%"></div>
    <div class="fill consumed" style="width:${(gauge.consumedFraction * 100).toFixed(2)}%"></div>
    <div class="soft-marker" style="left:${(gauge.softMarkerFraction * 100).toFixed(2)}%"></div>
  </div>
  <div class="gauge-numbers">
    <span>consumed ${gauge.consumed} g</span>
    <span>reserved ${gauge.reserved} g</span>
    <span>of ${gauge.allocation} g</span>
    <span>remaining ${gauge.remaining} g</span>
  </div>
</div>`;
}

export function renderIntensityPanel(view: SparklineView | null): string {
  if (!view) {
    return '<p class="empty">No intensity data yet.</p>';
  }
  const threshold =
    view.threshold === null
      ? ''
      : `<span class="threshold">threshold ${view.threshold} g/kWh</span>`;
  return `<div class="intensity${view.aboveThreshold ? ' above-threshold' : ''}">
  <div class="intensity-now">${view.current} g/kWh ${threshold}</div>
  ${renderSparklineSvg(view)}
</div>`;
}

export function renderRecentDecisions(decisions: LedgerDecision[]): string {
  if (decisions.length === 0) {
    return '<p class="empty">No ledgered decisions yet.</p>';
  }
  const rows = [...decisions]
    .reverse() // newest first for display
    .map(
      (d) => `<tr>
  <td>${d.seq}</td>
  <td>${esc(d.kind)}</td>
  <td>${d.verdict === null ? '—' : esc(d.verdict)}</td>
  <td class="scope">${esc(d.scope)}</td>
  <td class="rationale">${d.rationale.map(esc).join(', ')}</td>
  <td>${d.override ? 'override' : ''}</td>
</tr>`,
    )
    .join('\n');
  return `<table class="decisions">
<thead><tr><th>seq</th><th>kind</th><th>verdict</th><th>scope</th><th>rationale</th><th></th></tr></thead>
<tbody>${rows}</tbody>
</table>`;
}

export function renderConsole(state: ConsoleState, rows: ReviewRow[], gauges: GaugeView[], spark: SparklineView | null, stale: boolean): string {
  return `${renderConnectionBanner(state.connectionError)}
${renderNotices(state.notices)}
<section id="queue">
  <h2>Pending reviews ${renderStaleBadge(stale)}</h2>
  ${renderReviewQueue(rows)}
</section>
<section id="budgets">
  <h2>Budgets</h2>
  ${gauges.map(renderGauge).join('\n') || '<p class="empty">No budgeted scopes on screen.</p>'}
</section>
<section id="intensity-panel">
  <h2>Grid intensity</h2>
  ${renderIntensityPanel(spark)}
</section>
<section id="ledger">
  <h2>Recent decisions</h2>
  ${renderRecentDecisions(state.recentDecisions)}
</section>`;
}
