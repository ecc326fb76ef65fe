/**
 * SVG sparkline geometry for the intensity trace. Pure string output so the
 * shape is testable without a DOM.
 */

import type { SparklineView } from './model.js';

export interface SparklineGeometry {
  path: string; // SVG polyline path for the series
  thresholdY: number | null;
  currentX: number;
  currentY: number;
  width: number;
  height: number;
}

export function sparklineGeometry(
  view: SparklineView,
  width = 260,
  height = 48,
  pad = 3,
): SparklineGeometry {
  const values = view.values;
  const lows = Math.min(...values, view.threshold ?? Infinity);
  const highs = Math.max(...values, view.threshold ?? -Infinity);
  const span = highs - lows || 1;
  const x = (i: number) =>
    values.length === 1 ? width / 2 : pad + (i * (width - 2 * pad)) / (values.length - 1);
  const y = (v: number) => height - pad - ((v - lows) * (height - 2 * pad)) / span;
  const path = values.map((v, i) => `${i === 0 ? 'M' : 'L'}${x(i).toFixed(1)},${y(v).toFixed(1)}`).join(' ');
  return {
    path,
    thresholdY: view.threshold === null ? null : y(view.threshold),
    currentX: x(view.currentIndex),
    currentY: y(values[view.currentIndex] ?? view.current),
    width,
    height,
  };
}

export function renderSparklineSvg(view: SparklineView): string {
  const geo = sparklineGeometry(view);
  const threshold =
    geo.thresholdY === null
      ? ''
      : `<line x1="0" y1="${geo.thresholdY.toFixed(1)}" x2="${geo.width}" y2="${geo.thresholdY.toFixed(1)}" class="spark-threshold" stroke-dasharray="4 3"/>`;
  return `<svg viewBox="0 0 ${geo.width} ${geo.height}" class="sparkline" role="img" aria-label="grid intensity">
  <path d="${geo.path}" fill="none" class="spark-line"/>
  ${threshold}
  <circle cx="${geo.currentX.toFixed(1)}" cy="${geo.currentY.toFixed(1)}" r="3" class="spark-now${view.aboveThreshold ? ' above' : ''}"/>
</svg>`;
}
