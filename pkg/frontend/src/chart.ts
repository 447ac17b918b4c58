// Minimal SVG line chart: readings in, polyline points out. Pure data
// transformation so the ordering guarantee is testable without a DOM.

import type { Reading } from "./types.js";

export interface ChartGeometry {
  width: number;
  height: number;
  windowMs: number;
  nowMs: number;
  maxWatts: number;
}

/** Map a timestamp-ordered series to "x,y x,y ..." polyline points.
 * Throws if the series is out of order: the chart never lies about time. */
export function polylinePoints(series: Reading[], geo: ChartGeometry): string {
  for (let i = 1; i < series.length; i++) {
    if (series[i].timestamp_ms < series[i - 1].timestamp_ms) {
      throw new Error("series out of timestamp order");
    }
  }
  const t0 = geo.nowMs - geo.windowMs;
  const scaleX = geo.width / geo.windowMs;
  const scaleY = geo.maxWatts > 0 ? (geo.height - 4) / geo.maxWatts : 0;
  return series
    .filter((r) => r.timestamp_ms >= t0)
    .map((r) => {
      const x = (r.timestamp_ms - t0) * scaleX;
      const y = geo.height - 2 - (r.watts_mw / 1000) * scaleY;
      return `${x.toFixed(1)},${y.toFixed(1)}`;
    })
    .join(" ");
}

export function niceMaxWatts(series: Reading[]): number {
  let max = 0;
  for (const r of series) {
    max = Math.max(max, r.watts_mw / 1000);
  }
  if (max === 0) return 10;
  const magnitude = Math.pow(10, Math.floor(Math.log10(max)));
  return Math.ceil(max / magnitude) * magnitude;
}
