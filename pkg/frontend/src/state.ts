// Pure view-model: every mutation is a function (state, input) -> state, so
// what the panel shows is a deterministic fold over API responses, stream
// events, and pending user actions. No hidden client-side authority: relay
// truth only ever comes back from the mote via readings and acks.

import type { BufferStatus, MoteSummary, Reading, StreamStatus } from "./types.js";

export type ToggleState =
  | { kind: "idle" }
  | { kind: "pending"; desired: 0 | 1; startedAtMs: number }
  | { kind: "confirmed"; desired: 0 | 1; rttMs: number }
  | { kind: "reverted"; desired: 0 | 1; reason: string };

export interface PanelState {
  motes: MoteSummary[];
  series: Record<string, Reading[]>; // ordered by timestamp_ms, window-pruned
  seenSeq: Record<string, number>; // last-write-wins reconciliation per key
  toggles: Record<string, ToggleState>;
  stream: StreamStatus;
  buffer: BufferStatus;
  windowMs: number;
  lastRttMs: number | null;
  notice: string | null;
}

export function seriesKey(moteId: number, applianceId: number): string {
  return `${moteId}:${applianceId}`;
}

export function initialState(windowMs = 120_000): PanelState {
  return {
    motes: [],
    series: {},
    seenSeq: {},
    toggles: {},
    stream: "down",
    buffer: { link: "unknown", depth: null },
    windowMs,
    lastRttMs: null,
    notice: null,
  };
}

export function withMotes(state: PanelState, motes: MoteSummary[]): PanelState {
  return { ...state, motes };
}

export function withBuffer(state: PanelState, buffer: BufferStatus): PanelState {
  return { ...state, buffer };
}

export function withStream(state: PanelState, stream: StreamStatus): PanelState {
  return { ...state, stream };
}

/** Insert one reading: duplicates (by seq) are dropped, order by timestamp is
 * preserved no matter the arrival order, and samples older than the window
 * fall off the left edge. */
export function addReading(state: PanelState, reading: Reading, nowMs: number): PanelState {
  const key = seriesKey(reading.mote_id, reading.appliance_id);
  const lastSeq = state.seenSeq[key] ?? -1;
  if (reading.seq <= lastSeq && seqAlreadyHeld(state.series[key], reading.seq)) {
    return state;
  }
  const horizon = nowMs - state.windowMs;
  const existing = state.series[key] ?? [];
  const next = insertOrdered(existing, reading).filter((r) => r.timestamp_ms >= horizon);
  return {
    ...state,
    series: { ...state.series, [key]: next },
    seenSeq: { ...state.seenSeq, [key]: Math.max(lastSeq, reading.seq) },
  };
}

function seqAlreadyHeld(series: Reading[] | undefined, seq: number): boolean {
  return (series ?? []).some((r) => r.seq === seq);
}

function insertOrdered(series: Reading[], reading: Reading): Reading[] {
  if (series.some((r) => r.seq === reading.seq)) {
    return series;
  }
  const out = series.slice();
  let i = out.length;
  while (i > 0 && out[i - 1].timestamp_ms > reading.timestamp_ms) {
    i -= 1;
  }
  out.splice(i, 0, reading);
  return out;
}

/** Begin an optimistic toggle. While one is pending for this appliance the
 * request is suppressed (double-click guard): proceed=false and an unchanged
 * state mean "do not POST". */
export function beginToggle(
  state: PanelState,
  moteId: number,
  applianceId: number,
  desired: 0 | 1,
  nowMs: number,
): { state: PanelState; proceed: boolean } {
  const key = seriesKey(moteId, applianceId);
  const current = state.toggles[key];
  if (current && current.kind === "pending") {
    return { state, proceed: false };
  }
  const toggles = {
    ...state.toggles,
    [key]: { kind: "pending", desired, startedAtMs: nowMs } as ToggleState,
  };
  return { state: { ...state, toggles, notice: null }, proceed: true };
}

export function confirmToggle(
  state: PanelState,
  moteId: number,
  applianceId: number,
  rttMs: number,
): PanelState {
  const key = seriesKey(moteId, applianceId);
  const current = state.toggles[key];
  if (!current || current.kind !== "pending") {
    return state;
  }
  const toggles = {
    ...state.toggles,
    [key]: { kind: "confirmed", desired: current.desired, rttMs } as ToggleState,
  };
  return { ...state, toggles, lastRttMs: rttMs };
}

/** 0x15, timeout, or transport failure: the optimistic state reverts and the
 * operator sees why. */
export function revertToggle(
  state: PanelState,
  moteId: number,
  applianceId: number,
  reason: string,
): PanelState {
  const key = seriesKey(moteId, applianceId);
  const current = state.toggles[key];
  if (!current || current.kind !== "pending") {
    return state;
  }
  const toggles = {
    ...state.toggles,
    [key]: { kind: "reverted", desired: current.desired, reason } as ToggleState,
  };
  return { ...state, toggles, notice: `command failed: ${reason}` };
}

/** The displayed relay state: confirmed/pending intent wins until readings
 * catch up, otherwise infer from the latest sample (0 W with the relay off). */
export function displayedRelayOn(state: PanelState, moteId: number, applianceId: number): boolean | null {
  const key = seriesKey(moteId, applianceId);
  const toggle = state.toggles[key];
  if (toggle && (toggle.kind === "pending" || toggle.kind === "confirmed")) {
    return toggle.desired === 1;
  }
  const series = state.series[key];
  if (!series || series.length === 0) {
    return null;
  }
  return series[series.length - 1].watts_mw > 0;
}

export function latestReading(state: PanelState, moteId: number, applianceId: number): Reading | null {
  const series = state.series[seriesKey(moteId, applianceId)];
  return series && series.length ? series[series.length - 1] : null;
}
