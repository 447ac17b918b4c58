// Thin fetch wrappers over the middleware API. The panel is served from the
// same origin, so all paths are root-relative.

import type { BufferStatus, CommandAccepted, MoteSummary, Reading } from "./types.js";

export class CommandRejected extends Error {
  constructor(public status: number, message: string) {
    super(message);
  }
}

export async function fetchMotes(): Promise<MoteSummary[]> {
  const resp = await fetch("/motes");
  if (!resp.ok) throw new Error(`GET /motes -> ${resp.status}`);
  return resp.json();
}

export async function fetchBufferStatus(): Promise<BufferStatus> {
  const resp = await fetch("/buffer/status");
  if (!resp.ok) throw new Error(`GET /buffer/status -> ${resp.status}`);
  return resp.json();
}

export async function fetchLatest(moteId: number): Promise<Reading | null> {
  const resp = await fetch(`/motes/${moteId}/latest`);
  if (resp.status === 404) return null;
  if (!resp.ok) throw new Error(`GET latest -> ${resp.status}`);
  return resp.json();
}

export async function fetchReadings(moteId: number, windowS: number): Promise<Reading[]> {
  const resp = await fetch(`/motes/${moteId}/readings?window_s=${windowS}`);
  if (!resp.ok) throw new Error(`GET readings -> ${resp.status}`);
  const body = await resp.json();
  return body.readings as Reading[];
}

/** POST the command; resolves with the ack round trip, rejects with
 * CommandRejected carrying 502 (mote nak) or 504 (timeout). */
export async function postCommand(
  moteId: number,
  applianceId: number,
  value: 0 | 1,
): Promise<CommandAccepted> {
  const resp = await fetch(`/motes/${moteId}/appliances/${applianceId}/command`, {
    method: "POST",
    headers: { "Content-Type": "application/json" },
    body: JSON.stringify({ value }),
  });
  if (resp.status === 504) throw new CommandRejected(504, "mote did not answer (timeout)");
  if (resp.status === 502) throw new CommandRejected(502, "mote rejected the command (0x15)");
  if (!resp.ok) throw new CommandRejected(resp.status, `command failed (${resp.status})`);
  return resp.json();
}
