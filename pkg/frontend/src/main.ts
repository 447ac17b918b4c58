// Control panel wiring: DOM rendering around the pure state module.

import { CommandRejected, fetchBufferStatus, fetchLatest, fetchMotes, fetchReadings, postCommand } from "./api.js";
import { niceMaxWatts, polylinePoints } from "./chart.js";
import {
  PanelState,
  addReading,
  beginToggle,
  confirmToggle,
  displayedRelayOn,
  initialState,
  latestReading,
  revertToggle,
  seriesKey,
  withBuffer,
  withMotes,
  withStream,
} from "./state.js";
import { LiveFeed } from "./stream.js";
import type { EventSourceLike } from "./stream.js";
import type { Reading, StreamStatus } from "./types.js";

const WINDOW_MS = 120_000;
const CHART_W = 640;
const CHART_H = 180;

let state: PanelState = initialState(WINDOW_MS);
let selected: { mote: number; appliance: number } | null = null;

const app = document.querySelector<HTMLDivElement>("#app")!;
app.innerHTML = `
  <h1>meshgate control panel</h1>
  <div id="banner" class="banner"></div>
  <div class="layout">
    <div>
      <h2>Motes</h2>
      <table id="motes">
        <thead><tr><th>mote</th><th>virtual IPv4</th><th>link</th><th>appliances</th></tr></thead>
        <tbody></tbody>
      </table>
      <div id="notice" class="notice"></div>
    </div>
    <div>
      <h2 id="chart-title">Consumption</h2>
      <svg id="chart" width="${CHART_W}" height="${CHART_H}" viewBox="0 0 ${CHART_W} ${CHART_H}">
        <polyline id="chart-line" fill="none" stroke="#2a7ae2" stroke-width="1.5" points=""/>
      </svg>
      <div id="chart-info" class="muted"></div>
    </div>
  </div>
`;

function setState(next: PanelState): void {
  state = next;
  render();
}

function onReading(reading: Reading): void {
  setState(addReading(state, reading, Date.now()));
}

function onStatus(status: StreamStatus): void {
  setState(withStream(state, status));
}

const feed = new LiveFeed({
  // the DOM EventSource handler slot is invariant over MessageEvent; the
  // narrower seam interface needs an explicit cast
  connect: () => new EventSource("/events") as unknown as EventSourceLike,
  poll: async () => {
    const out: Reading[] = [];
    for (const mote of state.motes) {
      const latest = await fetchLatest(mote.mote_id);
      if (latest) out.push(latest);
    }
    return out;
  },
  onReading,
  onStatus,
});

async function toggle(moteId: number, applianceId: number, desired: 0 | 1): Promise<void> {
  const begun = beginToggle(state, moteId, applianceId, desired, Date.now());
  if (!begun.proceed) {
    return; // a command is already pending for this appliance
  }
  setState(begun.state);
  try {
    const accepted = await postCommand(moteId, applianceId, desired);
    setState(confirmToggle(state, moteId, applianceId, accepted.rtt_ms));
  } catch (err) {
    const reason = err instanceof CommandRejected ? err.message : "network error";
    setState(revertToggle(state, moteId, applianceId, reason));
  }
}

function render(): void {
  renderBanner();
  renderMotes();
  renderChart();
  const notice = document.querySelector<HTMLDivElement>("#notice")!;
  notice.textContent = state.notice ?? "";
}

function renderBanner(): void {
  const banner = document.querySelector<HTMLDivElement>("#banner")!;
  const parts: string[] = [];
  if (state.stream === "live") {
    parts.push("stream: live");
  } else if (state.stream === "degraded") {
    parts.push("stream: degraded (polling at 1 Hz)");
  } else {
    parts.push("stream: down");
  }
  if (state.buffer.link === "down") {
    parts.push(`gateway buffering: ${state.buffer.depth ?? "?"} readings queued`);
  }
  if (state.lastRttMs !== null) {
    parts.push(`last command round trip: ${state.lastRttMs.toFixed(1)} ms`);
  }
  banner.textContent = parts.join(" - ");
  banner.className = `banner ${state.stream === "live" ? "ok" : "warn"}`;
}

function renderMotes(): void {
  const tbody = document.querySelector<HTMLTableSectionElement>("#motes tbody")!;
  tbody.innerHTML = "";
  for (const mote of state.motes) {
    const row = document.createElement("tr");
    const cells = `
      <td>${mote.mote_id}</td>
      <td>${mote.virtual_ipv4}</td>
      <td class="${mote.link_status}">${mote.link_status}</td>
    `;
    row.innerHTML = cells;
    const appsCell = document.createElement("td");
    for (const applianceId of mote.appliances) {
      appsCell.appendChild(applianceControl(mote.mote_id, applianceId));
    }
    row.appendChild(appsCell);
    tbody.appendChild(row);
  }
}

function applianceControl(moteId: number, applianceId: number): HTMLElement {
  const key = seriesKey(moteId, applianceId);
  const wrapper = document.createElement("span");
  wrapper.className = "appliance";
  const button = document.createElement("button");
  const toggleState = state.toggles[key] ?? { kind: "idle" };
  const relayOn = displayedRelayOn(state, moteId, applianceId);

  if (toggleState.kind === "pending") {
    button.textContent = `#${applianceId}: pending...`;
    button.disabled = true;
  } else {
    const label = relayOn === null ? "?" : relayOn ? "on" : "off";
    button.textContent = `#${applianceId}: ${label}`;
  }
  if (toggleState.kind === "reverted") {
    const note = document.createElement("small");
    note.className = "error";
    note.textContent = ` ${toggleState.reason}`;
    wrapper.appendChild(note);
  }
  button.addEventListener("click", () => {
    const desired: 0 | 1 = relayOn ? 0 : 1;
    void toggle(moteId, applianceId, desired);
    selected = { mote: moteId, appliance: applianceId };
  });
  const view = document.createElement("a");
  view.textContent = " chart";
  view.href = "#";
  view.addEventListener("click", (ev) => {
    ev.preventDefault();
    selected = { mote: moteId, appliance: applianceId };
    void loadHistory(moteId);
    render();
  });
  wrapper.prepend(button);
  wrapper.appendChild(view);
  return wrapper;
}

function renderChart(): void {
  const title = document.querySelector<HTMLHeadingElement>("#chart-title")!;
  const line = document.querySelector<SVGPolylineElement>("#chart-line")!;
  const info = document.querySelector<HTMLDivElement>("#chart-info")!;
  if (!selected) {
    title.textContent = "Consumption (pick an appliance)";
    line.setAttribute("points", "");
    info.textContent = "";
    return;
  }
  const series = state.series[seriesKey(selected.mote, selected.appliance)] ?? [];
  title.textContent = `Mote ${selected.mote} / appliance ${selected.appliance}`;
  if (series.length === 0) {
    line.setAttribute("points", "");
    info.textContent = "no readings yet";
    return;
  }
  const maxWatts = niceMaxWatts(series);
  line.setAttribute(
    "points",
    polylinePoints(series, {
      width: CHART_W,
      height: CHART_H,
      windowMs: WINDOW_MS,
      nowMs: Date.now(),
      maxWatts,
    }),
  );
  const last = latestReading(state, selected.mote, selected.appliance);
  info.textContent = last
    ? `latest: ${(last.watts_mw / 1000).toFixed(1)} W (seq ${last.seq}) - scale 0..${maxWatts} W`
    : "";
}

async function loadHistory(moteId: number): Promise<void> {
  const readings = await fetchReadings(moteId, WINDOW_MS / 1000);
  let next = state;
  for (const reading of readings) {
    next = addReading(next, reading, Date.now());
  }
  setState(next);
}

async function refreshRoster(): Promise<void> {
  try {
    const [motes, buffer] = await Promise.all([fetchMotes(), fetchBufferStatus()]);
    setState(withBuffer(withMotes(state, motes), buffer));
  } catch {
    setState(withStream(state, "down"));
  }
}

void refreshRoster();
setInterval(() => void refreshRoster(), 5000);
feed.start();
