// Live reading feed: server-sent events first, 1 Hz polling as the fallback
// when the stream drops, and a "down" verdict after repeated poll failures.
// The EventSource and timers are injected so the logic is testable.

import type { Reading, StreamStatus } from "./types.js";

export interface EventSourceLike {
  onmessage: ((ev: { data: string }) => void) | null;
  onerror: ((ev: unknown) => void) | null;
  close(): void;
}

export interface FeedOptions {
  connect: () => EventSourceLike;
  poll: () => Promise<Reading[]>;
  onReading: (reading: Reading) => void;
  onStatus: (status: StreamStatus) => void;
  pollIntervalMs?: number;
  sseRetryMs?: number;
  maxPollFailures?: number;
  setInterval?: typeof globalThis.setInterval;
  clearInterval?: typeof globalThis.clearInterval;
}

export class LiveFeed {
  private source: EventSourceLike | null = null;
  private pollTimer: ReturnType<typeof globalThis.setInterval> | null = null;
  private retryTimer: ReturnType<typeof globalThis.setInterval> | null = null;
  private pollFailures = 0;
  private stopped = false;
  private readonly pollIntervalMs: number;
  private readonly sseRetryMs: number;
  private readonly maxPollFailures: number;
  private readonly setIntervalFn: typeof globalThis.setInterval;
  private readonly clearIntervalFn: typeof globalThis.clearInterval;

  constructor(private readonly opts: FeedOptions) {
    this.pollIntervalMs = opts.pollIntervalMs ?? 1000;
    this.sseRetryMs = opts.sseRetryMs ?? 10_000;
    this.maxPollFailures = opts.maxPollFailures ?? 3;
    this.setIntervalFn = opts.setInterval ?? globalThis.setInterval.bind(globalThis);
    this.clearIntervalFn = opts.clearInterval ?? globalThis.clearInterval.bind(globalThis);
  }

  start(): void {
    this.stopped = false;
    this.openStream();
  }

  stop(): void {
    this.stopped = true;
    this.closeStream();
    this.stopPolling();
    if (this.retryTimer !== null) {
      this.clearIntervalFn(this.retryTimer);
      this.retryTimer = null;
    }
  }

  private openStream(): void {
    this.closeStream();
    const source = this.opts.connect();
    this.source = source;
    source.onmessage = (ev) => {
      this.stopPolling();
      this.opts.onStatus("live");
      try {
        this.opts.onReading(JSON.parse(ev.data) as Reading);
      } catch {
        // keepalives and malformed lines are not readings
      }
    };
    source.onerror = () => {
      this.closeStream();
      if (!this.stopped) {
        this.startPolling();
        this.scheduleStreamRetry();
      }
    };
  }

  private closeStream(): void {
    if (this.source) {
      this.source.onmessage = null;
      this.source.onerror = null;
      this.source.close();
      this.source = null;
    }
  }

  private scheduleStreamRetry(): void {
    if (this.retryTimer !== null) return;
    this.retryTimer = this.setIntervalFn(() => {
      if (this.retryTimer !== null) {
        this.clearIntervalFn(this.retryTimer);
        this.retryTimer = null;
      }
      if (!this.stopped && !this.source) {
        this.openStream();
      }
    }, this.sseRetryMs);
  }

  private startPolling(): void {
    if (this.pollTimer !== null) return;
    this.pollFailures = 0;
    this.opts.onStatus("degraded");
    this.pollTimer = this.setIntervalFn(() => {
      void this.pollOnce();
    }, this.pollIntervalMs);
  }

  private stopPolling(): void {
    if (this.pollTimer !== null) {
      this.clearIntervalFn(this.pollTimer);
      this.pollTimer = null;
    }
  }

  private async pollOnce(): Promise<void> {
    try {
      const readings = await this.opts.poll();
      this.pollFailures = 0;
      this.opts.onStatus("degraded");
      for (const reading of readings) {
        this.opts.onReading(reading);
      }
    } catch {
      this.pollFailures += 1;
      if (this.pollFailures >= this.maxPollFailures) {
        this.opts.onStatus("down");
      }
    }
  }
}
