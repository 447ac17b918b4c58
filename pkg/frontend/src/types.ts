// Shapes of the middleware HTTP/JSON API. The panel consumes exactly this
// surface; there are no private endpoints.

export interface Reading {
  mote_id: number;
  appliance_id: number;
  seq: number;
  timestamp_ms: number;
  watts_mw: number;
}

export interface MoteSummary {
  mote_id: number;
  virtual_ipv4: string;
  appliances: number[];
  link_status: "up" | "down";
}

export interface BufferStatus {
  link: "up" | "down" | "unknown";
  depth: number | null;
}

export interface CommandAccepted {
  ack: string; // "0x06"
  rtt_ms: number;
}

export type StreamStatus = "live" | "degraded" | "down";
