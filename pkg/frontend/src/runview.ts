// Live run tracking: polls the service once per second and mirrors the stored
// loss series. The shown series is always a prefix-faithful copy of the
// server's; polling stops once the run reaches a terminal state.

import type { RunSnapshot, ServiceClient } from "./api.js";

export interface RunViewState {
  id: string;
  status: RunSnapshot["status"];
  series: number[];
  error: string | null;
  report: Record<string, unknown> | null;
}

export class RunView {
  state: RunViewState;
  private timer: ReturnType<typeof setInterval> | null = null;

  constructor(private client: ServiceClient, id: string,
              private onChange: (s: RunViewState) => void,
              private intervalMs = 1000) {
    this.state = { id, status: "queued", series: [], error: null, report: null };
  }

  start(): void {
    this.timer = setInterval(() => void this.poll(), this.intervalMs);
    void this.poll();
  }

  stop(): void {
    if (this.timer !== null) clearInterval(this.timer);
    this.timer = null;
  }

  async poll(): Promise<void> {
    let snap: RunSnapshot;
    try {
      snap = await this.client.runStatus(this.state.id);
    } catch (err) {
      this.state = { ...this.state, status: "failed", error: String(err) };
      this.stop();
      this.onChange(this.state);
      return;
    }
    this.state = {
      ...this.state,
      status: snap.status,
      series: snap.losses.slice(),
      error: snap.error,
    };
    if (snap.status === "done") {
      this.stop();
      this.state = { ...this.state, report: await this.client.runReport(this.state.id) };
    } else if (snap.status === "failed") {
      this.stop();
    }
    this.onChange(this.state);
  }
}
