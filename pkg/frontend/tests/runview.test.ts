import { describe, expect, it } from "vitest";

import type { RunSnapshot, ServiceClient } from "../src/api.js";
import { RunView } from "../src/runview.js";
import { lossChartSvg } from "../src/chart.js";

class FakeClient {
  // grows by one loss per poll until done; mimics the service's append-only series
  private losses = [3.0, 2.5, 2.1, 1.9, 1.8];
  private step = 0;
  report = { eval: { pre: 2.0, post: 0.5, curve: [2.0, 0.5] }, losses: this.losses };

  async runStatus(id: string): Promise<RunSnapshot> {
    this.step = Math.min(this.step + 1, this.losses.length);
    return {
      id,
      status: this.step >= this.losses.length ? "done" : "running",
      losses: this.losses.slice(0, this.step),
      error: null,
    };
  }

  async runReport(): Promise<Record<string, unknown>> {
    return this.report as unknown as Record<string, unknown>;
  }
}

describe("run view", () => {
  it("mirrors the server series prefix exactly, with no smoothing", async () => {
    const client = new FakeClient();
    const seen: number[][] = [];
    const view = new RunView(client as unknown as ServiceClient, "run-1",
      (s) => seen.push(s.series.slice()), 1);
    for (let i = 0; i < 6; i++) await view.poll();
    const full = [3.0, 2.5, 2.1, 1.9, 1.8];
    for (const series of seen) {
      expect(series).toEqual(full.slice(0, series.length));
    }
    expect(seen.map((s) => s.length)).toEqual([...seen.map((s) => s.length)].sort((a, b) => a - b));
  });

  it("exposes the final report once done", async () => {
    const client = new FakeClient();
    let last: unknown = null;
    const view = new RunView(client as unknown as ServiceClient, "run-1",
      (s) => { last = s; }, 1);
    for (let i = 0; i < 6; i++) await view.poll();
    const state = last as { status: string; report: Record<string, unknown> | null };
    expect(state.status).toBe("done");
    expect(state.report).not.toBeNull();
    expect((state.report as { eval: { post: number } }).eval.post).toBe(0.5);
  });

  it("stops and records an error on a failed poll", async () => {
    const failing = {
      async runStatus(): Promise<RunSnapshot> { throw new Error("boom"); },
      async runReport(): Promise<Record<string, unknown>> { return {}; },
    };
    let last: unknown = null;
    const view = new RunView(failing as unknown as ServiceClient, "run-9",
      (s) => { last = s; }, 1);
    await view.poll();
    expect((last as { status: string }).status).toBe("failed");
  });
});

describe("loss chart", () => {
  it("plots one point per stored value", () => {
    const svg = lossChartSvg([1, 2, 3, 2, 1]);
    expect(svg).toContain('data-points="5"');
    const points = svg.match(/ points="([^"]+)"/)![1].trim().split(" ");
    expect(points).toHaveLength(5);
  });

  it("is a pure function of the series", () => {
    expect(lossChartSvg([0.5, 0.25])).toBe(lossChartSvg([0.5, 0.25]));
  });

  it("renders an explicit empty state", () => {
    expect(lossChartSvg([])).toContain("no data yet");
  });

  it("handles constant series without dividing by zero", () => {
    const svg = lossChartSvg([2, 2, 2]);
    expect(svg).not.toContain("NaN");
  });
});
