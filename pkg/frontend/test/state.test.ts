import { describe, expect, it } from "vitest";

import type { Telemetry } from "../src/protocol.js";
import {
  applyNotice,
  applyTelemetry,
  clearTrails,
  initialState,
  telemetryIsStale,
} from "../src/state.js";

function frame(seq: number, t: number): Telemetry {
  return {
    type: "telemetry",
    seq,
    t,
    ee: [0.5 + 0.001 * seq, 0.7],
    x_d: [0.51 + 0.001 * seq, 0.71],
    v_d: [0.05, 0],
    q: [0.1, 1.8, -1.0],
    f_contact: [0, 0],
    f_hf_mag: 2.5,
    policy_age_ms: 14,
    variant: "feedback",
    clutched: true,
    paused: false,
  };
}

describe("console state", () => {
  it("telemetry feeds the trails and force history", () => {
    const state = initialState();
    for (let i = 0; i < 10; i++) {
      applyTelemetry(state, frame(i, i * 0.033), i * 33);
    }
    expect(state.commandedTrail.length).toBe(10);
    expect(state.executedTrail.length).toBe(10);
    expect(state.forceHistory.length).toBe(10);
    expect(state.telemetry?.seq).toBe(9);
  });

  it("trail buffers are bounded", () => {
    const state = initialState();
    for (let i = 0; i < 1500; i++) {
      applyTelemetry(state, frame(i, i * 0.033), i * 33);
    }
    expect(state.executedTrail.length).toBeLessThanOrEqual(600);
  });

  it("staleness is judged against wall time", () => {
    const state = initialState();
    applyTelemetry(state, frame(0, 0), 1000);
    expect(telemetryIsStale(state, 1400)).toBe(false);
    expect(telemetryIsStale(state, 1600)).toBe(true);
  });

  it("notices are kept short", () => {
    const state = initialState();
    for (let i = 0; i < 12; i++) {
      applyNotice(state, `notice ${i}`);
    }
    expect(state.notices.length).toBeLessThanOrEqual(5);
    expect(state.notices.at(-1)).toBe("notice 11");
  });

  it("clearTrails resets the buffers", () => {
    const state = initialState();
    applyTelemetry(state, frame(0, 0), 0);
    clearTrails(state);
    expect(state.commandedTrail.length).toBe(0);
    expect(state.forceHistory.length).toBe(0);
  });
});
