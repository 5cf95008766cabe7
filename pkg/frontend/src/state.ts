// Console state: everything rendered comes from received telemetry; the only
// client-side signal generation is the pointer-driven device pose.

import type { Scene, Telemetry, Variant } from "./protocol.js";

export const STALE_TELEMETRY_MS = 500;
const TRAIL_CAPACITY = 600; // ~20 s at 30 Hz
const FORCE_CAPACITY = 600;

export interface ConsoleState {
  connected: boolean;
  role: string | null;
  scene: Scene | null;
  telemetry: Telemetry | null;
  lastTelemetryWallMs: number;
  selectedVariant: Variant;
  clutchHeld: boolean;
  commandedTrail: Array<[number, number]>;
  executedTrail: Array<[number, number]>;
  forceHistory: Array<[number, number]>; // (t, |f_hf|)
  notices: string[];
}

export function initialState(): ConsoleState {
  return {
    connected: false,
    role: null,
    scene: null,
    telemetry: null,
    lastTelemetryWallMs: -Infinity,
    selectedVariant: "feedback",
    clutchHeld: false,
    commandedTrail: [],
    executedTrail: [],
    forceHistory: [],
    notices: [],
  };
}

function push<T>(buffer: T[], value: T, capacity: number): void {
  buffer.push(value);
  if (buffer.length > capacity) {
    buffer.splice(0, buffer.length - capacity);
  }
}

export function applyHello(state: ConsoleState, scene: Scene, role: string): void {
  state.connected = true;
  state.scene = scene;
  state.role = role;
}

export function applyTelemetry(state: ConsoleState, frame: Telemetry, wallMs: number): void {
  state.telemetry = frame;
  state.lastTelemetryWallMs = wallMs;
  push(state.commandedTrail, [frame.x_d[0], frame.x_d[1]], TRAIL_CAPACITY);
  push(state.executedTrail, [frame.ee[0], frame.ee[1]], TRAIL_CAPACITY);
  push(state.forceHistory, [frame.t, frame.f_hf_mag], FORCE_CAPACITY);
}

export function applyNotice(state: ConsoleState, message: string): void {
  push(state.notices, message, 5);
}

export function telemetryIsStale(state: ConsoleState, wallMs: number): boolean {
  return wallMs - state.lastTelemetryWallMs > STALE_TELEMETRY_MS;
}

export function clearTrails(state: ConsoleState): void {
  state.commandedTrail = [];
  state.executedTrail = [];
  state.forceHistory = [];
}
