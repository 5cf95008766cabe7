// Pure scene construction: console state in, draw commands out. Keeping this
// free of canvas calls makes the rendering rules testable.

import type { ConsoleState } from "./state.js";
import { telemetryIsStale } from "./state.js";

export type DrawCommand =
  | { kind: "segment"; from: [number, number]; to: [number, number]; width: number; color: string }
  | { kind: "circle"; center: [number, number]; radius: number; fill: boolean; color: string; alpha: number }
  | { kind: "polyline"; points: Array<[number, number]>; color: string; width: number; dashed: boolean }
  | { kind: "bar"; fraction: number; label: string }
  | { kind: "badge"; text: string; level: "ok" | "warn" | "bad" }
  | { kind: "banner"; text: string };

export const FORCE_BAR_FULL_N = 20;

export function jointPositions(
  base: number[], lengths: number[], q: number[],
): Array<[number, number]> {
  const points: Array<[number, number]> = [[base[0], base[1]]];
  let angle = 0;
  let x = base[0];
  let y = base[1];
  for (let i = 0; i < lengths.length; i++) {
    angle += q[i];
    x += lengths[i] * Math.cos(angle);
    y += lengths[i] * Math.sin(angle);
    points.push([x, y]);
  }
  return points;
}

export function buildScene(state: ConsoleState, wallNowMs: number): DrawCommand[] {
  const commands: DrawCommand[] = [];
  const scene = state.scene;
  const frame = state.telemetry;
  if (!scene || !frame) {
    commands.push({ kind: "banner", text: "waiting for telemetry" });
    return commands;
  }

  if (scene.wall) {
    const [px, py] = scene.wall.point;
    const [nx, ny] = scene.wall.normal;
    const tangent: [number, number] = [-ny, nx];
    commands.push({
      kind: "segment",
      from: [px - 2 * tangent[0], py - 2 * tangent[1]],
      to: [px + 2 * tangent[0], py + 2 * tangent[1]],
      width: 3,
      color: "#555555",
    });
  }
  for (const obstacle of scene.obstacles) {
    commands.push({
      kind: "circle",
      center: [obstacle.center[0], obstacle.center[1]],
      radius: obstacle.radius + obstacle.buffer,
      fill: true,
      color: "#888888",
      alpha: 0.25,
    });
    commands.push({
      kind: "circle",
      center: [obstacle.center[0], obstacle.center[1]],
      radius: obstacle.radius,
      fill: true,
      color: "#222222",
      alpha: 0.8,
    });
  }

  if (state.commandedTrail.length > 1) {
    commands.push({ kind: "polyline", points: state.commandedTrail.slice(),
                    color: "#999999", width: 1, dashed: true });
  }
  if (state.executedTrail.length > 1) {
    commands.push({ kind: "polyline", points: state.executedTrail.slice(),
                    color: "#4f9dde", width: 1.5, dashed: false });
  }

  if (scene.link_lengths.length > 0) {
    const joints = jointPositions(scene.base, scene.link_lengths, frame.q);
    for (let i = 0; i + 1 < joints.length; i++) {
      commands.push({ kind: "segment", from: joints[i], to: joints[i + 1],
                      width: 5, color: "#c8c8c8" });
    }
    for (const joint of joints.slice(0, -1)) {
      commands.push({ kind: "circle", center: joint, radius: 0.015, fill: true,
                      color: "#909090", alpha: 1 });
    }
  }

  commands.push({ kind: "circle", center: [frame.ee[0], frame.ee[1]], radius: 0.02,
                  fill: true, color: "#4f9dde", alpha: 1 });
  commands.push({ kind: "circle", center: [frame.x_d[0], frame.x_d[1]], radius: 0.022,
                  fill: frame.clutched, color: "#e0a030", alpha: 1 });

  commands.push({
    kind: "bar",
    fraction: Math.min(1, frame.f_hf_mag / FORCE_BAR_FULL_N),
    label: `|f_hf| ${frame.f_hf_mag.toFixed(1)} N`,
  });

  const age = frame.policy_age_ms;
  const level = age < 0 ? "bad" : age < 50 ? "ok" : age < 200 ? "warn" : "bad";
  commands.push({
    kind: "badge",
    text: age < 0 ? "no policy yet" : `policy age ${age.toFixed(0)} ms · ${frame.variant}`,
    level,
  });

  if (telemetryIsStale(state, wallNowMs)) {
    commands.push({ kind: "banner", text: "connection degraded: stale telemetry" });
  }
  if (frame.paused) {
    commands.push({ kind: "banner", text: "paused" });
  }
  return commands;
}
