// Pointer-to-device mapping: press-and-hold is the clutch, drag moves the
// virtual device. Velocity is estimated by finite differences smoothed over
// the last three pointer frames; pose messages are rate-limited.

import type { Clutch, DevicePose } from "./protocol.js";

export interface PointerSample {
  x: number; // pixels
  y: number;
  tMs: number;
}

export class PointerDevice {
  readonly scale: number; // meters per pixel
  readonly maxHz: number;
  private anchorPx: PointerSample | null = null;
  private anchorPose: [number, number] = [0, 0];
  private pose: [number, number] = [0, 0];
  private samples: PointerSample[] = [];
  private lastEmitMs = -Infinity;
  private held = false;

  constructor(scale = 0.002, maxHz = 60) {
    this.scale = scale;
    this.maxHz = maxHz;
  }

  get clutched(): boolean {
    return this.held;
  }

  get currentPose(): [number, number] {
    return [this.pose[0], this.pose[1]];
  }

  /** Pointer press: engage the clutch, anchor the drag. */
  press(sample: PointerSample): Clutch {
    this.held = true;
    this.anchorPx = sample;
    this.anchorPose = [this.pose[0], this.pose[1]];
    this.samples = [sample];
    return { type: "clutch", engaged: true };
  }

  /** Pointer move while held; returns a pose message or null when rate-limited. */
  move(sample: PointerSample): DevicePose | null {
    if (!this.held || this.anchorPx === null) {
      return null;
    }
    // canvas y grows downward; device y grows upward
    const dx = (sample.x - this.anchorPx.x) * this.scale;
    const dy = -(sample.y - this.anchorPx.y) * this.scale;
    this.pose = [this.anchorPose[0] + dx, this.anchorPose[1] + dy];
    this.samples.push(sample);
    if (this.samples.length > 3) {
      this.samples.splice(0, this.samples.length - 3);
    }
    if (sample.tMs - this.lastEmitMs < 1000 / this.maxHz) {
      return null;
    }
    this.lastEmitMs = sample.tMs;
    return {
      type: "device_pose",
      x_h: [this.pose[0], this.pose[1]],
      v_h: this.velocity(),
    };
  }

  /** Pointer release: exactly one disengage message. */
  release(): Clutch {
    this.held = false;
    this.anchorPx = null;
    this.samples = [];
    return { type: "clutch", engaged: false };
  }

  /** Finite-difference velocity over the retained samples (m/s). */
  velocity(): number[] {
    if (this.samples.length < 2) {
      return [0, 0];
    }
    const first = this.samples[0];
    const last = this.samples[this.samples.length - 1];
    const dt = (last.tMs - first.tMs) / 1000;
    if (dt <= 0) {
      return [0, 0];
    }
    const vx = ((last.x - first.x) * this.scale) / dt;
    const vy = (-(last.y - first.y) * this.scale) / dt;
    return [vx, vy];
  }
}
