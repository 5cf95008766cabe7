// Wire protocol: versioned line-delimited JSON messages (see ../PROTOCOL.md).
// Floats are rounded to six decimals on encode, matching the server's
// bit-exactness contract.

export const PROTOCOL_VERSION = 1;

export type Variant = "baseline" | "feedforward" | "feedback";
export type Role = "operator" | "observer";

export interface Hello {
  type: "hello";
  role: Role;
  version: number;
}

export interface DevicePose {
  type: "device_pose";
  x_h: number[];
  v_h: number[];
}

export interface Clutch {
  type: "clutch";
  engaged: boolean;
}

export interface SetVariant {
  type: "set_variant";
  variant: Variant;
}

export interface DelaySpec {
  kind: "fixed" | "uniform" | "measured";
  value?: number;
  lo?: number;
  hi?: number;
}

export interface SetDelay {
  type: "set_delay";
  delay: DelaySpec;
}

export interface Simple {
  type: "pause" | "resume" | "reset";
}

export interface SceneObstacle {
  center: number[];
  radius: number;
  buffer: number;
}

export interface Scene {
  model: string;
  link_lengths: number[];
  base: number[];
  ee_dim: number;
  workspace: number[][];
  coupling_scale: number;
  wall: { point: number[]; normal: number[] } | null;
  obstacles: SceneObstacle[];
}

export interface HelloOk {
  type: "hello_ok";
  version: number;
  role: Role;
  scene: Scene;
  telemetry_hz: number;
}

export interface Telemetry {
  type: "telemetry";
  seq: number;
  t: number;
  ee: number[];
  x_d: number[];
  v_d: number[];
  q: number[];
  f_contact: number[];
  f_hf_mag: number;
  policy_age_ms: number;
  variant: Variant;
  clutched: boolean;
  paused: boolean;
}

export interface ErrorFrame {
  type: "error";
  code: string;
  message: string;
}

export interface NoticeFrame {
  type: "notice";
  message: string;
}

export type Message =
  | Hello
  | DevicePose
  | Clutch
  | SetVariant
  | SetDelay
  | Simple
  | HelloOk
  | Telemetry
  | ErrorFrame
  | NoticeFrame;

export class ProtocolError extends Error {}

const VARIANTS = new Set(["baseline", "feedforward", "feedback"]);
const ROLES = new Set(["operator", "observer"]);

const isNumber = (v: unknown): boolean => typeof v === "number" && Number.isFinite(v);
const isVector = (v: unknown): boolean => Array.isArray(v) && v.every(isNumber);
const isBool = (v: unknown): boolean => typeof v === "boolean";
const isInt = (v: unknown): boolean => typeof v === "number" && Number.isInteger(v);
const isString = (v: unknown): boolean => typeof v === "string";
const isObject = (v: unknown): boolean =>
  typeof v === "object" && v !== null && !Array.isArray(v);

type FieldCheck = (v: unknown) => boolean;

const SCHEMAS: Record<string, Record<string, FieldCheck>> = {
  hello: { role: (v) => ROLES.has(v as string), version: isInt },
  device_pose: { x_h: isVector, v_h: isVector },
  clutch: { engaged: isBool },
  set_variant: { variant: (v) => VARIANTS.has(v as string) },
  set_delay: { delay: isObject },
  pause: {},
  resume: {},
  reset: {},
  hello_ok: {
    version: isInt,
    scene: isObject,
    role: (v) => ROLES.has(v as string),
  },
  telemetry: {
    t: isNumber,
    ee: isVector,
    x_d: isVector,
    v_d: isVector,
    q: isVector,
    f_contact: isVector,
    f_hf_mag: isNumber,
    policy_age_ms: isNumber,
    variant: (v) => VARIANTS.has(v as string),
    clutched: isBool,
    seq: isInt,
  },
  error: { code: isString, message: isString },
  notice: { message: isString },
};

function roundFloats(value: unknown): unknown {
  if (typeof value === "number" && !Number.isInteger(value)) {
    return Math.round(value * 1e6) / 1e6;
  }
  if (Array.isArray(value)) {
    return value.map(roundFloats);
  }
  if (isObject(value)) {
    const out: Record<string, unknown> = {};
    for (const key of Object.keys(value as object)) {
      out[key] = roundFloats((value as Record<string, unknown>)[key]);
    }
    return out;
  }
  return value;
}

function stableStringify(value: unknown): string {
  if (Array.isArray(value)) {
    return "[" + value.map(stableStringify).join(",") + "]";
  }
  if (isObject(value)) {
    const obj = value as Record<string, unknown>;
    const keys = Object.keys(obj).sort();
    return (
      "{" + keys.map((k) => JSON.stringify(k) + ":" + stableStringify(obj[k])).join(",") + "}"
    );
  }
  return JSON.stringify(value);
}

export function encode(message: Message): string {
  const kind = (message as { type?: string }).type;
  if (!kind || !(kind in SCHEMAS)) {
    throw new ProtocolError(`unknown message type '${kind}'`);
  }
  return stableStringify(roundFloats(message)) + "\n";
}

export function decode(line: string): Message {
  let parsed: unknown;
  try {
    parsed = JSON.parse(line);
  } catch (err) {
    throw new ProtocolError(`malformed frame: ${err}`);
  }
  if (!isObject(parsed)) {
    throw new ProtocolError("frame must decode to a mapping");
  }
  const message = parsed as Record<string, unknown>;
  const kind = message["type"];
  if (typeof kind !== "string" || !(kind in SCHEMAS)) {
    throw new ProtocolError(`unknown message type '${kind}'`);
  }
  for (const [field, check] of Object.entries(SCHEMAS[kind])) {
    if (!(field in message)) {
      throw new ProtocolError(`${kind}: missing field '${field}'`);
    }
    if (!check(message[field])) {
      throw new ProtocolError(`${kind}: invalid value for '${field}'`);
    }
  }
  return message as unknown as Message;
}
