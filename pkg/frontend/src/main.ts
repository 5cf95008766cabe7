// Console wiring: WebSocket, pointer events, controls, render loop.

import { PointerDevice } from "./device.js";
import { decode, encode, PROTOCOL_VERSION } from "./protocol.js";
import type { Message, Variant } from "./protocol.js";
import { buildScene } from "./scene.js";
import { defaultView, paint } from "./render.js";
import {
  applyHello,
  applyNotice,
  applyTelemetry,
  clearTrails,
  initialState,
} from "./state.js";

const params = new URLSearchParams(window.location.search);
const server = params.get("server") ?? "ws://127.0.0.1:8765";

const canvas = document.getElementById("scene") as HTMLCanvasElement;
const ctx = canvas.getContext("2d")!;
const statusEl = document.getElementById("status")!;
const noticesEl = document.getElementById("notices")!;

const state = initialState();
const device = new PointerDevice(0.002, 60);

let socket: WebSocket | null = null;

function send(message: Message): void {
  if (socket && socket.readyState === WebSocket.OPEN) {
    socket.send(encode(message));
  }
}

function connect(): void {
  statusEl.textContent = `connecting to ${server} ...`;
  socket = new WebSocket(server);
  socket.onopen = () => {
    send({ type: "hello", role: "operator", version: PROTOCOL_VERSION });
  };
  socket.onmessage = (event: MessageEvent) => {
    let message: Message;
    try {
      message = decode(String(event.data));
    } catch (err) {
      console.error("bad frame:", err);
      return;
    }
    switch (message.type) {
      case "hello_ok":
        applyHello(state, message.scene, message.role);
        statusEl.textContent = `connected as ${message.role}`;
        break;
      case "telemetry":
        applyTelemetry(state, message, performance.now());
        break;
      case "error":
        applyNotice(state, `error ${message.code}: ${message.message}`);
        break;
      case "notice":
        applyNotice(state, message.message);
        break;
      default:
        break;
    }
    noticesEl.textContent = state.notices.join(" · ");
  };
  socket.onclose = () => {
    state.connected = false;
    statusEl.textContent = "disconnected, retrying in 2 s";
    setTimeout(connect, 2000);
  };
  socket.onerror = () => {
    socket?.close();
  };
}

// pointer drag = clutch-and-move, mirroring a clutch button held on the device
canvas.addEventListener("pointerdown", (ev) => {
  canvas.setPointerCapture(ev.pointerId);
  send(device.press({ x: ev.clientX, y: ev.clientY, tMs: performance.now() }));
});
canvas.addEventListener("pointermove", (ev) => {
  const pose = device.move({ x: ev.clientX, y: ev.clientY, tMs: performance.now() });
  if (pose) {
    send(pose);
  }
});
for (const kind of ["pointerup", "pointercancel"] as const) {
  canvas.addEventListener(kind, () => {
    if (device.clutched) {
      send(device.release());
    }
  });
}

for (const variant of ["baseline", "feedforward", "feedback"] as Variant[]) {
  const button = document.getElementById(`variant-${variant}`);
  button?.addEventListener("click", () => {
    state.selectedVariant = variant;
    send({ type: "set_variant", variant });
  });
}

const delaySelect = document.getElementById("delay") as HTMLSelectElement | null;
delaySelect?.addEventListener("change", () => {
  const value = delaySelect.value;
  if (value === "measured") {
    send({ type: "set_delay", delay: { kind: "measured" } });
  } else {
    send({ type: "set_delay", delay: { kind: "fixed", value: Number(value) } });
  }
});

document.getElementById("pause")?.addEventListener("click", () => send({ type: "pause" }));
document.getElementById("resume")?.addEventListener("click", () => send({ type: "resume" }));
document.getElementById("reset")?.addEventListener("click", () => {
  clearTrails(state);
  send({ type: "reset" });
});

function frame(): void {
  const reach = state.scene
    ? Math.max(0.5, state.scene.link_lengths.reduce((a, b) => a + b, 0.3))
    : 1.0;
  paint(ctx, defaultView(canvas, reach), buildScene(state, performance.now()));
  requestAnimationFrame(frame);
}

connect();
requestAnimationFrame(frame);
