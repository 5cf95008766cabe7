"""Real-time serve mode.

Paces the deterministic simulation core against the wall clock, runs the
solver concurrently (its measured wall time becomes the policy delay,
clamped to at least 1 ms), and speaks the line-delimited JSON protocol over
a WebSocket so any frontend, including a browser, can drive the device.

One operator connection owns the device; additional connections are
read-only observers. Losing the operator auto-unclutches and freezes the
target.
"""
from __future__ import annotations

import asyncio
import contextlib
import logging
import queue
import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, replace

import numpy as np
from websockets.asyncio.server import serve as ws_serve

from . import protocol
from .mpc import ControllerVariant, DelayModel, mpc_step
from .sim import PRIO_SOLVER_DONE, Scenario, Simulation
from .teleop import clutch, couple, force_feedback

logger = logging.getLogger(__name__)


@dataclass
class ServeSession:
    scenario: Scenario
    seed: int = 0
    host: str = "127.0.0.1"
    port: int = 8765
    pace: float = 1.0               # sim seconds per wall second
    telemetry_hz: float = 30.0
    measured_delay: bool = True     # use solver wall time as the policy delay
    bound_port: int | None = None   # actual port once listening


class ServeSimulation(Simulation):
    """Simulation whose device is driven externally and whose solver runs
    concurrently with measured compute latency."""

    def __init__(self, scenario: Scenario, seed: int, executor: ThreadPoolExecutor,
                 measured_delay: bool, pace: float):
        super().__init__(scenario, seed)
        self._executor = executor
        self._measured_delay = measured_delay
        self._pace = pace
        self._results = queue.SimpleQueue()
        self.pending_pose = None          # (x_h, v_h) from the operator client
        # fail safe: until an operator clutches in, the target stays frozen
        self.clutch_wanted = False
        self.variant = scenario.mpc.variant
        self.delay_model = scenario.mpc.delay
        self.register_events(end_ticks=None, with_logger=False)

    # device poses come from the wire, not from an operator model
    def _operator_event(self):
        t = self.scheduler.now
        delayed_force = self._force_line.get(t)
        self.f_hf = force_feedback(
            -delayed_force, self.scenario.feedback_gain, self.scenario.feedback_cap
        )
        if self.pending_pose is not None:
            x_h, v_h = self.pending_pose
            self.pending_pose = None
            lo, hi = self.device.workspace_lo, self.device.workspace_hi
            self.device = replace(self.device, x_h=np.clip(x_h, lo, hi), v_h=v_h)
        if self.clutch_wanted != self.coupling.clutched:
            self.coupling = clutch(self.coupling, self.device, self.target,
                                   engage=self.clutch_wanted)
        self.target = couple(self.coupling, self.device)
        self._target_line.push(t, self.target)

    def _solver_start_event(self):
        self.counters["replan_attempts"] += 1
        if self.in_flight:
            self.counters["skipped_inflight"] += 1
            return
        t = self.scheduler.now
        mpc_cfg = replace(self.scenario.mpc, variant=self.variant, delay=self.delay_model)
        x_plant = self.x_plant.copy()
        target = self._target_line.get(t)
        warm = self.last_solved
        index = self.snapshot_seq
        self.snapshot_seq += 1
        self.counters["solves"] += 1
        self.in_flight = True

        def job():
            started = time.perf_counter()
            snap = mpc_step(mpc_cfg, self.template, self.scenario.solver, x_plant,
                            target, warm, now=t, rng=self.rng, index=index,
                            delay_override=0.0)
            return snap, time.perf_counter() - started

        self._executor.submit(lambda: self._results.put(job()))

    def publish_ready(self):
        """Drain finished solves; availability is now (measured) with a 1 ms floor."""
        while True:
            try:
                snap, wall = self._results.get_nowait()
            except queue.Empty:
                return
            if self._measured_delay:
                delay = max(wall * self._pace, 0.001)
            else:
                delay = self.delay_model.sample(self.rng) if self.delay_model.kind != "measured" \
                    else max(wall * self._pace, 0.001)
            available = max(self.scheduler.now, snap.solved_at + delay)
            snap = replace(snap, available_at=available)
            ticks = max(self.scheduler.now_ticks,
                        int(round(available * self.tick_hz)))
            self.scheduler.schedule(ticks, PRIO_SOLVER_DONE,
                                    lambda s=snap: self._solver_done_event(s))

    def scene_description(self) -> dict:
        plant = self.scenario.plant
        env = self.scenario.environment
        return {
            "model": type(plant).__name__,
            "link_lengths": getattr(plant, "lengths", np.array([])).tolist(),
            "base": getattr(plant, "base", np.zeros(2)).tolist(),
            "ee_dim": plant.ee_dim,
            "workspace": [self.device.workspace_lo.tolist(),
                          self.device.workspace_hi.tolist()],
            "coupling_scale": self.scenario.coupling_scale,
            "wall": None if env.wall is None else {
                "point": env.wall.point.tolist(), "normal": env.wall.normal.tolist()},
            "obstacles": [{"center": o.center.tolist(), "radius": o.radius,
                           "buffer": o.buffer} for o in env.obstacles],
        }

    def telemetry(self, seq: int, paused: bool) -> dict:
        snap = self.snapshot
        age_ms = -1.0 if snap is None else (self.scheduler.now - snap.solved_at) * 1e3
        return {
            "type": "telemetry",
            "seq": seq,
            "t": self.scheduler.now,
            "ee": self.ee_pos.tolist(),
            "x_d": self.target.x_d.tolist(),
            "v_d": self.target.v_d.tolist(),
            "q": self.x_plant.tolist(),
            "f_contact": self.sensor_force.tolist(),
            "f_hf_mag": float(np.linalg.norm(self.f_hf)),
            "policy_age_ms": age_ms,
            "variant": self.variant.value,
            "clutched": bool(self.coupling.clutched),
            "paused": paused,
        }


class _Server:
    def __init__(self, session: ServeSession):
        self.session = session
        self.executor = ThreadPoolExecutor(max_workers=1)
        self.sim = ServeSimulation(session.scenario, session.seed, self.executor,
                                   session.measured_delay, session.pace)
        self.operator = None          # the connection owning the device
        self.observers = set()
        self.paused = False
        self.telemetry_seq = 0
        self.stop_event = asyncio.Event()

    # ------------------------------------------------ command handling

    def apply_command(self, message: dict, role: str):
        kind = message["type"]
        if role != "operator":
            raise protocol.ProtocolError("observers cannot send commands")
        sim = self.sim
        if kind == "device_pose":
            x_h = np.asarray(message["x_h"], float)
            v_h = np.asarray(message["v_h"], float)
            dim = sim.device.dim
            if x_h.shape != (dim,) or v_h.shape != (dim,):
                raise protocol.ProtocolError(f"device pose must have dimension {dim}")
            sim.pending_pose = (x_h, v_h)
        elif kind == "clutch":
            sim.clutch_wanted = bool(message["engaged"])
        elif kind == "set_variant":
            sim.variant = ControllerVariant(message["variant"])
        elif kind == "set_delay":
            d = message["delay"]
            sim.delay_model = DelayModel(
                kind=d.get("kind", "fixed"), value=d.get("value", 0.014),
                lo=d.get("lo", 0.012), hi=d.get("hi", 0.015),
            )
            self.session.measured_delay = d.get("kind") == "measured"
            sim._measured_delay = self.session.measured_delay
        elif kind == "pause":
            self.paused = True
        elif kind == "resume":
            self.paused = False
        elif kind == "reset":
            sim2 = ServeSimulation(self.session.scenario, self.session.seed,
                                   self.executor, self.session.measured_delay,
                                   self.session.pace)
            sim2.variant = sim.variant
            sim2.delay_model = sim.delay_model
            self.sim = sim2
        else:
            raise protocol.ProtocolError(f"unhandled command '{kind}'")

    # ------------------------------------------------ connections

    async def handle(self, websocket):
        role = None
        try:
            raw = await websocket.recv()
            try:
                hello = protocol.decode(raw)
            except protocol.ProtocolError as exc:
                await websocket.send(protocol.error_frame("bad_hello", str(exc)))
                return
            if hello.get("type") != "hello":
                await websocket.send(protocol.error_frame("bad_hello", "expected hello"))
                return
            if hello["version"] not in protocol.SUPPORTED_VERSIONS:
                await websocket.send(protocol.error_frame(
                    "version_mismatch",
                    f"supported versions: {list(protocol.SUPPORTED_VERSIONS)}"))
                return
            role = hello["role"]
            if role == "operator" and self.operator is not None:
                role = "observer"
                await websocket.send(protocol.notice_frame(
                    "operator slot taken; joining as observer"))
            if role == "operator":
                self.operator = websocket
            else:
                self.observers.add(websocket)
            await websocket.send(protocol.encode({
                "type": "hello_ok", "version": protocol.PROTOCOL_VERSION, "role": role,
                "scene": self.sim.scene_description(),
                "telemetry_hz": self.session.telemetry_hz,
            }))
            async for raw in websocket:
                try:
                    message = protocol.decode(raw)
                    self.apply_command(message, role)
                except protocol.ProtocolError as exc:
                    await websocket.send(protocol.error_frame("bad_message", str(exc)))
        finally:
            if websocket is self.operator:
                self.operator = None
                # fail safe: freeze the target when the operator vanishes
                self.sim.clutch_wanted = False
            self.observers.discard(websocket)

    async def broadcast(self, line: str):
        conns = ([self.operator] if self.operator else []) + list(self.observers)
        for conn in conns:
            try:
                await conn.send(line)
            except Exception:
                pass

    # ------------------------------------------------ real-time loop

    async def loop(self):
        session = self.session
        wall0 = time.perf_counter()
        sim0 = self.sim.scheduler.now
        last_telemetry = 0.0
        telemetry_period = 1.0 / session.telemetry_hz
        while not self.stop_event.is_set():
            await asyncio.sleep(0.0025)
            sim = self.sim
            if self.paused:
                wall0 = time.perf_counter()
                sim0 = sim.scheduler.now
            else:
                target_sim = sim0 + (time.perf_counter() - wall0) * session.pace
                # bound catch-up so a stall cannot trigger a burst of solves
                target_sim = min(target_sim, sim.scheduler.now + 0.1)
                sim.publish_ready()
                target_ticks = int(target_sim * sim.tick_hz)
                if target_ticks > sim.scheduler.now_ticks:
                    sim.scheduler.run_until(target_ticks)
            now_wall = time.perf_counter()
            if now_wall - last_telemetry >= telemetry_period:
                last_telemetry = now_wall
                self.telemetry_seq += 1
                frame = self.sim.telemetry(self.telemetry_seq, self.paused)
                await self.broadcast(protocol.encode(frame))

    async def run(self):
        async with ws_serve(self.handle, self.session.host, self.session.port) as server:
            self.session.bound_port = server.sockets[0].getsockname()[1]
            logger.info("serving on %s:%d", self.session.host, self.session.bound_port)
            print(f"serving on ws://{self.session.host}:{self.session.bound_port}",
                  flush=True)
            looper = asyncio.create_task(self.loop())
            try:
                await self.stop_event.wait()
            finally:
                looper.cancel()
                with contextlib.suppress(asyncio.CancelledError):
                    await looper
                self.executor.shutdown(wait=False)


def serve(session: ServeSession):
    """Blocking entry point for the CLI serve verb."""
    asyncio.run(_Server(session).run())


class ServerHandle:
    """Serve-mode handle for tests and embedding: runs the server in a thread."""

    def __init__(self, session: ServeSession):
        self.session = session
        self.server = _Server(session)
        self._ready = threading.Event()
        self._loop = None
        self.thread = threading.Thread(target=self._run, daemon=True)

    def _run(self):
        async def main():
            self._loop = asyncio.get_running_loop()
            task = asyncio.create_task(self.server.run())
            while self.session.bound_port is None and not task.done():
                await asyncio.sleep(0.01)
            self._ready.set()
            await task
        try:
            asyncio.run(main())
        finally:
            self._ready.set()

    def start(self, timeout=10.0):
        self.thread.start()
        if not self._ready.wait(timeout) or self.session.bound_port is None:
            raise RuntimeError("serve loop failed to start")
        return self.session.bound_port

    def stop(self):
        if self._loop is not None:
            self._loop.call_soon_threadsafe(self.server.stop_event.set)
        self.thread.join(timeout=5.0)
