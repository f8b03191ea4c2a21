"""Simulated production-site controller.

The agent holds one TCP session to the cloud gateway, takes one job at a time
and replays its printer profile's three phases against the wall clock, sped
up by ``time_scale``. Reported per-phase duration and energy are the ground
truth for billing; meter samples are advisory telemetry.
"""
from __future__ import annotations

import asyncio
import logging
import random
from dataclasses import dataclass, field, replace
from fractions import Fraction
from typing import Awaitable, Callable, Sequence

from cloudcraft.control_plane.protocol import MAX_LINE_BYTES, AgentMessage, MessageKind, ProtocolError
from cloudcraft.domain.models import Phase, PhaseMetrics, PrinterProfile
from cloudcraft.domain.money import to_fraction
from cloudcraft.errors import CloudCraftError

log = logging.getLogger(__name__)

BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 30.0
# Refusals after which reconnecting cannot help.
FATAL_REJECTIONS = {"BadPrinterCredential", "UnknownPrinter", "SessionConflict"}


class OutOfRange(CloudCraftError):
    pass


class SimulatedFailure(CloudCraftError):
    pass


class AgentRejected(CloudCraftError):
    status = 401

    def __init__(self, reason: str, message: str):
        self.reason = reason
        super().__init__(f"{reason}: {message}")


@dataclass(frozen=True)
class AgentConfig:
    printer_id: str
    profile: PrinterProfile
    gateway_address: str
    credential: str = ""
    time_scale: float = 60.0
    meter_interval_s: float = 5.0
    jitter: float = 0.0
    seed: int | None = None
    fail_at_phase: Phase | None = None
    heartbeat_interval_s: float = 20.0
    # Controller draw between jobs; reported on heartbeats, never billed.
    idle_power_w: float = 0.0

    def __post_init__(self):
        if not self.time_scale > 0:
            raise ValueError("time_scale must be positive")
        if not 0 <= self.jitter < 0.5:
            raise ValueError("jitter must be in [0, 0.5)")
        if not self.meter_interval_s > 0:
            raise ValueError("meter_interval_s must be positive")
        if not self.heartbeat_interval_s > 0:
            raise ValueError("heartbeat_interval_s must be positive")
        if self.idle_power_w < 0:
            raise ValueError("idle_power_w must not be negative")
        if self.fail_at_phase is not None:
            object.__setattr__(self, "fail_at_phase", Phase(self.fail_at_phase))

    @property
    def host_port(self) -> tuple[str, int]:
        host, _, port = self.gateway_address.rpartition(":")
        return host or "127.0.0.1", int(port)


@dataclass(frozen=True)
class JobResult:
    job_id: str
    phases: tuple[PhaseMetrics, ...]
    filament_g: float
    wall_s: float

    @property
    def total_duration_s(self) -> float:
        return sum(p.duration_s for p in self.phases)


def meter_reading(elapsed_sim_s: float, profile: PrinterProfile | Sequence[PhaseMetrics]) -> float:
    """Cumulative Wh after ``elapsed_sim_s``, linear within each phase."""
    phases = profile.phases if isinstance(profile, PrinterProfile) else tuple(profile)
    elapsed = to_fraction(elapsed_sim_s)
    total = sum(to_fraction(p.duration_s) for p in phases)
    if elapsed < 0 or elapsed > total:
        raise OutOfRange(f"elapsed {elapsed_sim_s} s outside [0, {float(total)}] s")
    energy = Fraction(0)
    start = Fraction(0)
    for p in phases:
        duration = to_fraction(p.duration_s)
        if elapsed <= start + duration:
            if duration > 0:
                energy += to_fraction(p.energy_wh) * (elapsed - start) / duration
            elif elapsed == start + duration:
                energy += to_fraction(p.energy_wh)
            return float(energy)
        energy += to_fraction(p.energy_wh)
        start += duration
    return float(energy)


def planned_phases(config: AgentConfig, job_id: str) -> tuple[tuple[PhaseMetrics, ...], float]:
    """Phase values and filament grams this agent will report for ``job_id``."""
    unit = config.profile.unit_filament_mass_g
    if config.jitter == 0:
        return config.profile.phases, unit
    rng = random.Random(f"{config.seed}:{config.printer_id}:{job_id}")

    def noisy(value: float) -> float:
        return value * (1 + rng.uniform(-config.jitter, config.jitter))

    phases = tuple(replace(p, duration_s=noisy(p.duration_s), energy_wh=noisy(p.energy_wh)) for p in config.profile.phases)
    return phases, noisy(unit)


Send = Callable[[MessageKind, dict], Awaitable[None]]


async def run_job(config: AgentConfig, job: dict, send: Send) -> JobResult:
    """Replay one print and report it through ``send``.

    Sleeps run against absolute deadlines from the job start, so per-message
    overhead does not accumulate into the wall-clock duration.
    """
    job_id = job["job_id"]
    phases, filament_g = planned_phases(config, job_id)
    loop = asyncio.get_running_loop()
    t0 = loop.time()
    scale = config.time_scale

    async def until(sim_s: float) -> None:
        delay = t0 + sim_s / scale - loop.time()
        if delay > 0:
            await asyncio.sleep(delay)

    start = 0.0
    for phase in phases:
        if config.fail_at_phase is phase.phase:
            await send(MessageKind.JOB_ERROR, {"job_id": job_id, "phase": phase.phase.value, "reason": "simulated failure"})
            raise SimulatedFailure(f"{job_id} failed in {phase.phase.value}")
        await send(MessageKind.PHASE_STARTED, {"job_id": job_id, "phase": phase.phase.value})
        end = start + phase.duration_s
        tick = start + config.meter_interval_s
        while tick < end:
            await until(tick)
            await send(
                MessageKind.METER_SAMPLE,
                {"job_id": job_id, "phase": phase.phase.value, "elapsed_s": tick, "cumulative_wh": meter_reading(tick, phases)},
            )
            tick += config.meter_interval_s
        await until(end)
        await send(
            MessageKind.PHASE_COMPLETED,
            {"job_id": job_id, "phase": phase.phase.value, "duration_s": phase.duration_s, "energy_wh": phase.energy_wh},
        )
        start = end
    result = JobResult(job_id, phases, filament_g, loop.time() - t0)
    await send(
        MessageKind.JOB_COMPLETE,
        {"job_id": job_id, "filament_g": filament_g, "phases": [p.to_doc() for p in phases]},
    )
    return result


@dataclass
class _Session:
    """One connection's worth of agent state."""

    config: AgentConfig
    reader: asyncio.StreamReader
    writer: asyncio.StreamWriter
    sequence: int = 0
    job: asyncio.Task | None = None
    fatal: AgentRejected | None = None
    completed: list[JobResult] = field(default_factory=list)
    idle_wh: float = 0.0
    _idle_since: float | None = None

    def _idle_tick(self) -> None:
        now = asyncio.get_running_loop().time()
        if self._idle_since is not None:
            sim_s = (now - self._idle_since) * self.config.time_scale
            self.idle_wh += self.config.idle_power_w * sim_s / 3600
        self._idle_since = now if self.job is None else None

    async def send(self, kind: MessageKind, body: dict) -> None:
        self.sequence += 1
        self.writer.write(AgentMessage(kind, self.sequence, self.config.printer_id, body).encode())
        await self.writer.drain()

    async def _heartbeats(self) -> None:
        while True:
            await asyncio.sleep(self.config.heartbeat_interval_s)
            self._idle_tick()
            await self.send(MessageKind.HEARTBEAT, {"idle_wh": self.idle_wh})

    async def _execute(self, job: dict) -> None:
        try:
            await self.send(MessageKind.JOB_ACCEPT, {"job_id": job["job_id"]})
            self.completed.append(await run_job(self.config, job, self.send))
        except SimulatedFailure as exc:
            log.warning("%s: %s", self.config.printer_id, exc)
        except (ConnectionError, OSError):
            pass
        finally:
            self.job = None
            self._idle_since = asyncio.get_running_loop().time()

    def _on_message(self, msg: AgentMessage) -> None:
        if msg.kind is MessageKind.REJECT:
            reason = str(msg.body.get("error", ""))
            if reason in FATAL_REJECTIONS:
                self.fatal = AgentRejected(reason, str(msg.body.get("message", "")))
            else:
                log.warning("%s: gateway refused a message: %s", self.config.printer_id, msg.body)
        elif msg.kind is MessageKind.JOB_ASSIGN:
            if self.job is not None:
                log.warning("%s: ignoring %s while busy", self.config.printer_id, msg.body.get("job_id"))
                return
            self._idle_tick()
            self.job = asyncio.create_task(self._execute(msg.body))
            self._idle_since = None
        else:
            log.warning("%s: unexpected %s from gateway", self.config.printer_id, msg.kind.value)

    async def run(self) -> None:
        await self.send(MessageKind.REGISTER, {"credential": self.config.credential, "model_name": self.config.profile.model_name})
        self._idle_since = asyncio.get_running_loop().time()
        beats = asyncio.create_task(self._heartbeats())
        try:
            while self.fatal is None:
                line = await self.reader.readline()
                if not line:
                    break
                try:
                    self._on_message(AgentMessage.decode(line))
                except ProtocolError as exc:
                    log.warning("%s: %s", self.config.printer_id, exc)
        finally:
            beats.cancel()
            if self.job is not None:
                self.job.cancel()
            self.writer.close()


async def run_agent(config: AgentConfig, *, stop: asyncio.Event | None = None, on_connect=None) -> None:
    """Stay connected until ``stop`` is set; raises ``AgentRejected`` if the gateway refuses this printer."""
    stop = stop or asyncio.Event()
    loop = asyncio.get_running_loop()
    backoff = BACKOFF_BASE_S
    host, port = config.host_port
    while not stop.is_set():
        started = loop.time()
        try:
            reader, writer = await asyncio.open_connection(host, port, limit=MAX_LINE_BYTES)
        except OSError as exc:
            log.info("%s: gateway unreachable (%s)", config.printer_id, exc)
        else:
            session = _Session(config, reader, writer)
            if on_connect is not None:
                on_connect(session)
            runner = asyncio.create_task(session.run())
            stopper = asyncio.create_task(stop.wait())
            try:
                await asyncio.wait({runner, stopper}, return_when=asyncio.FIRST_COMPLETED)
            finally:
                stopper.cancel()
                if not runner.done():
                    runner.cancel()
                try:
                    await runner
                except (asyncio.CancelledError, ConnectionError, OSError):
                    pass
            if session.fatal is not None:
                raise session.fatal
            # A session that stayed up a while earns a fresh backoff.
            if loop.time() - started > BACKOFF_CAP_S:
                backoff = BACKOFF_BASE_S
        if stop.is_set():
            break
        log.info("%s: reconnecting in %.0fs", config.printer_id, backoff)
        try:
            await asyncio.wait_for(stop.wait(), backoff)
        except asyncio.TimeoutError:
            pass
        backoff = min(backoff * 2, BACKOFF_CAP_S)
