"""Order and printer services: routing, per-printer FIFO queues, dispatch and progress.

All mutable state sits behind one re-entrant lock. Order documents are
written with the version last read so that a concurrent writer elsewhere
surfaces as ``VersionConflict`` instead of a lost update.
"""
from __future__ import annotations

import hashlib
import logging
import threading
import uuid
from collections import Counter, deque
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Protocol

from cloudcraft.auth import hash_credential, verify_credential
from cloudcraft.billing import AlreadySettled, BillingUnavailable, Transaction
from cloudcraft.costmodel import ShareRole
from cloudcraft.domain import (
    CadModel,
    Clock,
    GeoPoint,
    Money,
    Namespace,
    Order,
    OrderEvent,
    OrderState,
    PrinterProfile,
    StorageUnavailable,
    Store,
    SystemClock,
    VersionConflict,
)
from cloudcraft.domain.models import PHASE_ORDER, FilamentSpec, JobMetrics, Phase, PhaseRecord
from cloudcraft.errors import CloudCraftError, Conflict, NotFound, Unavailable
from cloudcraft.routing import NoCapablePrinter, Router, select_printer

log = logging.getLogger(__name__)

TELEMETRY_LIMIT = 10_000


class Availability(str, Enum):
    IDLE = "Idle"
    BUSY = "Busy"
    OFFLINE = "Offline"

    def __str__(self) -> str:
        return self.value


class UnknownModel(NotFound):
    pass


class UnknownJob(NotFound):
    pass


class UnknownPrinter(NotFound):
    pass


class UnknownOrder(NotFound):
    pass


class DuplicatePrinter(Conflict):
    pass


class DuplicateModel(Conflict):
    pass


class DuplicateOrder(Conflict):
    pass


class PhaseOrderViolation(Conflict):
    pass


class IncompletePhaseLog(Conflict):
    pass


class JobNotPrinting(Conflict):
    pass


class AgentUnreachable(Unavailable):
    pass


@dataclass(frozen=True)
class PrinterStatus:
    printer_id: str
    availability: Availability
    queue_depth: int
    profile: PrinterProfile
    owner_id: str = ""

    def to_doc(self) -> dict:
        return {
            "printer_id": self.printer_id,
            "availability": self.availability.value,
            "queue_depth": self.queue_depth,
            "owner_id": self.owner_id,
            "profile": self.profile.to_doc(),
        }


@dataclass
class PrintJob:
    job_id: str
    order_id: str
    printer_id: str
    model_id: str
    enqueued_at: float
    unit_filament_mass_g: float
    phase_log: list[PhaseRecord] = field(default_factory=list)
    accepted: bool = False
    current_phase: tuple[Phase, float] | None = None
    telemetry: deque = field(default_factory=lambda: deque(maxlen=TELEMETRY_LIMIT))

    def assignment(self) -> dict:
        return {
            "job_id": self.job_id,
            "order_id": self.order_id,
            "model_id": self.model_id,
            "unit_filament_mass_g": self.unit_filament_mass_g,
        }


class AgentLink(Protocol):
    def send_job(self, printer_id: str, assignment: dict) -> None:
        """Deliver a JobAssign; raises ``AgentUnreachable`` when the agent is gone."""


class Settler(Protocol):
    def settle_order(
        self, order: Order, metrics: JobMetrics, filament: FilamentSpec, parties: dict[ShareRole, str]
    ) -> Transaction: ...


@dataclass
class _PrinterRuntime:
    profile: PrinterProfile
    owner_id: str
    credential_hash: str
    availability: Availability = Availability.OFFLINE
    queue: deque = field(default_factory=deque)
    current: PrintJob | None = None

    @property
    def queue_depth(self) -> int:
        return len(self.queue) + (1 if self.current else 0)

    def status(self, printer_id: str) -> PrinterStatus:
        return PrinterStatus(printer_id, self.availability, self.queue_depth, self.profile, self.owner_id)


class Fulfillment:
    def __init__(
        self,
        store: Store,
        clock: Clock | None = None,
        *,
        settler: Settler | None = None,
        link: AgentLink | None = None,
        router: Router = select_printer,
        hash_iterations: int = 100_000,
    ):
        self.store = store
        self.clock = clock or SystemClock()
        self.settler = settler
        self.link = link
        self.router = router
        self.hash_iterations = hash_iterations
        self._lock = threading.RLock()
        self._printers: dict[str, _PrinterRuntime] = {}
        self._jobs: dict[str, PrintJob] = {}
        self._versions: dict[str, int] = {}
        self._pending_settlement: set[str] = set()
        self.events: list[tuple[float, str, str | None, str | None]] = []
        for key, doc in store.scan_prefix(Namespace.PRINTERS):
            self._printers[key] = _PrinterRuntime(
                PrinterProfile.from_doc(doc["profile"]), doc["owner_id"], doc["credential_hash"]
            )

    def _event(self, kind: str, printer_id: str | None = None, order_id: str | None = None) -> None:
        self.events.append((self.clock.now(), kind, printer_id, order_id))

    # Persistence -------------------------------------------------------------

    def _load(self, order_id: str) -> Order:
        found = self.store.find(Namespace.ORDERS, order_id)
        if found is None:
            raise UnknownOrder(f"unknown order {order_id!r}")
        self._versions[order_id] = found[1]
        return Order.from_doc(found[0])

    def _save(self, order: Order, *, new: bool = False) -> Order:
        expected = 0 if new else self._versions.get(order.order_id)
        try:
            self._versions[order.order_id] = self.store.put(
                Namespace.ORDERS, order.order_id, order.to_doc(), expected_version=expected
            )
        except VersionConflict:
            if new:
                raise DuplicateOrder(f"order {order.order_id!r} already exists") from None
            raise
        return order

    def get_order(self, order_id: str) -> Order:
        with self._lock:
            return self._load(order_id)

    def orders(self, prefix: str = "") -> list[Order]:
        return [Order.from_doc(doc) for _, doc in self.store.scan_prefix(Namespace.ORDERS, prefix)]

    def state_counts(self, prefix: str = "") -> Counter:
        return Counter(o.state for o in self.orders(prefix))

    # Models ------------------------------------------------------------------

    def upload_model(
        self,
        designer_id: str,
        display_name: str,
        payload: bytes,
        required_material: str,
        unit_filament_mass_g: float,
        model_id: str | None = None,
    ) -> CadModel:
        model = CadModel(
            model_id=model_id or f"m-{uuid.uuid4().hex[:12]}",
            designer_id=designer_id,
            display_name=display_name,
            payload_digest=hashlib.sha256(payload).hexdigest() if payload else "",
            required_material=required_material,
            unit_filament_mass_g=unit_filament_mass_g,
        )
        try:
            self.store.put(Namespace.MODELS, model.model_id, model.to_doc(), expected_version=0)
        except VersionConflict:
            raise DuplicateModel(f"model {model.model_id!r} already exists") from None
        return model

    def get_model(self, model_id: str) -> CadModel:
        found = self.store.find(Namespace.MODELS, model_id)
        if found is None:
            raise UnknownModel(f"unknown model {model_id!r}")
        return CadModel.from_doc(found[0])

    # Printers ----------------------------------------------------------------

    def register_printer(self, profile: PrinterProfile, owner_id: str, credential: str) -> PrinterStatus:
        if len(credential or "") < 8:
            raise CloudCraftError("printer credential must have at least 8 characters")
        with self._lock:
            if profile.printer_id in self._printers:
                raise DuplicatePrinter(f"printer {profile.printer_id!r} is already registered")
            runtime = _PrinterRuntime(profile, owner_id, hash_credential(credential, iterations=self.hash_iterations))
            doc = {
                "profile": profile.to_doc(),
                "owner_id": owner_id,
                "credential_hash": runtime.credential_hash,
                "registered_at": self.clock.now(),
            }
            try:
                self.store.put(Namespace.PRINTERS, profile.printer_id, doc, expected_version=0)
            except VersionConflict:
                raise DuplicatePrinter(f"printer {profile.printer_id!r} is already registered") from None
            self._printers[profile.printer_id] = runtime
            self._event("register", profile.printer_id)
            return runtime.status(profile.printer_id)

    def verify_printer(self, printer_id: str, credential: str) -> bool:
        with self._lock:
            runtime = self._printers.get(printer_id)
        if runtime is None:
            raise UnknownPrinter(f"unknown printer {printer_id!r}")
        return verify_credential(credential or "", runtime.credential_hash)

    def printer_status(self, printer_id: str) -> PrinterStatus:
        with self._lock:
            runtime = self._printers.get(printer_id)
            if runtime is None:
                raise UnknownPrinter(f"unknown printer {printer_id!r}")
            return runtime.status(printer_id)

    def printers(self) -> list[PrinterStatus]:
        with self._lock:
            return [rt.status(pid) for pid, rt in sorted(self._printers.items())]

    def printer_connected(self, printer_id: str) -> PrinterStatus:
        with self._lock:
            runtime = self._runtime(printer_id)
            if runtime.availability is Availability.OFFLINE:
                runtime.availability = Availability.IDLE
            self._event("online", printer_id)
            log.info("printer %s online", printer_id)
            self.dispatch_next(printer_id)
            return runtime.status(printer_id)

    def printer_disconnected(self, printer_id: str, reason: str = "agent disconnected") -> None:
        """Take a printer offline: fail its running job, move its queue elsewhere."""
        with self._lock:
            runtime = self._runtime(printer_id)
            if runtime.availability is Availability.OFFLINE and runtime.current is None:
                return
            runtime.availability = Availability.OFFLINE
            self._event("offline", printer_id)
            log.warning("printer %s offline: %s", printer_id, reason)
            job = runtime.current
            runtime.current = None
            if job is not None:
                if job.accepted:
                    self._fail(job, reason)
                else:
                    runtime.queue.appendleft(job)
            self._reroute_queue(printer_id)

    def _runtime(self, printer_id: str) -> _PrinterRuntime:
        runtime = self._printers.get(printer_id)
        if runtime is None:
            raise UnknownPrinter(f"unknown printer {printer_id!r}")
        return runtime

    # Orders ------------------------------------------------------------------

    def _route(self, required_material: str, unit_mass_g: float, location: GeoPoint, exclude: str | None = None) -> str:
        candidates = [rt.status(pid) for pid, rt in self._printers.items() if pid != exclude]
        return self.router(required_material, unit_mass_g, location, candidates)

    def create_order(
        self,
        webshop_id: str,
        model_id: str,
        sale_price: Money,
        customer_ref: str,
        customer_location: GeoPoint,
        *,
        order_id: str | None = None,
        customization: str = "",
    ) -> Order:
        """Persist a new order and route it; raises ``NoCapablePrinter`` leaving it Created."""
        model = self.get_model(model_id)
        with self._lock:
            order = Order(
                order_id=order_id or f"o-{uuid.uuid4().hex[:16]}",
                model_id=model_id,
                webshop_id=webshop_id,
                customer_ref=customer_ref,
                sale_price=sale_price,
                created_at=self.clock.now(),
                customer_location=customer_location,
                customization=customization,
                history=(("Created", self.clock.now()),),
            )
            self._save(order, new=True)
            self._event("create", None, order.order_id)
            return self._route_order(order, model)

    def _route_order(self, order: Order, model: CadModel) -> Order:
        try:
            printer_id = self._route(model.required_material, model.unit_filament_mass_g, order.customer_location)
        except NoCapablePrinter as exc:
            raise NoCapablePrinter(str(exc), order=order) from None
        order = self._save(order.apply(OrderEvent.ROUTE, self.clock.now(), assigned_printer=printer_id))
        self._event("route", printer_id, order.order_id)
        return order

    def reroute(self, order_id: str) -> Order:
        """Retry routing for an order left in Created."""
        with self._lock:
            order = self._load(order_id)
            return self._route_order(order, self.get_model(order.model_id))

    def place_order(self, *args, **kwargs) -> Order:
        """Create, route, enqueue, and dispatch if the chosen printer is idle."""
        with self._lock:
            order = self.create_order(*args, **kwargs)
            job = self.enqueue_job(order.order_id)
            self.dispatch_next(job.printer_id)
            return self._load(order.order_id)

    def cancel_order(self, order_id: str) -> Order:
        with self._lock:
            order = self._load(order_id)
            order = order.apply(OrderEvent.CANCEL, self.clock.now())
            job = self._jobs.get(order.job_id or "")
            if job is not None:
                runtime = self._printers.get(job.printer_id)
                if runtime is not None and runtime.current is job:
                    raise Conflict(f"order {order_id} was already handed to its printer")
                if runtime is not None and job in runtime.queue:
                    runtime.queue.remove(job)
                self._jobs.pop(job.job_id, None)
            self._event("cancel", order.assigned_printer, order_id)
            return self._save(order)

    def enqueue_job(self, order_id: str) -> PrintJob:
        with self._lock:
            order = self._load(order_id)
            job_id = f"job-{order.order_id}"
            order = order.apply(OrderEvent.ENQUEUE, self.clock.now(), job_id=job_id)
            model = self.get_model(order.model_id)
            runtime = self._runtime(order.assigned_printer)
            job = PrintJob(
                job_id=job_id,
                order_id=order.order_id,
                printer_id=order.assigned_printer,
                model_id=order.model_id,
                enqueued_at=self.clock.now(),
                unit_filament_mass_g=runtime.profile.unit_filament_mass_g or model.unit_filament_mass_g,
            )
            self._save(order)
            runtime.queue.append(job)
            self._jobs[job_id] = job
            self._event("enqueue", job.printer_id, order.order_id)
            return job

    def dispatch_next(self, printer_id: str) -> PrintJob | None:
        with self._lock:
            runtime = self._runtime(printer_id)
            if runtime.availability is not Availability.IDLE or runtime.current is not None or not runtime.queue:
                return None
            job = runtime.queue.popleft()
            runtime.availability = Availability.BUSY
            runtime.current = job
            try:
                if self.link is None:
                    raise AgentUnreachable("no agent link configured")
                self.link.send_job(printer_id, job.assignment())
            except AgentUnreachable as exc:
                runtime.current = None
                runtime.queue.appendleft(job)
                runtime.availability = Availability.IDLE
                self.printer_disconnected(printer_id, f"unreachable: {exc}")
                return None
            self._event("assign", printer_id, job.order_id)
            return job

    def _reroute_queue(self, printer_id: str) -> None:
        runtime = self._printers[printer_id]
        kept: deque = deque()
        touched = set()
        while runtime.queue:
            job = runtime.queue.popleft()
            order = self._load(job.order_id)
            model = self.get_model(order.model_id)
            try:
                target = self._route(model.required_material, model.unit_filament_mass_g, order.customer_location, exclude=printer_id)
            except NoCapablePrinter:
                kept.append(job)
                continue
            self._save(_reassigned(order, target))
            job.printer_id = target
            job.unit_filament_mass_g = self._printers[target].profile.unit_filament_mass_g
            self._printers[target].queue.append(job)
            touched.add(target)
            self._event("reroute", target, job.order_id)
            log.info("rerouted %s from %s to %s", job.order_id, printer_id, target)
        runtime.queue = kept
        for target in sorted(touched):
            self.dispatch_next(target)

    # Progress from agents ------------------------------------------------------

    def _job(self, job_id: str, printer_id: str | None = None) -> PrintJob:
        job = self._jobs.get(job_id)
        if job is None or (printer_id is not None and job.printer_id != printer_id):
            raise UnknownJob(f"unknown job {job_id!r}")
        return job

    def accept_job(self, job_id: str, printer_id: str | None = None) -> Order:
        with self._lock:
            job = self._job(job_id, printer_id)
            runtime = self._printers[job.printer_id]
            if runtime.current is not job:
                raise UnknownJob(f"job {job_id} is not assigned to {job.printer_id}")
            order = self._save(self._load(job.order_id).apply(OrderEvent.START_PRINT, self.clock.now()))
            job.accepted = True
            self._event("start", job.printer_id, job.order_id)
            return order

    def record_progress(self, job_id: str, kind: str, body: dict, printer_id: str | None = None) -> None:
        """Apply a PhaseStarted, PhaseCompleted or MeterSample report."""
        with self._lock:
            job = self._job(job_id, printer_id)
            if not job.accepted:
                raise JobNotPrinting(f"job {job_id} is not printing")
            expected = PHASE_ORDER[len(job.phase_log)] if len(job.phase_log) < len(PHASE_ORDER) else None
            if kind == "MeterSample":
                job.telemetry.append((self.clock.now(), body))
                return
            phase = Phase(body["phase"])
            if phase is not expected:
                raise PhaseOrderViolation(
                    f"job {job_id}: got {phase.value}, expected {expected.value if expected else 'no more phases'}"
                )
            now = self.clock.now()
            if kind == "PhaseStarted":
                job.current_phase = (phase, now)
                return
            if kind != "PhaseCompleted":
                raise CloudCraftError(f"not a progress event: {kind}")
            started = job.current_phase[1] if job.current_phase and job.current_phase[0] is phase else now
            record = PhaseRecord(phase, started, now, float(body["duration_s"]), float(body["energy_wh"]))
            record.metrics()  # validates duration and energy
            order = self._load(job.order_id)
            self._save(order.with_phase(record))
            job.phase_log.append(record)
            job.current_phase = None

    def complete_job(self, job_id: str, final_metrics: dict, printer_id: str | None = None) -> Order:
        with self._lock:
            job = self._job(job_id, printer_id)
            if len(job.phase_log) != len(PHASE_ORDER):
                raise IncompletePhaseLog(f"job {job_id} has {len(job.phase_log)} of 3 phases")
            filament_g = float(final_metrics.get("filament_g", job.unit_filament_mass_g))
            order = self._load(job.order_id)
            order = self._save(order.apply(OrderEvent.FINISH_PRINT, self.clock.now(), filament_g=filament_g))
            self._event("complete", job.printer_id, job.order_id)
            self._release(job)
            order = self._settle(order)
            self.dispatch_next(job.printer_id)
            return order

    def fail_job(self, job_id: str, reason: str, printer_id: str | None = None) -> Order:
        with self._lock:
            job = self._job(job_id, printer_id)
            order = self._fail(job, reason)
            self._release(job)
            self.dispatch_next(job.printer_id)
            return order

    def _fail(self, job: PrintJob, reason: str) -> Order:
        order = self._load(job.order_id)
        order = self._save(order.apply(OrderEvent.FAIL, self.clock.now(), failure_reason=reason))
        self._jobs.pop(job.job_id, None)
        self._event("fail", job.printer_id, job.order_id)
        log.warning("order %s failed on %s: %s", job.order_id, job.printer_id, reason)
        return order

    def _release(self, job: PrintJob) -> None:
        runtime = self._printers[job.printer_id]
        if runtime.current is job:
            runtime.current = None
            if runtime.availability is Availability.BUSY:
                runtime.availability = Availability.IDLE

    # Settlement ----------------------------------------------------------------

    def _settle(self, order: Order) -> Order:
        if self.settler is None:
            self._pending_settlement.add(order.order_id)
            return order
        runtime = self._printers[order.assigned_printer]
        metrics = JobMetrics(order.filament_g, tuple(r.metrics() for r in order.phase_log))
        parties = {
            ShareRole.PRINTER_OPERATOR: runtime.owner_id,
            ShareRole.WEBSHOP_OPERATOR: order.webshop_id,
            ShareRole.DESIGNER: self.get_model(order.model_id).designer_id,
        }
        try:
            self.settler.settle_order(order, metrics, runtime.profile.filament, parties)
        except AlreadySettled:
            pass
        except (BillingUnavailable, StorageUnavailable) as exc:
            log.warning("settlement of %s deferred: %s", order.order_id, exc)
            self._pending_settlement.add(order.order_id)
            return order
        self._pending_settlement.discard(order.order_id)
        self._jobs.pop(order.job_id or "", None)
        order = self._save(order.apply(OrderEvent.BILL, self.clock.now()))
        self._event("bill", order.assigned_printer, order.order_id)
        return order

    @property
    def pending_settlements(self) -> frozenset[str]:
        return frozenset(self._pending_settlement)

    def retry_settlements(self) -> list[Order]:
        with self._lock:
            done = []
            for order_id in sorted(self._pending_settlement):
                order = self._load(order_id)
                if order.state is OrderState.COMPLETED:
                    order = self._settle(order)
                else:
                    self._pending_settlement.discard(order_id)
                if order.state is OrderState.BILLED:
                    done.append(order)
            return done

    # Restart -------------------------------------------------------------------

    def recover(self) -> None:
        """Rebuild queues and pending settlements from persisted orders."""
        with self._lock:
            for order in sorted(self.orders(), key=lambda o: (o.created_at, o.order_id)):
                self._versions.pop(order.order_id, None)
                if order.state is OrderState.ROUTED:
                    self.enqueue_job(order.order_id)
                elif order.state is OrderState.QUEUED and order.assigned_printer in self._printers:
                    runtime = self._printers[order.assigned_printer]
                    job = PrintJob(
                        order.job_id, order.order_id, order.assigned_printer, order.model_id,
                        order.created_at, runtime.profile.unit_filament_mass_g,
                    )
                    runtime.queue.append(job)
                    self._jobs[job.job_id] = job
                elif order.state is OrderState.PRINTING:
                    self._load(order.order_id)
                    self._save(order.apply(OrderEvent.FAIL, self.clock.now(), failure_reason="platform restarted"))
                elif order.state is OrderState.COMPLETED:
                    self._pending_settlement.add(order.order_id)


def _reassigned(order: Order, printer_id: str) -> Order:
    return replace(order, assigned_printer=printer_id)
