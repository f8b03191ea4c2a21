"""Immutable domain records and their JSON document forms."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any, Iterable

from cloudcraft.domain.lifecycle import PHASE_LOG_STATES, OrderEvent, OrderState, transition
from cloudcraft.domain.money import Money, to_fraction


class Phase(str, Enum):
    PRE_PRINT = "PrePrint"
    PRINT = "Print"
    POST_PRINT = "PostPrint"


PHASE_ORDER = (Phase.PRE_PRINT, Phase.PRINT, Phase.POST_PRINT)


def parse_duration(value: Any) -> float:
    """Seconds from a number or an ``HH:MM:SS`` string."""
    if isinstance(value, str) and ":" in value:
        parts = [float(p) for p in value.split(":")]
        if len(parts) != 3:
            raise ValueError(f"expected HH:MM:SS, got {value!r}")
        hours, minutes, seconds = parts
        return hours * 3600 + minutes * 60 + seconds
    return float(value)


def format_duration(seconds: float) -> str:
    whole = int(round(seconds))
    return f"{whole // 3600:02d}:{whole % 3600 // 60:02d}:{whole % 60:02d}"


def _num(value: float) -> float | int:
    return int(value) if float(value).is_integer() else value


@dataclass(frozen=True)
class GeoPoint:
    latitude: float
    longitude: float

    def __post_init__(self):
        if not (-90.0 <= self.latitude <= 90.0) or not (-180.0 <= self.longitude <= 180.0):
            raise ValueError(f"coordinates out of range: {self.latitude}, {self.longitude}")

    def to_doc(self) -> dict:
        return {"latitude": self.latitude, "longitude": self.longitude}

    @classmethod
    def from_doc(cls, doc: dict) -> GeoPoint:
        return cls(float(doc["latitude"]), float(doc["longitude"]))


@dataclass(frozen=True)
class FilamentSpec:
    spool_mass_g: float
    spool_price: Money
    material_name: str

    def __post_init__(self):
        if not self.spool_mass_g > 0:
            raise ValueError("spool_mass_g must be positive")
        if self.spool_price.micros < 0:
            raise ValueError("spool_price must not be negative")

    def to_doc(self) -> dict:
        return {
            "spool_mass_g": _num(self.spool_mass_g),
            "spool_price": self.spool_price.format(),
            "material_name": self.material_name,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> FilamentSpec:
        return cls(
            spool_mass_g=float(doc["spool_mass_g"]),
            spool_price=Money.eur(doc["spool_price"]),
            material_name=str(doc["material_name"]),
        )


@dataclass(frozen=True)
class PhaseMetrics:
    phase: Phase
    duration_s: float
    energy_wh: float

    def __post_init__(self):
        object.__setattr__(self, "phase", Phase(self.phase))
        if self.duration_s < 0 or self.energy_wh < 0:
            raise ValueError("phase duration and energy must be non-negative")
        if not (math.isfinite(self.duration_s) and math.isfinite(self.energy_wh)):
            raise ValueError("phase metrics must be finite")

    @property
    def average_power_w(self) -> float:
        """Mean draw over the phase; zero for an instantaneous phase."""
        if self.duration_s == 0:
            return 0.0
        return float(to_fraction(self.energy_wh) * 3600 / to_fraction(self.duration_s))

    def to_doc(self) -> dict:
        return {
            "phase": self.phase.value,
            "duration_s": _num(self.duration_s),
            "energy_wh": _num(self.energy_wh),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> PhaseMetrics:
        duration = doc.get("duration_s", doc.get("duration"))
        return cls(Phase(doc["phase"]), parse_duration(duration), float(doc["energy_wh"]))


def check_phases(phases: Iterable[PhaseMetrics]) -> tuple[PhaseMetrics, ...]:
    phases = tuple(phases)
    if tuple(p.phase for p in phases) != PHASE_ORDER:
        raise ValueError("need exactly one PrePrint, Print and PostPrint phase, in that order")
    return phases


@dataclass(frozen=True)
class PrinterProfile:
    printer_id: str
    model_name: str
    filament: FilamentSpec
    unit_filament_mass_g: float
    phases: tuple[PhaseMetrics, ...]
    capabilities: frozenset[str]
    location: GeoPoint

    def __post_init__(self):
        object.__setattr__(self, "phases", check_phases(self.phases))
        object.__setattr__(self, "capabilities", frozenset(self.capabilities))
        if not self.printer_id:
            raise ValueError("printer_id must not be empty")
        if not 0 < self.unit_filament_mass_g <= self.filament.spool_mass_g:
            raise ValueError("unit filament mass must be positive and fit on one spool")

    @property
    def total_duration_s(self) -> float:
        return sum(p.duration_s for p in self.phases)

    @property
    def total_energy_wh(self) -> float:
        return float(sum(to_fraction(p.energy_wh) for p in self.phases))

    def to_doc(self) -> dict:
        return {
            "printer_id": self.printer_id,
            "model_name": self.model_name,
            "filament": self.filament.to_doc(),
            "unit_filament_mass_g": _num(self.unit_filament_mass_g),
            "phases": [p.to_doc() for p in self.phases],
            "capabilities": sorted(self.capabilities),
            "location": self.location.to_doc(),
        }

    @classmethod
    def from_doc(cls, doc: dict, printer_id: str | None = None) -> PrinterProfile:
        filament = FilamentSpec.from_doc(doc["filament"])
        return cls(
            printer_id=str(doc.get("printer_id") or printer_id or ""),
            model_name=str(doc.get("model_name", "")),
            filament=filament,
            unit_filament_mass_g=float(doc["unit_filament_mass_g"]),
            phases=tuple(PhaseMetrics.from_doc(p) for p in doc["phases"]),
            capabilities=frozenset(doc.get("capabilities") or [filament.material_name]),
            location=GeoPoint.from_doc(doc["location"]),
        )


@dataclass(frozen=True)
class CadModel:
    model_id: str
    designer_id: str
    display_name: str
    payload_digest: str
    required_material: str
    unit_filament_mass_g: float

    def __post_init__(self):
        if not self.payload_digest:
            raise ValueError("payload_digest must not be empty")
        if not self.unit_filament_mass_g > 0:
            raise ValueError("unit_filament_mass_g must be positive")

    def to_doc(self) -> dict:
        return {
            "model_id": self.model_id,
            "designer_id": self.designer_id,
            "display_name": self.display_name,
            "payload_digest": self.payload_digest,
            "required_material": self.required_material,
            "unit_filament_mass_g": _num(self.unit_filament_mass_g),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> CadModel:
        return cls(**{**doc, "unit_filament_mass_g": float(doc["unit_filament_mass_g"])})


@dataclass(frozen=True)
class PhaseRecord:
    """One finished production phase as reported by the printer agent."""

    phase: Phase
    started_at: float
    ended_at: float
    duration_s: float
    energy_wh: float

    def metrics(self) -> PhaseMetrics:
        return PhaseMetrics(self.phase, self.duration_s, self.energy_wh)

    def to_doc(self) -> dict:
        return {
            "phase": self.phase.value,
            "started_at": self.started_at,
            "ended_at": self.ended_at,
            "duration_s": _num(self.duration_s),
            "energy_wh": _num(self.energy_wh),
        }

    @classmethod
    def from_doc(cls, doc: dict) -> PhaseRecord:
        return cls(
            Phase(doc["phase"]),
            float(doc["started_at"]),
            float(doc["ended_at"]),
            float(doc["duration_s"]),
            float(doc["energy_wh"]),
        )


@dataclass(frozen=True)
class Order:
    order_id: str
    model_id: str
    webshop_id: str
    customer_ref: str
    sale_price: Money
    created_at: float
    customer_location: GeoPoint
    state: OrderState = OrderState.CREATED
    assigned_printer: str | None = None
    phase_log: tuple[PhaseRecord, ...] = ()
    job_id: str | None = None
    filament_g: float | None = None
    customization: str = ""
    failure_reason: str | None = None
    history: tuple[tuple[str, float], ...] = field(default=())

    def __post_init__(self):
        if self.phase_log and self.state not in PHASE_LOG_STATES:
            raise ValueError(f"phase log present in state {self.state.value}")

    def apply(self, event: OrderEvent, at: float, **changes) -> Order:
        """Move along a legal edge; raises ``IllegalTransition`` otherwise."""
        state = transition(self.state, event)
        return replace(self, state=state, history=self.history + ((state.value, at),), **changes)

    def with_phase(self, record: PhaseRecord) -> Order:
        return replace(self, phase_log=self.phase_log + (record,))

    def to_doc(self) -> dict:
        return {
            "order_id": self.order_id,
            "model_id": self.model_id,
            "webshop_id": self.webshop_id,
            "customer_ref": self.customer_ref,
            "sale_price": self.sale_price.format(),
            "created_at": self.created_at,
            "customer_location": self.customer_location.to_doc(),
            "state": self.state.value,
            "assigned_printer": self.assigned_printer,
            "phase_log": [r.to_doc() for r in self.phase_log],
            "job_id": self.job_id,
            "filament_g": self.filament_g,
            "customization": self.customization,
            "failure_reason": self.failure_reason,
            "history": [list(h) for h in self.history],
        }

    @classmethod
    def from_doc(cls, doc: dict) -> Order:
        return cls(
            order_id=doc["order_id"],
            model_id=doc["model_id"],
            webshop_id=doc["webshop_id"],
            customer_ref=doc["customer_ref"],
            sale_price=Money.eur(doc["sale_price"]),
            created_at=float(doc["created_at"]),
            customer_location=GeoPoint.from_doc(doc["customer_location"]),
            state=OrderState(doc["state"]),
            assigned_printer=doc.get("assigned_printer"),
            phase_log=tuple(PhaseRecord.from_doc(r) for r in doc.get("phase_log", [])),
            job_id=doc.get("job_id"),
            filament_g=doc.get("filament_g"),
            customization=doc.get("customization", ""),
            failure_reason=doc.get("failure_reason"),
            history=tuple((s, float(t)) for s, t in doc.get("history", [])),
        )


@dataclass(frozen=True)
class JobMetrics:
    """What a finished print actually consumed, as reported by its agent."""

    filament_g: float
    phases: tuple[PhaseMetrics, ...]

    def __post_init__(self):
        object.__setattr__(self, "phases", check_phases(self.phases))
        if not self.filament_g > 0:
            raise ValueError("filament_g must be positive")

    @property
    def total_duration_s(self) -> float:
        return sum(p.duration_s for p in self.phases)

    def to_doc(self) -> dict:
        return {"filament_g": _num(self.filament_g), "phases": [p.to_doc() for p in self.phases]}

    @classmethod
    def from_doc(cls, doc: dict) -> JobMetrics:
        return cls(float(doc["filament_g"]), tuple(PhaseMetrics.from_doc(p) for p in doc["phases"]))
