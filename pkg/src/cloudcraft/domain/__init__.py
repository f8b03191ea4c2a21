from cloudcraft.domain.clock import Clock, ManualClock, SystemClock
from cloudcraft.domain.lifecycle import IllegalTransition, OrderEvent, OrderState, transition
from cloudcraft.domain.money import Money
from cloudcraft.domain.models import (
    CadModel,
    FilamentSpec,
    GeoPoint,
    JobMetrics,
    Order,
    Phase,
    PhaseMetrics,
    PhaseRecord,
    PrinterProfile,
)
from cloudcraft.domain.store import Namespace, NotFoundError, Store, StorageUnavailable, VersionConflict

__all__ = [
    "CadModel",
    "Clock",
    "FilamentSpec",
    "GeoPoint",
    "IllegalTransition",
    "JobMetrics",
    "ManualClock",
    "Money",
    "Namespace",
    "NotFoundError",
    "Order",
    "OrderEvent",
    "OrderState",
    "Phase",
    "PhaseMetrics",
    "PhaseRecord",
    "PrinterProfile",
    "StorageUnavailable",
    "Store",
    "SystemClock",
    "VersionConflict",
    "transition",
]
