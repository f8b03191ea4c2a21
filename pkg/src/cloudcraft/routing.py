"""Nearest-capable-printer selection."""
from __future__ import annotations

import math
from typing import Callable, Iterable, Protocol, Sequence

from cloudcraft.domain.models import GeoPoint, PrinterProfile
from cloudcraft.errors import Conflict

EARTH_RADIUS_M = 6_371_000.0


class NoCapablePrinter(Conflict):
    def __init__(self, message: str, order=None):
        self.order = order
        super().__init__(message)

    def details(self) -> dict:
        # The order stays Created; its id lets the shop retry later.
        return {"order_id": self.order.order_id} if self.order is not None else {}


class PrinterView(Protocol):
    printer_id: str
    availability: str
    queue_depth: int
    profile: PrinterProfile


def haversine_m(a: GeoPoint, b: GeoPoint) -> float:
    phi1, phi2 = math.radians(a.latitude), math.radians(b.latitude)
    dphi = phi2 - phi1
    dlam = math.radians(b.longitude - a.longitude)
    h = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlam / 2) ** 2
    return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(h)))


def fits_build_volume(profile: PrinterProfile, unit_mass_g: float) -> bool:
    # Build-volume data is not modelled yet; every printer is assumed large enough.
    return True


def is_capable(printer: PrinterView, required_material: str, unit_mass_g: float) -> bool:
    return (
        str(printer.availability) != "Offline"
        and required_material in printer.profile.capabilities
        and fits_build_volume(printer.profile, unit_mass_g)
    )


def select_printer(
    required_material: str,
    unit_mass_g: float,
    customer_location: GeoPoint,
    registry: Iterable[PrinterView],
) -> str:
    """Closest capable printer; ties go to the shorter queue, then the smaller id."""
    best = None
    for printer in registry:
        if not is_capable(printer, required_material, unit_mass_g):
            continue
        key = (haversine_m(customer_location, printer.profile.location), printer.queue_depth, printer.printer_id)
        if best is None or key < best:
            best = key
    if best is None:
        raise NoCapablePrinter(f"no online printer can print {required_material!r}")
    return best[2]


Router = Callable[[str, float, GeoPoint, Sequence[PrinterView]], str]
