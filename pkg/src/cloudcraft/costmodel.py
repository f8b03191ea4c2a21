"""Per-unit cost accounting and weighted profit sharing.

All functions are pure. Two rounding modes are offered:

``PAPER``
    material cost rounded to cents, energy cost and production total to
    tenths of a cent, amortized fixed costs to tenths of a cent. This
    reproduces the published worked figures digit for digit.
``EXACT``
    everything kept to the micro-euro.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import Iterable, Mapping

from cloudcraft.domain.models import FilamentSpec, PhaseMetrics, PrinterProfile
from cloudcraft.domain.money import CENT, MICRO, MIL, Money, Number, to_fraction
from cloudcraft.errors import CloudCraftError


class RoundingMode(str, Enum):
    PAPER = "paper"
    EXACT = "exact"


class ZeroSpoolMass(CloudCraftError):
    pass


class ZeroVolume(CloudCraftError):
    pass


class BadWeights(CloudCraftError):
    pass


class ShareRole(str, Enum):
    # Declaration order is the tie-break order for residual cents.
    PLATFORM = "platform"
    PRINTER_OPERATOR = "printer_operator"
    WEBSHOP_OPERATOR = "webshop_operator"
    DESIGNER = "designer"


@dataclass(frozen=True)
class EnergyTariff:
    rate_per_kwh: Money = Money.eur("0.30")

    def __post_init__(self):
        if self.rate_per_kwh.micros < 0:
            raise ValueError("tariff must not be negative")


@dataclass(frozen=True)
class FixedCosts:
    webshop_monthly: Money = Money.eur("29.00")
    cloud_monthly: Money = Money.eur("175.00")
    monthly_volume: int = 100
    transaction_fee_rate: Fraction = Fraction(2, 100)
    transaction_fee_enabled: bool = False

    def __post_init__(self):
        object.__setattr__(self, "transaction_fee_rate", to_fraction(self.transaction_fee_rate))
        if self.monthly_volume < 1:
            raise ZeroVolume("monthly_volume must be at least 1")
        if not 0 <= self.transaction_fee_rate < 1:
            raise ValueError("transaction_fee_rate must be in [0, 1)")


@dataclass(frozen=True)
class CostBreakdown:
    material: Money
    energy: Money
    production: Money
    webshop: Money
    cloud: Money
    total: Money
    rounding_mode: RoundingMode

    def to_doc(self) -> dict:
        return {
            "material": self.material.format(),
            "energy": self.energy.format(),
            "production": self.production.format(),
            "webshop": self.webshop.format(),
            "cloud": self.cloud.format(),
            "total": self.total.format(),
            "rounding_mode": self.rounding_mode.value,
        }

    @classmethod
    def from_doc(cls, doc: dict) -> CostBreakdown:
        fields = {k: Money.eur(doc[k]) for k in ("material", "energy", "production", "webshop", "cloud", "total")}
        return cls(**fields, rounding_mode=RoundingMode(doc["rounding_mode"]))


@dataclass(frozen=True)
class ShareWeights:
    platform: Fraction = Fraction(40, 100)
    printer_operator: Fraction = Fraction(30, 100)
    webshop_operator: Fraction = Fraction(20, 100)
    designer: Fraction = Fraction(10, 100)

    def __post_init__(self):
        for role in ShareRole:
            object.__setattr__(self, role.value, to_fraction(getattr(self, role.value)))
        weights = self.as_dict().values()
        if any(w < 0 for w in weights) or sum(weights) != 1:
            raise BadWeights(f"weights must be non-negative and sum to 1, got {sum(weights)}")

    def as_dict(self) -> dict[ShareRole, Fraction]:
        return {role: getattr(self, role.value) for role in ShareRole}


@dataclass(frozen=True)
class ProfitAllocation:
    revenue: Money
    tco: Money
    profit: Money
    shares: Mapping[ShareRole, Money] = field(default_factory=dict)

    def __post_init__(self):
        if self.profit != self.revenue - self.tco:
            raise ValueError("profit must equal revenue minus TCO")
        if sum((s for s in self.shares.values()), Money.zero()) != self.profit:
            raise ValueError("shares must sum to profit")

    def to_doc(self) -> dict:
        return {
            "revenue": self.revenue.format(),
            "tco": self.tco.format(),
            "profit": self.profit.format(),
            "shares": {role.value: amount.format() for role, amount in self.shares.items()},
        }

    @classmethod
    def from_doc(cls, doc: dict) -> ProfitAllocation:
        return cls(
            revenue=Money.eur(doc["revenue"]),
            tco=Money.eur(doc["tco"]),
            profit=Money.eur(doc["profit"]),
            shares={ShareRole(r): Money.eur(a) for r, a in doc["shares"].items()},
        )


def material_cost(unit_mass_g: Number, spool: FilamentSpec, mode: RoundingMode = RoundingMode.PAPER) -> Money:
    spool_mass = to_fraction(spool.spool_mass_g)
    if spool_mass == 0:
        raise ZeroSpoolMass("spool mass is zero")
    exact = to_fraction(unit_mass_g) / spool_mass * spool.spool_price.as_fraction()
    return Money.from_fraction(exact, CENT if mode is RoundingMode.PAPER else MICRO)


def energy_cost_from_energies(phase_energies_wh: Iterable[Number], tariff: EnergyTariff) -> Money:
    energies = [to_fraction(e) for e in phase_energies_wh]
    if any(e < 0 for e in energies):
        raise ValueError("energies must be non-negative")
    return Money.from_fraction(sum(energies, Fraction(0)) / 1000 * tariff.rate_per_kwh.as_fraction())


def energy_cost_from_durations(phases: Iterable[tuple[Number, Number]], tariff: EnergyTariff) -> Money:
    """Energy cost from (duration in seconds, average power in W) pairs."""
    wh = Fraction(0)
    for duration_s, power_w in phases:
        duration, power = to_fraction(duration_s), to_fraction(power_w)
        if duration < 0 or power < 0:
            raise ValueError("durations and powers must be non-negative")
        wh += duration / 3600 * power
    return Money.from_fraction(wh / 1000 * tariff.rate_per_kwh.as_fraction())


def duration_power_pairs(phases: Iterable[PhaseMetrics]) -> list[tuple[Fraction, Fraction]]:
    """Exact (seconds, watts) pairs whose products give back each phase's energy."""
    pairs = []
    for p in phases:
        duration = to_fraction(p.duration_s)
        power = to_fraction(p.energy_wh) * 3600 / duration if duration else Fraction(0)
        pairs.append((duration, power))
    return pairs


def _production(material: Money, energy_exact: Money, mode: RoundingMode) -> tuple[Money, Money]:
    """(energy, production) for already-rounded material cost."""
    if mode is RoundingMode.PAPER:
        # Material is a whole number of cents, so rounding the sum to mils
        # is the same as rounding energy to mils first.
        energy = energy_exact.quantize(MIL)
    else:
        energy = energy_exact
    return energy, material + energy


def production_cost_from_metrics(
    unit_mass_g: Number,
    spool: FilamentSpec,
    phases: Iterable[PhaseMetrics],
    tariff: EnergyTariff,
    mode: RoundingMode = RoundingMode.PAPER,
) -> tuple[Money, Money, Money]:
    """(material, energy, production) for one produced unit."""
    material = material_cost(unit_mass_g, spool, mode)
    energy_exact = energy_cost_from_energies([p.energy_wh for p in phases], tariff)
    energy, production = _production(material, energy_exact, mode)
    return material, energy, production


def production_cost(profile: PrinterProfile, tariff: EnergyTariff, mode: RoundingMode = RoundingMode.PAPER) -> Money:
    return production_cost_from_metrics(
        profile.unit_filament_mass_g, profile.filament, profile.phases, tariff, mode
    )[2]


def amortized_fixed_cost(monthly: Money, volume: int, mode: RoundingMode = RoundingMode.PAPER) -> Money:
    if volume < 1:
        raise ZeroVolume("volume must be at least 1")
    return Money.from_fraction(monthly.as_fraction() / volume, MIL if mode is RoundingMode.PAPER else MICRO)


def breakdown(
    unit_mass_g: Number,
    spool: FilamentSpec,
    phases: Iterable[PhaseMetrics],
    tariff: EnergyTariff,
    fixed: FixedCosts,
    mode: RoundingMode = RoundingMode.PAPER,
    sale_price: Money | None = None,
) -> CostBreakdown:
    material, energy, production = production_cost_from_metrics(unit_mass_g, spool, phases, tariff, mode)
    webshop = amortized_fixed_cost(fixed.webshop_monthly, fixed.monthly_volume, mode)
    if fixed.transaction_fee_enabled:
        if sale_price is None:
            raise ValueError("transaction fee enabled but no sale price given")
        webshop += sale_price.scale(fixed.transaction_fee_rate, CENT if mode is RoundingMode.PAPER else MICRO)
    cloud = amortized_fixed_cost(fixed.cloud_monthly, fixed.monthly_volume, mode)
    return CostBreakdown(
        material=material,
        energy=energy,
        production=production,
        webshop=webshop,
        cloud=cloud,
        total=webshop + cloud + production,
        rounding_mode=mode,
    )


def total_cost(
    profile: PrinterProfile,
    tariff: EnergyTariff,
    fixed: FixedCosts,
    mode: RoundingMode = RoundingMode.PAPER,
    sale_price: Money | None = None,
) -> CostBreakdown:
    return breakdown(
        profile.unit_filament_mass_g, profile.filament, profile.phases, tariff, fixed, mode, sale_price
    )


def monthly_tco(unit_total: Money, volume: int) -> Money:
    if volume < 1:
        raise ZeroVolume("volume must be at least 1")
    return unit_total * volume


def monthly_profit(unit_price: Money, volume: int, tco: Money) -> Money:
    return unit_price * volume - tco


def split_largest_remainder(amount: Money, weights: ShareWeights, quantum: int = CENT) -> dict[ShareRole, Money]:
    """Split ``amount`` into multiples of ``quantum`` proportional to the weights.

    Each share starts at floor(weight * amount); the quanta left over go one
    at a time to the largest fractional remainders, ties by role order.
    Whatever is finer than ``quantum`` in ``amount`` itself lands on the
    share that takes the last residual quantum (or the first role).
    """
    units, rest = divmod(amount.micros, quantum)
    exact = {role: w * units for role, w in weights.as_dict().items()}
    floors = {role: v.numerator // v.denominator for role, v in exact.items()}
    leftover = units - sum(floors.values())
    order = sorted(ShareRole, key=lambda r: (-(exact[r] - floors[r]), list(ShareRole).index(r)))
    for role in order[:leftover]:
        floors[role] += 1
    shares = {role: Money(floors[role] * quantum) for role in ShareRole}
    if rest:
        sink = order[leftover - 1] if leftover else order[0]
        shares[sink] = shares[sink] + Money(rest)
    return shares


def allocate_shares(
    profit: Money,
    weights: ShareWeights | None = None,
    *,
    revenue: Money | None = None,
    tco: Money | None = None,
    quantum: int = CENT,
) -> ProfitAllocation:
    weights = weights or ShareWeights()
    if revenue is None and tco is None:
        revenue, tco = profit, Money.zero()
    elif revenue is None:
        revenue = tco + profit
    elif tco is None:
        tco = revenue - profit
    return ProfitAllocation(
        revenue=revenue, tco=tco, profit=profit, shares=split_largest_remainder(profit, weights, quantum)
    )
