"""Cost, production and ledger reports in text, JSON or CSV form.

Every report is first built as a plain document (dicts, lists, strings) and
only then rendered, so the JSON form is the canonical one.
"""
from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

from cloudcraft import costmodel as cm
from cloudcraft.costmodel import CostBreakdown, EnergyTariff, FixedCosts, RoundingMode, ShareRole, ShareWeights
from cloudcraft.domain import Money, OrderState
from cloudcraft.domain.models import PHASE_ORDER, Order, Phase, PhaseMetrics, PrinterProfile, format_duration
from cloudcraft.domain.money import MICRO, to_fraction
from cloudcraft.errors import CloudCraftError, NotFound

FORMATS = ("text", "json", "csv")


class EmptyLedger(NotFound):
    pass


class NoRecordedJobs(NotFound):
    pass


class UnknownFormat(CloudCraftError):
    pass


@dataclass(frozen=True)
class JobRecord:
    """One billed order with the metrics it was costed from."""

    order_id: str
    printer_id: str
    phases: tuple[PhaseMetrics, ...]
    filament_g: float
    breakdown: CostBreakdown

    @property
    def duration_s(self) -> float:
        return float(sum(to_fraction(p.duration_s) for p in self.phases))

    @property
    def energy_wh(self) -> float:
        return float(sum(to_fraction(p.energy_wh) for p in self.phases))


def job_records(orders: Iterable[Order], breakdowns: Mapping[str, CostBreakdown]) -> list[JobRecord]:
    out = []
    for order in orders:
        if order.state is OrderState.BILLED and order.order_id in breakdowns:
            out.append(
                JobRecord(
                    order.order_id,
                    order.assigned_printer,
                    tuple(r.metrics() for r in order.phase_log),
                    float(order.filament_g or 0),
                    breakdowns[order.order_id],
                )
            )
    return out


def mean_money(values: Sequence[Money]) -> Money:
    return Money.from_fraction(sum((v.as_fraction() for v in values), Fraction(0)) / len(values), MICRO)


def _mean(values: Sequence[float]) -> float:
    return float(sum(to_fraction(v) for v in values) / len(values))


def _std(values: Sequence[float]) -> float:
    return statistics.pstdev(values) if len(values) > 1 else 0.0


def _ordered(printer_ids: Iterable[str], preferred: Sequence[str]) -> list[str]:
    ids = set(printer_ids)
    return [p for p in preferred if p in ids] + sorted(ids - set(preferred))


def _group(records: Iterable[JobRecord]) -> dict[str, list[JobRecord]]:
    groups: dict[str, list[JobRecord]] = {}
    for r in records:
        groups.setdefault(r.printer_id, []).append(r)
    return groups


# Per-printer aggregates -----------------------------------------------------------

def printer_aggregates(records: Iterable[JobRecord], order: Sequence[str] = ()) -> dict[str, dict]:
    groups = _group(records)
    out = {}
    for pid in _ordered(groups, order):
        rs = groups[pid]
        durations = [r.duration_s for r in rs]
        energies = [r.energy_wh for r in rs]
        production = [r.breakdown.production for r in rs]
        out[pid] = {
            "n": len(rs),
            "mean_duration_s": _mean(durations),
            "std_duration_s": _std(durations),
            "mean_energy_wh": _mean(energies),
            "std_energy_wh": _std(energies),
            "mean_production_cost": mean_money(production).format(3),
            "std_production_cost": f"{_std([float(p.as_fraction()) for p in production]):.6f}",
        }
    return out


# Table 2 --------------------------------------------------------------------------

def table2(records: Iterable[JobRecord], profiles: Mapping[str, PrinterProfile] | None = None) -> dict:
    """Mean time and energy per phase, material on the Print row, production total."""
    profiles = profiles or {}
    groups = _group(records)
    if not groups:
        raise NoRecordedJobs("no billed jobs recorded yet")
    printers = []
    for pid in _ordered(groups, list(profiles)):
        rs = groups[pid]
        phases = []
        for i, phase in enumerate(PHASE_ORDER):
            duration = _mean([r.phases[i].duration_s for r in rs])
            phases.append(
                {
                    "phase": phase.value,
                    "time": format_duration(duration),
                    "duration_s": duration,
                    "energy_wh": _mean([r.phases[i].energy_wh for r in rs]),
                    "material": mean_money([r.breakdown.material for r in rs]).format() if phase is Phase.PRINT else "0",
                }
            )
        profile = profiles.get(pid)
        printers.append(
            {
                "printer_id": pid,
                "model_name": profile.model_name if profile else pid,
                "n": len(rs),
                "phases": phases,
                "total": mean_money([r.breakdown.production for r in rs]).format(3),
            }
        )
    return {"printers": printers}


def table2_from_profiles(
    profiles: Mapping[str, PrinterProfile], tariff: EnergyTariff, fixed: FixedCosts, mode: RoundingMode
) -> dict:
    """The same table computed from the static profiles instead of recorded jobs."""
    records = [
        JobRecord(f"profile-{pid}", pid, p.phases, p.unit_filament_mass_g, cm.total_cost(p, tariff, fixed, mode))
        for pid, p in profiles.items()
    ]
    doc = table2(records, profiles)
    for printer in doc["printers"]:
        printer["n"] = 0
    return doc


def render_table2(doc: dict, fmt: str) -> str:
    rows = [
        (p["model_name"], ph["phase"], ph["time"], f"{ph['energy_wh']:.2f}", ph["material"], p["total"] if i == 0 else "")
        for p in doc["printers"]
        for i, ph in enumerate(p["phases"])
    ]
    header = ("Printer", "Phase", "Time", "Energy (Wh)", "Material (EUR)", "Total (EUR)")
    if fmt == "json":
        return _json(doc)
    if fmt == "csv":
        flat = [
            (p["printer_id"], p["model_name"], ph["phase"], ph["time"], ph["duration_s"], ph["energy_wh"], ph["material"], p["total"], p["n"])
            for p in doc["printers"]
            for ph in p["phases"]
        ]
        return _csv(("printer_id", "model_name", "phase", "time", "duration_s", "energy_wh", "material_eur", "total_eur", "n"), flat)
    return _table(header, rows)


# Ledger ---------------------------------------------------------------------------

def ledger(balances: Mapping[tuple[ShareRole, str], Money]) -> dict:
    if not balances:
        raise EmptyLedger("the ledger has no entries")
    order = list(ShareRole)
    rows = sorted(balances.items(), key=lambda kv: (order.index(kv[0][0]), kv[0][1]))
    total = sum(balances.values(), Money.zero())
    return {
        "balances": [{"role": role.value, "stakeholder_id": sid, "balance": amount.format()} for (role, sid), amount in rows],
        "total": total.format(),
    }


def render_ledger(doc: dict, fmt: str) -> str:
    if fmt == "json":
        return _json(doc)
    rows = [(b["role"], b["stakeholder_id"], b["balance"]) for b in doc["balances"]]
    if fmt == "csv":
        return _csv(("role", "stakeholder_id", "balance_eur"), rows)
    return _table(("Role", "Stakeholder", "Balance (EUR)"), rows + [("total", "", doc["total"])])


# Cost model -----------------------------------------------------------------------

def costs(
    profile: PrinterProfile,
    tariff: EnergyTariff,
    fixed: FixedCosts,
    weights: ShareWeights,
    mode: RoundingMode,
    price: Money,
) -> dict:
    """Unit cost breakdown followed by the monthly economics at ``price``."""
    unit = cm.total_cost(profile, tariff, fixed, mode, sale_price=price)
    tco = cm.monthly_tco(unit.total, fixed.monthly_volume)
    profit = cm.monthly_profit(price, fixed.monthly_volume, tco)
    allocation = cm.allocate_shares(profit, weights, revenue=price * fixed.monthly_volume, tco=tco)
    places = 6 if mode is RoundingMode.EXACT else 3
    return {
        "printer_id": profile.printer_id,
        "model_name": profile.model_name,
        "mode": mode.value,
        "price": price.format(),
        "volume": fixed.monthly_volume,
        "unit": {
            "material": unit.material.format(),
            "energy": unit.energy.format(places),
            "production": unit.production.format(places),
            "webshop": unit.webshop.format(places),
            "cloud": unit.cloud.format(places),
            "total": unit.total.format(places),
        },
        "monthly": {
            "revenue": allocation.revenue.format(),
            "tco": tco.format(),
            "profit": profit.format(),
            "shares": {role.value: allocation.shares[role].format() for role in ShareRole},
        },
    }


def render_costs(doc: dict, fmt: str) -> str:
    if fmt == "json":
        return _json(doc)
    rows = [("unit " + k, v) for k, v in doc["unit"].items()]
    rows += [("monthly " + k, v) for k, v in doc["monthly"].items() if k != "shares"]
    rows += [("share " + k, v) for k, v in doc["monthly"]["shares"].items()]
    if fmt == "csv":
        return _csv(("item", "eur"), rows)
    title = f"{doc['model_name']} ({doc['printer_id']}), {doc['mode']} mode, price {doc['price']} x {doc['volume']}/month"
    return title + "\n" + _table(("Item", "EUR"), rows, right=(1,))


def summary(
    profiles: Mapping[str, PrinterProfile],
    tariff: EnergyTariff,
    fixed: FixedCosts,
    weights: ShareWeights,
    mode: RoundingMode,
    price: Money,
) -> dict:
    """Monthly TCO, profit and share ranges across the given printers."""
    per = {pid: costs(p, tariff, fixed, weights, mode, price) for pid, p in profiles.items()}

    def span(values: Iterable[str]) -> list[str]:
        amounts = sorted(Money.eur(v) for v in values)
        return [amounts[0].format(), amounts[-1].format()]

    return {
        "price": price.format(),
        "volume": fixed.monthly_volume,
        "mode": mode.value,
        "printers": {
            pid: {"unit_total": d["unit"]["total"], "tco": d["monthly"]["tco"], "profit": d["monthly"]["profit"], "shares": d["monthly"]["shares"]}
            for pid, d in per.items()
        },
        "ranges": {
            "unit_total": span(d["unit"]["total"] for d in per.values()),
            "tco": span(d["monthly"]["tco"] for d in per.values()),
            "profit": span(d["monthly"]["profit"] for d in per.values()),
            "shares": {role.value: span(d["monthly"]["shares"][role.value] for d in per.values()) for role in ShareRole},
        },
    }


def render_summary(doc: dict, fmt: str) -> str:
    if fmt == "json":
        return _json(doc)
    rows = [(k, *span) for k, span in doc["ranges"].items() if k != "shares"]
    rows += [("share " + k, lo, hi) for k, (lo, hi) in doc["ranges"]["shares"].items()]
    if fmt == "csv":
        return _csv(("item", "min_eur", "max_eur"), rows)
    title = f"price {doc['price']} x {doc['volume']}/month, {doc['mode']} mode, {len(doc['printers'])} printers"
    return title + "\n" + _table(("Item", "Min (EUR)", "Max (EUR)"), rows, right=(1, 2))


# Rendering helpers ----------------------------------------------------------------

def check_format(fmt: str) -> str:
    if fmt not in FORMATS:
        raise UnknownFormat(f"format must be one of {', '.join(FORMATS)}")
    return fmt


def _json(doc) -> str:
    return json.dumps(doc, indent=2)


def _csv(header: Sequence[str], rows: Iterable[Sequence]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    return buf.getvalue().rstrip("\n")


def _table(header: Sequence[str], rows: Sequence[Sequence], right: Sequence[int] = ()) -> str:
    cells = [tuple(str(c) for c in header)] + [tuple(str(c) for c in r) for r in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(header))]

    def line(row):
        return "  ".join(c.rjust(w) if i in right else c.ljust(w) for i, (c, w) in enumerate(zip(row, widths))).rstrip()

    rule = "  ".join("-" * w for w in widths)
    return "\n".join([line(cells[0]), rule] + [line(r) for r in cells[1:]])
