"""Repeated simultaneous ring orders, one per printer, driven over the REST gateway.

Without a gateway address the whole platform and one agent per printer are
started in this process on ephemeral ports.
"""
from __future__ import annotations

import asyncio
import logging
import time
import uuid
from dataclasses import dataclass, field
from typing import Callable

import httpx

from cloudcraft.config import Config
from cloudcraft.costmodel import CostBreakdown, ShareRole
from cloudcraft.domain import Money, Order, OrderState, Store
from cloudcraft.errors import CloudCraftError
from cloudcraft.printer_agent import AgentConfig, run_agent
from cloudcraft import reports

log = logging.getLogger(__name__)

SHOP, DESIGNER, OPERATOR = "experiment-shop", "experiment-designer", "experiment-sme"
USER_CREDENTIAL = "experiment-pass"
TERMINAL = {OrderState.BILLED.value, OrderState.FAILED.value, OrderState.CANCELLED.value}


class ExperimentError(CloudCraftError):
    pass


@dataclass
class ExperimentOptions:
    runs: int = 50
    printers: list[str] = field(default_factory=list)
    price: Money | None = None
    time_scale: float = 600.0
    jitter: float = 0.0
    seed: int | None = None
    gateway: str | None = None
    cloud_gateway: str | None = None
    order_timeout_s: float = 120.0
    poll_s: float = 0.05
    store: Store | None = None


@dataclass
class ExperimentResult:
    report: dict
    orders: list[Order]
    ok: bool


class _Client:
    """Point-of-sale stub: a thin authenticated wrapper over the gateway."""

    def __init__(self, http: httpx.AsyncClient):
        self.http = http
        self.tokens: dict[str, str] = {}

    async def call(self, method: str, path: str, *, as_user: str | None = None, ok=(200, 201), **kw) -> httpx.Response:
        headers = {"Authorization": f"Bearer {self.tokens[as_user]}"} if as_user else {}
        resp = await self.http.request(method, path, headers=headers, **kw)
        if resp.status_code not in ok:
            raise ExperimentError(f"{method} {path} -> {resp.status_code} {resp.text}")
        return resp

    async def bootstrap_user(self, name: str, role: str) -> None:
        await self.call("POST", "/auth/register", json={"name": name, "credential": USER_CREDENTIAL, "role": role}, ok=(201, 409))
        resp = await self.call("POST", "/auth/login", json={"name": name, "credential": USER_CREDENTIAL})
        self.tokens[name] = resp.json()["token"]


async def _bootstrap(client: _Client, config: Config, printers: list[str]) -> None:
    for name, role in ((SHOP, "WebshopOperator"), (DESIGNER, "Designer"), (OPERATOR, "PrinterOperator")):
        await client.bootstrap_user(name, role)
    ring = config.get("ring")
    await client.call(
        "POST",
        "/models",
        as_user=DESIGNER,
        ok=(201, 409),
        json={
            "display_name": ring["display_name"],
            "payload": f"ring:{ring['unit_filament_mass_g']}g",
            "required_material": ring["required_material"],
            "unit_filament_mass_g": ring["unit_filament_mass_g"],
            "model_id": ring["model_id"],
        },
    )
    profiles = config.profiles()
    credential = str(config.get("agent", "credential"))
    for pid in printers:
        await client.call(
            "POST", "/printers", as_user=OPERATOR, ok=(201, 409),
            json={"profile": profiles[pid].to_doc(), "credential": credential},
        )


async def _wait_idle(client: _Client, printers: list[str], timeout_s: float) -> None:
    deadline = time.monotonic() + timeout_s
    while True:
        listing = (await client.call("GET", "/printers", as_user=SHOP)).json()["printers"]
        state = {p["printer_id"]: p["availability"] for p in listing}
        if all(state.get(pid) == "Idle" for pid in printers):
            return
        if time.monotonic() > deadline:
            raise ExperimentError(f"printers not idle after {timeout_s}s: {state}")
        await asyncio.sleep(0.05)


async def _place_and_wait(client: _Client, order_id: str, body: dict, options: ExperimentOptions) -> dict:
    resp = await client.call("POST", "/orders", as_user=SHOP, json={**body, "order_id": order_id}, ok=(201, 409))
    doc = resp.json()
    if resp.status_code == 409:
        return {"order_id": order_id, "state": "Rejected", "failure_reason": doc.get("message")}
    deadline = time.monotonic() + options.order_timeout_s
    while doc["state"] not in TERMINAL:
        if time.monotonic() > deadline:
            return {**doc, "state": "Timeout"}
        await asyncio.sleep(options.poll_s)
        doc = (await client.call("GET", f"/orders/{order_id}", as_user=SHOP)).json()
    return doc


def _ledger_totals(transactions: dict[str, dict]) -> dict:
    by_role = {role: Money.zero() for role in ShareRole}
    revenue = total = profit = Money.zero()
    conserved = True
    for txn in transactions.values():
        shares = {ShareRole(r): Money.eur(a) for r, a in txn["allocation"]["shares"].items()}
        for role, amount in shares.items():
            by_role[role] += amount
        t_revenue, t_total = Money.eur(txn["revenue"]), Money.eur(txn["breakdown"]["total"])
        conserved &= t_revenue == t_total + sum(shares.values(), Money.zero())
        revenue, total, profit = revenue + t_revenue, total + t_total, profit + Money.eur(txn["allocation"]["profit"])
    return {
        "transactions": len(transactions),
        "revenue": revenue.format(),
        "total_cost": total.format(),
        "profit": profit.format(),
        "by_role": {role.value: amount.format() for role, amount in by_role.items()},
        "conserved": conserved,
    }


async def run_experiment(
    config: Config, options: ExperimentOptions, *, announce: Callable[[str], None] = lambda _: None
) -> ExperimentResult:
    profiles = config.profiles()
    printers = options.printers or list(profiles)
    unknown = [p for p in printers if p not in profiles]
    if unknown:
        raise ExperimentError(f"unknown printers: {', '.join(unknown)}")
    if options.runs < 1:
        raise ExperimentError("runs must be at least 1")
    price = options.price or config.sale_price

    platform = None
    if options.gateway is None:
        from cloudcraft.platform import Platform

        platform = Platform(config, store=options.store)
        await platform.start(api_port=0, cloud_port=0, announce=announce)
        base_url, cloud = platform.api_url, platform.cloud_url
    else:
        base_url, cloud = options.gateway.rstrip("/"), options.cloud_gateway

    stop = asyncio.Event()
    agents: list[asyncio.Task] = []
    started = time.monotonic()
    try:
        async with httpx.AsyncClient(base_url=base_url, timeout=30) as http:
            client = _Client(http)
            await _bootstrap(client, config, printers)
            if cloud is not None:
                for pid in printers:
                    agent = AgentConfig(
                        pid, profiles[pid], cloud, credential=str(config.get("agent", "credential")),
                        time_scale=options.time_scale, meter_interval_s=config.number("agent", "meter_interval_s"),
                        jitter=options.jitter, seed=options.seed,
                    )
                    agents.append(asyncio.create_task(run_agent(agent, stop=stop)))
            await _wait_idle(client, printers, timeout_s=30)
            announce(f"experiment: {options.runs} runs x {len(printers)} printers at {options.time_scale:g}x")

            tag = uuid.uuid4().hex[:6]
            docs: list[dict] = []
            for run in range(options.runs):
                batch = [
                    _place_and_wait(
                        client,
                        f"exp-{tag}-{run:03d}-{pid}",
                        {
                            "model_id": config.get("ring", "model_id"),
                            "sale_price": price.format(),
                            "customer_ref": f"run-{run:03d}",
                            "latitude": profiles[pid].location.latitude,
                            "longitude": profiles[pid].location.longitude,
                        },
                        options,
                    )
                    for pid in printers
                ]
                results = await asyncio.gather(*batch)
                docs.extend(results)
                bad = [d for d in results if d["state"] != OrderState.BILLED.value]
                announce(f"run {run + 1}/{options.runs}: {len(results) - len(bad)} billed" + (f", {len(bad)} not" if bad else ""))

            transactions = {}
            for d in docs:
                if d["state"] == OrderState.BILLED.value:
                    transactions[d["order_id"]] = (
                        await client.call("GET", f"/billing/transactions/{d['order_id']}", as_user=SHOP)
                    ).json()
    finally:
        stop.set()
        for task in agents:
            try:
                await asyncio.wait_for(task, 5)
            except (asyncio.TimeoutError, CloudCraftError, OSError):
                task.cancel()
        if platform is not None:
            await platform.stop()

    orders = [Order.from_doc(d) for d in docs if d["state"] in TERMINAL]
    breakdowns = {oid: CostBreakdown.from_doc(t["breakdown"]) for oid, t in transactions.items()}
    records = reports.job_records(orders, breakdowns)
    failures = [
        {"run": i // len(printers), "printer_id": printers[i % len(printers)], "state": d["state"], "reason": d.get("failure_reason")}
        for i, d in enumerate(docs)
        if d["state"] != OrderState.BILLED.value
    ]
    report = {
        "runs": options.runs,
        "printers": printers,
        "price": price.format(),
        "time_scale": options.time_scale,
        "jitter": options.jitter,
        "seed": options.seed,
        "orders": {"placed": len(docs), "billed": len(transactions), "failures": failures},
        "per_printer": reports.printer_aggregates(records, printers),
        "table2": reports.table2(records, profiles) if records else {"printers": []},
        "ledger": _ledger_totals(transactions),
        "timing": {"wall_s": round(time.monotonic() - started, 3)},
    }
    return ExperimentResult(report, orders, ok=not failures)
