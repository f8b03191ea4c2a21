"""Command line entry point.

Exit codes: 0 on success, 1 when an order or run fails, 2 on configuration
or usage errors.
"""
from __future__ import annotations

import asyncio
import dataclasses
import json
import logging
import sys
from pathlib import Path

import click

from cloudcraft import reports
from cloudcraft.config import Config, load_config, load_profile_file
from cloudcraft.costmodel import EnergyTariff, RoundingMode
from cloudcraft.domain import Money, Namespace, Order, Store
from cloudcraft.errors import BadConfig, CloudCraftError

EXIT_OK, EXIT_FAILURE, EXIT_CONFIG = 0, 1, 2

log = logging.getLogger("cloudcraft")


class UnknownProfile(CloudCraftError):
    pass


def _fail(message: str, code: int) -> None:
    click.echo(f"error: {message}", err=True)
    sys.exit(code)


def _money(value: str | None, what: str) -> Money | None:
    if value is None:
        return None
    try:
        return Money.eur(value)
    except (ValueError, ArithmeticError):
        raise click.BadParameter(f"not a euro amount: {value!r}", param_hint=what) from None


class _State:
    def __init__(self, config_path: str | None, log_level: str | None, as_json: bool):
        self.config_path = config_path
        self.log_level = log_level
        self.as_json = as_json
        self._config: Config | None = None

    @property
    def config(self) -> Config:
        if self._config is None:
            try:
                self._config = load_config(self.config_path)
            except BadConfig as exc:
                _fail(f"config: {exc}", EXIT_CONFIG)
            level = self.log_level or str(self._config.get("platform", "log_level", default="WARNING"))
            logging.basicConfig(level=level.upper(), format="%(asctime)s %(levelname)s %(name)s: %(message)s")
        return self._config

    def store(self, path: str | None) -> Store:
        return Store(path or self.config.get("platform", "store"))


pass_state = click.make_pass_decorator(_State)


@click.group()
@click.option("--config", "config_path", type=click.Path(dir_okay=False), help="YAML config file.")
@click.option("--log-level", type=click.Choice(["DEBUG", "INFO", "WARNING", "ERROR"], case_sensitive=False))
@click.option("--json", "as_json", is_flag=True, help="Emit JSON instead of text.")
@click.pass_context
def main(ctx: click.Context, config_path: str | None, log_level: str | None, as_json: bool) -> None:
    """Cloud crafting platform: serve, simulate printers, run experiments, report."""
    ctx.obj = _State(config_path, log_level, as_json)


# serve ----------------------------------------------------------------------------

@main.command()
@pass_state
def serve(state: _State) -> None:
    """Run registry, services and both gateways until interrupted."""
    from cloudcraft.platform import Platform, PortInUse

    config = state.config
    try:
        platform = Platform(config)
        asyncio.run(platform.serve_forever(announce=lambda line: click.echo(line)))
    except PortInUse as exc:
        _fail(str(exc), EXIT_CONFIG)
    except KeyboardInterrupt:
        pass


# agent ----------------------------------------------------------------------------

@main.command()
@click.option("--printer", "printer_id", help="Printer profile to simulate (default: agent.printer_id).")
@click.option("--gateway", help="Cloud gateway host:port (default: agent.gateway).")
@click.option("--credential", envvar="CLOUDCRAFT_AGENT_CREDENTIAL", help="Printer credential (default: agent.credential).")
@click.option("--time-scale", type=float, help="Simulated seconds per wall second.")
@click.option("--jitter", type=float, help="Fractional noise on durations and energies, in [0, 0.5).")
@click.option("--seed", type=int)
@click.option("--fail-at-phase", type=click.Choice(["PrePrint", "Print", "PostPrint"]), help="Inject a failure.")
@click.option("--idle-power", "idle_power_w", type=float, help="Controller draw between jobs in W (reported, not billed).")
@pass_state
def agent(state: _State, printer_id, gateway, credential, time_scale, jitter, seed, fail_at_phase, idle_power_w) -> None:
    """Connect one simulated printer to the cloud gateway."""
    from cloudcraft.printer_agent import AgentConfig, AgentRejected, run_agent

    config = state.config
    printer_id = printer_id or config.get("agent", "printer_id")
    profiles = config.profiles()
    if printer_id not in profiles:
        _fail(f"unknown printer profile {printer_id!r}", EXIT_CONFIG)
    ttl = config.number("cloud_gateway", "agent_ttl_s")
    beat = config.get("cloud_gateway", "heartbeat_interval_s")
    try:
        agent_config = AgentConfig(
            printer_id,
            profiles[printer_id],
            gateway or str(config.get("agent", "gateway")),
            credential=credential or str(config.get("agent", "credential")),
            time_scale=time_scale if time_scale is not None else config.number("agent", "time_scale"),
            meter_interval_s=config.number("agent", "meter_interval_s"),
            jitter=jitter if jitter is not None else config.number("agent", "jitter"),
            seed=seed if seed is not None else config.get("agent", "seed"),
            fail_at_phase=fail_at_phase,
            heartbeat_interval_s=float(beat) if beat else ttl / 3,
            idle_power_w=idle_power_w if idle_power_w is not None else config.number("agent", "idle_power_w"),
        )
    except ValueError as exc:
        _fail(str(exc), EXIT_CONFIG)
    try:
        asyncio.run(run_agent(agent_config))
    except AgentRejected as exc:
        _fail(f"gateway rejected {printer_id}: {exc}", EXIT_FAILURE)
    except KeyboardInterrupt:
        pass


# costs ----------------------------------------------------------------------------

def _resolve_profile(config: Config, name: str):
    profiles = config.profiles()
    if name in profiles:
        return profiles[name]
    path = Path(name)
    if path.is_file():
        loaded = load_profile_file(path)
        return next(iter(loaded.values()))
    raise UnknownProfile(f"unknown profile {name!r}; bundled: {', '.join(profiles)}")


@main.command()
@click.argument("profile")
@click.option("--mode", type=click.Choice([m.value for m in RoundingMode]), help="Rounding mode.")
@click.option("--volume", type=click.IntRange(min=1), help="Units per month.")
@click.option("--price", help="Sale price per unit in EUR.")
@click.option("--tariff", help="Energy tariff in EUR per kWh.")
@pass_state
def costs(state: _State, profile: str, mode, volume, price, tariff) -> None:
    """Unit cost breakdown, monthly TCO, profit and share table for PROFILE (name or file)."""
    config = state.config
    try:
        printer = _resolve_profile(config, profile)
    except (UnknownProfile, BadConfig) as exc:
        _fail(str(exc), EXIT_CONFIG)
    fixed = config.fixed_costs
    if volume is not None:
        fixed = dataclasses.replace(fixed, monthly_volume=volume)
    rate = _money(tariff, "--tariff")
    doc = reports.costs(
        printer,
        EnergyTariff(rate) if rate is not None else config.tariff,
        fixed,
        config.weights,
        RoundingMode(mode) if mode else config.mode,
        _money(price, "--price") or config.sale_price,
    )
    click.echo(reports.render_costs(doc, "json" if state.as_json else "text"))


# experiment -----------------------------------------------------------------------

@main.command()
@click.option("--runs", type=click.IntRange(min=1), help="Number of runs (default: experiment.runs).")
@click.option("--printers", help="Comma-separated printer ids (default: all).")
@click.option("--price", help="Sale price per ring in EUR.")
@click.option("--time-scale", type=float, help="Simulated seconds per wall second.")
@click.option("--jitter", type=float, default=0.0, show_default=True)
@click.option("--seed", type=int)
@click.option("--gateway", help="Use a running platform at this API gateway URL.")
@click.option("--cloud-gateway", help="With --gateway: also start agents against this host:port.")
@click.option("--timeout", "timeout_s", type=float, help="Per-order timeout in wall seconds.")
@click.option("--store", "store_path", help="Store file for the in-process platform (default: platform.store).")
@click.option("--output", type=click.Path(dir_okay=False), help="Also write the JSON report here.")
@pass_state
def experiment(state: _State, runs, printers, price, time_scale, jitter, seed, gateway, cloud_gateway, timeout_s, store_path, output) -> None:
    """Place one ring order per printer per run and wait for each to be Billed."""
    from cloudcraft.experiment import ExperimentOptions, run_experiment

    config = state.config
    options = ExperimentOptions(
        runs=runs or int(config.number("experiment", "runs", integer=True)),
        printers=[p.strip() for p in printers.split(",") if p.strip()] if printers else [],
        price=_money(price, "--price"),
        time_scale=time_scale or config.number("experiment", "time_scale"),
        jitter=jitter,
        seed=seed,
        gateway=gateway,
        cloud_gateway=cloud_gateway,
        order_timeout_s=timeout_s or config.number("experiment", "order_timeout_s"),
        store=Store(store_path) if store_path else None,
    )
    if not 0 <= jitter < 0.5:
        _fail("--jitter must be in [0, 0.5)", EXIT_CONFIG)
    announce = (lambda line: click.echo(line, err=True)) if state.as_json else click.echo
    try:
        result = asyncio.run(run_experiment(config, options, announce=announce))
    except CloudCraftError as exc:
        _fail(str(exc), EXIT_FAILURE)
    report = result.report
    if output:
        Path(output).write_text(json.dumps(report, indent=2) + "\n", encoding="utf-8")
    if state.as_json:
        click.echo(json.dumps(report, indent=2))
    else:
        for pid, agg in report["per_printer"].items():
            click.echo(
                f"{pid:16s} n={agg['n']:<4d} duration {agg['mean_duration_s']:.1f} s  "
                f"energy {agg['mean_energy_wh']:.2f} Wh  production EUR {agg['mean_production_cost']}"
            )
        if report["table2"]["printers"]:
            click.echo(reports.render_table2(report["table2"], "text"))
        ledger = report["ledger"]
        click.echo(f"ledger: {ledger['transactions']} transactions, profit EUR {ledger['profit']}, " + ", ".join(
            f"{role} {amount}" for role, amount in ledger["by_role"].items()
        ))
        orders = report["orders"]
        click.echo(f"orders: {orders['billed']}/{orders['placed']} billed")
    sys.exit(EXIT_OK if result.ok else EXIT_FAILURE)


# report ---------------------------------------------------------------------------

def _recorded_jobs(store: Store) -> list[reports.JobRecord]:
    from cloudcraft.billing import Transaction

    orders = [Order.from_doc(doc) for _, doc in store.scan_prefix(Namespace.ORDERS)]
    txns = [Transaction.from_doc(doc) for _, doc in store.scan_prefix(Namespace.BILLING, "txn:")]
    return reports.job_records(orders, {t.order_id: t.breakdown for t in txns})


@main.command()
@click.argument("kind", type=click.Choice(["ledger", "table2", "summary"]))
@click.option("--format", "fmt", type=click.Choice(list(reports.FORMATS)), help="Output format (default text).")
@click.option("--store", "store_path", help="Store file (default: platform.store).")
@click.option("--price", help="Sale price for the summary (default: costs.sale_price).")
@pass_state
def report(state: _State, kind: str, fmt: str | None, store_path: str | None, price: str | None) -> None:
    """Ledger balances, Table 2 from recorded jobs, or TCO/profit ranges."""
    config = state.config
    fmt = fmt or ("json" if state.as_json else "text")
    try:
        if kind == "summary":
            doc = reports.summary(
                config.profiles(), config.tariff, config.fixed_costs, config.weights, config.mode,
                _money(price, "--price") or config.sale_price,
            )
            out = reports.render_summary(doc, fmt)
        else:
            store = state.store(store_path)
            try:
                if kind == "ledger":
                    from cloudcraft.billing import Billing

                    out = reports.render_ledger(reports.ledger(Billing(store).balances()), fmt)
                else:
                    out = reports.render_table2(reports.table2(_recorded_jobs(store), config.profiles()), fmt)
            finally:
                store.close()
    except reports.NoRecordedJobs as exc:
        _fail(str(exc), EXIT_FAILURE)
    except reports.EmptyLedger as exc:
        _fail(str(exc), EXIT_FAILURE)
    click.echo(out)


# dump -----------------------------------------------------------------------------

@main.command()
@click.option("--store", "store_path", help="Store file (default: platform.store).")
@click.option("--output", type=click.File("w"), default="-", help="Destination (default stdout).")
@pass_state
def dump(state: _State, store_path: str | None, output) -> None:
    """Write every stored record as one JSON line."""
    store = state.store(store_path)
    try:
        count = store.dump(output)
    finally:
        store.close()
    click.echo(f"{count} records", err=True)


if __name__ == "__main__":
    main()
