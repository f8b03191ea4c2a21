import random
from collections import Counter

import pytest

from cloudcraft.billing import Billing, BillingUnavailable
from cloudcraft.domain.money import to_fraction
from cloudcraft.domain import GeoPoint, IllegalTransition, Money, OrderState
from cloudcraft.fulfillment import (
    AgentUnreachable,
    Availability,
    DuplicatePrinter,
    Fulfillment,
    IncompletePhaseLog,
    PhaseOrderViolation,
    UnknownJob,
    UnknownModel,
)
from cloudcraft.routing import NoCapablePrinter


class FakeLink:
    def __init__(self):
        self.sent = []
        self.down = set()

    def send_job(self, printer_id, assignment):
        if printer_id in self.down:
            raise AgentUnreachable(printer_id)
        self.sent.append((printer_id, assignment["job_id"]))


class FlakyBilling:
    def __init__(self, inner, failures):
        self.inner, self.failures = inner, failures

    def settle_order(self, *args, **kwargs):
        if self.failures > 0:
            self.failures -= 1
            raise BillingUnavailable("billing down")
        return self.inner.settle_order(*args, **kwargs)


@pytest.fixture
def billing(store, clock):
    return Billing(store, clock)


@pytest.fixture
def world(store, clock, billing, profiles):
    link = FakeLink()
    f = Fulfillment(store, clock, settler=billing, link=link, hash_iterations=10)
    for profile in profiles.values():
        f.register_printer(profile, "sme", "printer-pass")
    f.upload_model("designer", "Ring", b"solid ring", "PLA", 2.9, model_id="ring")
    return f, link


def at(profiles, name):
    return profiles[name].location


def run_job(f, job_id, profile, printer_id=None):
    f.accept_job(job_id, printer_id)
    for phase in profile.phases:
        f.record_progress(job_id, "PhaseStarted", {"phase": phase.phase.value})
        f.record_progress(job_id, "MeterSample", {"cumulative_wh": 1.0})
        f.record_progress(
            job_id, "PhaseCompleted", {"phase": phase.phase.value, "duration_s": phase.duration_s, "energy_wh": phase.energy_wh}
        )
    return f.complete_job(job_id, {"filament_g": profile.unit_filament_mass_g})


def connect_all(f):
    for status in f.printers():
        f.printer_connected(status.printer_id)


def test_register_printer_offline_until_connected(world, profiles):
    f, _ = world
    assert {s.availability for s in f.printers()} == {Availability.OFFLINE}
    with pytest.raises(DuplicatePrinter):
        f.register_printer(profiles["mk4"], "sme", "printer-pass")
    assert f.printer_connected("mk4").availability is Availability.IDLE
    assert f.verify_printer("mk4", "printer-pass")
    assert not f.verify_printer("mk4", "wrong-pass")


def test_create_order_routes_to_nearest(world, profiles):
    f, _ = world
    connect_all(f)
    order = f.create_order("shop", "ring", Money.eur(10), "c1", at(profiles, "mk4"))
    assert order.state is OrderState.ROUTED and order.assigned_printer == "mk4"


def test_create_order_errors(world, profiles):
    f, _ = world
    with pytest.raises(UnknownModel):
        f.create_order("shop", "nope", Money.eur(10), "c", GeoPoint(0, 0))
    connect_all(f)
    f.upload_model("designer", "Vase", b"vase", "PETG", 10, model_id="vase")
    with pytest.raises(NoCapablePrinter) as info:
        f.create_order("shop", "vase", Money.eur(10), "c", GeoPoint(0, 0))
    assert f.get_order(info.value.order.order_id).state is OrderState.CREATED


def test_created_order_can_be_rerouted_later(world, profiles):
    f, _ = world
    with pytest.raises(NoCapablePrinter) as info:
        f.create_order("shop", "ring", Money.eur(10), "c", at(profiles, "k1max"))
    f.printer_connected("k1max")
    assert f.reroute(info.value.order.order_id).assigned_printer == "k1max"


def test_enqueue_twice_is_illegal(world, profiles):
    f, _ = world
    connect_all(f)
    order = f.create_order("shop", "ring", Money.eur(10), "c", at(profiles, "k1max"))
    job = f.enqueue_job(order.order_id)
    assert f.get_order(order.order_id).state is OrderState.QUEUED
    assert job.printer_id == "k1max"
    with pytest.raises(IllegalTransition):
        f.enqueue_job(order.order_id)


def test_dispatch_fifo_and_busy(world, profiles):
    f, link = world
    f.printer_connected("k1max")
    orders = [f.place_order("shop", "ring", Money.eur(10), f"c{i}", at(profiles, "k1max")) for i in range(3)]
    assert link.sent == [("k1max", orders[0].job_id)]
    assert f.printer_status("k1max").availability is Availability.BUSY
    assert f.dispatch_next("k1max") is None
    for o in orders:
        assert run_job(f, o.job_id, profiles["k1max"]).state is OrderState.BILLED
    assert [j for _, j in link.sent] == [o.job_id for o in orders]
    assert f.printer_status("k1max").availability is Availability.IDLE
    assert f.dispatch_next("k1max") is None


def test_billed_with_table2_cost(world, profiles, billing):
    f, _ = world
    f.printer_connected("k1max")
    order = f.place_order("shop", "ring", Money.eur(10), "c", at(profiles, "k1max"))
    assert run_job(f, order.job_id, profiles["k1max"]).state is OrderState.BILLED
    txn = billing.find_transaction(order.order_id)
    assert txn.breakdown.production == Money.eur("0.081")
    recorded = f.get_order(order.order_id).phase_log
    assert [(r.duration_s, r.energy_wh) for r in recorded] == [(p.duration_s, p.energy_wh) for p in profiles["k1max"].phases]


def test_record_progress_rules(world, profiles):
    f, _ = world
    f.printer_connected("ultimaker2plus")
    order = f.place_order("shop", "ring", Money.eur(10), "c", at(profiles, "ultimaker2plus"))
    with pytest.raises(UnknownJob):
        f.record_progress("job-nope", "PhaseStarted", {"phase": "PrePrint"})
    f.accept_job(order.job_id)
    with pytest.raises(PhaseOrderViolation):
        f.record_progress(order.job_id, "PhaseCompleted", {"phase": "Print", "duration_s": 1, "energy_wh": 1})
    f.record_progress(order.job_id, "PhaseCompleted", {"phase": "PrePrint", "duration_s": 198, "energy_wh": 12.28})
    log = f.get_order(order.order_id).phase_log
    assert [(r.phase.value, r.duration_s, r.energy_wh) for r in log] == [("PrePrint", 198, 12.28)]
    f.record_progress(order.job_id, "MeterSample", {"cumulative_wh": 20})
    assert len(f.get_order(order.order_id).phase_log) == 1
    with pytest.raises(IncompletePhaseLog):
        f.complete_job(order.job_id, {"filament_g": 2.9})


def test_billing_outage_defers_then_settles_once(store, clock, billing, profiles):
    flaky = FlakyBilling(billing, failures=2)
    f = Fulfillment(store, clock, settler=flaky, link=FakeLink(), hash_iterations=10)
    f.register_printer(profiles["k1max"], "sme", "printer-pass")
    f.upload_model("designer", "Ring", b"r", "PLA", 2.9, model_id="ring")
    f.printer_connected("k1max")
    order = f.place_order("shop", "ring", Money.eur(10), "c", at(profiles, "k1max"))
    assert run_job(f, order.job_id, profiles["k1max"]).state is OrderState.COMPLETED
    assert f.pending_settlements == {order.order_id}
    assert f.retry_settlements() == []
    assert [o.state for o in f.retry_settlements()] == [OrderState.BILLED]
    assert f.retry_settlements() == []
    assert len(billing.ledger_entries()) == 4
    assert len(billing.transactions()) == 1


def test_agent_loss_mid_assign_reroutes(world, profiles):
    f, link = world
    connect_all(f)
    link.down.add("mk4")
    order = f.place_order("shop", "ring", Money.eur(10), "c", at(profiles, "mk4"))
    assert f.printer_status("mk4").availability is Availability.OFFLINE
    assert order.assigned_printer != "mk4" and order.state is OrderState.QUEUED
    assert run_job(f, order.job_id, profiles[order.assigned_printer]).state is OrderState.BILLED


def test_disconnect_fails_running_job_and_moves_queue(world, profiles):
    f, link = world
    connect_all(f)
    first = f.place_order("shop", "ring", Money.eur(10), "c1", at(profiles, "mk4"))
    second = f.place_order("shop", "ring", Money.eur(10), "c2", at(profiles, "mk4"))
    f.accept_job(first.job_id)
    f.printer_disconnected("mk4")
    assert f.get_order(first.order_id).state is OrderState.FAILED
    moved = f.get_order(second.order_id)
    assert moved.state is OrderState.QUEUED and moved.assigned_printer != "mk4"
    assert run_job(f, moved.job_id, profiles[moved.assigned_printer]).state is OrderState.BILLED


def test_recorded_energy_equals_profile(world, profiles):
    f, _ = world
    connect_all(f)
    for name, profile in profiles.items():
        order = f.place_order("shop", "ring", Money.eur(10), "c", profile.location)
        run_job(f, order.job_id, profile)
        log = f.get_order(order.order_id).phase_log
        assert [r.energy_wh for r in log] == [p.energy_wh for p in profile.phases]
        assert sum(to_fraction(r.energy_wh) for r in log) == sum(to_fraction(p.energy_wh) for p in profile.phases)


def test_conservation_and_one_job_per_printer_random(store, clock, billing, profiles):
    rng = random.Random(7)
    link = FakeLink()
    f = Fulfillment(store, clock, settler=billing, link=link, hash_iterations=10)
    for p in profiles.values():
        f.register_printer(p, "sme", "printer-pass")
    f.upload_model("designer", "Ring", b"r", "PLA", 2.9, model_id="ring")
    connect_all(f)
    created = 0
    for step in range(300):
        clock.advance(1)
        action = rng.random()
        if action < 0.4:
            loc = rng.choice(list(profiles.values())).location
            try:
                f.place_order("shop", "ring", Money.eur(10), f"c{step}", loc)
            except NoCapablePrinter:
                pass
            created += 1
        elif action < 0.8:
            busy = [s for s in f.printers() if s.availability is Availability.BUSY]
            if busy:
                s = rng.choice(busy)
                job = f._printers[s.printer_id].current
                run_job(f, job.job_id, profiles[s.printer_id], s.printer_id)
        elif action < 0.9:
            f.printer_disconnected(rng.choice(list(profiles)))
        else:
            f.printer_connected(rng.choice(list(profiles)))
        counts = f.state_counts()
        assert sum(counts.values()) == created
    # No overlapping print intervals per printer.
    running = Counter()
    for _, kind, printer, _order in f.events:
        if kind == "start":
            running[printer] += 1
            assert running[printer] == 1
        elif kind in ("complete", "fail") and running[printer]:
            running[printer] -= 1


def test_recover_rebuilds_queues(store, clock, billing, profiles):
    f = Fulfillment(store, clock, settler=billing, link=FakeLink(), hash_iterations=10)
    for p in profiles.values():
        f.register_printer(p, "sme", "printer-pass")
    f.upload_model("designer", "Ring", b"r", "PLA", 2.9, model_id="ring")
    f.printer_connected("k1max")
    a = f.place_order("shop", "ring", Money.eur(10), "a", at(profiles, "k1max"))
    b = f.place_order("shop", "ring", Money.eur(10), "b", at(profiles, "k1max"))
    f.accept_job(a.job_id)
    link = FakeLink()
    g = Fulfillment(store, clock, settler=billing, link=link, hash_iterations=10)
    g.recover()
    assert g.get_order(a.order_id).state is OrderState.FAILED
    g.printer_connected("k1max")
    assert link.sent == [("k1max", b.job_id)]
