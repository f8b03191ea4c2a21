import asyncio
import threading

import pytest

from cloudcraft.billing import Billing
from cloudcraft.control_plane.cloud_gateway import CloudGateway, Connection, SessionState
from cloudcraft.control_plane.protocol import AgentMessage, MessageKind, ProtocolError
from cloudcraft.domain import Money, OrderState
from cloudcraft.fulfillment import AgentUnreachable, Availability, Fulfillment

CRED = "printer-pass"


@pytest.fixture
def world(store, clock, profiles):
    billing = Billing(store, clock)
    f = Fulfillment(store, clock, settler=billing, hash_iterations=10)
    gw = CloudGateway(f, clock, agent_ttl_s=60)
    f.link = gw
    for p in profiles.values():
        f.register_printer(p, "sme", CRED)
    f.upload_model("designer", "Ring", b"ring", "PLA", 2.9, model_id="ring")
    return f, gw


class Agent:
    """Drives one Connection with correctly sequenced messages."""

    def __init__(self, gw, printer_id):
        self.gw, self.printer_id = gw, printer_id
        self.conn = Connection()
        self.seq = 0

    def send(self, kind, body=None, seq=None):
        self.seq = self.seq + 1 if seq is None else seq
        return self.gw.handle_agent_message(self.conn, AgentMessage(kind, self.seq, self.printer_id, body or {}))

    def register(self, credential=CRED):
        return self.send(MessageKind.REGISTER, {"credential": credential})


def test_register_then_heartbeat_is_connected(world):
    f, gw = world
    a = Agent(gw, "k1max")
    assert a.register() is None
    assert a.send(MessageKind.HEARTBEAT) is None
    assert gw.session("k1max").state is SessionState.CONNECTED
    assert f.printer_status("k1max").availability is Availability.IDLE


def test_sequence_gap_is_out_of_order(world):
    _, gw = world
    a = Agent(gw, "k1max")
    a.register()
    reply = a.send(MessageKind.HEARTBEAT, seq=3)
    assert reply.kind is MessageKind.REJECT
    assert reply.body["error"] == "OutOfOrder"
    assert (reply.body["expected"], reply.body["got"]) == (2, 3)
    # the session survives and the next correct sequence is still accepted
    assert a.send(MessageKind.HEARTBEAT, seq=2) is None


def test_register_must_start_at_one(world):
    _, gw = world
    a = Agent(gw, "k1max")
    reply = a.send(MessageKind.REGISTER, {"credential": CRED}, seq=5)
    assert reply.body["error"] == "OutOfOrder"
    assert a.conn.closing


def test_first_message_must_be_register(world):
    _, gw = world
    a = Agent(gw, "k1max")
    reply = a.send(MessageKind.HEARTBEAT)
    assert reply.body["error"] == ProtocolError.__name__
    assert a.conn.closing


def test_bad_credential_and_unknown_printer(world):
    f, gw = world
    reply = Agent(gw, "k1max").register("wrong-credential")
    assert reply.body["error"] == "BadPrinterCredential"
    reply = Agent(gw, "ghost").register()
    assert reply.body["error"] == "UnknownPrinter"
    assert gw.session("k1max") is None
    assert f.printer_status("k1max").availability is Availability.OFFLINE


def test_concurrent_register_one_wins(world):
    _, gw = world
    agents = [Agent(gw, "k1max") for _ in range(8)]
    replies = [None] * len(agents)
    barrier = threading.Barrier(len(agents))

    def go(i):
        barrier.wait()
        replies[i] = agents[i].register()

    threads = [threading.Thread(target=go, args=(i,)) for i in range(len(agents))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    winners = [r for r in replies if r is None]
    losers = [r.body["error"] for r in replies if r is not None]
    assert len(winners) == 1
    assert losers == ["SessionConflict"] * (len(agents) - 1)


def test_reconnect_after_loss_is_allowed(world):
    _, gw = world
    a = Agent(gw, "k1max")
    a.register()
    gw.connection_lost(a.conn)
    b = Agent(gw, "k1max")
    assert b.register() is None


def _full_job(agent, job_id, profile):
    assert agent.send(MessageKind.JOB_ACCEPT, {"job_id": job_id}) is None
    for ph in profile.phases:
        assert agent.send(MessageKind.PHASE_STARTED, {"job_id": job_id, "phase": ph.phase.value}) is None
        assert agent.send(MessageKind.METER_SAMPLE, {"job_id": job_id, "phase": ph.phase.value, "cumulative_wh": 1.0}) is None
        body = {"job_id": job_id, "phase": ph.phase.value, "duration_s": ph.duration_s, "energy_wh": ph.energy_wh}
        assert agent.send(MessageKind.PHASE_COMPLETED, body) is None
    return agent.send(MessageKind.JOB_COMPLETE, {"job_id": job_id, "filament_g": profile.unit_filament_mass_g})


def test_job_complete_bills_the_order(world, profiles):
    f, gw = world
    a = Agent(gw, "k1max")
    a.register()
    loc = profiles["k1max"].location
    order = f.place_order("shop", "ring", Money.eur("10"), "c", loc, order_id="o1")
    assign = [m for m in a.conn.sent if m.kind is MessageKind.JOB_ASSIGN]
    assert len(assign) == 1 and assign[0].body["job_id"] == order.job_id
    assert _full_job(a, order.job_id, profiles["k1max"]) is None
    assert f.get_order("o1").state is OrderState.BILLED


def test_progress_for_foreign_job_is_rejected(world, profiles):
    f, gw = world
    a, b = Agent(gw, "k1max"), Agent(gw, "mk4")
    a.register()
    b.register()
    order = f.place_order("shop", "ring", Money.eur("10"), "c", profiles["k1max"].location, order_id="o1")
    reply = b.send(MessageKind.JOB_ACCEPT, {"job_id": order.job_id})
    assert reply.kind is MessageKind.REJECT
    assert not b.conn.closing


def test_send_job_without_session_is_unreachable(world):
    _, gw = world
    with pytest.raises(AgentUnreachable):
        gw.send_job("k1max", {"job_id": "j"})


def test_sweeper_degrades_then_disconnects(world, clock):
    f, gw = world
    a = Agent(gw, "k1max")
    a.register()
    clock.advance(41)
    gw.sweep()
    assert gw.session("k1max").state is SessionState.DEGRADED
    a.send(MessageKind.HEARTBEAT)
    assert gw.session("k1max").state is SessionState.CONNECTED
    clock.advance(61)
    gw.sweep()
    assert gw.session("k1max") is None
    assert a.conn.closed
    assert f.printer_status("k1max").availability is Availability.OFFLINE


def test_disconnect_mid_job_fails_and_reroutes_queue(world, profiles):
    f, gw = world
    a, b = Agent(gw, "k1max"), Agent(gw, "mk4")
    a.register()
    b.register()
    loc = profiles["k1max"].location
    first = f.place_order("shop", "ring", Money.eur("10"), "c", loc, order_id="o1")
    a.send(MessageKind.JOB_ACCEPT, {"job_id": first.job_id})
    queued = f.place_order("shop", "ring", Money.eur("10"), "c", loc, order_id="o2")
    assert queued.assigned_printer == "k1max"
    gw.connection_lost(a.conn, "killed")
    assert f.get_order("o1").state is OrderState.FAILED
    moved = f.get_order("o2")
    assert moved.assigned_printer == "mk4"
    job = [m for m in b.conn.sent if m.kind is MessageKind.JOB_ASSIGN][-1].body["job_id"]
    assert _full_job(b, job, profiles["mk4"]) is None
    assert f.get_order("o2").state is OrderState.BILLED


def test_tcp_round_trip(world):
    f, gw = world

    async def go():
        await gw.start()
        host, port = gw.address
        reader, writer = await asyncio.open_connection(host, port)
        writer.write(AgentMessage(MessageKind.REGISTER, 1, "k1max", {"credential": CRED}).encode())
        writer.write(AgentMessage(MessageKind.HEARTBEAT, 2, "k1max", {}).encode())
        await writer.drain()
        for _ in range(100):
            if gw.session("k1max") and gw.session("k1max").last_message_at:
                break
            await asyncio.sleep(0.01)
        assert gw.session("k1max").state is SessionState.CONNECTED
        # a second connection for the same printer is told why and hung up on
        r2, w2 = await asyncio.open_connection(host, port)
        w2.write(AgentMessage(MessageKind.REGISTER, 1, "k1max", {"credential": CRED}).encode())
        await w2.drain()
        reply = AgentMessage.decode(await asyncio.wait_for(r2.readline(), 2))
        assert reply.body["error"] == "SessionConflict"
        assert await asyncio.wait_for(r2.readline(), 2) == b""
        writer.close()
        for _ in range(100):
            if gw.session("k1max") is None:
                break
            await asyncio.sleep(0.01)
        assert gw.session("k1max") is None
        await gw.stop()

    asyncio.run(go())
    assert f.printer_status("k1max").availability is Availability.OFFLINE
