import asyncio
import io
import json
import random
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtp.simnet import (CrossTrafficSource, Network, Packet, SimLink, SimPath, SimulationError,
                         Simulator, ms, pair_dispersion, path_capacity, probe_stages,
                         serialization_ns, predicted_dispersion, train_arrivals, transit_time)
from cdtp.simnet.aio import Simulation, SimulationStalled
from cdtp.simnet.scenario import ScenarioError, build, load

L100K = SimLink(100000, ms(5))


def test_serialization_rounds_up():
    assert serialization_ns(1000, 100000) == 10_000_000
    assert serialization_ns(1, 3) == 333_333_334
    assert serialization_ns(0, 7) == 0
    with pytest.raises(ValueError):
        serialization_ns(1, 0)


def test_transit_single_link():
    assert transit_time([L100K], 1000) == ms(15)


def test_transit_two_links():
    assert transit_time([L100K, SimLink(50000, ms(2))], 1000) == ms(37)


def test_transit_zero_size_is_latency_sum():
    assert transit_time([L100K, SimLink(50000, ms(2))], 0) == ms(7)


def test_path_capacity():
    assert path_capacity([SimLink(100000), SimLink(50000), SimLink(200000)]) == 50000
    assert path_capacity([SimLink(7)]) == 7
    assert path_capacity([SimLink(9), SimLink(9)]) == 9
    with pytest.raises(ValueError):
        path_capacity([])


def test_bad_links_rejected():
    with pytest.raises(ValueError):
        SimLink(0)
    with pytest.raises(ValueError):
        SimLink(1, -1)
    with pytest.raises(ValueError):
        SimPath([])


def test_pair_dispersion_single_link():
    assert pair_dispersion([SimLink(100000)], 1000) == ms(10)


def test_pair_dispersion_three_links():
    assert pair_dispersion([SimLink(100000), SimLink(50000), SimLink(200000)], 1000) == ms(20)


def test_cross_packet_between_pair_adds_its_service_time():
    path = SimPath([SimLink(50000), SimLink(200000)])
    base = pair_dispersion(path, 1000)
    assert base == ms(20)
    net = path.build()
    # The second probe reaches P2 at 40 ms; this event is queued first, so the
    # cross packet takes the output link just ahead of it.
    net.inject_cross("P2", "P3", 500, ms(40))
    assert pair_dispersion(path, 1000, net=net) - base == serialization_ns(500, 200000)


def test_probe_stages_hand_trace():
    rtts = [s.rtt_ns for s in probe_stages(SimPath([L100K]), 1000)]
    assert rtts == [ms(30), ms(40), ms(40), ms(60)]


def test_asymmetric_reverse_path():
    path = SimPath([SimLink(15000)], reverse=[SimLink(60000)])
    stages = probe_stages(path, 600)
    assert stages[0].backward_ns == serialization_ns(600, 60000)
    assert stages[0].forward_ns == serialization_ns(600, 15000)
    with pytest.raises(ValueError):
        SimPath([SimLink(1)], reverse=[SimLink(1), SimLink(1)])


def test_prediction_with_holds_matches_kernel():
    path = SimPath([SimLink(100000), SimLink(40000, ms(1)), SimLink(80000)])
    holds = [0, ms(3), ms(1)]
    arr = train_arrivals(path, [1000, 1000], holds)
    assert arr[-1][1] - arr[-1][0] == predicted_dispersion(path, 1000, holds)


def random_quiet_path(rng):
    links = []
    for _ in range(rng.randint(1, 10)):
        bps = 10 ** rng.uniform(4, 8)
        links.append(SimLink(Fraction(round(bps)) / 8, rng.randrange(0, ms(50) + 1)))
    return SimPath(links)


@settings(max_examples=60, deadline=None)
@given(st.randoms(use_true_random=False), st.sampled_from([200, 600, 1500]))
def test_pair_dispersion_prediction(rng, size):
    path = random_quiet_path(rng)
    d = pair_dispersion(path, size)
    assert d == serialization_ns(size, path_capacity(path))
    assert abs(Fraction(d, 10**9) - Fraction(size) / Fraction(path_capacity(path))) < Fraction(1, 10**9)


@settings(max_examples=40, deadline=None)
@given(st.randoms(use_true_random=False), st.lists(st.integers(0, 3000), min_size=1, max_size=6))
def test_simulated_train_matches_closed_form(rng, sizes):
    path = random_quiet_path(rng)
    net = path.build()
    names = path.node_names()
    a, b = net.nodes[names[0]], net.nodes[names[-1]]
    got = {}
    b.bind("udp", 1, lambda pkt: got.__setitem__(pkt.payload, net.sim.now))
    for j, size in enumerate(sizes):
        a.send(Packet(net.new_pid(), (a.ip, 1), (b.ip, 1), size, "udp", j))
    net.sim.run()
    assert [got[j] for j in range(len(sizes))] == train_arrivals(path, sizes)[-1].tolist()


# traces --------------------------------------------------------------------


def busy_network(seed=3, qlim=None):
    sim = Simulator(trace=True)
    net = SimPath([SimLink(125000, ms(1)), SimLink(15000, ms(4)), SimLink(60000, ms(2))],
                  queue_limit=qlim).build(sim)
    net.add_cross_traffic("P2", "P3", CrossTrafficSource("poisson", 600, 10, seed), 0, ms(2500))
    a, b = net.nodes["P1"], net.nodes["P4"]
    b.bind("udp", 5, lambda pkt: None)
    rng = random.Random(seed)
    for _ in range(40):
        t = rng.randrange(0, ms(2000))
        size = rng.randrange(40, 1500)
        sim.schedule_at(t, lambda s=size: a.send(Packet(net.new_pid(), (a.ip, 5), (b.ip, 5), s)))
    sim.run(ms(3000))
    return net


def trace_csv(net):
    buf = io.StringIO()
    net.sim.dump_trace(buf)
    return buf.getvalue()


def test_trace_is_deterministic():
    assert trace_csv(busy_network()) == trace_csv(busy_network())
    assert trace_csv(busy_network(3)) != trace_csv(busy_network(4))


def test_trace_header():
    assert trace_csv(busy_network()).splitlines()[0] == "time_ns,node,event,packet_id,size"


def test_store_and_forward_and_fcfs():
    net = busy_network()
    arrivals = {}
    order_in, order_out = {}, {}
    for t, node, ev, pid, _ in net.sim.trace:
        if ev in ("arrive", "send", "cross"):
            arrivals[(node, pid)] = t
        if ev == "enqueue":
            order_in.setdefault(node, []).append(pid)
        if ev == "tx":
            # transmission starts only after the whole packet is at this node
            assert t >= arrivals[(node, pid)]
            order_out.setdefault(node, []).append(pid)
    for node, pids in order_out.items():
        assert pids == order_in[node][: len(pids)]


def test_byte_conservation_with_drops():
    net = busy_network(5, qlim=2)
    assert net.drops
    net.sim.run()
    assert net.in_flight_bytes() == 0
    assert net.injected_bytes == net.delivered_bytes + net.dropped_bytes + net.sunk_bytes


def test_schedule_in_past_rejected():
    sim = Simulator()
    sim.run(100)
    with pytest.raises(SimulationError):
        sim.schedule_at(5, lambda: None)


def test_network_errors():
    net = Network()
    net.add_node("A", "1.2.3.4")
    with pytest.raises(ValueError):
        net.add_node("A")
    with pytest.raises(ValueError):
        net.add_node("B", "1.2.3.4")
    net.add_node("B")
    net.connect("A", "B", 1000, 0)
    with pytest.raises(ValueError):
        net.add_link("A", "B", 1000, 0)
    with pytest.raises(ValueError):
        CrossTrafficSource("poisson", 600, 0)
    with pytest.raises(ValueError):
        CrossTrafficSource("burst", 600, 1)


def test_unroutable_packet_dropped():
    net = Network()
    a = net.add_node("A")
    net.add_node("B")
    a.send(Packet(net.new_pid(), (a.ip, 1), (net.nodes["B"].ip, 1), 10))
    net.sim.run()
    assert net.drops[0][3] == "no-route"


# scenarios -----------------------------------------------------------------


def test_path_scenario(tmp_path):
    doc = {"path": {"links": [{"bps": 100e6, "latency_ms": 1}, {"bps": 120000, "latency_ms": 10}],
                    "reverse": [{"Bps": 12.5e6}, {"bps": 480000}]},
           "cross": [{"hop": 1, "mode": "interval", "packet_size": 600, "rate": 2}],
           "time_limit_s": 30}
    f = tmp_path / "s.json"
    f.write_text(json.dumps(doc))
    sc = load(f)
    assert sc.endpoint("initiator") == "P1" and sc.endpoint("responder") == "P3"
    assert path_capacity(sc.path) == 15000
    assert sc.network.link("P3", "P2").capacity == 60000
    assert sc.time_limit_s == 30


def test_mesh_scenario():
    sc = build({"nodes": ["S", "R"], "links": [
        {"a": "S", "b": "R", "bps": 8000, "latency_ms": 1, "reverse_bps": 16000}],
        "ips": {"S": "192.168.0.1"}, "endpoints": {"server": "S"}})
    assert sc.network.node("192.168.0.1").name == "S"
    assert sc.network.link("R", "S").capacity == 2000
    assert sc.network.link("R", "S").latency_ns == ms(1)
    with pytest.raises(ScenarioError):
        sc.endpoint("client")


def test_bad_scenarios(tmp_path):
    with pytest.raises(ScenarioError):
        build({"path": {"links": [{"latency_ms": 1}]}})
    with pytest.raises(ScenarioError):
        build({"path": {"links": [{"bps": 1}]}, "cross": [{"hop": 3, "rate": 1}]})
    f = tmp_path / "bad.json"
    f.write_text("{")
    with pytest.raises(ScenarioError):
        load(f)


# asyncio on virtual time --------------------------------------------------------


def two_hosts(loopback_ms=0.0):
    net = Network(loopback_ns=ms(loopback_ms))
    net.add_node("A")
    net.add_node("B")
    net.connect("A", "B", 125000, ms(2))
    return Simulation(net, time_limit_s=600)


def test_datagram_exchange():
    sim = two_hosts()
    a, b = sim.host("A"), sim.host("B")

    async def main():
        ea = await a.open_datagram(5000)
        eb = await b.open_datagram()
        eb.send(b"hello", (a.ip, 5000))
        data, src = await ea.recv()
        return data, src, sim.now

    data, src, now = sim.run(main())
    assert data == b"hello" and src[0] == b.ip
    assert now == pytest.approx((serialization_ns(5 + 28, 125000) + ms(2)) / 1e9)
    sim.close()


def test_loopback_latency():
    sim = two_hosts(loopback_ms=0.25)
    a = sim.host("A")

    async def main():
        e1 = await a.open_datagram(1)
        e2 = await a.open_datagram(2)
        e1.send(b"x", (a.ip, 2))
        await e2.recv()
        return sim.now

    assert sim.run(main()) == pytest.approx(0.00025)
    sim.close()


def test_port_collision():
    sim = two_hosts()

    async def main():
        await sim.host("A").open_datagram(7)
        await sim.host("A").open_datagram(7)

    with pytest.raises(OSError):
        sim.run(main())
    sim.close()


@settings(max_examples=25, deadline=None)
@given(st.lists(st.binary(min_size=1, max_size=5000), min_size=1, max_size=8))
def test_stream_preserves_order(pieces):
    sim = two_hosts()
    a, b = sim.host("A"), sim.host("B")
    total = b"".join(pieces)
    got = []

    async def handler(conn):
        got.append(await conn.read_exactly(len(total)))

    async def main():
        await b.listen_stream(80, handler)
        conn = await a.connect_stream((b.ip, 80))
        for p in pieces:
            conn.write(p)
            await conn.drain()
        conn.close()
        await asyncio.sleep(5)

    sim.run(main())
    sim.close()
    assert got == [total]


def test_stream_eof_raises_incomplete_read():
    sim = two_hosts()
    a, b = sim.host("A"), sim.host("B")

    async def handler(conn):
        conn.write(b"abc")
        await conn.drain()

    async def main():
        await b.listen_stream(80, handler)
        conn = await a.connect_stream((b.ip, 80))
        await conn.read_exactly(10)

    with pytest.raises(asyncio.IncompleteReadError) as info:
        sim.run(main())
    assert info.value.partial == b"abc"
    sim.close()


def test_connect_refused_and_timeout():
    sim = two_hosts()
    a, b = sim.host("A"), sim.host("B")

    async def refused():
        await a.connect_stream((b.ip, 81))

    with pytest.raises(ConnectionRefusedError):
        sim.run(refused())
    b.kill()

    async def dead():
        await a.connect_stream((b.ip, 81), timeout=1)

    with pytest.raises(TimeoutError):
        sim.run(dead())
    sim.close()


def test_stall_detected():
    sim = two_hosts()

    async def main():
        ep = await sim.host("A").open_datagram()
        await ep.recv()

    with pytest.raises(SimulationStalled):
        sim.run(main())
    sim.close()


def test_time_limit():
    sim = Simulation(time_limit_s=1)

    async def main():
        await asyncio.sleep(5)

    with pytest.raises(SimulationError):
        sim.run(main())
    sim.close()
