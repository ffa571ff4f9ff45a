import asyncio
from fractions import Fraction

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtp import bandwidth as bw
from cdtp import wire
from cdtp.bandwidth import (DegenerateDenominator, MeasurementConfig, MeasurementFailed,
                            Responder, StageTimes, compute_capacity, compute_queue_delay,
                            sanity_check)
from cdtp.simnet import SimLink, SimPath, ms, path_capacity, probe_stages
from cdtp.wire import BwPacket, BwType
from helpers import measure_path

MS = 1e-3
QUIET = (30, 40, 40, 60)


def test_capacity_hand_trace():
    assert compute_capacity(*QUIET, 1000, time_unit=MS) == pytest.approx(100000)


def test_capacity_scales_with_time_unit():
    assert compute_capacity(*(2 * t for t in QUIET), 1000, time_unit=MS) == pytest.approx(50000)


def test_capacity_degenerate():
    with pytest.raises(DegenerateDenominator):
        compute_capacity(30, 40, 30, 40, 1000)
    with pytest.raises(DegenerateDenominator):
        compute_capacity(30, 40, 45, 50, 1000)


def test_capacity_general_factor():
    # factor 3: large probes are 3S, their pair dispersion grows by 2S/c
    assert compute_capacity(30, 50, 40, 80, 1000, factor=3, time_unit=MS) == pytest.approx(100000)


def test_queue_delay_examples():
    assert compute_queue_delay(*QUIET) == 0
    assert compute_queue_delay(7, 7, 7, 7) == 0
    assert compute_queue_delay(30, 40, 45, 60) == 10


def test_sanity_examples():
    assert sanity_check(*QUIET)
    assert not sanity_check(30, 40, 40, 50)
    # pair dispersion more than doubled: bad measurement
    assert not sanity_check(30, 40, 35, 60)
    # large pair dispersed less than small pair
    assert not sanity_check(30, 40, 50, 55)


@given(st.tuples(*[st.integers(1, 10**9)] * 4), st.integers(1, 1000))
def test_sanity_scale_invariant(times, k):
    assert sanity_check(*times) == sanity_check(*(k * t for t in times))


@given(st.tuples(*[st.integers(1, 10**9)] * 4))
def test_sane_implies_positive_denominator(times):
    if sanity_check(*times):
        assert compute_capacity(*times, 600) > 0


@given(st.lists(st.tuples(*[st.integers(1, 10**9)] * 4), min_size=1, max_size=10),
       st.tuples(*[st.integers(1, 10**9)] * 4))
def test_minima_only_decrease(steps, extra):
    before = StageTimes.minima(StageTimes(*s) for s in steps)
    after = StageTimes.minima([StageTimes(*s) for s in steps] + [StageTimes(*extra)])
    assert all(a <= b for a, b in zip(after.as_tuple(), before.as_tuple()))


def test_config_validation():
    for kwargs in ({"base_payload_size": 0}, {"steps": 0}, {"multiplication_factor": 1},
                   {"step_timeout": 0}, {"max_adaptive_rounds": -1}):
        with pytest.raises(ValueError):
            MeasurementConfig(**kwargs)


# derivation: one-way pieces of the four stages ------------------------------


def test_reply_legs_are_equal_on_quiet_path():
    path = SimPath([SimLink(125000, ms(1)), SimLink(15000, ms(3))])
    stages = probe_stages(path, 600)
    assert len({s.backward_ns for s in stages}) == 1


@settings(max_examples=40, deadline=None)
@given(st.lists(st.tuples(st.integers(10**3, 10**7), st.integers(0, ms(20))), min_size=1,
                max_size=6), st.sampled_from([200, 600, 1500]))
def test_bare_probe_estimate_is_exact(links, size):
    path = SimPath([SimLink(Fraction(c), lat) for c, lat in links])
    t = [s.rtt_ns for s in probe_stages(path, size)]
    # each serialization is rounded up to the next nanosecond
    assert abs(compute_queue_delay(*t)) <= 4 * len(links)
    assert sanity_check(*t)
    got = compute_capacity(*t, size, time_unit=1e-9)
    spread = t[3] + t[0] - t[2] - t[1]
    # the same rounding moves the dispersion by a few ns
    assert got == pytest.approx(float(path_capacity(path)), rel=8 * len(links) / spread + 1e-9)


# responder --------------------------------------------------------------------


def req(ptype, factor=2, base=600, seq=1, token=9):
    n = base if ptype == BwType.MEASUREMENT_REPLY else factor * base
    return wire.encode(BwPacket(ptype, token, 4000, seq, 12345, factor, base, bytes(range(256)) * (n // 256) + bytes(n % 256)))


def test_responder_single_reply_is_base_size():
    out, dest = Responder(5000).respond(req(BwType.MEASUREMENT_REQUEST), ("1.2.3.4", 999))
    pkt = wire.decode(out)
    assert dest == ("1.2.3.4", 4000)
    assert pkt.packet_type == BwType.MEASUREMENT_REPLY
    assert len(pkt.payload) == 600
    assert (pkt.token, pkt.sequence, pkt.send_time, pkt.multiplication_factor) == (9, 1, 12345, 2)


def test_responder_pair():
    r = Responder(5000)
    src = ("1.2.3.4", 999)
    assert r.respond(req(BwType.PAIR_FIRST), src) is None
    out, _ = r.respond(req(BwType.PAIR_SECOND), src)
    assert len(wire.decode(out).payload) == 600
    # a lone second half or a lone first half gets nothing
    assert r.respond(req(BwType.PAIR_SECOND), src) is None
    assert r.respond(req(BwType.PAIR_FIRST, seq=2), src) is None


def test_responder_breakthrough():
    out, dest = Responder(5000).respond(
        wire.encode(BwPacket(BwType.BREAKTHROUGH_REQUEST, 77, 4000)), ("1.2.3.4", 1))
    assert wire.decode(out) == BwPacket(BwType.BREAKTHROUGH_REPLY, 77, 5000)
    assert dest == ("1.2.3.4", 4000)


@given(st.binary(max_size=100))
def test_responder_ignores_garbage(data):
    r = Responder(1)
    try:
        ok = wire.decode(data).protocol == wire.BANDWIDTH
    except wire.WireError:
        ok = False
    if not ok:
        assert r.respond(data, ("1.1.1.1", 1)) is None


def test_responder_memory_is_bounded():
    r = Responder(1, memory=4)
    for seq in range(10):
        r.respond(req(BwType.PAIR_FIRST, seq=seq), ("1.1.1.1", 1))
    assert len(r._pending) == 4


# end to end in the simulator ------------------------------------------------------


def test_quiet_single_link():
    path = SimPath([SimLink(100000, ms(5))])
    result, _ = measure_path(path, MeasurementConfig(base_payload_size=1000, steps=2))
    assert result.capacity == pytest.approx(100000)
    assert result.sane and result.steps_used == 2 and result.rounds == 1


def test_quiet_sixty_kbps():
    path = SimPath([SimLink.bps(100_000_000, 1), SimLink.bps(60000, 10)])
    result, _ = measure_path(path)
    assert result.capacity_bps == pytest.approx(60000, rel=0.01)


def test_result_identical_for_any_step_count():
    path = SimPath([SimLink.bps(1_000_000, 2), SimLink.bps(240000, 3)])
    caps = {measure_path(path, MeasurementConfig(steps=m))[0].capacity for m in (1, 2, 5)}
    assert len(caps) == 1


def test_unreachable_peer():
    path = SimPath([SimLink(100000, ms(5))])
    cfg = MeasurementConfig(steps=3, step_timeout=0.5)
    with pytest.raises(MeasurementFailed):
        measure_path(path, cfg, responder=False)
    # breakthrough gives up after m timeouts
    net = path.build()
    from cdtp.simnet.aio import Simulation
    sim = Simulation(net)
    a = sim.host("P1")

    async def main():
        t0 = sim.now
        try:
            await bw.run_initiator(a, (net.nodes["P2"].ip, 5000), cfg)
        except MeasurementFailed:
            return sim.now - t0

    assert sim.run(main()) == pytest.approx(3 * 0.5)
    sim.close()


class FakeNet:
    def __init__(self):
        self.t = 0

    def clock_ns(self):
        return self.t


class FakeEndpoint:
    port = 1

    def send(self, data, addr):
        pass

    async def recv(self):
        await asyncio.Event().wait()

    def close(self):
        pass


def run_canned(monkeypatch, canned, cfg):
    canned = list(canned)

    async def fake_break(self):
        return None

    async def fake_step(self):
        return canned.pop(0) if canned else StageTimes(*QUIET)

    monkeypatch.setattr(bw._Initiator, "breakthrough", fake_break)
    monkeypatch.setattr(bw._Initiator, "step", fake_step)
    return asyncio.run(bw.run_initiator(FakeNet(), ("x", 1), cfg, endpoint=FakeEndpoint()))


def test_adaptive_rounds_exhausted(monkeypatch):
    # a compressed small pair (T3 too low) cannot be repaired by taking minima
    insane = StageTimes(30, 40, 35, 60)
    cfg = MeasurementConfig(steps=2, max_adaptive_rounds=5, base_payload_size=1000)
    res = run_canned(monkeypatch, [insane] * 100, cfg)
    assert res.rounds == 6 and res.steps_used == 12
    assert not res.sane


def test_adaptive_rounds_stop_when_sane(monkeypatch):
    noisy = StageTimes(31, 41, 70, 61)
    cfg = MeasurementConfig(steps=1, max_adaptive_rounds=5, base_payload_size=1000)
    res = run_canned(monkeypatch, [noisy], cfg)
    assert res.rounds == 2
    assert res.sane
    assert res.times == StageTimes(*QUIET)


def test_lost_steps_discarded(monkeypatch):
    cfg = MeasurementConfig(steps=3, base_payload_size=1000)
    res = run_canned(monkeypatch, [None, StageTimes(*QUIET), None], cfg)
    assert res.steps_used == 1


def test_all_steps_lost(monkeypatch):
    with pytest.raises(MeasurementFailed):
        run_canned(monkeypatch, [None] * 100, MeasurementConfig(steps=2, max_adaptive_rounds=0))


def test_degenerate_after_rounds(monkeypatch):
    flat = StageTimes(30, 40, 30, 40)
    with pytest.raises(MeasurementFailed) as info:
        run_canned(monkeypatch, [flat] * 3, MeasurementConfig(steps=1, max_adaptive_rounds=2))
    assert info.value.degenerate


def test_negative_queue_delay_clamped(monkeypatch):
    # q* = 2*40 + 40 - 2*31 - 60 = -2 < 0
    res = run_canned(monkeypatch, [StageTimes(31, 40, 40, 60)],
                     MeasurementConfig(steps=1, max_adaptive_rounds=0, base_payload_size=1000))
    assert res.queue_delay_ns == 0 and not res.sane
