"""Shared simulation fixtures for the test modules."""

import asyncio

from cdtp.bandwidth import MeasurementConfig, run_initiator, run_responder
from cdtp.simnet.aio import Simulation


def measure_path(path, config=MeasurementConfig(), responder=True, net=None):
    """Run one measurement from P1 to P(n+1) of ``path``; returns (result, elapsed_s)."""
    net = net or path.build()
    names = path.node_names()
    sim = Simulation(net, time_limit_s=3600)
    a, b = sim.host(names[0]), sim.host(names[-1])

    async def main():
        task = None
        if responder:
            task = asyncio.ensure_future(run_responder(b, 5000))
            await asyncio.sleep(0)
        t0 = sim.now
        try:
            return await run_initiator(a, (b.ip, 5000), config), sim.now - t0
        finally:
            if task:
                task.cancel()

    try:
        return sim.run(main())
    finally:
        sim.close()
