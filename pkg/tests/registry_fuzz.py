"""Random walks over the server registry and an independent chain-selection oracle."""

import random

from cdtp import wire
from cdtp.server import Registry, ServerConfig

FILES = {"/a.bin": 100_000, "/b.bin": 561282, "/c.bin": 4096}
BW_CLASSES = [60_000, 100_000, 110_000, 120_000, 400_000, 1_000_000]


def brute_select(reg: Registry, file, client_bw, client_progress, exclude=()):
    fs = reg.files.get(file)
    if fs is None or reg.config.mode != "cdtp":
        return None
    tol, frac = reg.config.bw_tolerance, reg.config.progress_fraction
    best = None
    for cid in fs.chains:
        chain = reg.chains[cid]
        tail = reg.transfers[chain.members[-1]]
        if chain.closed or tail.blocked or cid in exclude:
            continue
        if abs(chain.bandwidth - client_bw) > tol * chain.bandwidth:
            continue
        ahead = tail.bytes_received - client_progress
        if not 0 <= ahead <= frac * fs.size:
            continue
        if best is None or (ahead, cid) < best:
            best = (ahead, cid)
    return None if best is None else best[1]


class Walker:
    def __init__(self, seed: int, config: ServerConfig = None):
        self.rng = random.Random(seed)
        self.now = 0.0
        self.reg = Registry(config or ServerConfig(seed=seed), ("10.0.0.1", 6000),
                           clock=lambda: self.now)
        self.gone: list[int] = []

    def _bw(self):
        rng = self.rng
        if rng.random() < 0.8:
            return rng.choice(BW_CLASSES)
        return rng.randrange(10_000, 2_000_000)

    def _tid(self):
        rng = self.rng
        if self.gone and rng.random() < 0.1:
            return rng.choice(self.gone)
        if not self.reg.transfers or rng.random() < 0.03:
            return rng.getrandbits(32)
        return rng.choice(sorted(self.reg.transfers))

    def step(self) -> str:
        rng, reg = self.rng, self.reg
        r = rng.random()
        self.now += rng.random() * 0.05
        if r < 0.08 or not reg.queries:
            n = len(reg.queries)
            reg.open_query(f"10.1.{n // 250}.{n % 250 + 1}",
                           wire.StartQuerySessionRequest(6001, 6002, 6003, 6004))
            return "query"
        if r < 0.30:
            qs = reg.queries[rng.choice(sorted(reg.queries))]
            name = rng.choice(sorted(FILES))
            reg.join(qs, name, FILES[name], self._bw())
            return "join"
        if r < 0.60:
            tid = self._tid()
            ts = reg.transfers.get(tid)
            base = ts.bytes_received if ts else 0
            size = ts.size if ts else 1000
            value = max(0, base + rng.randrange(-500, size // 20 + 2))
            reg.progress(tid, value)
            return "progress"
        if r < 0.75:
            tid = self._tid()
            ts = reg.transfers.get(tid)
            value = ts.bytes_received if ts else 0
            if reg.disengage(tid, value, rng.random() < 0.3):
                self.gone.append(tid)
            return "disengage"
        if r < 0.92:
            tid = self._tid()
            ts = reg.transfers.get(tid)
            value = ts.bytes_received if ts else 0
            reg.retransmit(tid, value, rng.random() < 0.5)
            return "retransmit"
        if r < 0.96:
            handle = rng.choice(sorted(reg.queries))
            self.gone.extend(reg.queries[handle].transfers)
            reg.close_query(handle)
            return "close"
        if rng.random() < 0.5:
            self.now += rng.random() * 150
        reg.expire_idle()
        return "expire"

    def random_query(self):
        rng = self.rng
        name = rng.choice(sorted(FILES))
        progress = rng.choice([0, rng.randrange(FILES[name] + 1)])
        return name, self._bw(), progress
