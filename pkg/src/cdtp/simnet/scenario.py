"""JSON scenario files.

Either a linear path::

    {"path": {"links": [{"bps": 100e6, "latency_ms": 1}, {"bps": 120000, "latency_ms": 10}],
              "reverse": [...]},
     "cross": [{"hop": 1, "mode": "poisson", "packet_size": 600, "rate": 7.5, "seed": 3}]}

whose nodes are named P1..P(n+1), or an explicit mesh::

    {"nodes": ["S", "R", "C1"],
     "links": [{"a": "S", "b": "R", "bps": 120000, "latency_ms": 1,
                "reverse_bps": 120000, "reverse_latency_ms": 1}],
     "cross": [{"from": "S", "to": "R", "mode": "interval", "packet_size": 500, "rate": 2}]}

Optional keys: ``endpoints`` (role -> node name), ``queue_limit``,
``loopback_ms``, ``time_limit_s`` and ``trace`` (bool).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Optional

from .engine import CrossTrafficSource, Network, Simulator, ms
from .paths import SimLink, SimPath


class ScenarioError(ValueError):
    pass


@dataclass
class Scenario:
    network: Network
    endpoints: dict = field(default_factory=dict)
    time_limit_s: Optional[float] = None
    path: Optional[SimPath] = None

    def endpoint(self, role: str, default: Optional[str] = None) -> str:
        name = self.endpoints.get(role, default)
        if name is None:
            raise ScenarioError(f"scenario names no {role!r} endpoint")
        return name


def _rate(spec: dict, key: str = "bps"):
    if key in spec:
        return Fraction(str(spec[key])) / 8
    alt = key.replace("bps", "Bps")
    if alt in spec:
        return Fraction(str(spec[alt]))
    return None


def _link(spec: dict, prefix: str = "") -> SimLink:
    cap = _rate(spec, prefix + "bps")
    if cap is None:
        raise ScenarioError(f"link {spec} needs {prefix}bps or {prefix}Bps")
    return SimLink(cap, ms(spec.get(prefix + "latency_ms", 0)))


def _cross(spec: dict) -> CrossTrafficSource:
    return CrossTrafficSource(spec.get("mode", "poisson"), int(spec.get("packet_size", 600)),
                              float(spec.get("rate", 0)), int(spec.get("seed", 0)))


def build(doc: dict) -> Scenario:
    sim = Simulator(trace=bool(doc.get("trace", False)))
    qlim = doc.get("queue_limit")
    limit = doc.get("time_limit_s")
    if "path" in doc:
        p = doc["path"]
        links = [_link(s) for s in p["links"]]
        reverse = [_link(s) for s in p["reverse"]] if p.get("reverse") else None
        cross = {}
        for c in doc.get("cross", []):
            hop = int(c["hop"])
            if not 0 <= hop < len(links):
                raise ScenarioError(f"cross-traffic hop {hop} out of range")
            cross[hop] = _cross(c)
        path = SimPath(links, reverse, cross, qlim)
        net = path.build(sim)
        net.loopback_ns = ms(doc.get("loopback_ms", 0))
        names = path.node_names()
        endpoints = {"initiator": names[0], "responder": names[-1]}
        endpoints.update(doc.get("endpoints", {}))
        return Scenario(net, endpoints, limit, path)
    net = Network(sim, loopback_ns=ms(doc.get("loopback_ms", 0)))
    names = list(doc.get("nodes", []))
    for link in doc.get("links", []):
        for end in (link["a"], link["b"]):
            if end not in names:
                names.append(end)
    ips = doc.get("ips", {})
    for name in names:
        net.add_node(name, ips.get(name))
    for link in doc.get("links", []):
        fwd = _link(link)
        rev_latency = ms(link.get("reverse_latency_ms", link.get("latency_ms", 0)))
        net.connect(link["a"], link["b"], fwd.capacity, fwd.latency_ns,
                    _rate(link, "reverse_bps"), rev_latency, link.get("queue_limit", qlim))
    for c in doc.get("cross", []):
        net.add_cross_traffic(c["from"], c["to"], _cross(c), ms(c.get("start_ms", 0)),
                              ms(c["stop_ms"]) if c.get("stop_ms") is not None else None)
    return Scenario(net, dict(doc.get("endpoints", {})), limit)


def load(path) -> Scenario:
    with open(path) as fh:
        try:
            doc = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ScenarioError(f"{path}: {exc}") from exc
    return build(doc)
