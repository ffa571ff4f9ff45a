"""Closed-form propagation of a packet train through a store-and-forward path.

For link ``i`` and packet ``j`` (packets keep their order on a fixed route)::

    start[i][j] = max(arrival[i][j], finish[i][j-1]) + hold[i]
    finish[i][j] = start[i][j] + ser[i][j]
    arrival[i+1][j] = finish[i][j] + lat[i]

``hold`` is a constant per-node queueing delay.  The compiled variant in
``_kernel.pyx`` is used when it was built; set ``CDTP_PURE_PYTHON=1`` to force
the fallback.
"""

from __future__ import annotations

import os

import numpy as np


def propagate_py(inject, ser, lat, hold) -> np.ndarray:
    ser_rows = np.asarray(ser, dtype=np.int64).tolist()
    lat = np.asarray(lat, dtype=np.int64).tolist()
    hold = np.asarray(hold, dtype=np.int64).tolist()
    row = np.asarray(inject, dtype=np.int64).tolist()
    if len(lat) != len(ser_rows) or len(hold) != len(ser_rows):
        raise ValueError("shape mismatch")
    out = [row]
    for ser_i, lat_i, hold_i in zip(ser_rows, lat, hold):
        if len(ser_i) != len(row):
            raise ValueError("shape mismatch")
        nxt = []
        free = None
        for arrive, s in zip(row, ser_i):
            start = arrive if free is None or arrive > free else free
            free = start + hold_i + s
            nxt.append(free + lat_i)
        out.append(nxt)
        row = nxt
    return np.array(out, dtype=np.int64).reshape(len(out), len(out[0]) if out[0] else 0)


propagate_c = None
if not os.environ.get("CDTP_PURE_PYTHON"):
    try:
        from ._kernel import propagate as propagate_c
    except ImportError:
        propagate_c = None

BACKEND = "cython" if propagate_c is not None else "python"


def propagate(inject, ser, lat, hold) -> np.ndarray:
    """Arrival times (ns) of every packet at every node, shape (links + 1, packets)."""
    if propagate_c is None:
        return propagate_py(inject, ser, lat, hold)
    return propagate_c(
        np.ascontiguousarray(inject, dtype=np.int64),
        np.ascontiguousarray(np.asarray(ser, dtype=np.int64).reshape(len(lat), len(inject))),
        np.ascontiguousarray(lat, dtype=np.int64),
        np.ascontiguousarray(hold, dtype=np.int64),
    )
