import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cdtp.simnet import kernel

needs_c = pytest.mark.skipif(kernel.propagate_c is None, reason="compiled kernel not built")


def arrays(draw, links, packets):
    ints = st.integers(0, 10**9)
    inject = sorted(draw(st.lists(ints, min_size=packets, max_size=packets)))
    ser = [draw(st.lists(ints, min_size=packets, max_size=packets)) for _ in range(links)]
    lat = draw(st.lists(ints, min_size=links, max_size=links))
    hold = draw(st.lists(st.integers(0, 10**6), min_size=links, max_size=links))
    return inject, ser, lat, hold


@st.composite
def trains(draw):
    return arrays(draw, draw(st.integers(0, 12)), draw(st.integers(1, 20)))


def test_hand_example():
    # two packets, two links: 10/20 ms serialization then 5/2 ms latency
    out = kernel.propagate_py([0, 0], [[10, 10], [20, 20]], [5, 2], [0, 0])
    assert out.tolist() == [[0, 0], [15, 25], [37, 57]]


def test_hold_delays_every_packet():
    out = kernel.propagate_py([0, 0], [[10, 10]], [0], [3])
    assert out.tolist() == [[0, 0], [13, 26]]


def test_shape_mismatch():
    with pytest.raises(ValueError):
        kernel.propagate_py([0], [[1, 2]], [0], [0])
    with pytest.raises(ValueError):
        kernel.propagate_py([0], [[1]], [0, 0], [0])


def test_backend_name():
    assert kernel.BACKEND in ("cython", "python")


@needs_c
@settings(max_examples=200)
@given(trains())
def test_compiled_matches_fallback(train):
    inject, ser, lat, hold = train
    want = kernel.propagate_py(inject, ser, lat, hold)
    got = kernel.propagate(inject, np.array(ser, dtype=np.int64).reshape(len(lat), len(inject)), lat, hold)
    assert got.dtype == np.int64
    assert got.tolist() == want.tolist()


@settings(max_examples=100)
@given(trains())
def test_arrivals_are_monotone(train):
    out = kernel.propagate_py(*train)
    assert (np.diff(out, axis=0) >= 0).all()
    assert (np.diff(out, axis=1) >= 0).all()
