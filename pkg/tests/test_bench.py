import pytest

from cdtp.bandwidth import MeasurementConfig
from cdtp.bench import ExperimentSpec, csv_rows, make_file, run_both, run_experiment, to_csv

QUICK = ExperimentSpec(file_size=60_000, clients=3, stagger=1.0,
                       measurement=MeasurementConfig(steps=1))


def test_make_file_is_seeded():
    assert make_file(100, 1) == make_file(100, 1) != make_file(100, 2)
    assert len(make_file(0, 1)) == 0


def test_spec_validation():
    for kw in ({"topology": "mesh"}, {"mode": "p2p"}, {"stagger": -1}, {"clients": 0}):
        with pytest.raises(ValueError):
            ExperimentSpec(**kw)


def test_reports_are_deterministic():
    a, b = run_experiment(QUICK), run_experiment(QUICK)
    assert a.times() == b.times()
    assert a.egress_total_bytes == b.egress_total_bytes


def test_chain_sends_file_once():
    cdtp, ftp = run_both(QUICK)
    assert not cdtp.failed and not ftp.failed
    assert cdtp.egress_data_bytes == QUICK.file_size
    assert ftp.egress_data_bytes == 3 * QUICK.file_size
    rows = csv_rows(cdtp, ftp)
    assert [r["client"] for r in rows] == [1, 2, 3]
    assert to_csv(cdtp, ftp).count("\n") == 4


def test_single_client_modes_match():
    spec = ExperimentSpec(file_size=30_000, clients=1, measurement=MeasurementConfig(steps=1))
    cdtp, ftp = run_both(spec)
    assert cdtp.times() == ftp.times()


def test_killed_feeder_recovery():
    spec = ExperimentSpec(file_size=100_000, clients=3, stagger=1.0, kill=(1, 0.4),
                          measurement=MeasurementConfig(steps=1))
    report = run_experiment(spec)
    ok = [c.ok for c in report.clients]
    assert report.clients[1].killed
    assert ok[0] and ok[2]
    assert report.clients[2].recoveries >= 1
    assert not report.failed
