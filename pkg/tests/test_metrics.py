import pytest

from bfica.config import CostModel
from bfica.sim.metrics import (
    METRIC_COLUMNS,
    SUMMARY_COLUMNS,
    MetricsCollector,
    MetricsRecord,
    dp_block_processing_time,
    emit_metrics,
    summarize,
)
from bfica.utils.crypto_identity import CertificateAuthority, EntityKind, Partition
from bfica.utils.tx_model import make_ese


def test_negative_metric_rejected():
    with pytest.raises(ValueError):
        MetricsRecord("bfica", 1, "PET", "verification_time", -0.1)


def test_collector_mean_by_kind():
    c = MetricsCollector("bfica", 1)
    c.add("PET", "verification_time", 1.0)
    c.add("PET", "verification_time", 3.0)
    c.add("NET", "verification_time", 10.0)
    assert c.mean("verification_time", "PET") == 2.0
    assert c.mean("verification_time") == pytest.approx(14.0 / 3)
    assert c.mean("time_overhead") == 0.0


def test_summarize_groups_and_std():
    c = MetricsCollector("bfica", 1)
    for v in (1.0, 2.0, 3.0):
        c.add("RET", "time_overhead", v)
    c.add("OP", "exposure_window", 5.0)
    rows = summarize(c.records)
    assert rows[0][:4] == ["bfica", "OP", "exposure_window", 1]
    assert rows[0][5] == repr(0.0)
    assert rows[1][:5] == ["bfica", "RET", "time_overhead", 3, repr(2.0)]
    assert float(rows[1][5]) == pytest.approx(1.0)


def test_emit_writes_both_files(tmp_path):
    c = MetricsCollector("baseline", 4)
    c.add("PET", "verification_time", 1.5)
    metrics, summary = emit_metrics(c.records, tmp_path, prefix="x_")
    assert metrics.name == "x_metrics.csv"
    lines = metrics.read_text().splitlines()
    assert lines[0] == ",".join(METRIC_COLUMNS)
    assert lines[1] == "baseline,4,PET,verification_time,1.5"
    assert summary.read_text().splitlines()[0] == ",".join(SUMMARY_COLUMNS)


def test_hash_only_blocks_are_cheaper():
    ca = CertificateAuthority(seed=1)
    cav = ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])
    ca.issue_pseudonyms(cav, 1)
    txs = [make_ese(cav, "x" * 500, float(i)) for i in range(3)]
    full = dp_block_processing_time(txs, CostModel())
    hashed = dp_block_processing_time(txs, CostModel(), hash_only=True)
    assert 0 < hashed < full
