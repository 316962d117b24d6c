import csv
import json
from functools import lru_cache

import pytest

from bfica.errors import ConfigError
from bfica.ledger.dump import read_dump, verify_dump
from bfica.sim.runner import (
    Simulation,
    SimResult,
    measure_modes,
    run_scenario,
    scenario_config,
    write_outputs,
)
from bfica.sim.scenario import load_scenario, parse_scenario


@lru_cache(maxsize=None)
def _run(name: str, seed: int = 1) -> SimResult:
    scenario = load_scenario(name)
    return Simulation(scenario_config(scenario, seed=seed), scenario).run()


@pytest.mark.parametrize("name", ["rear_end_3cav", "genuine_rear_end", "single_vehicle"])
def test_bundled_scenarios_meet_their_expectations(name):
    result = _run(name)
    assert result.expectation_failures(load_scenario(name)) == []
    assert result.violations == []
    assert result.storage
    assert set(result.storage.values()) == {"intact"}


@pytest.mark.parametrize("name", ["rear_end_3cav", "genuine_rear_end", "single_vehicle"])
def test_final_ledgers_verify(name):
    result = _run(name)
    op = verify_dump(result.op_dump)
    dp = verify_dump(result.dp_dump)
    assert op.ok, op.reason
    assert dp.ok, dp.reason
    assert op.partition == "OP"
    assert dp.partition == "DP"


def test_rear_end_blames_leader_for_negligence():
    level1, level2 = _run("rear_end_3cav").decision_for("C1")
    assert level1 is not None and level2 is not None
    assert level1.liable_cav == "CAV1"
    assert level2.kind.value == "negligence"
    assert _run("rear_end_3cav").summary()["op_blocks"] >= 1


def test_same_seed_gives_identical_trace():
    scenario = load_scenario("rear_end_3cav")
    config = scenario_config(scenario, seed=7)
    first = Simulation(config, scenario).run()
    second = Simulation(config, scenario).run()
    assert first.trace.digest() == second.trace.digest()
    assert first.trace.render() == second.trace.render()


def test_run_is_memoized():
    scenario = load_scenario("single_vehicle")
    sim = Simulation(scenario_config(scenario), scenario)
    assert sim.run() is sim.run()


def test_zero_duration_runs_nothing():
    scenario = load_scenario("rear_end_3cav")
    result = Simulation(scenario_config(scenario, duration=0), scenario).run()
    assert len(result.trace) == 0
    assert result.level1 == []
    assert result.level2 == []
    assert result.summary()["op_blocks"] == 0


def test_evidence_responses_record_time_overhead():
    result = _run("rear_end_3cav")
    overheads = result.metrics.values("time_overhead", "RET")
    assert overheads
    assert all(v >= 0 for v in overheads)
    assert result.metrics.values("verification_time", "PET")


def test_summary_fields():
    result = _run("genuine_rear_end")
    summary = result.summary()
    assert summary["scenario"] == "genuine_rear_end"
    assert summary["seed"] == 1
    assert summary["mode"] == "bfica"
    assert summary["trace_digest"] == result.trace.digest()
    assert {row["level"] for row in summary["decisions"]} == {1, 2}


def test_write_outputs(tmp_path):
    result = _run("genuine_rear_end")
    out = write_outputs(result, tmp_path / "run")
    for name in ("trace.ndjson", "metrics.csv", "summary.csv", "op_ledger.ndjson",
                 "dp_ledger.ndjson", "decisions.ndjson", "store_manifest.csv"):
        assert (out / name).exists(), name
    assert verify_dump(read_dump(out / "op_ledger.ndjson")).ok
    lines = (out / "decisions.ndjson").read_text(encoding="utf-8").splitlines()
    assert all(json.loads(line)["label"] == "C1" for line in lines)
    with open(out / "metrics.csv", encoding="utf-8") as f:
        header = next(csv.reader(f))
    assert header == ["mode", "seed", "kind", "metric", "value"]


def test_run_scenario_warns_on_unmet_expectation(caplog):
    scenario = parse_scenario(
        "config duration=870000 pet_rate=0 fleet_size=0\n"
        "participant M1 manufacturer\n"
        "participant I1 insurer\n"
        "participant LA legal_authority law_enforcement\n"
        "participant CAV1 vehicle maker=M1 insurer=I1\n"
        "collision 10d C1 lat=-33.80 lon=151.20\n"
        "crash C1 CAV1 order=0 speed=20.0 fault=tyres\n"
        "expect C1 level1=CAV1 level2=service\n",
        "wrong_expectation",
    )
    with caplog.at_level("WARNING"):
        result = run_scenario(scenario_config(scenario), scenario)
    assert result.expectation_failures(scenario) == ["C1: expected CAV1/service, got CAV1/product"]
    assert "expectation not met" in caplog.text


def test_workload_fleet_generates_traffic():
    scenario = load_scenario("workload_only")
    result = Simulation(scenario_config(scenario, duration=21600, fleet_size=5), scenario).run()
    assert result.violations == []
    assert result.metrics.values("verification_time", "PET")
    assert verify_dump(result.op_dump).ok


def test_fleet_without_insurer_rejected():
    scenario = parse_scenario(
        "participant M1 manufacturer\n"
        "participant LA legal_authority law_enforcement\n",
        "no_insurer",
    )
    with pytest.raises(ConfigError):
        Simulation(scenario_config(scenario, duration=3600, fleet_size=2), scenario)


def test_scenario_without_validators_rejected():
    scenario = parse_scenario("participant CAV1 vehicle\n", "vehicles_only")
    with pytest.raises(ConfigError):
        Simulation(scenario_config(scenario), scenario)


class TestModeComparison:
    def setup_method(self):
        self.scenario = load_scenario("rear_end_3cav")
        self.table = measure_modes(scenario_config(self.scenario), self.scenario, seeds=(1, 2))

    def test_every_mode_on_every_seed(self):
        assert list(self.table.modes) == ["bfica", "baseline", "b4f"]
        for stats in self.table.modes.values():
            assert stats.seeds == (1, 2)
            assert len(stats.overheads) == 2

    def test_b4f_skips_tdata_check(self):
        modes = self.table.modes
        assert modes["b4f"].mean_pet_verification < modes["bfica"].mean_pet_verification

    def test_write(self, tmp_path):
        path = self.table.write(tmp_path)
        rows = list(csv.reader(path.open(encoding="utf-8")))
        assert rows[0] == ["mode", "runs", "mean_time_overhead", "std_time_overhead",
                           "mean_pet_verification"]
        assert [r[0] for r in rows[1:]] == ["bfica", "baseline", "b4f"]
        assert (tmp_path / "compare_metrics.csv").exists()


@pytest.mark.slow
def test_mode_ordering_over_fourteen_days():
    scenario = load_scenario("workload_only")
    table = measure_modes(scenario_config(scenario), scenario, seeds=range(1, 15))
    modes = table.modes
    assert modes["b4f"].mean_overhead > modes["bfica"].mean_overhead > modes["baseline"].mean_overhead
    gap = modes["bfica"].mean_pet_verification - modes["b4f"].mean_pet_verification
    assert gap == pytest.approx(0.30, abs=0.05)
    security = modes["bfica"].mean_overhead - modes["baseline"].mean_overhead
    assert security == pytest.approx(0.13, abs=0.02)
