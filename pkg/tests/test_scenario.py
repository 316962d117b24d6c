import pytest

from bfica.errors import ScenarioError
from bfica.sim.scenario import bundled_scenarios, load_scenario, parse_scenario, parse_time
from bfica.utils.crypto_identity import EntityKind
from bfica.utils.tx_model import InstructionKind

BASE = """
participant M1 manufacturer
participant I1 insurer
participant LA legal_authority law_enforcement
participant CAV1 vehicle maker=M1 insurer=I1 pseudonyms=2
participant CAV2 vehicle maker=M1 insurer=I1
"""


@pytest.mark.parametrize(
    "text,seconds", [("90", 90.0), ("2m", 120.0), ("1.5h", 5400.0), ("10d", 864000.0)]
)
def test_parse_time(text, seconds):
    assert parse_time(text) == seconds


@pytest.mark.parametrize("text", ["-1", "abc", "3x"])
def test_bad_time(text):
    with pytest.raises(ScenarioError):
        parse_time(text)


def test_full_grammar():
    sc = parse_scenario(BASE + """
config duration=2d b_max=3   # trailing comment
net 1h N1 M1 CAV1 software_update subsystem=braking file=fw-2
et 2h CAV1 N1 success
device CAV1 N1 installed install_time=90m
ese 1d CAV1 hard_brake lat=1.0 lon=2.0
collision 1d C1 lat=-33.8 lon=151.2
crash C1 CAV1 order=0 speed=2 events=unprovoked_hard_stop
crash C1 CAV2 order=1 speed=13.5 fault=braking video=100
witness C1 CAV2 CAV1 events=unprovoked_hard_stop
attack tx_deletion 1d actors=M1 target=CAV1
expect C1 level1=CAV1 level2=negligence
""", "t")
    assert sc.config == {"duration": "2d", "b_max": "3"}
    assert sc.participant("LA").law_enforcement
    assert sc.participant("CAV1").pseudonyms == 2
    assert sc.participant("CAV2").kind == EntityKind.VEHICLE
    net = sc.net("N1")
    assert net.instruction == InstructionKind.SOFTWARE_UPDATE and net.file == "fw-2"
    assert sc.devices[0].install_time == 5400.0
    assert sc.eses[0].loc is not None
    assert [c.vehicle for c in sc.crashes_in("C1")] == ["CAV1", "CAV2"]
    assert sc.crashes[1].video == 100
    assert sc.attacks[0].param("target") == "CAV1"
    assert sc.expectations[0].level2 == "negligence"


@pytest.mark.parametrize(
    "extra,line",
    [
        ("bogus 1 2", 8),
        ("participant M1 manufacturer", 8),
        ("net 1h N1 I1 CAV1 part_change subsystem=tyres", 8),
        ("et 1h CAV1 N9 success", 8),
        ("crash C9 CAV1 order=0 speed=1", 8),
        ("collision 1d C1 lat=1", 8),
        ("expect C1 level1=CAV1 level2=fault", 8),
        ("participant X1 robot", 8),
    ],
)
def test_errors_carry_line_numbers(extra, line):
    with pytest.raises(ScenarioError) as exc:
        parse_scenario(BASE + "\n" + extra + "\n")
    assert exc.value.line_no == line


def test_witness_subject_must_crash():
    text = BASE + """
collision 1d C1 lat=0 lon=0
crash C1 CAV1 order=0 speed=1
witness C1 CAV1 CAV2
"""
    with pytest.raises(ScenarioError):
        parse_scenario(text)


def test_bundled_scenarios_load():
    names = bundled_scenarios()
    assert {"rear_end_3cav", "genuine_rear_end", "single_vehicle", "workload_only"} <= set(names)
    for name in names:
        assert load_scenario(name).name == name


def test_unknown_scenario():
    with pytest.raises(ScenarioError):
        load_scenario("no_such_scenario")


def test_load_by_path(tmp_path):
    path = tmp_path / "mine.scn"
    path.write_text(BASE)
    assert load_scenario(str(path)).name == "mine"


def test_isolate_drops_other_evidence():
    sc = load_scenario("rear_end_3cav")
    alone = sc.isolate("CAV1")
    assert [c.vehicle for c in alone.crashes_in("C1")] == ["CAV1"]
    assert not [w for w in alone.witnesses if w.case == "C1"]
    assert len(sc.crashes_in("C1")) == 3
