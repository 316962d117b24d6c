import io
import json
import sys

import pytest

from bfica import main
from bfica.ledger.dump import read_dump, write_dump


def _lines(out):
    return [json.loads(line) for line in out.splitlines() if line.startswith("{")]


def test_main_no_args_prints_usage(capsys, monkeypatch):
    monkeypatch.setattr(sys, "stdin", io.StringIO(""))
    monkeypatch.setattr(sys, "argv", ["bfica.main"])
    with pytest.raises(SystemExit):
        main.main()
    out = capsys.readouterr().out
    assert "Usage:" in out


def test_main_no_args_on_terminal_opens_menu(monkeypatch):
    class Tty(io.StringIO):
        def isatty(self):
            return True

    opened = []
    monkeypatch.setattr(sys, "stdin", Tty(""))
    monkeypatch.setattr(main.Menu, "interactive", lambda self: opened.append(True))
    assert main.main([]) == 0
    assert opened == [True]


def test_scenarios_lists_bundled(capsys):
    assert main.main(["scenarios"]) == 0
    names = capsys.readouterr().out.split()
    assert names == ["genuine_rear_end", "rear_end_3cav", "single_vehicle", "workload_only"]


def test_run_writes_results_and_summary(tmp_path, capsys):
    out = tmp_path / "run"
    assert main.main(["run", "--scenario", "genuine_rear_end", "--seed", "3",
                      "--out", str(out)]) == 0
    summary = _lines(capsys.readouterr().out)[0]
    assert summary["scenario"] == "genuine_rear_end"
    assert summary["seed"] == 3
    assert summary["expectations_failed"] == []
    assert (out / "op_ledger.ndjson").exists()
    assert (out / "trace.ndjson").exists()


class TestVerify:
    def _dump(self, tmp_path):
        out = tmp_path / "run"
        assert main.main(["run", "--scenario", "single_vehicle", "--out", str(out)]) == 0
        return out / "op_ledger.ndjson"

    def test_verify_ok(self, tmp_path, capsys):
        path = self._dump(tmp_path)
        capsys.readouterr()
        assert main.main(["verify", str(path)]) == 0
        doc = _lines(capsys.readouterr().out)[0]
        assert doc["ok"] is True
        assert doc["partition"] == "OP"
        assert doc["failed_height"] is None

    def test_verify_broken_chain(self, tmp_path, capsys):
        path = self._dump(tmp_path)
        records = read_dump(path)
        records[-1]["prev_bid"] = "00" * 32
        write_dump(records, path)
        capsys.readouterr()
        assert main.main(["verify", str(path)]) == 1
        doc = _lines(capsys.readouterr().out)[0]
        assert doc["ok"] is False
        assert doc["failed_height"] == records[-1]["seq_num"]

    def test_verify_missing_file(self, tmp_path, capsys):
        assert main.main(["verify", str(tmp_path / "absent.ndjson")]) == 1
        assert "error:" in capsys.readouterr().err


def test_unknown_scenario_is_an_error(capsys):
    assert main.main(["run", "--scenario", "no_such_scenario"]) == 1
    assert "scenario not found" in capsys.readouterr().err


def test_bad_override_is_an_error(capsys):
    assert main.main(["run", "--scenario", "single_vehicle", "--bmax", "0"]) == 1
    assert "error:" in capsys.readouterr().err


def test_unknown_subcommand_exits():
    with pytest.raises(SystemExit):
        main.main(["launch"])


def test_workload_stats(capsys):
    assert main.main(["workload", "--runs", "20", "--seed", "5"]) == 0
    stats = _lines(capsys.readouterr().out)[0]
    assert stats["runs"] == 20.0
    assert stats["rate_per_day"] == 42
    assert 30 < stats["mean_daily_pets"] < 55
    assert "chi_square" in stats


def test_attack_writes_csv(tmp_path, capsys, monkeypatch):
    from bfica.attacks import attack_matrix

    original = attack_matrix.AttackMatrix.scripts

    def only_deletions(self):
        return [s for s in original(self) if s.kind == "tx_deletion"]

    monkeypatch.setattr(attack_matrix.AttackMatrix, "scripts", only_deletions)
    assert main.main(["attack", "--out", str(tmp_path)]) == 0
    rates = _lines(capsys.readouterr().out)
    assert {(r["attack"], r["variant"]) for r in rates} == {
        ("tx_deletion", "default"), ("tx_deletion", "sealed")
    }
    assert all(r["detection_rate"] == 1.0 for r in rates)
    assert (tmp_path / "attacks.csv").exists()
