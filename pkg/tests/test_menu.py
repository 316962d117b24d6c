import subprocess

from bfica import menu as menu_module
from bfica.menu import Menu


def _answers(monkeypatch, *values):
    it = iter(values)
    monkeypatch.setattr("builtins.input", lambda prompt="": next(it))


def test_pick_scenario_by_number_name_and_default(monkeypatch, capsys):
    menu = Menu()
    _answers(monkeypatch, "3", "genuine_rear_end", "")
    assert menu.pick_scenario("rear_end_3cav") == "single_vehicle"
    assert menu.pick_scenario("rear_end_3cav") == "genuine_rear_end"
    assert menu.pick_scenario("rear_end_3cav") == "rear_end_3cav"
    assert "1) genuine_rear_end" in capsys.readouterr().out


def test_interactive_runs_scenario(tmp_path, monkeypatch, capsys):
    _answers(monkeypatch, "1", "single_vehicle")
    Menu(str(tmp_path)).interactive()
    out = capsys.readouterr().out
    assert '"kind":"service"' in out
    assert "expectation not met" not in out
    assert (tmp_path / "single_vehicle" / "decisions.ndjson").exists()


def test_interactive_verify(tmp_path, monkeypatch, capsys):
    Menu(str(tmp_path)).run_scenario("single_vehicle")
    dump = tmp_path / "single_vehicle" / "op_ledger.ndjson"
    capsys.readouterr()
    _answers(monkeypatch, "4", str(dump))
    Menu(str(tmp_path)).interactive()
    assert f"{dump}: ok" in capsys.readouterr().out


def test_interactive_reports_errors(tmp_path, monkeypatch, capsys):
    _answers(monkeypatch, "4", str(tmp_path / "missing.ndjson"))
    Menu(str(tmp_path)).interactive()
    assert "error: no ledger dump" in capsys.readouterr().out


def test_interactive_unknown_choice(monkeypatch, capsys):
    _answers(monkeypatch, "9")
    Menu().interactive()
    assert "Unknown choice" in capsys.readouterr().out


def test_run_tests_invokes_pytest(monkeypatch):
    calls = []

    def fake_run(cmd, check):
        calls.append(cmd)
        return subprocess.CompletedProcess(cmd, 0)

    monkeypatch.setattr(menu_module.subprocess, "run", fake_run)
    _answers(monkeypatch, "5")
    Menu().interactive()
    assert calls and calls[0][-3:] == ["-m", "pytest", "-q"]
