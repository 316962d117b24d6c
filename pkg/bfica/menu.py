import json
import subprocess
import sys
from pathlib import Path

from bfica.attacks.attack_matrix import AttackMatrix
from bfica.errors import BficaError
from bfica.ledger.dump import read_dump, verify_dump
from bfica.sim.runner import measure_modes, run_scenario, scenario_config
from bfica.sim.scenario import bundled_scenarios, load_scenario


class Menu:
    """Interactive front end over the same operations as the subcommands."""

    def __init__(self, out_dir: str = "results"):
        self.out_dir = out_dir

    def pick_scenario(self, default: str) -> str:
        names = bundled_scenarios()
        print("Scenarios:")
        for i, name in enumerate(names, 1):
            print(f"  {i}) {name}")
        choice = input(f"Choose scenario by number or name [{default}]: ").strip()
        if not choice:
            return default
        if choice.isdigit() and 1 <= int(choice) <= len(names):
            return names[int(choice) - 1]
        return choice

    def run_scenario(self, name: str) -> None:
        scenario = load_scenario(name)
        out = Path(self.out_dir) / scenario.name
        result = run_scenario(scenario_config(scenario), scenario, out)
        for row in result.decisions():
            print(json.dumps(row, separators=(",", ":"), sort_keys=True))
        for failure in result.expectation_failures(scenario):
            print(f"expectation not met: {failure}")
        print(f"Results written to {out}")

    def run_attacks(self, name: str) -> None:
        scenario = load_scenario(name)
        reports = AttackMatrix(scenario_config(scenario), scenario).run()
        for r in reports:
            print(",".join(str(v) for v in r.row()))
        path = AttackMatrix.write(reports, Path(self.out_dir) / scenario.name / "attacks.csv")
        print(f"Results written to {path}")

    def run_compare(self, name: str, runs: int = 3) -> None:
        scenario = load_scenario(name)
        config = scenario_config(scenario)
        table = measure_modes(config, scenario, range(config.seed, config.seed + runs))
        for row in table.rows():
            print(",".join(str(v) for v in row))
        print(f"Results written to {table.write(Path(self.out_dir) / 'compare')}")

    def verify(self, path: str) -> None:
        result = verify_dump(read_dump(path))
        if result.ok:
            print(f"{path}: ok ({result.blocks} blocks)")
        else:
            print(f"{path}: broken at height {result.failed_height}: {result.reason}")

    def run_tests(self) -> None:
        subprocess.run([sys.executable, "-m", "pytest", "-q"], check=False)

    def interactive(self) -> None:
        print("Choose an option by typing the number and pressing enter:\n")
        print("1) Run a scenario")
        print("2) Run a scenario's attack matrix")
        print("3) Compare storage modes")
        print("4) Verify a ledger dump")
        print("5) Run all tests (pytest)\n")

        choice = input("Choice: ").strip()
        try:
            if choice == "1":
                self.run_scenario(self.pick_scenario("rear_end_3cav"))
            elif choice == "2":
                self.run_attacks(self.pick_scenario("rear_end_3cav"))
            elif choice == "3":
                self.run_compare(self.pick_scenario("workload_only"))
            elif choice == "4":
                self.verify(input("Dump file: ").strip())
            elif choice == "5":
                self.run_tests()
            else:
                print("Unknown choice")
        except BficaError as e:
            print(f"error: {e}")
