import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Any, Dict

from bfica.attacks.attack_matrix import AttackMatrix
from bfica.config import CONSENSUS_MODES, MODES, SimConfig
from bfica.errors import BficaError
from bfica.ledger.dump import read_dump, verify_dump
from bfica.menu import Menu
from bfica.sim.runner import measure_modes, run_scenario, scenario_config
from bfica.sim.scenario import Scenario, bundled_scenarios, load_scenario
from bfica.sim.workload import workload_stats

USAGE = "Usage: python3 -m bfica.main {run,attack,compare,verify,workload,scenarios} ..."


def _emit(doc: Dict[str, Any]) -> None:
    print(json.dumps(doc, separators=(",", ":"), sort_keys=True))


def _config(args: argparse.Namespace, scenario: Scenario) -> SimConfig:
    return scenario_config(
        scenario,
        seed=args.seed,
        b_max=args.bmax,
        mode=getattr(args, "mode", None),
        duration=args.duration,
        consensus=getattr(args, "consensus", None),
    )


def cmd_run(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    result = run_scenario(_config(args, scenario), scenario, args.out)
    summary = result.summary()
    summary["expectations_failed"] = result.expectation_failures(scenario)
    _emit(summary)
    for failure in summary["expectations_failed"]:
        print(f"expectation not met: {failure}", file=sys.stderr)
    return 0


def cmd_attack(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    config = _config(args, scenario)
    matrix = AttackMatrix(
        config, scenario, seeds=range(config.seed, config.seed + args.runs), workers=args.workers
    )
    reports = matrix.run()
    if args.out:
        AttackMatrix.write(reports, Path(args.out) / "attacks.csv")
    for (kind, variant), rate in sorted(AttackMatrix.detection_rates(reports).items()):
        _emit({"attack": kind, "variant": variant, "detection_rate": rate})
    return 0


def cmd_compare(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    config = _config(args, scenario)
    table = measure_modes(
        config, scenario, range(config.seed, config.seed + args.runs), workers=args.workers
    )
    if args.out:
        table.write(args.out)
    for mode, stats in table.modes.items():
        _emit({
            "mode": mode,
            "runs": len(stats.seeds),
            "mean_time_overhead": stats.mean_overhead,
            "std_time_overhead": stats.std_overhead,
            "mean_pet_verification": stats.mean_pet_verification,
        })
    return 0


def cmd_verify(args: argparse.Namespace) -> int:
    result = verify_dump(read_dump(args.dump))
    _emit({
        "ok": result.ok,
        "partition": result.partition,
        "blocks": result.blocks,
        "failed_height": result.failed_height,
        "reason": result.reason,
    })
    return 0 if result.ok else 1


def cmd_workload(args: argparse.Namespace) -> int:
    scenario = load_scenario(args.scenario)
    config = scenario_config(scenario, seed=args.seed, pet_rate=args.rate, duration=args.duration)
    _emit(workload_stats(config, args.runs))
    return 0


def cmd_scenarios(args: argparse.Namespace) -> int:
    for name in bundled_scenarios():
        print(name)
    return 0


def _sim_flags(p: argparse.ArgumentParser, scenario: str, mode: bool = True) -> None:
    p.add_argument("--scenario", default=scenario, help="bundled scenario name or .scn path")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--bmax", type=int, default=None, help="transactions per sealed block")
    p.add_argument("--duration", type=float, default=None, help="simulated seconds")
    p.add_argument("--consensus", choices=CONSENSUS_MODES, default=None)
    if mode:
        p.add_argument("--mode", choices=MODES, default=None)
    p.add_argument("--out", default=None, help="directory for result files")


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="bfica", description="Accident forensics ledger simulator")
    sub = ap.add_subparsers(dest="cmd", required=True)

    r = sub.add_parser("run", help="run one scenario")
    _sim_flags(r, "rear_end_3cav")
    r.set_defaults(func=cmd_run)

    a = sub.add_parser("attack", help="run the scenario's attack scripts")
    _sim_flags(a, "rear_end_3cav")
    a.add_argument("--runs", type=int, default=1, help="seeds per attack script")
    a.add_argument("--workers", type=int, default=1)
    a.set_defaults(func=cmd_attack)

    c = sub.add_parser("compare", help="compare storage modes on the same seeds")
    _sim_flags(c, "workload_only", mode=False)
    c.add_argument("--runs", type=int, default=14)
    c.add_argument("--workers", type=int, default=1)
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="replay a ledger dump and check every link")
    v.add_argument("dump")
    v.set_defaults(func=cmd_verify)

    w = sub.add_parser("workload", help="crash generator statistics")
    w.add_argument("--scenario", default="workload_only")
    w.add_argument("--seed", type=int, default=None)
    w.add_argument("--rate", type=float, default=None, help="crashes per day")
    w.add_argument("--duration", type=float, default=None)
    w.add_argument("--runs", type=int, default=100)
    w.set_defaults(func=cmd_workload)

    s = sub.add_parser("scenarios", help="list bundled scenarios")
    s.set_defaults(func=cmd_scenarios)
    return ap


def main(argv: list[str] | None = None) -> int:
    """CLI entrypoint.

    Usage:
      - Interactive menu: no arguments, from a terminal
      - Subcommands: run, attack, compare, verify, workload, scenarios
    """
    argv = sys.argv[1:] if argv is None else argv
    logging.basicConfig(
        level=os.environ.get("BFICA_LOG_LEVEL", "WARNING").upper(),
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )

    # no args -> interactive only when running from a terminal.
    if not argv:
        if sys.stdin is not None and sys.stdin.isatty():
            Menu().interactive()
            return 0
        print(USAGE)
        raise SystemExit(1)

    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except BficaError as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
