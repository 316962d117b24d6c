import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Type, Union

from bfica.attacks.baseattack import REPORT_COLUMNS, BaseAttack, DetectionMechanism, DetectionReport
from bfica.attacks.dp_modification import DpModification
from bfica.attacks.fake_signed_net import FakeSignedNet
from bfica.attacks.op_collusion import OpCollusion
from bfica.attacks.sensor_alteration import SensorAlteration
from bfica.attacks.tx_deletion import TxDeletion
from bfica.config import SimConfig
from bfica.errors import BficaError, ConfigError
from bfica.sim.runner import SimResult, Simulation
from bfica.sim.scenario import AttackSpec, Scenario

ATTACKS: Dict[str, Type[BaseAttack]] = {
    cls.kind: cls
    for cls in (TxDeletion, FakeSignedNet, OpCollusion, DpModification, SensorAlteration)
}


def attack_from_spec(spec: AttackSpec) -> BaseAttack:
    cls = ATTACKS.get(spec.kind)
    if cls is None:
        raise ConfigError(f"unknown attack '{spec.kind}'")
    return cls.from_spec(spec)


def run_attack(
    config: SimConfig, scenario: Scenario, spec: AttackSpec
) -> Tuple[DetectionReport, SimResult]:
    attack = attack_from_spec(spec)
    result = Simulation(config, scenario, [attack]).run()
    return attack.report(), result


def _matrix_job(job: Tuple[SimConfig, Scenario, AttackSpec]) -> DetectionReport:
    config, scenario, spec = job
    try:
        return run_attack(config, scenario, spec)[0]
    except BficaError as e:
        logging.warning("attack %s/%s failed on seed %d: %s",
                        spec.kind, spec.variant, config.seed, e)
        return DetectionReport(spec.kind, spec.variant, False, DetectionMechanism.NONE,
                               None, config.seed)


@dataclass
class AttackMatrix:
    """Every scripted attack of a scenario, each on every seed."""

    config: SimConfig
    scenario: Scenario
    seeds: Sequence[int] = (1,)
    specs: Optional[Sequence[AttackSpec]] = None
    workers: int = 1

    def scripts(self) -> List[AttackSpec]:
        return list(self.scenario.attacks if self.specs is None else self.specs)

    def validate(self) -> None:
        """Role and variant errors surface before anything runs."""
        if not self.scripts():
            raise ConfigError(f"scenario '{self.scenario.name}' scripts no attacks")
        for spec in self.scripts():
            attack_from_spec(spec).validate_roles(self.scenario)

    def run(self) -> List[DetectionReport]:
        self.validate()
        jobs = [
            (self.config.with_overrides(seed=seed), self.scenario, spec)
            for spec in self.scripts()
            for seed in self.seeds
        ]
        if self.workers > 1:
            with ProcessPoolExecutor(max_workers=self.workers) as pool:
                return list(pool.map(_matrix_job, jobs))
        return [_matrix_job(job) for job in jobs]

    @staticmethod
    def detection_rates(reports: Sequence[DetectionReport]) -> Dict[Tuple[str, str], float]:
        totals: Dict[Tuple[str, str], List[bool]] = {}
        for r in reports:
            totals.setdefault((r.attack_kind, r.variant), []).append(r.detected)
        return {k: sum(v) / len(v) for k, v in totals.items()}

    @staticmethod
    def write(reports: Sequence[DetectionReport], path: Union[str, Path]) -> Path:
        out = Path(path)
        out.parent.mkdir(parents=True, exist_ok=True)
        with open(out, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(REPORT_COLUMNS)
            writer.writerows(r.row() for r in reports)
        return out
