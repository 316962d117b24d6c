from abc import ABC, abstractmethod
from dataclasses import dataclass
from enum import Enum
import logging
from typing import TYPE_CHECKING, ClassVar, Dict, FrozenSet, List, Optional, Sequence, Tuple

from bfica.errors import ConfigError
from bfica.ledger.dp_partition import ConsistencyReport, EvidenceBundle
from bfica.ledger.op_partition import ConsensusRound
from bfica.sim.scenario import AttackSpec, Scenario
from bfica.utils.crypto_identity import Digest, EntityKind, sha256
from bfica.utils.tx_model import Transaction, TransactionKind

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation

OP_VALIDATOR_KINDS = frozenset(
    {EntityKind.MANUFACTURER, EntityKind.TECHNICIAN, EntityKind.INSURER}
)
ISSUER_KINDS = frozenset({EntityKind.MANUFACTURER, EntityKind.TECHNICIAN})
VEHICLE_KINDS = frozenset({EntityKind.VEHICLE})


class DetectionMechanism(str, Enum):
    DYNAMIC_BLOCK_ID = "dynamic_block_id"
    T_ALT_BID = "t_alt_bid_tracking"
    CROSS_PROPOSER_HASH = "cross_proposer_hash"
    SPATIOTEMPORAL = "spatiotemporal_consistency"
    OWNER_READ_AUDIT = "owner_read_audit"
    NONE = "none"


REPORT_COLUMNS = ["attack_kind", "variant", "detected", "mechanism", "detection_time_s", "seed"]


@dataclass(frozen=True)
class DetectionReport:
    attack_kind: str
    variant: str
    detected: bool
    mechanism: DetectionMechanism
    detection_time_s: Optional[float]
    seed: int

    def row(self) -> List[object]:
        time = "" if self.detection_time_s is None else repr(round(self.detection_time_s, 6))
        return [self.attack_kind, self.variant, str(self.detected).lower(),
                self.mechanism.value, time, self.seed]


def counterfeit_file_hash(label: str) -> Digest:
    return sha256(b"bfica/counterfeit/" + label.encode("utf-8"))


class BaseAttack(ABC):
    """
    An adversarial script bound to a simulation run.

    Subclasses implement ``inject``. Scripts whose effect happens later (in a
    hook on evidence creation) arm themselves in ``inject`` and call
    ``mark_injected`` when the tampering actually takes place; detection time
    is measured from that point.
    """

    kind: ClassVar[str] = ""
    variants: ClassVar[Tuple[str, ...]] = ("default",)
    # Allowed entity kinds per actor position.
    roles: ClassVar[Tuple[FrozenSet[EntityKind], ...]] = ()
    # Variants that exercise a documented blind spot.
    blind_spots: ClassVar[FrozenSet[str]] = frozenset()

    def __init__(
        self,
        trigger: float,
        actors: Sequence[str],
        variant: str = "default",
        params: Optional[Dict[str, str]] = None,
    ):
        if variant not in self.variants:
            raise ConfigError(f"{self.kind}: unknown variant '{variant}'")
        self.trigger = float(trigger)
        self.actors = tuple(actors)
        self.variant = variant
        self.params = dict(params or {})
        self.armed = False
        self.injected_at: Optional[float] = None
        self.detected_at: Optional[float] = None
        self.mechanism = DetectionMechanism.NONE
        self.seed = 0

    @classmethod
    def from_spec(cls, spec: AttackSpec) -> "BaseAttack":
        return cls(spec.t, spec.actors, spec.variant, dict(spec.params))

    def param_float(self, key: str, default: float) -> float:
        raw = self.params.get(key)
        if raw is None:
            return default
        try:
            return float(raw)
        except ValueError:
            raise ConfigError(f"{self.kind}: {key} must be a number, got '{raw}'")

    @property
    def undetected_by_design(self) -> bool:
        return self.variant in self.blind_spots

    def transform_scenario(self, scenario: Scenario) -> Scenario:
        return scenario

    def validate_roles(self, scenario: Scenario) -> None:
        if len(self.actors) < len(self.roles):
            raise ConfigError(f"{self.kind} needs {len(self.roles)} actors, got {len(self.actors)}")
        for handle, kinds in zip(self.actors, self.roles):
            spec = scenario.participant(handle)
            if spec is None:
                raise ConfigError(f"{self.kind}: unknown actor '{handle}'")
            if spec.kind not in kinds:
                allowed = ", ".join(sorted(k.value for k in kinds))
                raise ConfigError(
                    f"{self.kind}: actor '{handle}' is a {spec.kind.value}, expected {allowed}"
                )

    def prepare(self, sim: "Simulation") -> None:
        self.seed = sim.config.seed

    def fire(self, sim: "Simulation") -> None:
        self.armed = True
        if self.inject(sim):
            self.mark_injected(sim)

    @abstractmethod
    def inject(self, sim: "Simulation") -> bool:
        """
        Performs the tampering. Returns True when it took effect immediately,
        False when it is armed for a later hook or had nothing to act on.
        """

    def mark_injected(self, sim: "Simulation") -> None:
        if self.injected_at is not None:
            return
        self.injected_at = float(sim.env.now)
        sim.trace.record("attack_inject", attack=self.kind, variant=self.variant,
                         actors=list(self.actors))

    def flag(self, sim: "Simulation", mechanism: DetectionMechanism) -> None:
        if self.detected_at is not None or self.injected_at is None:
            return
        self.detected_at = float(sim.env.now)
        self.mechanism = mechanism
        sim.trace.record("detection", attack=self.kind, variant=self.variant,
                         mechanism=mechanism.value,
                         after=self.detected_at - self.injected_at)

    def observe_round(self, sim: "Simulation", rnd: ConsensusRound) -> None:
        pass

    def observe_integrity(
        self, sim: "Simulation", bundle: EvidenceBundle, report: ConsistencyReport
    ) -> None:
        pass

    def finish(self, sim: "Simulation") -> None:
        pass

    def assess(self) -> DetectionReport:
        detected = self.detected_at is not None
        elapsed = None
        if detected and self.injected_at is not None and self.detected_at is not None:
            elapsed = self.detected_at - self.injected_at
        return DetectionReport(
            attack_kind=self.kind,
            variant=self.variant,
            detected=detected,
            mechanism=self.mechanism if detected else DetectionMechanism.NONE,
            detection_time_s=elapsed,
            seed=self.seed,
        )

    def report(self) -> DetectionReport:
        """The assessment, with a warning when a covered attack slipped through."""
        result = self.assess()
        if self.injected_at is None:
            logging.warning("%s/%s never took effect", self.kind, self.variant)
        elif not result.detected and not self.undetected_by_design:
            logging.warning("%s/%s went undetected", self.kind, self.variant)
        return result

    # Helpers shared by the scripts

    def vehicle_txs(
        self, sim: "Simulation", txs: Sequence[Transaction], vehicle: str
    ) -> List[Transaction]:
        keys = sim.vehicle_keys(sim.participant(vehicle))
        return [t for t in txs if t.signer in keys
                or (t.kind == TransactionKind.NET and t.signer_keys[-1] in keys)]
