from typing import TYPE_CHECKING, Dict, Optional, Sequence, Set

from bfica.attacks.baseattack import VEHICLE_KINDS, BaseAttack, DetectionMechanism
from bfica.errors import ConfigError
from bfica.ledger.dp_partition import ConsistencyReport, EvidenceBundle
from bfica.sim.scenario import Scenario
from bfica.utils.crypto_identity import Participant
from bfica.utils.tx_model import CollisionRecord, EventRecord, RetBody

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation

SPATIOTEMPORAL = frozenset({"temporal", "spatial", "witness"})


class SensorAlteration(BaseAttack):
    """
    A vehicle's sensors report a shifted position (``offset_m``), an earlier
    time (``ts_offset``) or a different speed (``speed_offset``) for its own
    crash. ``no_witness`` removes every other source of evidence for the
    case, which leaves the alteration nothing to disagree with.
    """

    kind = "sensor_alteration"
    variants = ("default", "no_witness")
    roles = (VEHICLE_KINDS,)
    blind_spots = frozenset({"no_witness"})

    def __init__(
        self,
        trigger: float,
        actors: Sequence[str],
        variant: str = "default",
        params: Optional[Dict[str, str]] = None,
    ):
        super().__init__(trigger, actors, variant, params)
        self.altered: Set[bytes] = set()

    @property
    def vehicle(self) -> str:
        return self.actors[0]

    def transform_scenario(self, scenario: Scenario) -> Scenario:
        if self.variant == "no_witness":
            return scenario.isolate(self.vehicle)
        return scenario

    def prepare(self, sim: "Simulation") -> None:
        super().prepare(sim)
        if self.param_float("ts_offset", 0.0) < 0:
            raise ConfigError("sensor_alteration: ts_offset cannot move a record into the future")
        sim.pet_hooks.append(self._alter)

    def inject(self, sim: "Simulation") -> bool:
        return False

    def _alter(self, sim: "Simulation", cav: Participant, record: CollisionRecord) -> CollisionRecord:
        if not self.armed or cav.handle != self.vehicle:
            return record
        event = record.event_record()
        speed = max(0.0, event.speed + self.param_float("speed_offset", 0.0))
        ve_px = EventRecord(event.order, speed, event.events, event.fault_subsystem).encode()
        altered = CollisionRecord.build(
            record.loc.offset(north_m=self.param_float("offset_m", 500.0)),
            record.ts - self.param_float("ts_offset", 0.0),
            ve_px,
            record.ts_data,
            record.witness_ciphertexts,
        )
        self.altered.add(cav.active_pseudonym().public_key)
        self.mark_injected(sim)
        return altered

    def observe_integrity(
        self, sim: "Simulation", bundle: EvidenceBundle, report: ConsistencyReport
    ) -> None:
        if self.injected_at is None or self.detected_at is not None:
            return
        hosted = {
            r.t_id for r in bundle.rets
            if isinstance(r.body, RetBody) and r.body.host_key in self.altered
        }
        if any(c.category in SPATIOTEMPORAL and hosted.intersection(c.refs)
               for c in report.failures()):
            self.flag(sim, DetectionMechanism.SPATIOTEMPORAL)
