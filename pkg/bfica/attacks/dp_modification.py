import dataclasses
from typing import TYPE_CHECKING, Dict, Optional, Sequence, Set

from bfica.attacks.baseattack import VEHICLE_KINDS, BaseAttack, DetectionMechanism
from bfica.errors import ConfigError
from bfica.ledger.dp_partition import ANOMALOUS_STOP, ConsistencyReport, EvidenceBundle
from bfica.sim.scenario import Scenario
from bfica.utils.crypto_identity import Digest, EntityKind, Participant
from bfica.utils.tx_model import CollisionRecord, EventRecord, PetBody, RetBody, Transaction

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation

FIELDS = ("loc", "ts", "ve_px")
SPATIOTEMPORAL = frozenset({"temporal", "spatial", "witness"})


class DpModification(BaseAttack):
    """
    A manufacturer colluding with its vehicle rewrites the collision record
    it embeds in its requests for evidence, rebuilding the record hash so
    the request is internally consistent.

    ``sole_source`` also withholds every other proposer's request for that
    vehicle, so no independent copy exists to compare against.
    """

    kind = "dp_modification"
    variants = ("default", "sole_source")
    roles = (frozenset({EntityKind.MANUFACTURER}), VEHICLE_KINDS)
    blind_spots = frozenset({"sole_source"})

    def __init__(
        self,
        trigger: float,
        actors: Sequence[str],
        variant: str = "default",
        params: Optional[Dict[str, str]] = None,
    ):
        super().__init__(trigger, actors, variant, params)
        self.field = self.params.get("field", "ve_px" if variant == "sole_source" else "loc")
        if self.field not in FIELDS:
            raise ConfigError(f"dp_modification: field must be one of {', '.join(FIELDS)}")
        self.targets: Set[Digest] = set()

    @property
    def maker(self) -> str:
        return self.actors[0]

    @property
    def vehicle(self) -> str:
        return self.actors[1]

    def validate_roles(self, scenario: Scenario) -> None:
        super().validate_roles(scenario)
        spec = scenario.participant(self.vehicle)
        if spec is None or spec.maker != self.maker:
            raise ConfigError(f"dp_modification: '{self.vehicle}' is not made by '{self.maker}'")

    def prepare(self, sim: "Simulation") -> None:
        super().prepare(sim)
        sim.ret_hooks.append(self._rewrite)
        if self.variant == "sole_source":
            sim.ret_filters.append(self._sole_source)

    def inject(self, sim: "Simulation") -> bool:
        return False

    def _sole_source(self, proposer: Participant, cav: Participant) -> bool:
        return not (self.armed and cav.handle == self.vehicle and proposer.handle != self.maker)

    def _mutate(self, record: CollisionRecord) -> CollisionRecord:
        loc, ts, ve_px = record.loc, record.ts, record.ve_px
        if self.field == "loc":
            loc = loc.offset(north_m=self.param_float("offset_m", 1000.0))
        elif self.field == "ts":
            ts = ts - self.param_float("ts_offset", 300.0)
        else:
            event = record.event_record()
            ve_px = EventRecord(
                event.order, event.speed,
                tuple(e for e in event.events if e != ANOMALOUS_STOP), "",
            ).encode()
        return CollisionRecord.build(loc, ts, ve_px, record.ts_data, record.witness_ciphertexts)

    def _rewrite(self, sim: "Simulation", proposer: Participant, pet: Transaction) -> Transaction:
        if not self.armed or proposer.handle != self.maker:
            return pet
        owner = sim.owner_of_pet(pet.t_id)
        if owner is None or owner.handle != self.vehicle:
            return pet
        assert isinstance(pet.body, PetBody)
        self.targets.add(pet.t_id)
        self.mark_injected(sim)
        body = PetBody(self._mutate(pet.body.record), pet.body.submitted_at)
        return dataclasses.replace(pet, body=body)

    def observe_integrity(
        self, sim: "Simulation", bundle: EvidenceBundle, report: ConsistencyReport
    ) -> None:
        if self.injected_at is None or self.detected_at is not None:
            return
        maker_key = sim.participant(self.maker).public_key
        forged = {
            r.t_id for r in bundle.rets
            if r.signer == maker_key and isinstance(r.body, RetBody) and r.body.pet_ref in self.targets
        }
        hits = [c for c in report.failures() if forged.intersection(c.refs)]
        if any(c.category == "cross_proposer_hash" for c in hits):
            self.flag(sim, DetectionMechanism.CROSS_PROPOSER_HASH)
        elif any(c.category in SPATIOTEMPORAL for c in hits):
            self.flag(sim, DetectionMechanism.SPATIOTEMPORAL)
