from typing import TYPE_CHECKING, Dict, List, Optional, Sequence

from bfica.adjudication import owner_read_audit
from bfica.attacks.baseattack import (
    OP_VALIDATOR_KINDS,
    VEHICLE_KINDS,
    BaseAttack,
    DetectionMechanism,
    counterfeit_file_hash,
)
from bfica.config import DAY
from bfica.errors import ConfigError
from bfica.ledger.op_partition import ConsensusRound
from bfica.sim.scenario import Scenario
from bfica.utils.crypto_identity import Digest, EntityKind, Participant
from bfica.utils.tx_model import (
    InstructionKind,
    Transaction,
    UpdateMeta,
    countersign_net,
    make_net,
)

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation


class OpCollusion(BaseAttack):
    """
    Two or more OP validators agree on a false instruction and validate it
    into their dynamic blocks together. Actors are the colluders followed by
    the vehicle the instruction targets.

    ``periodic`` instead pushes false instructions through the normal
    pipeline every ``period`` seconds, ``count`` times.
    """

    kind = "op_collusion"
    variants = ("default", "periodic")
    roles = (OP_VALIDATOR_KINDS, OP_VALIDATOR_KINDS)

    def __init__(
        self,
        trigger: float,
        actors: Sequence[str],
        variant: str = "default",
        params: Optional[Dict[str, str]] = None,
    ):
        super().__init__(trigger, actors, variant, params)
        self.fake_ids: List[Digest] = []
        self.implicated: List[str] = []

    @property
    def colluders(self) -> List[str]:
        return list(self.actors[:-1])

    @property
    def vehicle(self) -> str:
        return self.actors[-1]

    def validate_roles(self, scenario: Scenario) -> None:
        super().validate_roles(scenario)
        if len(self.actors) < 3:
            raise ConfigError("op_collusion needs at least two colluders and a target vehicle")
        specs = [scenario.participant(h) for h in self.actors]
        if any(s is None for s in specs):
            raise ConfigError("op_collusion: unknown actor")
        *colluders, target = specs
        if any(s.kind not in OP_VALIDATOR_KINDS for s in colluders if s):
            raise ConfigError("op_collusion: every colluder must be an OP validator")
        if target is None or target.kind not in VEHICLE_KINDS:
            raise ConfigError("op_collusion: the last actor must be a vehicle")
        if not any(s.kind in (EntityKind.MANUFACTURER, EntityKind.TECHNICIAN) for s in colluders if s):
            raise ConfigError("op_collusion: one colluder must be able to issue instructions")

    def _issuer(self, sim: "Simulation") -> Participant:
        for handle in self.colluders:
            p = sim.participant(handle)
            if p.kind in (EntityKind.MANUFACTURER, EntityKind.TECHNICIAN):
                return p
        raise ConfigError("op_collusion: no colluder can issue instructions")

    def _forge(self, sim: "Simulation", issued: float) -> Transaction:
        cav = sim.participant(self.vehicle)
        label = f"collusion-{cav.handle}-{len(self.fake_ids)}"
        meta = UpdateMeta(
            InstructionKind.SOFTWARE_UPDATE,
            counterfeit_file_hash(label),
            metadata=label,
            file_pointer=f"updates://{label}",
            subsystem=self.params.get("subsystem", "braking"),
        )
        fake = countersign_net(cav, make_net(self._issuer(sim), cav, meta, issued))
        self.fake_ids.append(fake.t_id)
        return fake

    def inject(self, sim: "Simulation") -> bool:
        if self.variant == "periodic":
            period = self.param_float("period", DAY)
            count = int(self.param_float("count", 3))
            self._push(sim)
            for k in range(1, count):
                sim.schedule(sim.env.now + k * period, self._push, sim)
            return True
        fake = self._forge(sim, max(0.0, sim.env.now - self.param_float("backdate", 8 * DAY)))
        for handle in self.colluders:
            sim.op_validator(handle).tamper_append(fake, keep_in_pool=True)
        return True

    def _push(self, sim: "Simulation") -> None:
        sim.broadcast_op(self._forge(sim, sim.env.now), self._issuer(sim).handle)

    def observe_round(self, sim: "Simulation", rnd: ConsensusRound) -> None:
        if self.injected_at is None:
            return
        if self.variant == "periodic":
            if rnd.tx_ref in self.fake_ids:
                self._owner_audit(sim)
            return
        if rnd.resolution is not None:
            self.implicated = sorted(rnd.resolution.implicated)
        if not rnd.consistent:
            self.flag(sim, DetectionMechanism.DYNAMIC_BLOCK_ID)

    def _owner_audit(self, sim: "Simulation") -> None:
        cav = sim.participant(self.vehicle)
        flagged = {t.t_id for t in owner_read_audit(sim.op_view(cav).ledger, cav,
                                                    sim.acknowledged[cav.handle])}
        if flagged.intersection(self.fake_ids):
            self.flag(sim, DetectionMechanism.OWNER_READ_AUDIT)
