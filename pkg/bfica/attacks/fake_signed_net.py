from typing import TYPE_CHECKING, Optional

from bfica.adjudication import owner_read_audit
from bfica.attacks.baseattack import (
    ISSUER_KINDS,
    VEHICLE_KINDS,
    BaseAttack,
    DetectionMechanism,
    counterfeit_file_hash,
)
from bfica.config import DAY
from bfica.ledger.op_partition import ConsensusRound
from bfica.utils.crypto_identity import Digest
from bfica.utils.tx_model import InstructionKind, UpdateMeta, countersign_net, make_net

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation


class FakeSignedNet(BaseAttack):
    """
    A rogue issuer holding a vehicle's compromised key forges an acknowledged
    instruction. By default the forgery is back-dated and slipped into the
    rogue's own dynamic block; ``pipeline`` submits it like any other
    transaction, leaving the owner's ledger audit as the only check.
    """

    kind = "fake_signed_net"
    variants = ("default", "pipeline")
    roles = (ISSUER_KINDS, VEHICLE_KINDS)

    fake_id: Optional[Digest] = None

    def inject(self, sim: "Simulation") -> bool:
        rogue = sim.participant(self.actors[0])
        cav = sim.participant(self.actors[1])
        backdate = self.param_float("backdate", 8 * DAY)
        issued = sim.env.now if self.variant == "pipeline" else max(0.0, sim.env.now - backdate)
        label = f"forged-{cav.handle}-{int(issued)}"
        meta = UpdateMeta(
            InstructionKind.SOFTWARE_UPDATE,
            counterfeit_file_hash(label),
            metadata=label,
            file_pointer=f"updates://{label}",
            subsystem=self.params.get("subsystem", "braking"),
        )
        fake = countersign_net(cav, make_net(rogue, cav, meta, issued))
        self.fake_id = fake.t_id
        if self.variant == "pipeline":
            sim.broadcast_op(fake, rogue.handle)
        else:
            sim.op_validator(rogue.handle).tamper_append(fake)
        return True

    def observe_round(self, sim: "Simulation", rnd: ConsensusRound) -> None:
        if self.injected_at is None or self.detected_at is not None:
            return
        if self.variant == "pipeline":
            if rnd.tx_ref == self.fake_id:
                self._owner_audit(sim)
            return
        if len(set(rnd.pre_t_alt_bids.values())) > 1:
            self.flag(sim, DetectionMechanism.T_ALT_BID)
        elif not rnd.consistent:
            self.flag(sim, DetectionMechanism.DYNAMIC_BLOCK_ID)

    def _owner_audit(self, sim: "Simulation") -> None:
        cav = sim.participant(self.actors[1])
        flagged = owner_read_audit(sim.op_view(cav).ledger, cav, sim.acknowledged[cav.handle])
        if any(t.t_id == self.fake_id for t in flagged):
            self.flag(sim, DetectionMechanism.OWNER_READ_AUDIT)

    def finish(self, sim: "Simulation") -> None:
        if self.variant == "pipeline" and self.injected_at is not None:
            self._owner_audit(sim)
