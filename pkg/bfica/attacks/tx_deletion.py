import logging
from typing import TYPE_CHECKING, Optional

from bfica.attacks.baseattack import OP_VALIDATOR_KINDS, BaseAttack, DetectionMechanism
from bfica.ledger.dump import dump_op_ledger, verify_dump
from bfica.ledger.op_partition import ConsensusRound, OpValidator
from bfica.utils.crypto_identity import Digest
from bfica.utils.tx_model import TransactionKind

if TYPE_CHECKING:
    from bfica.sim.runner import Simulation


class TxDeletion(BaseAttack):
    """
    A rogue validator drops a transaction from its own copy of the ledger.

    ``target`` names either a vehicle (its latest PET, else its latest
    transaction) or a scenario instruction label. The default variant edits
    the dynamic block; ``sealed`` edits an already sealed block.
    """

    kind = "tx_deletion"
    variants = ("default", "sealed")
    roles = (OP_VALIDATOR_KINDS,)

    deleted: Optional[Digest] = None

    @property
    def rogue(self) -> str:
        return self.actors[0]

    def _target(self, sim: "Simulation", rogue: OpValidator) -> Optional[Digest]:
        target = self.params.get("target")
        if target is None:
            return None
        if target in sim.net_ids:
            return sim.net_ids[target]
        if sim.scenario.participant(target) is None:
            return None
        if self.variant == "sealed":
            pool = [t for block in rogue.sealed for t in block.txs]
        else:
            pool = list(rogue.dblock.txs)
        mine = self.vehicle_txs(sim, pool, target)
        pets = [t for t in mine if t.kind == TransactionKind.PET]
        candidates = pets or mine
        return candidates[-1].t_id if candidates else None

    def inject(self, sim: "Simulation") -> bool:
        rogue = sim.op_validator(self.rogue)
        t_id = self._target(sim, rogue)
        if t_id is None:
            logging.warning("tx_deletion: no target '%s' on %s's ledger",
                            self.params.get("target"), self.rogue)
            return False
        if self.variant == "sealed":
            removed = rogue.tamper_sealed(t_id) is not None
        else:
            removed = rogue.tamper_remove(t_id)
        if not removed:
            logging.warning("tx_deletion: %s not held by %s", t_id.hex()[:12], self.rogue)
            return False
        self.deleted = t_id
        return True

    def _chain_broken(self, sim: "Simulation") -> bool:
        return not verify_dump(dump_op_ledger(sim.op_validator(self.rogue).ledger)).ok

    def observe_round(self, sim: "Simulation", rnd: ConsensusRound) -> None:
        if self.injected_at is None or self.detected_at is not None:
            return
        if self.variant == "sealed":
            if self._chain_broken(sim):
                self.flag(sim, DetectionMechanism.DYNAMIC_BLOCK_ID)
        elif not rnd.consistent:
            self.flag(sim, DetectionMechanism.DYNAMIC_BLOCK_ID)

    def finish(self, sim: "Simulation") -> None:
        if self.variant == "sealed" and self.injected_at is not None and self._chain_broken(sim):
            self.flag(sim, DetectionMechanism.DYNAMIC_BLOCK_ID)
