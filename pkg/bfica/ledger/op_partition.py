"""
Operational partition: per-transaction validation into a dynamic block.

Each validator folds every verified transaction into the running block id,
``block_id = sha256(t_id || previous block_id)``, seeded with the previous
sealed block id. Validators compare ids after every transaction; a mismatch
rolls everyone back to the last id they agreed on and replays their received
transactions in (submitted_at, t_id) order. Divergence that survives the
replay is handed to the decision partition.
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, Iterator, List, Optional, Sequence, Set, Tuple

from bfica.config import B_MAX, CONSENSUS_MODES
from bfica.errors import ConfigError, IdentityError, ProtocolError
from bfica.utils.codec import Encoder
from bfica.utils.crypto_identity import (
    ZERO_DIGEST,
    CertificateDirectory,
    Digest,
    EntityKind,
    GenesisCredential,
    Participant,
    Partition,
    sha256,
)
from bfica.utils.tx_model import (
    EtBody,
    NetBody,
    PetBody,
    Transaction,
    TransactionKind,
)

OP_KINDS = frozenset(
    {TransactionKind.ESE, TransactionKind.PET, TransactionKind.NET, TransactionKind.ET}
)
ISSUER_KINDS = frozenset({EntityKind.MANUFACTURER, EntityKind.TECHNICIAN})


class RejectReason(str, Enum):
    UNAUTHORIZED = "unauthorized"
    INCOMPLETE_MULTISIG = "incomplete_multisig"
    DUPLICATE = "duplicate"
    PAYLOAD_INTEGRITY = "payload_integrity"


@dataclass(frozen=True)
class Verdict:
    accepted: bool
    reason: Optional[Enum] = None
    detail: str = ""

    @classmethod
    def ok(cls) -> "Verdict":
        return cls(True)

    @classmethod
    def reject(cls, reason: Enum, detail: str = "") -> "Verdict":
        return cls(False, reason, detail)


class RoundOutcome(str, Enum):
    CONSISTENT = "consistent"
    DIVERGENT = "divergent"


class RecoveryOutcome(str, Enum):
    RECOVERED = "recovered"
    ESCALATE = "escalate"


def genesis_block_id(credential: GenesisCredential) -> Digest:
    return sha256(
        Encoder()
        .raw(b"bfica/genesis")
        .text(credential.partition.value)
        .raw(credential.ca_verification_key)
        .to_bytes()
    )


@dataclass(frozen=True)
class GenesisBlock:
    credential: GenesisCredential
    seq_num: int = 0

    @property
    def partition(self) -> Partition:
        return self.credential.partition

    @property
    def block_id(self) -> Digest:
        return genesis_block_id(self.credential)


def fold_block_id(t_id: Digest, prev: Digest) -> Digest:
    return sha256(t_id.value + prev.value)


def fold_sequence(t_ids: Sequence[Digest], seed: Digest) -> List[Digest]:
    """The seed followed by the block id after each step."""
    steps = [seed]
    for t_id in t_ids:
        steps.append(fold_block_id(t_id, steps[-1]))
    return steps


@dataclass
class DynamicBlockHeader:
    seq_num: int
    block_id: Digest
    prev_bid: Digest
    t_alt_bid: Digest = ZERO_DIGEST


@dataclass
class DynamicBlock:
    header: DynamicBlockHeader
    txs: List[Transaction] = field(default_factory=list)
    step_ids: List[Digest] = field(default_factory=list)
    opened_at: Optional[float] = None

    @classmethod
    def open(cls, seq_num: int, prev_bid: Digest) -> "DynamicBlock":
        return cls(DynamicBlockHeader(seq_num, prev_bid, prev_bid), [], [prev_bid])

    def __len__(self) -> int:
        return len(self.txs)

    def append(self, tx: Transaction, at: Optional[float] = None) -> Digest:
        new_id = fold_block_id(tx.t_id, self.header.block_id)
        self.txs.append(tx)
        self.step_ids.append(new_id)
        self.header.block_id = new_id
        self.header.t_alt_bid = tx.t_id
        if self.opened_at is None:
            self.opened_at = at
        return new_id

    def rebuild(self, txs: Sequence[Transaction]) -> None:
        """Refold ``txs`` from the block's seed."""
        seed = self.header.prev_bid
        self.txs = list(txs)
        self.step_ids = fold_sequence([t.t_id for t in self.txs], seed)
        self.header.block_id = self.step_ids[-1]
        self.header.t_alt_bid = self.txs[-1].t_id if self.txs else ZERO_DIGEST

    def t_ids(self) -> List[Digest]:
        return [t.t_id for t in self.txs]


@dataclass(frozen=True)
class SealedBlock:
    seq_num: int
    block_id: Digest
    prev_bid: Digest
    t_alt_bid: Digest
    txs: Tuple[Transaction, ...]
    opened_at: Optional[float] = None
    sealed_at: Optional[float] = None

    @property
    def t_ids(self) -> List[Digest]:
        return [t.t_id for t in self.txs]

    @property
    def exposure_window(self) -> float:
        if self.opened_at is None or self.sealed_at is None:
            return 0.0
        return self.sealed_at - self.opened_at


@dataclass(frozen=True)
class DblockView:
    """One validator's dynamic block as carried in an escalation."""

    handle: str
    seq_num: int
    seed: Digest
    txs: Tuple[Transaction, ...]
    step_ids: Tuple[Digest, ...]
    t_alt_bid: Digest

    @property
    def block_id(self) -> Digest:
        return self.step_ids[-1]


@dataclass
class OpLedger:
    genesis: GenesisBlock
    sealed: List[SealedBlock]
    dblock: DynamicBlock

    def transactions(self) -> Iterator[Transaction]:
        for block in self.sealed:
            yield from block.txs
        yield from self.dblock.txs

    def find(self, t_id: Digest) -> Optional[Transaction]:
        for tx in self.transactions():
            if tx.t_id == t_id:
                return tx
        return None

    def __contains__(self, t_id: object) -> bool:
        return isinstance(t_id, Digest) and self.find(t_id) is not None

    @property
    def tip_id(self) -> Digest:
        return self.sealed[-1].block_id if self.sealed else self.genesis.block_id


class OpValidator:
    """
    One OP validator's state: its sealed chain, its dynamic block and the
    transactions it has received since the last seal.
    """

    def __init__(
        self,
        participant: Optional[Participant],
        genesis: GenesisBlock,
        directory: CertificateDirectory,
        b_max: int = B_MAX,
    ):
        if participant is not None and not participant.can_validate(Partition.OP):
            raise IdentityError(f"'{participant.handle}' is not an OP validator")
        if b_max < 1:
            raise ConfigError("b_max must be at least 1")
        self.participant = participant
        self.handle = participant.handle if participant else "reference"
        self.genesis = genesis
        self.credential = genesis.credential
        self.directory = directory
        self.b_max = b_max
        self.sealed: List[SealedBlock] = []
        self.dblock = DynamicBlock.open(1, genesis.block_id)
        self.received: List[Transaction] = []
        self._validated: Set[Tuple[bytes, Digest]] = set()
        self._nets: Dict[Digest, Transaction] = {}

    @property
    def ledger(self) -> OpLedger:
        return OpLedger(self.genesis, self.sealed, self.dblock)

    @property
    def tip_id(self) -> Digest:
        return self.sealed[-1].block_id if self.sealed else self.genesis.block_id

    def header_triple(self) -> Tuple[Digest, Digest, int]:
        return (self.dblock.header.block_id, self.dblock.header.t_alt_bid, len(self.dblock))

    def validated_ids(self) -> Set[Digest]:
        return {key[1] for key in self._validated}

    def receive(self, tx: Transaction) -> bool:
        if any(t.dedup_key == tx.dedup_key for t in self.received):
            return False
        self.received.append(tx)
        return True

    def _authorized(self, key: bytes, kinds: Optional[frozenset] = None, pseudonym: bool = False) -> bool:
        cert = self.directory.certified(key, self.credential)
        if cert is None:
            return False
        if pseudonym:
            return cert.is_pseudonym
        return kinds is None or cert.kind in kinds

    def verify_transaction(self, tx: Transaction) -> Verdict:
        if tx.kind not in OP_KINDS:
            return Verdict.reject(RejectReason.UNAUTHORIZED, f"{tx.kind.value} is not an OP transaction")
        if not tx.is_complete():
            return Verdict.reject(RejectReason.INCOMPLETE_MULTISIG, "signature set incomplete")

        if tx.kind in (TransactionKind.ESE, TransactionKind.PET):
            if not self._authorized(tx.signer, pseudonym=True):
                return Verdict.reject(RejectReason.UNAUTHORIZED, "signer is not a registered pseudonym")
        elif tx.kind == TransactionKind.NET:
            body = tx.body
            assert isinstance(body, NetBody)
            if tx.signer_keys != (body.issuer_key, body.target_key):
                return Verdict.reject(RejectReason.UNAUTHORIZED, "signers differ from issuer/target")
            if not self._authorized(body.issuer_key, ISSUER_KINDS) or not self._authorized(
                body.target_key, frozenset({EntityKind.VEHICLE})
            ):
                return Verdict.reject(RejectReason.UNAUTHORIZED, "issuer or target not authorized")
        elif not self._authorized(tx.signer, frozenset({EntityKind.VEHICLE})):
            return Verdict.reject(RejectReason.UNAUTHORIZED, "signer is not a registered vehicle")

        if not tx.signatures_valid():
            return Verdict.reject(RejectReason.UNAUTHORIZED, "signature does not verify")
        if tx.dedup_key in self._validated:
            return Verdict.reject(RejectReason.DUPLICATE)

        if tx.kind == TransactionKind.PET:
            assert isinstance(tx.body, PetBody)
            record = tx.body.record
            if not record.is_consistent():
                return Verdict.reject(RejectReason.PAYLOAD_INTEGRITY, "h_tdata mismatch")
            if record.ts > tx.submitted_at:
                return Verdict.reject(RejectReason.PAYLOAD_INTEGRITY, "collision after submission")
        elif tx.kind == TransactionKind.ET:
            assert isinstance(tx.body, EtBody)
            net = self._nets.get(tx.body.net_ref)
            if net is None:
                return Verdict.reject(RejectReason.PAYLOAD_INTEGRITY, "net_ref does not resolve")
            assert isinstance(net.body, NetBody)
            if net.body.target_key != tx.signer:
                return Verdict.reject(RejectReason.UNAUTHORIZED, "ET signer is not the NET target")
        return Verdict.ok()

    def validate_in_dblock(self, tx: Transaction, at: Optional[float] = None) -> Digest:
        if len(self.dblock) >= self.b_max:
            raise ProtocolError("dynamic block is full; seal it first")
        new_id = self.dblock.append(tx, at)
        self._index(tx)
        return new_id

    def _index(self, tx: Transaction) -> None:
        self._validated.add(tx.dedup_key)
        if tx.kind == TransactionKind.NET:
            self._nets[tx.t_id] = tx

    def _reindex(self) -> None:
        self._validated = set()
        self._nets = {}
        for tx in self.ledger.transactions():
            self._index(tx)

    def view(self) -> DblockView:
        return DblockView(
            handle=self.handle,
            seq_num=self.dblock.header.seq_num,
            seed=self.dblock.header.prev_bid,
            txs=tuple(self.dblock.txs),
            step_ids=tuple(self.dblock.step_ids),
            t_alt_bid=self.dblock.header.t_alt_bid,
        )

    def restore(self, sealed: Sequence[SealedBlock]) -> None:
        """Start from an already sealed chain with an empty dynamic block."""
        self.sealed = list(sealed)
        seq = self.sealed[-1].seq_num + 1 if self.sealed else 1
        self.dblock = DynamicBlock.open(seq, self.tip_id)
        self.received = []
        self._reindex()

    def truncate(self, k: int) -> None:
        """Discard everything after the first ``k`` validated transactions."""
        self.dblock.rebuild(self.dblock.txs[:k])
        self._reindex()

    def replay(self, upto: Tuple[float, Digest], at: Optional[float] = None) -> None:
        pending = sorted(
            (t for t in self.received
             if t.dedup_key not in self._validated and t.order_key <= upto),
            key=lambda t: t.order_key,
        )
        for tx in pending:
            if len(self.dblock) >= self.b_max:
                break
            if self.verify_transaction(tx).accepted:
                self.validate_in_dblock(tx, at)

    def seal(self, at: Optional[float] = None) -> SealedBlock:
        if len(self.dblock) != self.b_max:
            raise ProtocolError(
                f"cannot seal a dynamic block holding {len(self.dblock)} of {self.b_max}"
            )
        h = self.dblock.header
        block = SealedBlock(
            seq_num=h.seq_num,
            block_id=h.block_id,
            prev_bid=h.prev_bid,
            t_alt_bid=h.t_alt_bid,
            txs=tuple(self.dblock.txs),
            opened_at=self.dblock.opened_at,
            sealed_at=at,
        )
        self.sealed.append(block)
        self.dblock = DynamicBlock.open(h.seq_num + 1, h.block_id)
        last = max(t.order_key for t in block.txs)
        self.received = [
            t for t in self.received
            if t.dedup_key not in self._validated and t.order_key > last
        ]
        return block

    def adopt(self, view: DblockView, stream: Sequence[Transaction]) -> None:
        """Replace the dynamic block with an authoritative view."""
        if view.seed != self.dblock.header.prev_bid:
            raise ProtocolError(f"{self.handle}: authoritative view has a different seed")
        self.dblock.rebuild(view.txs)
        self._reindex()
        broadcast = {t.dedup_key for t in stream}
        self.received = [t for t in self.received if t.dedup_key in broadcast]

    # Local tampering, used by the adversary harness.

    def tamper_remove(self, t_id: Digest) -> bool:
        kept = [t for t in self.dblock.txs if t.t_id != t_id]
        if len(kept) == len(self.dblock.txs):
            return False
        self.dblock.rebuild(kept)
        self._reindex()
        return True

    def tamper_append(self, tx: Transaction, keep_in_pool: bool = False) -> None:
        self.dblock.append(tx)
        self._index(tx)
        if keep_in_pool:
            self.received.append(tx)

    def tamper_sealed(self, t_id: Digest) -> Optional[int]:
        """Drop ``t_id`` from a sealed block without touching its header."""
        for i, block in enumerate(self.sealed):
            if t_id in block.t_ids:
                self.sealed[i] = SealedBlock(
                    block.seq_num, block.block_id, block.prev_bid, block.t_alt_bid,
                    tuple(t for t in block.txs if t.t_id != t_id),
                    block.opened_at, block.sealed_at,
                )
                return block.seq_num
        return None


@dataclass
class RecoveryResult:
    outcome: RecoveryOutcome
    agreed_steps: int
    implicated: Tuple[str, ...] = ()


@dataclass(frozen=True)
class EscalationSnapshot:
    genesis: GenesisBlock
    directory: CertificateDirectory
    b_max: int
    sealed: Tuple[SealedBlock, ...]
    views: Dict[str, DblockView]
    expected: Tuple[str, ...]
    stream: Tuple[Transaction, ...]
    upto: Tuple[float, Digest]
    tx_ref: Digest


@dataclass
class EscalationResolution:
    authoritative: DblockView
    implicated: Dict[str, int]
    partial: bool = False
    warnings: List[str] = field(default_factory=list)


@dataclass
class ConsensusRound:
    tx_ref: Digest
    kind: TransactionKind
    proposed_ids: Dict[str, Digest]
    outcome: RoundOutcome
    verdicts: Dict[str, Verdict]
    pre_t_alt_bids: Dict[str, Digest]
    at: float = 0.0
    recovery: Optional[RecoveryResult] = None
    escalation: Optional[EscalationSnapshot] = None
    resolution: Optional[EscalationResolution] = None

    @property
    def consistent(self) -> bool:
        return self.outcome == RoundOutcome.CONSISTENT

    @property
    def verdict(self) -> Verdict:
        """The verdict most validators reached."""
        counts: Dict[Verdict, int] = {}
        for v in self.verdicts.values():
            counts[v] = counts.get(v, 0) + 1
        return max(counts.items(), key=lambda kv: kv[1])[0]


Resolver = Callable[[EscalationSnapshot], EscalationResolution]


class OpCluster:
    """Coordinates the OP validators' rounds, rollbacks, seals and escalations."""

    def __init__(
        self,
        validators: Sequence[OpValidator],
        consensus: str = "unanimous",
        resolver: Optional[Resolver] = None,
    ):
        if not validators:
            raise ConfigError("an OP cluster needs at least one validator")
        if consensus not in CONSENSUS_MODES:
            raise ConfigError(f"unknown consensus mode '{consensus}'")
        self.validators = list(validators)
        self.b_max = self.validators[0].b_max
        self.consensus = consensus
        self.resolver = resolver
        self.rounds: List[ConsensusRound] = []
        self.stream: List[Transaction] = []
        self.escalations: List[EscalationSnapshot] = []
        self._streamed: Set[Tuple[bytes, Digest]] = set()
        self._sealed_keys: Set[Tuple[bytes, Digest]] = set()

    def validator(self, handle: str) -> OpValidator:
        for v in self.validators:
            if v.handle == handle:
                return v
        raise KeyError(handle)

    def submit(self, tx: Transaction) -> None:
        """Record a broadcast and hand it to every validator."""
        if tx.dedup_key not in self._streamed:
            self._streamed.add(tx.dedup_key)
            self.stream.append(tx)
        for v in self.validators:
            v.receive(tx)

    def _agreed_id(self, ids: Dict[str, Digest], unanimous: bool = True) -> Optional[Digest]:
        values = list(ids.values())
        if len(set(values)) == 1:
            return values[0]
        if unanimous or self.consensus == "unanimous":
            return None
        best = max(set(values), key=lambda d: (values.count(d), d))
        return best if values.count(best) * 2 > len(values) else None

    def consensus_round(self, tx: Transaction, at: float = 0.0) -> ConsensusRound:
        pre_t_alt = {v.handle: v.dblock.header.t_alt_bid for v in self.validators}
        verdicts: Dict[str, Verdict] = {}
        proposed: Dict[str, Digest] = {}
        for v in self.validators:
            verdict = v.verify_transaction(tx)
            if verdict.accepted:
                try:
                    v.validate_in_dblock(tx, at)
                except ProtocolError:
                    logging.warning("%s: dynamic block full while validating %s",
                                    v.handle, tx.t_id.hex()[:12])
            verdicts[v.handle] = verdict
            proposed[v.handle] = v.dblock.header.block_id

        consistent = self._agreed_id(proposed) is not None
        rnd = ConsensusRound(
            tx_ref=tx.t_id,
            kind=tx.kind,
            proposed_ids=proposed,
            outcome=RoundOutcome.CONSISTENT if consistent else RoundOutcome.DIVERGENT,
            verdicts=verdicts,
            pre_t_alt_bids=pre_t_alt,
            at=at,
        )
        self.rounds.append(rnd)

        if not consistent:
            logging.warning("divergent round on %s %s", tx.kind.value, tx.t_id.hex()[:12])
            rnd.recovery = self.rollback_and_replay(tx, at)
            if rnd.recovery.outcome == RecoveryOutcome.ESCALATE:
                rnd.escalation = self.escalate_to_dp(tx)
                if self.resolver is not None:
                    rnd.resolution = self.resolver(rnd.escalation)
                    self.apply_resolution(rnd.escalation, rnd.resolution)

        if self.in_agreement() and all(len(v.dblock) == self.b_max for v in self.validators):
            self.seal_dblock(at)
        return rnd

    def in_agreement(self) -> bool:
        return len({v.header_triple() for v in self.validators}) == 1

    def rollback_and_replay(self, tx: Transaction, at: Optional[float] = None) -> RecoveryResult:
        before = {v.handle: list(v.dblock.step_ids) for v in self.validators}
        logs = list(before.values())
        n = 0
        while all(len(log) > n for log in logs) and len({log[n] for log in logs}) == 1:
            n += 1
        k = max(n - 1, 0)

        for v in self.validators:
            v.truncate(k)
            v.replay(tx.order_key, at)

        after = {v.handle: v.dblock.header.block_id for v in self.validators}
        agreed = self._agreed_id(after, unanimous=False)
        if agreed is None:
            logging.warning("divergence persists after replay; escalating")
            return RecoveryResult(RecoveryOutcome.ESCALATE, k)

        reference = next(v for v in self.validators if v.dblock.header.block_id == agreed)
        agreed_log = list(reference.dblock.step_ids)
        for v in self.validators:
            if v.dblock.header.block_id != agreed:
                v.adopt(reference.view(), self.stream)
        implicated = tuple(h for h, log in before.items() if log != agreed_log)
        logging.info("rollback to step %d recovered; implicated: %s", k, implicated or "none")
        return RecoveryResult(RecoveryOutcome.RECOVERED, k, implicated)

    def seal_dblock(self, at: Optional[float] = None) -> SealedBlock:
        if not self.in_agreement():
            raise ProtocolError("validators disagree on the dynamic block")
        sealed = [v.seal(at) for v in self.validators]
        for tx in sealed[0].txs:
            self._sealed_keys.add(tx.dedup_key)
        logging.info("sealed OP block %d", sealed[0].seq_num)
        return sealed[0]

    def escalate_to_dp(self, tx: Transaction) -> EscalationSnapshot:
        first = self.validators[0]
        snapshot = EscalationSnapshot(
            genesis=first.genesis,
            directory=first.directory,
            b_max=self.b_max,
            sealed=tuple(first.sealed),
            views={v.handle: v.view() for v in self.validators},
            expected=tuple(v.handle for v in self.validators),
            stream=tuple(t for t in self.stream if t.dedup_key not in self._sealed_keys),
            upto=tx.order_key,
            tx_ref=tx.t_id,
        )
        self.escalations.append(snapshot)
        return snapshot

    def apply_resolution(
        self, snapshot: EscalationSnapshot, resolution: EscalationResolution
    ) -> None:
        for v in self.validators:
            v.adopt(resolution.authoritative, snapshot.stream)
        logging.info("applied escalation resolution; implicated: %s",
                     sorted(resolution.implicated) or "none")
