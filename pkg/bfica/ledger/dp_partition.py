"""
Decision partition: requests for evidence, batch blocks and first-level decisions.

Only RETs are stored here. Each validator pools verified RETs and, once every
pool holds ``b_max`` of them, hashes the canonically sorted batch into a
block. Evidence about one collision is grouped into a bundle, checked for
cross-proposer and spatio-temporal consistency, and decided; the decision
goes back to each requester as a unicast that is never written to the chain.
"""
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Dict, FrozenSet, Iterator, List, Optional, Sequence, Set, Tuple

from bfica.config import B_MAX, DELTA_D, DELTA_T, DELTA_V
from bfica.errors import BficaError, ConfigError, IdentityError, PermissionDenied
from bfica.ledger.op_partition import (
    EscalationResolution,
    EscalationSnapshot,
    GenesisBlock,
    OpValidator,
    Verdict,
)
from bfica.utils.codec import Encoder
from bfica.utils.crypto_identity import (
    CertificateDirectory,
    Digest,
    EntityKind,
    Participant,
    Partition,
    decrypt,
    sha256,
)
from bfica.utils.tx_model import (
    EventRecord,
    RetBody,
    Transaction,
    TransactionKind,
    WitnessRecord,
)

DP_PROPOSER_KINDS = frozenset({EntityKind.INSURER, EntityKind.MANUFACTURER})
ANOMALOUS_STOP = "unprovoked_hard_stop"


class DpRejectReason(str, Enum):
    UNAUTHORIZED = "unauthorized"
    INCOMPLETE = "incomplete"
    DUPLICATE = "duplicate"


def canonical_pool_order(txs: Sequence[Transaction]) -> List[Transaction]:
    return sorted(txs, key=lambda t: t.order_key)


def dp_block_id(seq_num: int, prev_bid: Digest, txs: Sequence[Transaction]) -> Digest:
    enc = Encoder().raw(b"bfica/dp-block").u64(seq_num).raw(prev_bid.value)
    enc.seq(txs, lambda e, t: e.raw(t.encode()))
    return sha256(enc.to_bytes())


@dataclass(frozen=True)
class DpBlockHeader:
    seq_num: int
    block_id: Digest
    prev_bid: Digest


@dataclass(frozen=True)
class DpBlock:
    header: DpBlockHeader
    txs: Tuple[Transaction, ...]
    sealed_at: Optional[float] = None

    @property
    def t_ids(self) -> List[Digest]:
        return [t.t_id for t in self.txs]


@dataclass
class DpLedger:
    genesis: GenesisBlock
    sealed: List[DpBlock]

    def transactions(self) -> Iterator[Transaction]:
        for block in self.sealed:
            yield from block.txs

    @property
    def tip_id(self) -> Digest:
        return self.sealed[-1].header.block_id if self.sealed else self.genesis.block_id


class DpValidator:
    def __init__(
        self,
        participant: Participant,
        genesis: GenesisBlock,
        directory: CertificateDirectory,
        b_max: int = B_MAX,
    ):
        if not participant.can_validate(Partition.DP):
            raise IdentityError(f"'{participant.handle}' is not a DP validator")
        if b_max < 1:
            raise ConfigError("b_max must be at least 1")
        self.participant = participant
        self.handle = participant.handle
        self.genesis = genesis
        self.credential = genesis.credential
        self.directory = directory
        self.b_max = b_max
        self.sealed: List[DpBlock] = []
        self.running_pool: List[Transaction] = []
        self._seen: Set[Tuple[bytes, Digest]] = set()

    @property
    def ledger(self) -> DpLedger:
        return DpLedger(self.genesis, self.sealed)

    def dp_verify(self, ret: Transaction) -> Verdict:
        if ret.kind != TransactionKind.RET:
            return Verdict.reject(DpRejectReason.UNAUTHORIZED, "only requests are stored here")
        if not ret.is_complete():
            return Verdict.reject(DpRejectReason.INCOMPLETE, "signature missing")
        cert = self.directory.certified(ret.signer, self.credential)
        if cert is None or cert.kind not in DP_PROPOSER_KINDS:
            return Verdict.reject(DpRejectReason.UNAUTHORIZED, "proposer not certified for DP")
        if not ret.signatures_valid():
            return Verdict.reject(DpRejectReason.UNAUTHORIZED, "signature does not verify")
        if ret.dedup_key in self._seen:
            return Verdict.reject(DpRejectReason.DUPLICATE)
        return Verdict.ok()

    def accept(self, ret: Transaction) -> Verdict:
        verdict = self.dp_verify(ret)
        if verdict.accepted:
            self.running_pool.append(ret)
            self._seen.add(ret.dedup_key)
        return verdict

    def pool_ready(self) -> bool:
        return len(self.running_pool) >= self.b_max

    def propose_block(self) -> Optional[DpBlock]:
        if not self.pool_ready():
            return None
        batch = canonical_pool_order(self.running_pool)[: self.b_max]
        seq = len(self.sealed) + 1
        prev = self.ledger.tip_id
        return DpBlock(DpBlockHeader(seq, dp_block_id(seq, prev, batch), prev), tuple(batch))

    def revalidate_pool(self) -> None:
        """Drop pooled entries that no longer verify, then re-sort."""
        pool, self.running_pool = self.running_pool, []
        for ret in pool:
            self._seen.discard(ret.dedup_key)
        for ret in canonical_pool_order(pool):
            self.accept(ret)

    def append(self, block: DpBlock) -> None:
        if block.header.prev_bid != self.ledger.tip_id:
            raise BficaError(f"{self.handle}: block {block.header.seq_num} does not extend the tip")
        self.sealed.append(block)
        included = {t.dedup_key for t in block.txs}
        self.running_pool = [t for t in self.running_pool if t.dedup_key not in included]


class DpCluster:
    def __init__(self, validators: Sequence[DpValidator]):
        if not validators:
            raise ConfigError("a DP cluster needs at least one validator")
        self.validators = list(validators)
        self.b_max = self.validators[0].b_max

    def submit(self, ret: Transaction) -> Dict[str, Verdict]:
        return {v.handle: v.accept(ret) for v in self.validators}

    def assemble_and_validate_block(self, at: Optional[float] = None) -> Optional[DpBlock]:
        if not all(v.pool_ready() for v in self.validators):
            return None
        proposals = {v.handle: v.propose_block() for v in self.validators}
        if len({p.header.block_id for p in proposals.values() if p}) != 1:
            logging.warning("DP block proposals diverge; recomputing from pools")
            for v in self.validators:
                v.revalidate_pool()
            proposals = {v.handle: v.propose_block() for v in self.validators}
            if len({p.header.block_id if p else None for p in proposals.values()}) != 1:
                logging.warning("DP block proposals still diverge; block withheld")
                return None
        first = proposals[self.validators[0].handle]
        assert first is not None
        block = DpBlock(first.header, first.txs, at)
        for v in self.validators:
            v.append(block)
        logging.info("sealed DP block %d", block.header.seq_num)
        return block


# Cases and integrity checks


@dataclass(frozen=True)
class CheckResult:
    name: str
    category: str
    passed: bool
    refs: Tuple[Digest, ...] = ()
    detail: str = ""


@dataclass
class ConsistencyReport:
    checks: List[CheckResult] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def failures(self) -> List[CheckResult]:
        return [c for c in self.checks if not c.passed]

    def failed_categories(self) -> Set[str]:
        return {c.category for c in self.failures()}

    def failures_for(self, t_id: Digest) -> int:
        return sum(1 for c in self.failures() if t_id in c.refs)


@dataclass
class EvidenceBundle:
    case_id: str
    rets: List[Transaction]
    decrypted_witness_records: Dict[Digest, List[WitnessRecord]] = field(default_factory=dict)
    undecryptable: Dict[Digest, int] = field(default_factory=dict)
    consistency_report: Optional[ConsistencyReport] = None


def _body(ret: Transaction) -> RetBody:
    assert isinstance(ret.body, RetBody)
    return ret.body


def _witness_keys(ret: Transaction) -> Set[bytes]:
    return {w.witness_key for w in _body(ret).record.witness_ciphertexts}


def group_cases(
    rets: Sequence[Transaction],
    delta_t: float = DELTA_T,
    delta_d: float = DELTA_D,
) -> List[List[Transaction]]:
    """
    Union-find over RETs: two requests share a case when they reference the
    same PET, are within ``delta_t`` seconds and ``delta_d`` metres of each
    other, or one host appears as a witness in the other's record.
    """
    items = canonical_pool_order(rets)
    parent = list(range(len(items)))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    def union(i: int, j: int) -> None:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)

    for i in range(len(items)):
        bi = _body(items[i])
        for j in range(i + 1, len(items)):
            bj = _body(items[j])
            close = (
                abs(bi.record.ts - bj.record.ts) <= delta_t
                and bi.record.loc.distance_to(bj.record.loc) <= delta_d
            )
            linked = bi.host_key in _witness_keys(items[j]) or bj.host_key in _witness_keys(items[i])
            if bi.pet_ref == bj.pet_ref or close or linked:
                union(i, j)

    groups: Dict[int, List[Transaction]] = {}
    for i, tx in enumerate(items):
        groups.setdefault(find(i), []).append(tx)
    return [groups[k] for k in sorted(groups)]


def case_id_for(rets: Sequence[Transaction]) -> str:
    first = min(_body(r).pet_ref.hex() for r in rets)
    return f"case-{first[:16]}"


def open_bundle(
    rets: Sequence[Transaction], box_secret: Optional[bytes], case_id: Optional[str] = None
) -> EvidenceBundle:
    bundle = EvidenceBundle(case_id or case_id_for(rets), canonical_pool_order(rets))
    for ret in bundle.rets:
        records: List[WitnessRecord] = []
        failed = 0
        for w in _body(ret).record.witness_ciphertexts:
            if box_secret is None:
                failed += 1
                continue
            try:
                records.append(WitnessRecord.decode(decrypt(box_secret, w.ciphertext)))
            except BficaError as e:
                logging.warning("witness account in %s unreadable: %s", ret.t_id.hex()[:12], e)
                failed += 1
        bundle.decrypted_witness_records[ret.t_id] = records
        if failed:
            bundle.undecryptable[ret.t_id] = failed
    return bundle


def build_bundles(
    rets: Sequence[Transaction],
    box_secret: Optional[bytes],
    delta_t: float = DELTA_T,
    delta_d: float = DELTA_D,
) -> List[EvidenceBundle]:
    return [open_bundle(group, box_secret) for group in group_cases(rets, delta_t, delta_d)]


def _event(ret: Transaction) -> Optional[EventRecord]:
    try:
        return _body(ret).record.event_record()
    except BficaError:
        return None


def integrity_check(
    bundle: EvidenceBundle,
    delta_t: float = DELTA_T,
    delta_d: float = DELTA_D,
    delta_v: float = DELTA_V,
) -> ConsistencyReport:
    report = ConsistencyReport()
    add = report.checks.append
    rets = bundle.rets

    for ret in rets:
        rec = _body(ret).record
        tag = ret.t_id.hex()[:12]
        add(CheckResult(f"h_tdata:{tag}", "hash", rec.is_consistent(), (ret.t_id,)))
        if _event(ret) is None:
            add(CheckResult(f"ve_px:{tag}", "payload", False, (ret.t_id,), "event record unreadable"))
        if ret.t_id in bundle.undecryptable:
            add(CheckResult(f"decrypt:{tag}", "decrypt", False, (ret.t_id,),
                            f"{bundle.undecryptable[ret.t_id]} witness account(s) unreadable"))

    by_pet: Dict[Digest, List[Transaction]] = {}
    for ret in rets:
        by_pet.setdefault(_body(ret).pet_ref, []).append(ret)
    for pet_ref, group in by_pet.items():
        if len(group) < 2:
            continue
        hashes = {_body(r).record.h_tdata for r in group}
        records = {_body(r).record for r in group}
        same = len(hashes) == 1 and len(records) == 1 and len({_body(r).host_key for r in group}) == 1
        add(CheckResult(f"cross_proposer:{pet_ref.hex()[:12]}", "cross_proposer_hash", same,
                        tuple(r.t_id for r in group)))

    for i in range(len(rets)):
        a = _body(rets[i]).record
        for j in range(i + 1, len(rets)):
            b = _body(rets[j]).record
            refs = (rets[i].t_id, rets[j].t_id)
            pair = f"{rets[i].t_id.hex()[:8]}:{rets[j].t_id.hex()[:8]}"
            dt = abs(a.ts - b.ts)
            dd = a.loc.distance_to(b.loc)
            add(CheckResult(f"temporal:{pair}", "temporal", dt <= delta_t, refs, f"{dt:.1f}s"))
            add(CheckResult(f"spatial:{pair}", "spatial", dd <= delta_d, refs, f"{dd:.1f}m"))

    hosts: Dict[bytes, List[Transaction]] = {}
    for ret in rets:
        hosts.setdefault(_body(ret).host_key, []).append(ret)
    for ret in rets:
        for w in bundle.decrypted_witness_records.get(ret.t_id, []):
            for subject in hosts.get(w.subject_key, []):
                rec = _body(subject).record
                event = _event(subject)
                ok = (
                    abs(w.ts - rec.ts) <= delta_t
                    and w.loc.distance_to(rec.loc) <= delta_d
                    and (event is None or abs(w.subject_speed - event.speed) <= delta_v)
                )
                add(CheckResult(
                    f"witness:{w.witness_key.hex()[:8]}>{subject.t_id.hex()[:12]}",
                    "witness", ok, (subject.t_id, ret.t_id),
                ))
    return report


@dataclass(frozen=True)
class DecisionRules:
    anomalous_events: FrozenSet[str] = frozenset({ANOMALOUS_STOP})


@dataclass(frozen=True)
class FirstLevelDecision:
    case_id: str
    liable_cav: Optional[str]
    liable_key: Optional[bytes]
    basis: Tuple[Digest, ...]
    contested: bool
    rule: str

    @property
    def undecidable(self) -> bool:
        return self.liable_key is None

    def to_json_dict(self) -> Dict[str, object]:
        return {
            "case_id": self.case_id,
            "liable_cav": self.liable_cav,
            "basis": [d.hex() for d in self.basis],
            "contested": self.contested,
            "rule": self.rule,
        }


@dataclass
class _Host:
    key: bytes
    event: EventRecord
    rets: List[Transaction]


def _pick_version(group: List[Transaction], report: ConsistencyReport) -> List[Transaction]:
    versions: Dict[Digest, List[Transaction]] = {}
    for ret in group:
        versions.setdefault(_body(ret).record.h_tdata, []).append(ret)

    def rank(item: Tuple[Digest, List[Transaction]]) -> Tuple[int, int, Tuple[float, Digest]]:
        rets = item[1]
        fails = sum(report.failures_for(r.t_id) for r in rets)
        return (-len(rets), fails, min(r.order_key for r in rets))

    return min(versions.items(), key=rank)[1]


def first_level_decision(
    bundle: EvidenceBundle,
    resolver: Optional[Callable[[bytes], str]] = None,
    rules: DecisionRules = DecisionRules(),
) -> FirstLevelDecision:
    report = bundle.consistency_report or integrity_check(bundle)
    usable = [r for r in bundle.rets if _body(r).record.is_consistent() and _event(r) is not None]

    by_pet: Dict[Digest, List[Transaction]] = {}
    for ret in usable:
        by_pet.setdefault(_body(ret).pet_ref, []).append(ret)
    hosts: Dict[bytes, _Host] = {}
    for pet_ref in sorted(by_pet):
        chosen = _pick_version(by_pet[pet_ref], report)
        key = _body(chosen[0]).host_key
        event = _event(chosen[0])
        assert event is not None
        if key in hosts:
            hosts[key].rets.extend(chosen)
        else:
            hosts[key] = _Host(key, event, list(chosen))

    if not hosts:
        return FirstLevelDecision(bundle.case_id, None, None, (), True, "undecidable")

    ordered = sorted(hosts.values(), key=lambda h: (h.event.order, h.key))
    leader = ordered[0]
    if len(ordered) == 1:
        liable, rule = leader, "single-vehicle"
    else:
        witnessed = any(
            w.subject_key == leader.key and rules.anomalous_events.intersection(w.observed_events)
            for records in bundle.decrypted_witness_records.values()
            for w in records
        )
        if witnessed or rules.anomalous_events.intersection(leader.event.events):
            liable, rule = leader, "leader-anomalous-stop"
        else:
            liable, rule = ordered[1], "following-vehicle"

    name = liable.key.hex()
    if resolver is not None:
        try:
            name = resolver(liable.key)
        except BficaError as e:
            logging.warning("could not resolve liable pseudonym: %s", e)
    return FirstLevelDecision(
        case_id=bundle.case_id,
        liable_cav=name,
        liable_key=liable.key,
        basis=tuple(sorted(r.t_id for r in liable.rets)),
        contested=not report.passed,
        rule=rule,
    )


@dataclass(frozen=True)
class ComplimentaryEvidence:
    requester: str
    ret_refs: Tuple[Digest, ...]
    decision: FirstLevelDecision
    witness_summaries: Tuple[WitnessRecord, ...]

    def payload(self) -> bytes:
        doc = {
            "requester": self.requester,
            "ret_refs": [r.hex() for r in self.ret_refs],
            "decision": self.decision.to_json_dict(),
            "witnesses": [
                {
                    "witness": w.witness_key.hex(),
                    "subject": w.subject_key.hex(),
                    "ts": w.ts,
                    "speed": w.subject_speed,
                    "events": list(w.observed_events),
                }
                for w in self.witness_summaries
            ],
        }
        return json.dumps(doc, sort_keys=True, separators=(",", ":")).encode("utf-8")


def unicast_complimentary_evidence(
    decision: FirstLevelDecision, bundle: EvidenceBundle, requester: Participant
) -> ComplimentaryEvidence:
    own = [r for r in bundle.rets if r.signer == requester.public_key]
    if not own:
        raise PermissionDenied(f"'{requester.handle}' did not propose a request in {bundle.case_id}")
    summaries: List[WitnessRecord] = []
    for records in bundle.decrypted_witness_records.values():
        summaries.extend(records)
    return ComplimentaryEvidence(
        requester=requester.handle,
        ret_refs=tuple(r.t_id for r in own),
        decision=decision,
        witness_summaries=tuple(summaries),
    )


def resolve_escalation(snapshot: EscalationSnapshot) -> EscalationResolution:
    """
    Replays the broadcast stream with a reference validator and locates the
    first step at which each escalated view departs from it.
    """
    ref = OpValidator(None, snapshot.genesis, snapshot.directory, snapshot.b_max)
    ref.restore(snapshot.sealed)
    for tx in sorted(snapshot.stream, key=lambda t: t.order_key):
        if tx.order_key > snapshot.upto or len(ref.dblock) >= ref.b_max:
            continue
        if ref.verify_transaction(tx).accepted:
            ref.validate_in_dblock(tx)
    authoritative = ref.view()

    implicated: Dict[str, int] = {}
    warnings: List[str] = []
    for handle in snapshot.expected:
        view = snapshot.views.get(handle)
        if view is None:
            warnings.append(f"no view from {handle}")
            continue
        steps = view.step_ids
        ref_steps = authoritative.step_ids
        for i in range(max(len(steps), len(ref_steps))):
            mine = steps[i] if i < len(steps) else None
            theirs = ref_steps[i] if i < len(ref_steps) else None
            if mine != theirs:
                implicated[handle] = i
                break
    for w in warnings:
        logging.warning("partial escalation resolution: %s", w)
    logging.info("escalation resolved; implicated %s", sorted(implicated) or "none")
    return EscalationResolution(authoritative, implicated, bool(warnings), warnings)
