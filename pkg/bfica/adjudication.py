"""
Second-level liability: product, service or negligence, decided from the
operational ledger once the decision partition has named the liable vehicle.

Rules are tried in order:
    R1 negligence        an overdue update with no success ET and no passing audit
    R2 product           an executed update on the failing subsystem
    R3 service           the last technician action within the service window
    R4 default product   the vehicle's manufacturer
"""
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Collection, Dict, FrozenSet, List, Mapping, Optional, Tuple, Union

from bfica.config import NET_GRACE, SERVICE_WINDOW
from bfica.errors import BficaError, ProtocolError, TransactionError
from bfica.ledger.dp_partition import ComplimentaryEvidence, FirstLevelDecision
from bfica.ledger.op_partition import OpLedger
from bfica.utils.crypto_identity import (
    CertificateAuthority,
    Digest,
    EntityKind,
    Participant,
)
from bfica.utils.tx_model import (
    EtBody,
    ExecStatus,
    InstructionKind,
    NetBody,
    PetBody,
    Transaction,
    TransactionKind,
)

Window = Tuple[float, float]

R1_NEGLIGENCE = "R1-negligence"
R2_PRODUCT = "R2-product-executed-update"
R3_SERVICE = "R3-service-last-action"
R4_DEFAULT = "R4-default-product"


class LiabilityKind(str, Enum):
    PRODUCT = "product"
    SERVICE = "service"
    NEGLIGENCE = "negligence"


class AuditOutcome(str, Enum):
    PASS = "pass"
    FAIL = "fail"
    UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class DeviceState:
    """What the vehicle's updated device reports when interrogated."""

    device_id: str
    firmware_hash: Digest
    install_ts: float


@dataclass(frozen=True)
class FirmwareAudit:
    device_id: str
    retrieved_file_hash: Digest
    retrieved_install_ts: float
    referenced_net: Digest


def _net_body(net: Transaction) -> NetBody:
    if net.kind != TransactionKind.NET or not isinstance(net.body, NetBody):
        raise TransactionError("audit needs a NET")
    return net.body


def firmware_audit(
    device: Optional[DeviceState], net: Transaction, accident_ts: Optional[float] = None
) -> Tuple[Optional[FirmwareAudit], AuditOutcome]:
    """
    Compares the device's firmware hash with the NET's update file hash.
    An install after the accident does not count as a pass.
    """
    expected = _net_body(net).meta.update_file_hash
    if expected is None:
        raise TransactionError("NET carries no update file hash")
    if device is None:
        return None, AuditOutcome.UNAVAILABLE
    audit = FirmwareAudit(device.device_id, device.firmware_hash, device.install_ts, net.t_id)
    ok = device.firmware_hash == expected and (
        accident_ts is None or device.install_ts <= accident_ts
    )
    return audit, AuditOutcome.PASS if ok else AuditOutcome.FAIL


def _in(window: Window, ts: float) -> bool:
    return window[0] <= ts <= window[1]


def proof_of_interaction(
    ledger: OpLedger, issuer: Participant, cav: Participant, window: Window
) -> List[Transaction]:
    """Countersigned NETs between ``issuer`` and ``cav`` inside ``window``."""
    found = [
        tx for tx in ledger.transactions()
        if tx.kind == TransactionKind.NET
        and tx.is_complete()
        and tx.signer_keys == (issuer.public_key, cav.public_key)
        and _in(window, tx.submitted_at)
    ]
    return sorted(found, key=lambda t: t.order_key)


def behavioral_history(
    ledger: OpLedger,
    cav: Union[Participant, bytes],
    window: Window,
    caller: Optional[Participant] = None,
    authority: Optional[CertificateAuthority] = None,
) -> List[Transaction]:
    """
    ESEs of a vehicle in time order. Given a pseudonym key, the ESEs signed
    under it. Given the vehicle itself, law enforcement gets every ESE whose
    pseudonym resolves to it; anyone else only sees the active pseudonym.
    """
    eses = sorted(
        (tx for tx in ledger.transactions()
         if tx.kind == TransactionKind.ESE and _in(window, tx.submitted_at)),
        key=lambda t: t.order_key,
    )
    if isinstance(cav, bytes):
        return [tx for tx in eses if tx.signer == cav]

    if caller is not None and authority is not None and authority.is_law_enforcement(caller):
        resolved = []
        for tx in eses:
            try:
                if authority.resolve_pseudonym(caller, tx.signer).handle == cav.handle:
                    resolved.append(tx)
            except BficaError:
                continue
        return resolved

    logging.info("behavioral history for %s limited to the active pseudonym", cav.handle)
    if cav.pseudonyms is None:
        return []
    return [tx for tx in eses if tx.signer == cav.pseudonyms.active.public_key]


def owner_read_audit(
    ledger: OpLedger, cav: Participant, acknowledged: Collection[Digest]
) -> List[Transaction]:
    """On-chain NETs naming the vehicle that it never countersigned itself."""
    return [
        tx for tx in ledger.transactions()
        if tx.kind == TransactionKind.NET
        and isinstance(tx.body, NetBody)
        and tx.body.target_key == cav.public_key
        and tx.t_id not in acknowledged
    ]


@dataclass
class AdjudicationContext:
    cav: Participant
    lookup: Callable[[bytes], Optional[Participant]]
    accident_ts: Optional[float] = None
    failure_subsystem: Optional[str] = None
    device_states: Mapping[Digest, Optional[DeviceState]] = field(default_factory=dict)
    net_grace: float = NET_GRACE
    service_window: float = SERVICE_WINDOW
    disputed: FrozenSet[Digest] = frozenset()


@dataclass(frozen=True)
class LiabilityDecision:
    case_id: str
    liable_entity: str
    kind: LiabilityKind
    level1: FirstLevelDecision
    evidence: Tuple[Digest, ...]
    rationale: str

    def to_json_dict(self) -> Dict[str, object]:
        return {
            "case_id": self.case_id,
            "liable_entity": self.liable_entity,
            "kind": self.kind.value,
            "level1": self.level1.liable_cav,
            "evidence": [d.hex() for d in self.evidence],
            "rationale": self.rationale,
        }


def classify_liability(
    ledger: OpLedger,
    level1: Optional[FirstLevelDecision],
    evidence: Optional[ComplimentaryEvidence],
    context: AdjudicationContext,
) -> LiabilityDecision:
    if level1 is None or level1.undecidable:
        raise ProtocolError("no first-level decision to build on")
    if evidence is not None and evidence.decision.case_id != level1.case_id:
        raise ProtocolError("complimentary evidence belongs to another case")

    cav = context.cav
    txs = list(ledger.transactions())
    pets = [
        tx for tx in txs
        if tx.kind == TransactionKind.PET and tx.signer == level1.liable_key
    ]
    accident_ts = context.accident_ts
    failure = context.failure_subsystem
    if pets:
        record = pets[-1].body.record if isinstance(pets[-1].body, PetBody) else None
        if record is not None:
            accident_ts = record.ts if accident_ts is None else accident_ts
            if failure is None:
                try:
                    failure = record.event_record().fault_subsystem
                except BficaError:
                    failure = ""
    if accident_ts is None:
        raise ProtocolError("accident time unknown")
    failure = failure or ""

    def matches(net: NetBody) -> bool:
        return not failure or net.meta.subsystem == failure

    nets = sorted(
        (tx for tx in txs
         if tx.kind == TransactionKind.NET and tx.is_complete()
         and isinstance(tx.body, NetBody) and tx.body.target_key == cav.public_key
         and tx.submitted_at <= accident_ts and tx.t_id not in context.disputed),
        key=lambda t: t.order_key,
    )
    ets: Dict[Digest, List[Transaction]] = {}
    for tx in txs:
        if (tx.kind == TransactionKind.ET and isinstance(tx.body, EtBody)
                and tx.signer == cav.public_key and tx.submitted_at <= accident_ts):
            ets.setdefault(tx.body.net_ref, []).append(tx)

    def decision(entity: str, kind: LiabilityKind, refs: List[Digest], rule: str) -> LiabilityDecision:
        logging.info("%s: %s liability on %s (%s)", level1.case_id, kind.value, entity, rule)
        if evidence is not None:
            refs = refs + [r for r in evidence.ret_refs if r not in refs]
        return LiabilityDecision(level1.case_id, entity, kind, level1, tuple(refs), rule)

    def issuer_name(net: NetBody) -> str:
        issuer = context.lookup(net.issuer_key)
        return issuer.handle if issuer else net.issuer_key.hex()

    updates = [
        n for n in nets
        if isinstance(n.body, NetBody)
        and n.body.meta.instruction_kind == InstructionKind.SOFTWARE_UPDATE
        and matches(n.body)
    ]
    audits = {
        n.t_id: firmware_audit(context.device_states.get(n.t_id), n, accident_ts)[1]
        for n in updates
    }

    def succeeded(net: Transaction) -> bool:
        return any(
            isinstance(et.body, EtBody) and et.body.status == ExecStatus.SUCCESS
            for et in ets.get(net.t_id, [])
        )

    for net in reversed(updates):
        overdue = net.submitted_at + context.net_grace <= accident_ts
        if overdue and not succeeded(net) and audits[net.t_id] != AuditOutcome.PASS:
            refs = [net.t_id] + [et.t_id for et in ets.get(net.t_id, [])]
            return decision(cav.handle, LiabilityKind.NEGLIGENCE, refs, R1_NEGLIGENCE)

    for net in reversed(updates):
        if succeeded(net) or audits[net.t_id] == AuditOutcome.PASS:
            assert isinstance(net.body, NetBody)
            refs = [net.t_id] + [et.t_id for et in ets.get(net.t_id, [])]
            return decision(issuer_name(net.body), LiabilityKind.PRODUCT, refs, R2_PRODUCT)

    services = []
    for net in nets:
        assert isinstance(net.body, NetBody)
        issuer = context.lookup(net.body.issuer_key)
        if (issuer is not None and issuer.kind == EntityKind.TECHNICIAN
                and accident_ts - context.service_window <= net.submitted_at
                and matches(net.body)):
            services.append((net, issuer))
    if services:
        net, issuer = services[-1]
        return decision(issuer.handle, LiabilityKind.SERVICE, [net.t_id], R3_SERVICE)

    maker = cav.maker or _maker_fallback(nets, context)
    return decision(maker, LiabilityKind.PRODUCT, [p.t_id for p in pets], R4_DEFAULT)


def _maker_fallback(nets: List[Transaction], context: AdjudicationContext) -> str:
    """The most recent manufacturer to instruct the vehicle, when no maker is registered."""
    for net in reversed(nets):
        if isinstance(net.body, NetBody):
            issuer = context.lookup(net.body.issuer_key)
            if issuer is not None and issuer.kind == EntityKind.MANUFACTURER:
                return issuer.handle
    return "unknown-manufacturer"
