"""
The five evidence transaction kinds, their canonical encoding and signing rules.

ESE, PET, ET and RET carry one signature. NET carries two: the issuer's and
the target vehicle's countersignature, which doubles as the vehicle's
acknowledgement of the instruction.
"""
import dataclasses
import math
from dataclasses import dataclass
from enum import Enum
from typing import Any, ClassVar, Container, Dict, Optional, Sequence, Tuple, Type, Union

from bfica.errors import CryptoError, DecodeError, IdentityError, TransactionError
from bfica.utils.codec import Decoder, Encoder
from bfica.utils.crypto_identity import (
    Digest,
    EntityKind,
    KeyPair,
    Participant,
    Partition,
    sha256,
    verify_signature,
)

EARTH_RADIUS_M = 6371000.0
SIGNING_DOMAIN = b"bfica/tx"


class TransactionKind(str, Enum):
    ESE = "ESE"
    PET = "PET"
    NET = "NET"
    ET = "ET"
    RET = "RET"


REQUIRED_SIGNATURES: Dict[TransactionKind, int] = {
    TransactionKind.ESE: 1,
    TransactionKind.PET: 1,
    TransactionKind.NET: 2,
    TransactionKind.ET: 1,
    TransactionKind.RET: 1,
}


class InstructionKind(str, Enum):
    SOFTWARE_UPDATE = "software_update"
    PART_CHANGE = "part_change"


class ExecStatus(str, Enum):
    SUCCESS = "success"
    FAILURE = "failure"


@dataclass(frozen=True)
class Location:
    lat: float
    lon: float

    def distance_to(self, other: "Location") -> float:
        """Great-circle distance in metres."""
        phi1, phi2 = math.radians(self.lat), math.radians(other.lat)
        dphi = phi2 - phi1
        dlmb = math.radians(other.lon - self.lon)
        a = math.sin(dphi / 2) ** 2 + math.cos(phi1) * math.cos(phi2) * math.sin(dlmb / 2) ** 2
        return 2 * EARTH_RADIUS_M * math.asin(min(1.0, math.sqrt(a)))

    def offset(self, north_m: float = 0.0, east_m: float = 0.0) -> "Location":
        dlat = math.degrees(north_m / EARTH_RADIUS_M)
        dlon = math.degrees(east_m / (EARTH_RADIUS_M * math.cos(math.radians(self.lat))))
        return Location(self.lat + dlat, self.lon + dlon)

    def encode_into(self, enc: Encoder) -> None:
        enc.f64(self.lat).f64(self.lon)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "Location":
        return cls(dec.f64(), dec.f64())


def _texts(enc: Encoder, items: Sequence[str]) -> None:
    enc.seq(items, lambda e, s: e.text(s))


def _read_digest(data: bytes) -> Digest:
    try:
        return Digest(data)
    except CryptoError as e:
        raise DecodeError(str(e))


@dataclass(frozen=True)
class EventRecord:
    """The host vehicle's own event record, carried opaquely as ve_px."""

    order: int
    speed: float
    events: Tuple[str, ...] = ()
    fault_subsystem: str = ""

    def encode(self) -> bytes:
        enc = Encoder().u32(self.order).f64(self.speed)
        _texts(enc, self.events)
        return enc.text(self.fault_subsystem).to_bytes()

    @classmethod
    def decode(cls, data: bytes) -> "EventRecord":
        dec = Decoder(data)
        rec = cls(dec.u32(), dec.f64(), tuple(dec.seq(Decoder.text)), dec.text())
        dec.finish()
        return rec


@dataclass(frozen=True)
class WitnessRecord:
    """A witness vehicle's account of one subject vehicle."""

    witness_key: bytes
    subject_key: bytes
    loc: Location
    ts: float
    subject_speed: float
    observed_events: Tuple[str, ...] = ()

    def encode(self) -> bytes:
        enc = Encoder().raw(self.witness_key).raw(self.subject_key)
        self.loc.encode_into(enc)
        enc.f64(self.ts).f64(self.subject_speed)
        _texts(enc, self.observed_events)
        return enc.to_bytes()

    @classmethod
    def decode(cls, data: bytes) -> "WitnessRecord":
        dec = Decoder(data)
        rec = cls(
            dec.raw(), dec.raw(), Location.decode_from(dec), dec.f64(), dec.f64(),
            tuple(dec.seq(Decoder.text)),
        )
        dec.finish()
        return rec


@dataclass(frozen=True)
class WitnessCiphertext:
    witness_key: bytes
    ciphertext: bytes


def _write_witness(enc: Encoder, w: WitnessCiphertext) -> None:
    enc.raw(w.witness_key).raw(w.ciphertext)


def _read_witness(dec: Decoder) -> WitnessCiphertext:
    return WitnessCiphertext(dec.raw(), dec.raw())


@dataclass(frozen=True)
class CollisionRecord:
    """Collision data of a PET: loc, ts, ve_px, ts_data, witness accounts and h_tdata."""

    loc: Location
    ts: float
    ve_px: bytes
    ts_data: Digest
    witness_ciphertexts: Tuple[WitnessCiphertext, ...]
    h_tdata: Digest

    @staticmethod
    def compute_hash(
        loc: Location,
        ts: float,
        ve_px: bytes,
        ts_data: Digest,
        witness_ciphertexts: Sequence[WitnessCiphertext],
    ) -> Digest:
        enc = Encoder()
        loc.encode_into(enc)
        enc.f64(ts).raw(ve_px).raw(ts_data.value)
        enc.seq(witness_ciphertexts, _write_witness)
        return sha256(enc.to_bytes())

    @classmethod
    def build(
        cls,
        loc: Location,
        ts: float,
        ve_px: bytes,
        ts_data: Digest,
        witness_ciphertexts: Sequence[WitnessCiphertext] = (),
    ) -> "CollisionRecord":
        witnesses = tuple(witness_ciphertexts)
        return cls(loc, ts, ve_px, ts_data, witnesses,
                   cls.compute_hash(loc, ts, ve_px, ts_data, witnesses))

    def recompute_hash(self) -> Digest:
        return self.compute_hash(self.loc, self.ts, self.ve_px, self.ts_data,
                                 self.witness_ciphertexts)

    def is_consistent(self) -> bool:
        return self.recompute_hash() == self.h_tdata

    def event_record(self) -> EventRecord:
        return EventRecord.decode(self.ve_px)

    def encode_into(self, enc: Encoder) -> None:
        self.loc.encode_into(enc)
        enc.f64(self.ts).raw(self.ve_px).raw(self.ts_data.value)
        enc.seq(self.witness_ciphertexts, _write_witness)
        enc.raw(self.h_tdata.value)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "CollisionRecord":
        loc = Location.decode_from(dec)
        ts = dec.f64()
        ve_px = dec.raw()
        ts_data = _read_digest(dec.raw())
        witnesses = tuple(dec.seq(_read_witness))
        return cls(loc, ts, ve_px, ts_data, witnesses, _read_digest(dec.raw()))


@dataclass(frozen=True)
class EseBody:
    KIND: ClassVar[TransactionKind] = TransactionKind.ESE
    event_code: str
    ts: float
    loc: Optional[Location]
    detail: str
    submitted_at: float

    def encode_into(self, enc: Encoder) -> None:
        enc.text(self.event_code).f64(self.ts)
        enc.flag(self.loc is not None)
        if self.loc is not None:
            self.loc.encode_into(enc)
        enc.text(self.detail).f64(self.submitted_at)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "EseBody":
        code, ts = dec.text(), dec.f64()
        loc = Location.decode_from(dec) if dec.flag() else None
        return cls(code, ts, loc, dec.text(), dec.f64())


@dataclass(frozen=True)
class PetBody:
    KIND: ClassVar[TransactionKind] = TransactionKind.PET
    record: CollisionRecord
    submitted_at: float

    def encode_into(self, enc: Encoder) -> None:
        self.record.encode_into(enc)
        enc.f64(self.submitted_at)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "PetBody":
        return cls(CollisionRecord.decode_from(dec), dec.f64())


@dataclass(frozen=True)
class UpdateMeta:
    instruction_kind: InstructionKind
    update_file_hash: Optional[Digest]
    metadata: str = ""
    file_pointer: str = ""
    subsystem: str = ""

    def __post_init__(self) -> None:
        if self.instruction_kind == InstructionKind.SOFTWARE_UPDATE and self.update_file_hash is None:
            raise TransactionError("a software update needs the update file hash")

    def encode_into(self, enc: Encoder) -> None:
        enc.text(self.instruction_kind.value)
        enc.optional(self.update_file_hash.value if self.update_file_hash else None)
        enc.text(self.metadata).text(self.file_pointer).text(self.subsystem)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "UpdateMeta":
        try:
            kind = InstructionKind(dec.text())
        except ValueError as e:
            raise DecodeError(str(e))
        h = dec.optional()
        try:
            return cls(kind, _read_digest(h) if h is not None else None, dec.text(), dec.text(), dec.text())
        except TransactionError as e:
            raise DecodeError(str(e))


@dataclass(frozen=True)
class NetBody:
    KIND: ClassVar[TransactionKind] = TransactionKind.NET
    issuer_key: bytes
    target_key: bytes
    meta: UpdateMeta
    submitted_at: float

    def encode_into(self, enc: Encoder) -> None:
        enc.raw(self.issuer_key).raw(self.target_key)
        self.meta.encode_into(enc)
        enc.f64(self.submitted_at)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "NetBody":
        return cls(dec.raw(), dec.raw(), UpdateMeta.decode_from(dec), dec.f64())


@dataclass(frozen=True)
class EtBody:
    KIND: ClassVar[TransactionKind] = TransactionKind.ET
    net_ref: Digest
    status: ExecStatus
    submitted_at: float

    def encode_into(self, enc: Encoder) -> None:
        enc.raw(self.net_ref.value).text(self.status.value).f64(self.submitted_at)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "EtBody":
        ref = _read_digest(dec.raw())
        try:
            status = ExecStatus(dec.text())
        except ValueError as e:
            raise DecodeError(str(e))
        return cls(ref, status, dec.f64())


@dataclass(frozen=True)
class RetBody:
    KIND: ClassVar[TransactionKind] = TransactionKind.RET
    pet_ref: Digest
    host_key: bytes
    record: CollisionRecord
    submitted_at: float

    def encode_into(self, enc: Encoder) -> None:
        enc.raw(self.pet_ref.value).raw(self.host_key)
        self.record.encode_into(enc)
        enc.f64(self.submitted_at)

    @classmethod
    def decode_from(cls, dec: Decoder) -> "RetBody":
        return cls(_read_digest(dec.raw()), dec.raw(), CollisionRecord.decode_from(dec), dec.f64())


Body = Union[EseBody, PetBody, NetBody, EtBody, RetBody]

BODY_TYPES: Dict[TransactionKind, Type[Any]] = {
    TransactionKind.ESE: EseBody,
    TransactionKind.PET: PetBody,
    TransactionKind.NET: NetBody,
    TransactionKind.ET: EtBody,
    TransactionKind.RET: RetBody,
}


def canonical_serialize(body: Body) -> bytes:
    enc = Encoder().text(body.KIND.value)
    body.encode_into(enc)
    return enc.to_bytes()


def parse_body(data: bytes) -> Body:
    dec = Decoder(data)
    try:
        kind = TransactionKind(dec.text())
    except ValueError as e:
        raise DecodeError(f"unknown transaction kind: {e}")
    body = BODY_TYPES[kind].decode_from(dec)
    dec.finish()
    return body


def signing_message(kind: TransactionKind, t_id: Digest) -> bytes:
    return SIGNING_DOMAIN + kind.value.encode("ascii") + t_id.value


def _jsonable(value: Any) -> Any:
    if isinstance(value, Digest):
        return value.hex()
    if isinstance(value, bytes):
        return value.hex()
    if isinstance(value, Enum):
        return value.value
    if dataclasses.is_dataclass(value) and not isinstance(value, type):
        return {f.name: _jsonable(getattr(value, f.name)) for f in dataclasses.fields(value)}
    if isinstance(value, (list, tuple)):
        return [_jsonable(v) for v in value]
    return value


@dataclass(frozen=True)
class Transaction:
    t_id: Digest
    kind: TransactionKind
    body: Body
    signer_keys: Tuple[bytes, ...]
    signatures: Tuple[bytes, ...]

    @property
    def submitted_at(self) -> float:
        return self.body.submitted_at

    @property
    def signer(self) -> bytes:
        return self.signer_keys[0]

    @property
    def order_key(self) -> Tuple[float, Digest]:
        return (self.submitted_at, self.t_id)

    @property
    def dedup_key(self) -> Tuple[bytes, Digest]:
        return (self.signer, self.t_id)

    def body_bytes(self) -> bytes:
        return canonical_serialize(self.body)

    def is_complete(self) -> bool:
        need = REQUIRED_SIGNATURES[self.kind]
        return len(self.signer_keys) == need and len(self.signatures) == need

    def signatures_valid(self) -> bool:
        if len(self.signer_keys) != len(self.signatures) or not self.signatures:
            return False
        if sha256(self.body_bytes()) != self.t_id:
            return False
        message = signing_message(self.kind, self.t_id)
        return all(
            verify_signature(k, message, s) for k, s in zip(self.signer_keys, self.signatures)
        )

    def encode(self) -> bytes:
        return (
            Encoder()
            .raw(self.body_bytes())
            .seq(self.signer_keys, lambda e, k: e.raw(k))
            .seq(self.signatures, lambda e, s: e.raw(s))
            .to_bytes()
        )

    @classmethod
    def decode(cls, data: bytes) -> "Transaction":
        dec = Decoder(data)
        body_bytes = dec.raw()
        keys = tuple(dec.seq(Decoder.raw))
        sigs = tuple(dec.seq(Decoder.raw))
        dec.finish()
        body = parse_body(body_bytes)
        return cls(sha256(body_bytes), body.KIND, body, keys, sigs)

    def size_bytes(self) -> int:
        return len(self.encode())

    def to_json_dict(self) -> Dict[str, Any]:
        return {
            "t_id": self.t_id.hex(),
            "kind": self.kind.value,
            "submitted_at": self.submitted_at,
            "signers": [k.hex() for k in self.signer_keys],
            "body": _jsonable(self.body),
        }


def _sign(body: Body, keypairs: Sequence[KeyPair]) -> Transaction:
    t_id = sha256(canonical_serialize(body))
    message = signing_message(body.KIND, t_id)
    return Transaction(
        t_id=t_id,
        kind=body.KIND,
        body=body,
        signer_keys=tuple(kp.public_key for kp in keypairs),
        signatures=tuple(kp.sign(message) for kp in keypairs),
    )


def make_ese(
    cav: Participant,
    event_code: str,
    ts: float,
    loc: Optional[Location] = None,
    detail: str = "",
) -> Transaction:
    """Single-sign event safety evidence under the vehicle's active pseudonym."""
    try:
        key = cav.active_pseudonym()
    except IdentityError as e:
        raise TransactionError(str(e))
    return _sign(EseBody(event_code, ts, loc, detail, ts), [key])


def make_pet(
    cav: Participant, record: CollisionRecord, submitted_at: Optional[float] = None
) -> Transaction:
    if not record.is_consistent():
        raise TransactionError("collision record hash does not match its content")
    submitted_at = record.ts if submitted_at is None else submitted_at
    if record.ts > submitted_at:
        raise TransactionError("collision timestamp is later than submission")
    try:
        key = cav.active_pseudonym()
    except IdentityError as e:
        raise TransactionError(str(e))
    return _sign(PetBody(record, submitted_at), [key])


@dataclass
class PendingNet:
    """A NET carrying only the issuer's signature, awaiting the vehicle's acknowledgement."""

    body: NetBody
    issuer_signature: bytes
    completed: bool = False

    @property
    def t_id(self) -> Digest:
        return sha256(canonical_serialize(self.body))

    def as_transaction(self) -> Transaction:
        """The incomplete NET, as the issuer would submit it without an ACK."""
        return Transaction(self.t_id, TransactionKind.NET, self.body,
                           (self.body.issuer_key,), (self.issuer_signature,))


def make_net(
    issuer: Participant, target_cav: Participant, meta: UpdateMeta, issued_at: float
) -> PendingNet:
    if issuer.kind not in (EntityKind.MANUFACTURER, EntityKind.TECHNICIAN) or not issuer.can_validate(
        Partition.OP
    ):
        raise TransactionError(f"'{issuer.handle}' may not issue instructions")
    if target_cav.kind != EntityKind.VEHICLE:
        raise TransactionError(f"'{target_cav.handle}' is not a vehicle")
    body = NetBody(issuer.public_key, target_cav.public_key, meta, issued_at)
    t_id = sha256(canonical_serialize(body))
    return PendingNet(body, issuer.keypair.sign(signing_message(TransactionKind.NET, t_id)))


def countersign_net(target_cav: Participant, pending: PendingNet) -> Transaction:
    if pending.completed:
        raise TransactionError("instruction already acknowledged")
    if target_cav.public_key != pending.body.target_key:
        raise TransactionError(f"'{target_cav.handle}' is not the instruction target")
    t_id = pending.t_id
    pending.completed = True
    return Transaction(
        t_id=t_id,
        kind=TransactionKind.NET,
        body=pending.body,
        signer_keys=(pending.body.issuer_key, target_cav.public_key),
        signatures=(
            pending.issuer_signature,
            target_cav.keypair.sign(signing_message(TransactionKind.NET, t_id)),
        ),
    )


def make_et(cav: Participant, net_ref: Digest, status: ExecStatus, ts: float) -> Transaction:
    return _sign(EtBody(net_ref, ExecStatus(status), ts), [cav.keypair])


def make_ret(
    proposer: Participant,
    pet: Transaction,
    validated: Container[Digest],
    ts: float,
) -> Transaction:
    """Request for evidence embedding the PET's collision record verbatim."""
    if not proposer.can_propose(Partition.DP):
        raise TransactionError(f"'{proposer.handle}' may not propose requests")
    if pet.kind != TransactionKind.PET:
        raise TransactionError("a request must reference a PET")
    if pet.t_id not in validated:
        raise TransactionError("referenced PET has not been validated")
    assert isinstance(pet.body, PetBody)
    return _sign(RetBody(pet.t_id, pet.signer, pet.body.record, ts), [proposer.keypair])
