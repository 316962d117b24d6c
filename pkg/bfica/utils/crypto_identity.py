"""
Keys, signatures, hashing and the in-simulation certificate authority.

The authority keeps one CA signing key per partition. The public halves are
the genesis credentials; a participant is a member of a partition when the
authority has published a certificate for its key signed under that
partition's CA key.
"""
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Dict, FrozenSet, Iterable, List, Optional, Set, Tuple

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric.ed25519 import (
    Ed25519PrivateKey,
    Ed25519PublicKey,
)
from cryptography.hazmat.primitives.asymmetric.x25519 import (
    X25519PrivateKey,
    X25519PublicKey,
)
from cryptography.hazmat.primitives.ciphers.aead import ChaCha20Poly1305
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from bfica.errors import (
    CryptoError,
    DecodeError,
    DecryptionError,
    IdentityError,
    NotFound,
    PermissionDenied,
)
from bfica.utils.codec import Encoder

_RAW = serialization.Encoding.Raw
_RAW_PUB = serialization.PublicFormat.Raw
_RAW_PRIV = serialization.PrivateFormat.Raw

_BOX_INFO = b"bfica/box/v1"
_EPH_LEN = 32
_TAG_LEN = 16


@dataclass(frozen=True, order=True)
class Digest:
    value: bytes

    def __post_init__(self) -> None:
        if not isinstance(self.value, (bytes, bytearray)) or len(self.value) != 32:
            raise CryptoError("digest must be exactly 32 bytes")
        object.__setattr__(self, "value", bytes(self.value))

    def hex(self) -> str:
        return self.value.hex()

    @classmethod
    def fromhex(cls, text: str) -> "Digest":
        try:
            return cls(bytes.fromhex(text))
        except ValueError as e:
            raise DecodeError(f"bad digest hex: {e}")

    def __bytes__(self) -> bytes:
        return self.value

    def __repr__(self) -> str:
        return f"Digest({self.value.hex()[:16]}…)"


ZERO_DIGEST = Digest(bytes(32))


def sha256(data: bytes) -> Digest:
    return Digest(hashlib.sha256(data).digest())


def derive_seed(*parts: object) -> bytes:
    """32 deterministic bytes from a tuple of labels."""
    enc = Encoder()
    for part in parts:
        enc.raw(part if isinstance(part, bytes) else str(part).encode("utf-8"))
    return hashlib.sha256(b"bfica/seed" + enc.to_bytes()).digest()


class Partition(str, Enum):
    OP = "OP"
    DP = "DP"


class EntityKind(str, Enum):
    VEHICLE = "vehicle"
    MANUFACTURER = "manufacturer"
    TECHNICIAN = "technician"
    INSURER = "insurer"
    LEGAL_AUTHORITY = "legal_authority"
    TRANSPORT_AUTHORITY = "transport_authority"


class ParticipantRole(str, Enum):
    PROPOSER = "proposer"
    VALIDATOR = "validator"
    BOTH = "both"


# Who may propose and who may validate in each partition.
PROPOSERS: Dict[Partition, FrozenSet[EntityKind]] = {
    Partition.OP: frozenset(
        {EntityKind.VEHICLE, EntityKind.MANUFACTURER, EntityKind.TECHNICIAN}
    ),
    Partition.DP: frozenset({EntityKind.INSURER, EntityKind.MANUFACTURER}),
}
VALIDATORS: Dict[Partition, FrozenSet[EntityKind]] = {
    Partition.OP: frozenset(
        {EntityKind.MANUFACTURER, EntityKind.TECHNICIAN, EntityKind.INSURER}
    ),
    Partition.DP: frozenset(
        {EntityKind.LEGAL_AUTHORITY, EntityKind.TRANSPORT_AUTHORITY}
    ),
}


def role_for(kind: EntityKind, partition: Partition) -> Optional[ParticipantRole]:
    proposes = kind in PROPOSERS[partition]
    validates = kind in VALIDATORS[partition]
    if proposes and validates:
        return ParticipantRole.BOTH
    if proposes:
        return ParticipantRole.PROPOSER
    if validates:
        return ParticipantRole.VALIDATOR
    return None


@dataclass(frozen=True)
class KeyPair:
    """Ed25519 signing key pair, raw 32-byte encodings."""

    public_key: bytes
    secret_key: bytes = field(repr=False)

    @classmethod
    def generate(cls, seed: Optional[bytes] = None) -> "KeyPair":
        if seed is None:
            sk = Ed25519PrivateKey.generate()
        else:
            sk = Ed25519PrivateKey.from_private_bytes(seed[:32])
        return cls(
            public_key=sk.public_key().public_bytes(_RAW, _RAW_PUB),
            secret_key=sk.private_bytes(_RAW, _RAW_PRIV, serialization.NoEncryption()),
        )

    def sign(self, message: bytes) -> bytes:
        return Ed25519PrivateKey.from_private_bytes(self.secret_key).sign(message)


def verify_signature(public_key: bytes, message: bytes, signature: bytes) -> bool:
    try:
        Ed25519PublicKey.from_public_bytes(public_key).verify(signature, message)
        return True
    except (InvalidSignature, ValueError):
        return False


@dataclass(frozen=True)
class BoxKeyPair:
    """X25519 key pair used to receive encrypted witness accounts."""

    public_key: bytes
    secret_key: bytes = field(repr=False)

    @classmethod
    def generate(cls, seed: Optional[bytes] = None) -> "BoxKeyPair":
        if seed is None:
            sk = X25519PrivateKey.generate()
        else:
            sk = X25519PrivateKey.from_private_bytes(seed[:32])
        return cls(
            public_key=sk.public_key().public_bytes(_RAW, _RAW_PUB),
            secret_key=sk.private_bytes(_RAW, _RAW_PRIV, serialization.NoEncryption()),
        )


def _box_key(shared: bytes, eph_pub: bytes, recipient: bytes) -> Tuple[bytes, bytes]:
    okm = HKDF(
        algorithm=hashes.SHA256(),
        length=44,
        salt=None,
        info=_BOX_INFO + eph_pub + recipient,
    ).derive(shared)
    return okm[:32], okm[32:]


def encrypt_for(
    recipient_public_key: bytes,
    plaintext: bytes,
    ephemeral_seed: Optional[bytes] = None,
) -> bytes:
    """
    Ephemeral X25519 agreement, HKDF-SHA256, ChaCha20-Poly1305.
    Output is the ephemeral public key followed by the AEAD ciphertext.
    """
    try:
        recipient = X25519PublicKey.from_public_bytes(recipient_public_key)
    except ValueError as e:
        raise CryptoError(f"bad recipient key: {e}")
    eph = BoxKeyPair.generate(ephemeral_seed)
    shared = X25519PrivateKey.from_private_bytes(eph.secret_key).exchange(recipient)
    key, nonce = _box_key(shared, eph.public_key, recipient_public_key)
    return eph.public_key + ChaCha20Poly1305(key).encrypt(nonce, plaintext, eph.public_key)


def decrypt(recipient_secret_key: bytes, ciphertext: bytes) -> bytes:
    if len(ciphertext) < _EPH_LEN + _TAG_LEN:
        raise DecodeError("ciphertext too short")
    eph_pub, body = ciphertext[:_EPH_LEN], ciphertext[_EPH_LEN:]
    try:
        sk = X25519PrivateKey.from_private_bytes(recipient_secret_key)
        shared = sk.exchange(X25519PublicKey.from_public_bytes(eph_pub))
    except ValueError as e:
        raise DecryptionError(f"key agreement failed: {e}")
    own_pub = sk.public_key().public_bytes(_RAW, _RAW_PUB)
    key, nonce = _box_key(shared, eph_pub, own_pub)
    try:
        return ChaCha20Poly1305(key).decrypt(nonce, body, eph_pub)
    except InvalidTag:
        raise DecryptionError("authenticated decryption failed")


@dataclass(frozen=True)
class GenesisCredential:
    partition: Partition
    ca_verification_key: bytes


@dataclass(frozen=True)
class Certificate:
    """
    Binds a key to a partition. Pseudonym certificates leave ``handle`` and
    ``kind`` empty so nothing on the ledger side links them to an owner.
    """

    partition: Partition
    subject_key: bytes
    kind: Optional[EntityKind]
    handle: Optional[str]
    signature: bytes = b""

    def signed_payload(self) -> bytes:
        return (
            Encoder()
            .raw(b"bfica/cert")
            .text(self.partition.value)
            .raw(self.subject_key)
            .text(self.kind.value if self.kind else "")
            .text(self.handle or "")
            .to_bytes()
        )

    @property
    def is_pseudonym(self) -> bool:
        return self.handle is None

    def verify(self, credential: GenesisCredential) -> bool:
        if credential.partition != self.partition:
            return False
        return verify_signature(
            credential.ca_verification_key, self.signed_payload(), self.signature
        )


@dataclass
class PseudonymSet:
    owner: str
    pseudonyms: List[KeyPair]
    active_index: int = 0

    def __post_init__(self) -> None:
        if not self.pseudonyms:
            raise IdentityError("a pseudonym set needs at least one key")
        if not 0 <= self.active_index < len(self.pseudonyms):
            raise IdentityError("active_index out of range")

    @property
    def active(self) -> KeyPair:
        return self.pseudonyms[self.active_index]

    def rotate(self, index: Optional[int] = None) -> KeyPair:
        if index is None:
            index = (self.active_index + 1) % len(self.pseudonyms)
        if not 0 <= index < len(self.pseudonyms):
            raise IdentityError(f"no pseudonym at index {index}")
        self.active_index = index
        return self.active

    def public_keys(self) -> List[bytes]:
        return [kp.public_key for kp in self.pseudonyms]

    def holds(self, key: bytes) -> bool:
        return any(kp.public_key == key for kp in self.pseudonyms)

    def keypair_for(self, key: bytes) -> KeyPair:
        for kp in self.pseudonyms:
            if kp.public_key == key:
                return kp
        raise NotFound("key is not in this pseudonym set")


@dataclass
class Participant:
    handle: str
    kind: EntityKind
    memberships: FrozenSet[Partition]
    keypair: KeyPair
    box: BoxKeyPair
    certificates: Dict[Partition, Certificate] = field(default_factory=dict)
    pseudonyms: Optional[PseudonymSet] = None
    maker: Optional[str] = None
    insurer: Optional[str] = None

    @property
    def public_key(self) -> bytes:
        return self.keypair.public_key

    def role_in(self, partition: Partition) -> Optional[ParticipantRole]:
        if partition not in self.memberships:
            return None
        return role_for(self.kind, partition)

    def can_validate(self, partition: Partition) -> bool:
        return self.role_in(partition) in (ParticipantRole.VALIDATOR, ParticipantRole.BOTH)

    def can_propose(self, partition: Partition) -> bool:
        return self.role_in(partition) in (ParticipantRole.PROPOSER, ParticipantRole.BOTH)

    def active_pseudonym(self) -> KeyPair:
        if self.pseudonyms is None:
            raise IdentityError(f"{self.handle} holds no pseudonyms")
        return self.pseudonyms.active


class CertificateDirectory:
    """Published certificates, looked up by public key."""

    def __init__(self) -> None:
        self._certs: Dict[bytes, List[Certificate]] = {}

    def publish(self, cert: Certificate) -> None:
        self._certs.setdefault(cert.subject_key, []).append(cert)

    def lookup(self, key: bytes, partition: Partition) -> Optional[Certificate]:
        for cert in self._certs.get(key, []):
            if cert.partition == partition:
                return cert
        return None

    def certified(self, key: bytes, credential: GenesisCredential) -> Optional[Certificate]:
        """The certificate for ``key`` that verifies under ``credential``."""
        cert = self.lookup(key, credential.partition)
        if cert is not None and cert.verify(credential):
            return cert
        return None

    def is_member(self, key: bytes, credential: GenesisCredential) -> bool:
        return self.certified(key, credential) is not None

    def __len__(self) -> int:
        return sum(len(v) for v in self._certs.values())


class CertificateAuthority:
    """
    The transport authority's identity service: issues identities and
    pseudonyms, publishes certificates and answers pseudonym resolution for
    registered law-enforcement agencies.
    """

    def __init__(self, seed: bytes | int | str = b"bfica") -> None:
        self._seed = seed if isinstance(seed, bytes) else str(seed).encode("utf-8")
        self._ca_keys = {
            p: KeyPair.generate(derive_seed(self._seed, "ca", p.value)) for p in Partition
        }
        self.directory = CertificateDirectory()
        self._participants: Dict[str, Participant] = {}
        self._by_key: Dict[bytes, str] = {}
        self._pseudonym_owner: Dict[bytes, str] = {}
        self._law_enforcement: Set[str] = set()
        self.audit_log: List[Dict[str, str]] = []

    def credential(self, partition: Partition) -> GenesisCredential:
        return GenesisCredential(partition, self._ca_keys[partition].public_key)

    def _certify(
        self,
        partition: Partition,
        key: bytes,
        kind: Optional[EntityKind],
        handle: Optional[str],
    ) -> Certificate:
        unsigned = Certificate(partition, key, kind, handle)
        cert = Certificate(
            partition, key, kind, handle, self._ca_keys[partition].sign(unsigned.signed_payload())
        )
        self.directory.publish(cert)
        return cert

    def issue_identity(
        self,
        handle: str,
        kind: EntityKind,
        memberships: Iterable[Partition],
        maker: Optional[str] = None,
        insurer: Optional[str] = None,
    ) -> Participant:
        if handle in self._participants:
            raise IdentityError(f"identity '{handle}' already issued")
        parts = frozenset(Partition(p) for p in memberships)
        if not parts:
            raise IdentityError(f"'{handle}' requested no partition membership")
        for p in parts:
            if role_for(kind, p) is None:
                raise IdentityError(f"a {kind.value} has no role in {p.value}")

        participant = Participant(
            handle=handle,
            kind=kind,
            memberships=parts,
            keypair=KeyPair.generate(derive_seed(self._seed, "id", handle)),
            box=BoxKeyPair.generate(derive_seed(self._seed, "box", handle)),
            maker=maker,
            insurer=insurer,
        )
        for p in sorted(parts, key=lambda x: x.value):
            participant.certificates[p] = self._certify(p, participant.public_key, kind, handle)
        self._participants[handle] = participant
        self._by_key[participant.public_key] = handle
        logging.info("issued %s identity '%s' for %s", kind.value, handle,
                     ",".join(sorted(p.value for p in parts)))
        return participant

    def issue_pseudonyms(self, cav: Participant, n: int) -> PseudonymSet:
        if cav.kind != EntityKind.VEHICLE:
            raise IdentityError(f"'{cav.handle}' is not a vehicle")
        if n < 1:
            raise IdentityError("pseudonym count must be at least 1")
        start = len(cav.pseudonyms.pseudonyms) if cav.pseudonyms else 0
        keys = [
            KeyPair.generate(derive_seed(self._seed, "pseudonym", cav.handle, start + i))
            for i in range(n)
        ]
        for kp in keys:
            self._certify(Partition.OP, kp.public_key, None, None)
            self._pseudonym_owner[kp.public_key] = cav.handle
        cav.pseudonyms = PseudonymSet(owner=cav.handle, pseudonyms=keys)
        return cav.pseudonyms

    def register_law_enforcement(self, agency: Participant) -> None:
        if agency.handle not in self._participants:
            raise NotFound(f"unknown participant '{agency.handle}'")
        self._law_enforcement.add(agency.handle)

    def is_law_enforcement(self, participant: Participant) -> bool:
        return participant.handle in self._law_enforcement

    def resolve_pseudonym(self, law_enforcement: Participant, pk: bytes) -> Participant:
        if law_enforcement.handle not in self._law_enforcement:
            self.audit_log.append(
                {"caller": law_enforcement.handle, "key": pk.hex(), "result": "denied"}
            )
            raise PermissionDenied(
                f"'{law_enforcement.handle}' is not registered for pseudonym resolution"
            )
        owner = self._pseudonym_owner.get(pk)
        if owner is None:
            self.audit_log.append(
                {"caller": law_enforcement.handle, "key": pk.hex(), "result": "not_found"}
            )
            raise NotFound("unknown pseudonym")
        self.audit_log.append(
            {"caller": law_enforcement.handle, "key": pk.hex(), "result": owner}
        )
        logging.info("pseudonym resolved for %s", law_enforcement.handle)
        return self._participants[owner]

    def participant(self, handle: str) -> Participant:
        try:
            return self._participants[handle]
        except KeyError:
            raise NotFound(f"unknown participant '{handle}'")

    def participants(self) -> List[Participant]:
        return list(self._participants.values())

    def by_identity_key(self, key: bytes) -> Optional[Participant]:
        """Lookup by a participant's known identity key (never a pseudonym)."""
        handle = self._by_key.get(key)
        return self._participants[handle] if handle else None

    def verify_membership(self, participant: Participant, partition: Partition) -> bool:
        return self.directory.is_member(participant.public_key, self.credential(partition))
