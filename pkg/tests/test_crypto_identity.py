import json
from pathlib import Path

import pytest

from bfica.errors import CryptoError, DecryptionError, IdentityError, NotFound, PermissionDenied
from bfica.utils.crypto_identity import (
    BoxKeyPair,
    CertificateAuthority,
    Digest,
    EntityKind,
    KeyPair,
    ParticipantRole,
    Partition,
    decrypt,
    derive_seed,
    encrypt_for,
    role_for,
    sha256,
    verify_signature,
)

VECTORS = json.loads((Path(__file__).parent / "fixtures" / "vectors.json").read_text(encoding="utf-8"))


@pytest.mark.parametrize("vector", VECTORS["sha256"])
def test_sha256_vectors(vector):
    assert sha256(bytes.fromhex(vector["data"])).hex() == vector["digest"]


@pytest.mark.parametrize("vector", VECTORS["ed25519"])
def test_ed25519_vectors(vector):
    pair = KeyPair.generate(bytes.fromhex(vector["seed"]))
    message = bytes.fromhex(vector["message"])
    assert pair.public_key.hex() == vector["public_key"]
    assert pair.sign(message).hex() == vector["signature"]
    assert verify_signature(pair.public_key, message, bytes.fromhex(vector["signature"]))


def test_digest_requires_32_bytes():
    with pytest.raises(CryptoError):
        Digest(b"short")


def test_derive_seed_is_deterministic_and_label_sensitive():
    assert derive_seed("a", 1) == derive_seed("a", 1)
    assert derive_seed("a", 1) != derive_seed("a1")
    assert len(derive_seed("x")) == 32


def test_seeded_keypair_is_stable_and_signs():
    a = KeyPair.generate(derive_seed("k"))
    b = KeyPair.generate(derive_seed("k"))
    assert a.public_key == b.public_key
    sig = a.sign(b"msg")
    assert verify_signature(a.public_key, b"msg", sig)
    assert not verify_signature(a.public_key, b"other", sig)
    assert not verify_signature(b"\x00" * 5, b"msg", sig)


def test_encrypt_decrypt_and_wrong_key():
    alice = BoxKeyPair.generate(derive_seed("alice"))
    mallory = BoxKeyPair.generate(derive_seed("mallory"))
    ct = encrypt_for(alice.public_key, b"witness account", derive_seed("eph"))
    assert decrypt(alice.secret_key, ct) == b"witness account"
    with pytest.raises(DecryptionError):
        decrypt(mallory.secret_key, ct)


def test_tampered_ciphertext_fails():
    alice = BoxKeyPair.generate(derive_seed("alice"))
    ct = bytearray(encrypt_for(alice.public_key, b"payload"))
    ct[-1] ^= 1
    with pytest.raises(DecryptionError):
        decrypt(alice.secret_key, bytes(ct))


@pytest.mark.parametrize(
    "kind,partition,role",
    [
        (EntityKind.VEHICLE, Partition.OP, ParticipantRole.PROPOSER),
        (EntityKind.MANUFACTURER, Partition.OP, ParticipantRole.BOTH),
        (EntityKind.INSURER, Partition.OP, ParticipantRole.VALIDATOR),
        (EntityKind.INSURER, Partition.DP, ParticipantRole.PROPOSER),
        (EntityKind.LEGAL_AUTHORITY, Partition.DP, ParticipantRole.VALIDATOR),
        (EntityKind.VEHICLE, Partition.DP, None),
    ],
)
def test_role_table(kind, partition, role):
    assert role_for(kind, partition) == role


class TestCertificateAuthority:
    def setup_method(self):
        self.ca = CertificateAuthority(seed=7)
        self.cav = self.ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])
        self.police = self.ca.issue_identity("LA", EntityKind.LEGAL_AUTHORITY, [Partition.DP])
        self.ca.register_law_enforcement(self.police)

    def test_membership_is_per_partition(self):
        assert self.ca.verify_membership(self.cav, Partition.OP)
        assert not self.ca.verify_membership(self.cav, Partition.DP)

    def test_duplicate_handle_rejected(self):
        with pytest.raises(IdentityError):
            self.ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])

    def test_vehicle_has_no_dp_role(self):
        with pytest.raises(IdentityError):
            self.ca.issue_identity("CAV2", EntityKind.VEHICLE, [Partition.DP])

    def test_pseudonyms_are_anonymous_members(self):
        pset = self.ca.issue_pseudonyms(self.cav, 3)
        cred = self.ca.credential(Partition.OP)
        for key in pset.public_keys():
            cert = self.ca.directory.certified(key, cred)
            assert cert is not None and cert.is_pseudonym

    def test_pseudonym_rotation(self):
        pset = self.ca.issue_pseudonyms(self.cav, 2)
        first = pset.active.public_key
        assert pset.rotate().public_key != first
        assert pset.rotate().public_key == first
        with pytest.raises(IdentityError):
            pset.rotate(5)

    def test_resolution_by_law_enforcement(self):
        pset = self.ca.issue_pseudonyms(self.cav, 2)
        owner = self.ca.resolve_pseudonym(self.police, pset.pseudonyms[1].public_key)
        assert owner.handle == "CAV1"
        assert self.ca.audit_log[-1]["result"] == "CAV1"

    def test_resolution_denied_for_others(self):
        pset = self.ca.issue_pseudonyms(self.cav, 1)
        ins = self.ca.issue_identity("I1", EntityKind.INSURER, [Partition.OP, Partition.DP])
        with pytest.raises(PermissionDenied):
            self.ca.resolve_pseudonym(ins, pset.active.public_key)
        assert self.ca.audit_log[-1]["result"] == "denied"

    def test_unknown_pseudonym(self):
        with pytest.raises(NotFound):
            self.ca.resolve_pseudonym(self.police, b"\x01" * 32)

    def test_same_seed_same_keys(self):
        other = CertificateAuthority(seed=7)
        cav = other.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])
        assert cav.public_key == self.cav.public_key
