import dataclasses

import numpy as np
import pytest

from bfica.errors import DecodeError, TransactionError
from bfica.utils.crypto_identity import CertificateAuthority, EntityKind, Partition, sha256
from bfica.utils.tx_model import (
    CollisionRecord,
    EseBody,
    EventRecord,
    ExecStatus,
    InstructionKind,
    Location,
    PetBody,
    Transaction,
    TransactionKind,
    UpdateMeta,
    canonical_serialize,
    countersign_net,
    make_ese,
    make_et,
    make_net,
    make_pet,
    make_ret,
    parse_body,
)

SYDNEY = Location(-33.8688, 151.2093)


def test_offset_distance_roughly_matches():
    moved = SYDNEY.offset(north_m=300.0, east_m=400.0)
    assert abs(SYDNEY.distance_to(moved) - 500.0) < 1.0
    assert SYDNEY.distance_to(SYDNEY) == 0.0


def test_software_update_needs_hash():
    with pytest.raises(TransactionError):
        UpdateMeta(InstructionKind.SOFTWARE_UPDATE, None)
    UpdateMeta(InstructionKind.PART_CHANGE, None, subsystem="tyres")


def test_event_record_encoding():
    rec = EventRecord(1, 12.5, ("hard_brake",), "braking")
    assert EventRecord.decode(rec.encode()) == rec


class TestTransactions:
    def setup_method(self):
        self.ca = CertificateAuthority(seed=3)
        self.maker = self.ca.issue_identity("M1", EntityKind.MANUFACTURER, [Partition.OP, Partition.DP])
        self.insurer = self.ca.issue_identity("I1", EntityKind.INSURER, [Partition.OP, Partition.DP])
        self.cav = self.ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP], maker="M1")
        self.ca.issue_pseudonyms(self.cav, 2)
        self.record = CollisionRecord.build(
            SYDNEY, 100.0, EventRecord(0, 3.0).encode(), sha256(b"video")
        )

    def test_ese_signed_by_pseudonym(self):
        tx = make_ese(self.cav, "hard_brake", 5.0, SYDNEY)
        assert tx.kind == TransactionKind.ESE
        assert tx.signer == self.cav.active_pseudonym().public_key
        assert tx.signer != self.cav.public_key
        assert tx.is_complete() and tx.signatures_valid()

    def test_ese_without_pseudonyms_refused(self):
        bare = self.ca.issue_identity("CAV2", EntityKind.VEHICLE, [Partition.OP])
        with pytest.raises(TransactionError):
            make_ese(bare, "x", 1.0)

    def test_pet_requires_consistent_record(self):
        broken = dataclasses.replace(self.record, ts=101.0)
        with pytest.raises(TransactionError):
            make_pet(self.cav, broken)

    def test_pet_cannot_predate_collision(self):
        with pytest.raises(TransactionError):
            make_pet(self.cav, self.record, submitted_at=50.0)

    def test_t_id_is_hash_of_body(self):
        tx = make_pet(self.cav, self.record)
        assert tx.t_id == sha256(tx.body_bytes())
        assert isinstance(parse_body(tx.body_bytes()), PetBody)

    def test_transaction_encoding_survives(self):
        tx = make_pet(self.cav, self.record, 101.0)
        back = Transaction.decode(tx.encode())
        assert back == tx
        assert back.signatures_valid()

    def test_net_needs_countersignature(self):
        meta = UpdateMeta(InstructionKind.SOFTWARE_UPDATE, sha256(b"fw"), subsystem="braking")
        pending = make_net(self.maker, self.cav, meta, 10.0)
        half = pending.as_transaction()
        assert not half.is_complete()
        full = countersign_net(self.cav, pending)
        assert full.is_complete() and full.signatures_valid()
        assert full.t_id == half.t_id
        with pytest.raises(TransactionError):
            countersign_net(self.cav, pending)

    def test_wrong_vehicle_cannot_countersign(self):
        other = self.ca.issue_identity("CAV9", EntityKind.VEHICLE, [Partition.OP])
        pending = make_net(self.maker, self.cav, UpdateMeta(InstructionKind.PART_CHANGE, None), 1.0)
        with pytest.raises(TransactionError):
            countersign_net(other, pending)

    def test_insurer_cannot_issue_instructions(self):
        with pytest.raises(TransactionError):
            make_net(self.insurer, self.cav, UpdateMeta(InstructionKind.PART_CHANGE, None), 1.0)

    def test_et_references_net(self):
        pending = make_net(self.maker, self.cav, UpdateMeta(InstructionKind.PART_CHANGE, None), 1.0)
        et = make_et(self.cav, pending.t_id, ExecStatus.SUCCESS, 2.0)
        assert et.body.net_ref == pending.t_id
        assert et.signer == self.cav.public_key

    def test_ret_requires_validated_pet(self):
        pet = make_pet(self.cav, self.record)
        with pytest.raises(TransactionError):
            make_ret(self.insurer, pet, set(), 200.0)
        ret = make_ret(self.insurer, pet, {pet.t_id}, 200.0)
        assert ret.body.pet_ref == pet.t_id
        assert ret.body.record == self.record

    def test_vehicle_cannot_request(self):
        pet = make_pet(self.cav, self.record)
        with pytest.raises(TransactionError):
            make_ret(self.cav, pet, {pet.t_id}, 200.0)

    def test_altered_signature_fails(self):
        tx = make_ese(self.cav, "x", 1.0)
        bad = dataclasses.replace(tx, signatures=(b"\x00" * 64,))
        assert not bad.signatures_valid()

    def test_json_dict_is_hex(self):
        doc = make_ese(self.cav, "x", 1.0).to_json_dict()
        assert doc["kind"] == "ESE"
        assert len(doc["t_id"]) == 64


def test_unknown_kind_rejected():
    from bfica.utils.codec import Encoder

    with pytest.raises(DecodeError):
        parse_body(Encoder().text("XYZ").to_bytes())


@pytest.mark.parametrize("ref", [b"", b"\x01" * 31, b"\x01" * 33])
def test_wrong_length_digest_is_a_decode_error(ref):
    from bfica.utils.codec import Encoder

    data = Encoder().text("ET").raw(ref).text("success").f64(1.0).to_bytes()
    with pytest.raises(DecodeError):
        parse_body(data)


def test_distinct_bodies_serialize_distinctly():
    rng = np.random.default_rng(11)
    codes = ("hard_brake", "slippery_road", "lane_departure", "")
    bodies = set()
    for _ in range(10_000):
        loc = None
        if rng.random() < 0.5:
            loc = Location(float(rng.uniform(-90, 90)), float(rng.uniform(-180, 180)))
        bodies.add(EseBody(
            codes[int(rng.integers(len(codes)))],
            float(rng.integers(0, 50)),
            loc,
            "x" * int(rng.integers(0, 3)),
            float(rng.integers(0, 50)),
        ))
    encoded = {canonical_serialize(body) for body in bodies}
    assert len(encoded) == len(bodies)
    body = next(iter(bodies))
    assert canonical_serialize(body) == canonical_serialize(body)
