import json

import numpy as np
import pytest

from bfica.errors import DecodeError, NotFound
from bfica.ledger.dp_partition import DpCluster, DpValidator
from bfica.ledger.dump import dump_dp_ledger, dump_op_ledger, read_dump, verify_dump, write_dump
from bfica.ledger.op_partition import GenesisBlock, OpCluster, OpValidator
from bfica.utils.crypto_identity import CertificateAuthority, EntityKind, Partition, sha256
from bfica.utils.tx_model import CollisionRecord, EventRecord, Location, make_ese, make_pet, make_ret


class TestLedgerDumps:
    def setup_method(self):
        self.ca = CertificateAuthority(seed=21)
        both = [Partition.OP, Partition.DP]
        self.maker = self.ca.issue_identity("M1", EntityKind.MANUFACTURER, both)
        self.insurer = self.ca.issue_identity("I1", EntityKind.INSURER, both)
        self.police = self.ca.issue_identity("LA", EntityKind.LEGAL_AUTHORITY, [Partition.DP])
        self.cav = self.ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])
        self.ca.issue_pseudonyms(self.cav, 1)

        genesis = GenesisBlock(self.ca.credential(Partition.OP))
        self.op = OpCluster([OpValidator(p, genesis, self.ca.directory, b_max=2)
                             for p in (self.maker, self.insurer)])
        self.txs = [make_ese(self.cav, "hard_brake", float(t)) for t in range(1, 6)]
        for tx in self.txs:
            self.op.submit(tx)
            self.op.consensus_round(tx, tx.submitted_at)

    def op_records(self, handle="M1"):
        return dump_op_ledger(self.op.validator(handle).ledger)

    def test_honest_op_dump_verifies(self):
        result = verify_dump(self.op_records())
        assert result.ok
        assert result.partition == "OP"
        assert result.blocks == 2

    def test_dump_has_dynamic_tail(self):
        records = self.op_records()
        assert records[0]["type"] == "genesis"
        assert records[-1]["type"] == "dynamic"
        assert records[-1]["t_ids"] == [self.txs[-1].t_id.hex()]

    def test_sealed_tampering_detected_at_height(self):
        v = self.op.validator("I1")
        v.tamper_sealed(self.txs[2].t_id)
        result = verify_dump(dump_op_ledger(v.ledger))
        assert not result.ok
        assert result.failed_height == 2

    def test_broken_link_detected(self):
        records = self.op_records()
        records[2]["prev_bid"] = sha256(b"elsewhere").hex()
        result = verify_dump(records)
        assert not result.ok and result.failed_height == 2
        assert "prev_bid" in result.reason

    def test_bad_t_alt_bid(self):
        records = self.op_records()
        records[1]["t_alt_bid"] = records[1]["t_ids"][0]
        assert verify_dump(records).reason == "t_alt_bid does not name the last transaction"

    def test_empty_dump(self):
        assert verify_dump([]).failed_height == 0

    def test_file_round_trip(self, tmp_path):
        path = tmp_path / "op_ledger.ndjson"
        write_dump(self.op_records(), path)
        lines = path.read_text().splitlines()
        assert json.loads(lines[0])["type"] == "genesis"
        assert verify_dump(read_dump(path)).ok

    def test_read_missing_file(self, tmp_path):
        with pytest.raises(NotFound):
            read_dump(tmp_path / "absent.ndjson")

    def test_read_garbage(self, tmp_path):
        path = tmp_path / "bad.ndjson"
        path.write_text('{"type":"genesis"}\nnot json\n')
        with pytest.raises(DecodeError):
            read_dump(path)

    def test_dp_dump_verifies_and_detects_reorder(self):
        genesis = GenesisBlock(self.ca.credential(Partition.DP))
        dp = DpCluster([DpValidator(self.police, genesis, self.ca.directory, b_max=2)])
        loc = Location(1.0, 2.0)
        for i in range(2):
            record = CollisionRecord.build(loc, 10.0 + i, EventRecord(i, 3.0).encode(), sha256(b"v"))
            pet = make_pet(self.cav, record)
            dp.submit(make_ret(self.insurer, pet, {pet.t_id}, 20.0 + i))
        assert dp.assemble_and_validate_block(30.0) is not None

        records = dump_dp_ledger(dp.validators[0].ledger)
        assert verify_dump(records).ok
        records[1]["txs"].reverse()
        records[1]["t_ids"].reverse()
        result = verify_dump(records)
        assert not result.ok and result.failed_height == 1


@pytest.mark.parametrize("count", [25, pytest.param(1000, marks=pytest.mark.slow)])
def test_any_flipped_byte_fails_replay(count):
    ca = CertificateAuthority(seed=33)
    maker = ca.issue_identity("M1", EntityKind.MANUFACTURER, [Partition.OP])
    cav = ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP])
    ca.issue_pseudonyms(cav, 1)
    genesis = GenesisBlock(ca.credential(Partition.OP))
    rng = np.random.default_rng(8)
    for _ in range(count):
        cluster = OpCluster([OpValidator(maker, genesis, ca.directory, b_max=7)])
        t = 0.0
        for _ in range(int(rng.integers(1, 51))):
            t += 1.0 + float(rng.random())
            tx = make_ese(cav, "hard_brake", t)
            cluster.submit(tx)
            cluster.consensus_round(tx, t)
        records = dump_op_ledger(cluster.validators[0].ledger)
        assert verify_dump(records).ok

        filled = [r for r in records[1:] if r["txs"]]
        record = filled[int(rng.integers(0, len(filled)))]
        i = int(rng.integers(0, len(record["txs"])))
        wire = bytearray.fromhex(record["txs"][i])
        wire[int(rng.integers(0, len(wire)))] ^= 0x01
        record["txs"][i] = wire.hex()
        result = verify_dump(records)
        assert not result.ok
        assert result.failed_height <= record["seq_num"]
