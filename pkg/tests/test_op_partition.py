import hashlib

import numpy as np
import pytest

from bfica.errors import ConfigError, IdentityError, ProtocolError
from bfica.ledger.dp_partition import resolve_escalation
from bfica.ledger.op_partition import (
    GenesisBlock,
    OpCluster,
    OpValidator,
    RecoveryOutcome,
    RejectReason,
    fold_block_id,
    fold_sequence,
)
from bfica.utils.crypto_identity import CertificateAuthority, Digest, EntityKind, Partition, sha256
from bfica.utils.tx_model import (
    ExecStatus,
    InstructionKind,
    UpdateMeta,
    countersign_net,
    make_ese,
    make_et,
    make_net,
)


def test_fold_sequence_matches_stepwise_fold():
    seed = sha256(b"seed")
    a, b = sha256(b"a"), sha256(b"b")
    steps = fold_sequence([a, b], seed)
    assert steps[0] == seed
    assert steps[-1] == fold_block_id(b, fold_block_id(a, seed))


def test_fold_is_order_sensitive():
    seed = sha256(b"seed")
    a, b = sha256(b"a"), sha256(b"b")
    assert fold_sequence([a, b], seed)[-1] != fold_sequence([b, a], seed)[-1]


@pytest.mark.parametrize("count", [200, pytest.param(10000, marks=pytest.mark.slow)])
def test_fold_matches_brute_force(count):
    rng = np.random.default_rng(5)
    for _ in range(count):
        seed = Digest(rng.bytes(32))
        ids = [Digest(rng.bytes(32)) for _ in range(int(rng.integers(1, 20)))]
        steps = fold_sequence(ids, seed)
        prev = seed.value
        for k, t_id in enumerate(ids, 1):
            prev = hashlib.sha256(t_id.value + prev).digest()
            assert steps[k].value == prev


class TestOpCluster:
    def setup_method(self):
        self.ca = CertificateAuthority(seed=11)
        both = [Partition.OP, Partition.DP]
        self.maker = self.ca.issue_identity("M1", EntityKind.MANUFACTURER, both)
        self.tech = self.ca.issue_identity("T1", EntityKind.TECHNICIAN, [Partition.OP])
        self.insurer = self.ca.issue_identity("I1", EntityKind.INSURER, both)
        self.cav = self.ca.issue_identity("CAV1", EntityKind.VEHICLE, [Partition.OP], maker="M1")
        self.ca.issue_pseudonyms(self.cav, 2)
        self.genesis = GenesisBlock(self.ca.credential(Partition.OP))

    def cluster(self, b_max=7, consensus="unanimous", resolver=None):
        validators = [
            OpValidator(p, self.genesis, self.ca.directory, b_max)
            for p in (self.maker, self.tech, self.insurer)
        ]
        return OpCluster(validators, consensus, resolver)

    def ese(self, ts):
        return make_ese(self.cav, "hard_brake", ts)

    def push(self, cluster, tx, at=None):
        cluster.submit(tx)
        return cluster.consensus_round(tx, tx.submitted_at if at is None else at)

    def test_vehicle_cannot_validate(self):
        with pytest.raises(IdentityError):
            OpValidator(self.cav, self.genesis, self.ca.directory)

    def test_empty_cluster_refused(self):
        with pytest.raises(ConfigError):
            OpCluster([])

    def test_consistent_round_folds_everywhere(self):
        cluster = self.cluster()
        rnd = self.push(cluster, self.ese(1.0))
        assert rnd.consistent and rnd.verdict.accepted
        assert len(set(rnd.proposed_ids.values())) == 1
        assert cluster.in_agreement()

    def test_seal_at_capacity(self):
        cluster = self.cluster(b_max=3)
        txs = [self.ese(float(i)) for i in range(1, 4)]
        for tx in txs:
            self.push(cluster, tx)
        for v in cluster.validators:
            assert len(v.sealed) == 1
            assert len(v.dblock) == 0
            assert v.dblock.header.seq_num == 2
            assert v.dblock.header.prev_bid == v.sealed[0].block_id
        block = cluster.validators[0].sealed[0]
        assert block.prev_bid == self.genesis.block_id
        assert block.t_alt_bid == txs[-1].t_id
        assert block.block_id == fold_sequence([t.t_id for t in txs], self.genesis.block_id)[-1]

    def test_partial_block_cannot_seal(self):
        v = OpValidator(self.maker, self.genesis, self.ca.directory, b_max=3)
        v.validate_in_dblock(self.ese(1.0))
        with pytest.raises(ProtocolError):
            v.seal()

    def test_duplicate_rejected(self):
        cluster = self.cluster()
        tx = self.ese(1.0)
        self.push(cluster, tx)
        rnd = cluster.consensus_round(tx, 2.0)
        assert rnd.consistent
        assert rnd.verdict.reason == RejectReason.DUPLICATE
        assert len(cluster.validators[0].dblock) == 1

    def test_incomplete_net_rejected(self):
        cluster = self.cluster()
        meta = UpdateMeta(InstructionKind.PART_CHANGE, None, subsystem="tyres")
        half = make_net(self.tech, self.cav, meta, 1.0).as_transaction()
        rnd = self.push(cluster, half)
        assert rnd.verdict.reason == RejectReason.INCOMPLETE_MULTISIG

    def test_et_needs_known_net(self):
        cluster = self.cluster()
        meta = UpdateMeta(InstructionKind.SOFTWARE_UPDATE, sha256(b"fw"), subsystem="braking")
        pending = make_net(self.maker, self.cav, meta, 1.0)
        orphan = make_et(self.cav, pending.t_id, ExecStatus.SUCCESS, 2.0)
        assert self.push(cluster, orphan).verdict.reason == RejectReason.PAYLOAD_INTEGRITY

        net = countersign_net(self.cav, pending)
        assert self.push(cluster, net).verdict.accepted
        et = make_et(self.cav, net.t_id, ExecStatus.SUCCESS, 3.0)
        assert self.push(cluster, et).verdict.accepted

    def test_ese_from_identity_key_rejected(self):
        cluster = self.cluster()
        tx = self.ese(1.0)
        forged = type(tx)(tx.t_id, tx.kind, tx.body, (self.cav.public_key,),
                          (self.cav.keypair.sign(b"x"),))
        assert self.push(cluster, forged).verdict.reason == RejectReason.UNAUTHORIZED

    def test_local_deletion_recovers_by_replay(self):
        cluster = self.cluster()
        first, second, third = self.ese(1.0), self.ese(2.0), self.ese(3.0)
        self.push(cluster, first)
        self.push(cluster, second)
        cluster.validator("T1").tamper_remove(first.t_id)

        rnd = self.push(cluster, third)
        assert not rnd.consistent
        assert rnd.recovery.outcome == RecoveryOutcome.RECOVERED
        assert rnd.recovery.implicated == ("T1",)
        assert cluster.in_agreement()
        assert cluster.validator("T1").dblock.t_ids() == [first.t_id, second.t_id, third.t_id]

    def test_injected_tx_escalates_when_unanimous(self):
        cluster = self.cluster()
        self.push(cluster, self.ese(1.0))
        cluster.validator("M1").tamper_append(self.ese(1.5), keep_in_pool=True)

        rnd = self.push(cluster, self.ese(2.0))
        assert rnd.recovery.outcome == RecoveryOutcome.ESCALATE
        assert rnd.escalation is not None
        assert rnd.resolution is None
        assert cluster.escalations == [rnd.escalation]

    def test_injected_tx_outvoted_in_majority_mode(self):
        cluster = self.cluster(consensus="majority")
        self.push(cluster, self.ese(1.0))
        cluster.validator("M1").tamper_append(self.ese(1.5), keep_in_pool=True)

        rnd = self.push(cluster, self.ese(2.0))
        assert rnd.recovery.outcome == RecoveryOutcome.RECOVERED
        assert rnd.recovery.implicated == ("M1",)
        assert cluster.in_agreement()

    def test_escalation_resolved_by_reference_replay(self):
        cluster = self.cluster(resolver=resolve_escalation)
        first, fake, third = self.ese(1.0), self.ese(1.5), self.ese(2.0)
        self.push(cluster, first)
        cluster.validator("M1").tamper_append(fake, keep_in_pool=True)

        rnd = self.push(cluster, third)
        assert rnd.resolution is not None
        assert rnd.resolution.implicated == {"M1": 2}
        assert not rnd.resolution.partial
        assert cluster.in_agreement()
        assert cluster.validator("M1").dblock.t_ids() == [first.t_id, third.t_id]

    def test_pre_round_t_alt_bids_recorded(self):
        cluster = self.cluster()
        first = self.ese(1.0)
        self.push(cluster, first)
        rnd = self.push(cluster, self.ese(2.0))
        assert set(rnd.pre_t_alt_bids.values()) == {first.t_id}

    def test_sealed_tampering_keeps_header(self):
        cluster = self.cluster(b_max=2)
        first, second = self.ese(1.0), self.ese(2.0)
        self.push(cluster, first)
        self.push(cluster, second)
        v = cluster.validator("I1")
        before = v.sealed[0].block_id
        assert v.tamper_sealed(first.t_id) == 1
        assert v.sealed[0].block_id == before
        assert v.sealed[0].t_ids == [second.t_id]
        assert v.tamper_sealed(sha256(b"absent")) is None

    @pytest.mark.parametrize("n", [0, 1, 6, 7, 13, 14, 50])
    def test_sealed_count_follows_capacity(self, n):
        cluster = self.cluster()
        for i in range(n):
            self.push(cluster, self.ese(float(i + 1)))
        for v in cluster.validators:
            assert len(v.sealed) == n // 7
            assert len(v.dblock) == n % 7
