"""
The discrete-event simulation: evidence generation, OP validation rounds,
DP requests and responses, and the adjudication phase at the end of a run.

Processing costs come from the cost model and advance simulated time only;
nothing here depends on wall-clock time, so a (config, scenario) pair always
produces the same trace.
"""
import csv
import heapq
import itertools
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import (
    TYPE_CHECKING,
    Any,
    Callable,
    Dict,
    FrozenSet,
    Iterator,
    List,
    Optional,
    Sequence,
    Set,
    Tuple,
    Union,
)

import numpy as np
import simpy

from bfica.adjudication import (
    AdjudicationContext,
    DeviceState,
    LiabilityDecision,
    classify_liability,
    owner_read_audit,
)
from bfica.config import MODES, SimConfig
from bfica.errors import BficaError, ConfigError, PermissionDenied
from bfica.ledger.dp_partition import (
    DpCluster,
    DpValidator,
    EvidenceBundle,
    FirstLevelDecision,
    build_bundles,
    first_level_decision,
    group_cases,
    integrity_check,
    open_bundle,
    resolve_escalation,
    unicast_complimentary_evidence,
)
from bfica.ledger.dump import Record, dump_dp_ledger, dump_op_ledger, write_dump
from bfica.ledger.op_partition import (
    EscalationResolution,
    EscalationSnapshot,
    GenesisBlock,
    OpCluster,
    OpValidator,
)
from bfica.offchain_store import CloudStore, StorageOutcome, SyntheticContent
from bfica.sim.metrics import (
    MetricsCollector,
    MetricsRecord,
    dp_block_processing_time,
    emit_metrics,
)
from bfica.sim.network import Message, SimNet, Trace
from bfica.sim.scenario import (
    DEFAULT_PSEUDONYMS,
    CollisionSpec,
    CrashSpec,
    EseSpec,
    EtSpec,
    NetSpec,
    Scenario,
    WitnessSpec,
)
from bfica.sim.workload import WorkloadEvent, generate_workload, rng_streams
from bfica.utils.crypto_identity import (
    CertificateAuthority,
    Digest,
    EntityKind,
    Participant,
    Partition,
    derive_seed,
    encrypt_for,
    role_for,
    sha256,
)
from bfica.utils.tx_model import (
    CollisionRecord,
    EventRecord,
    ExecStatus,
    InstructionKind,
    Location,
    PetBody,
    RetBody,
    Transaction,
    TransactionKind,
    UpdateMeta,
    WitnessCiphertext,
    WitnessRecord,
    countersign_net,
    make_ese,
    make_et,
    make_net,
    make_pet,
    make_ret,
)

if TYPE_CHECKING:
    from bfica.attacks.baseattack import BaseAttack

SETTLE = 1.0
VEHICLE_SPACING_M = 8.0
FLEET_SUBSYSTEM = "firmware"

PetHook = Callable[["Simulation", Participant, CollisionRecord], CollisionRecord]
RetHook = Callable[["Simulation", Participant, Transaction], Transaction]
RetFilter = Callable[[Participant, Participant], bool]


def update_file_hash(name: str) -> Digest:
    return sha256(b"bfica/update-file/" + name.encode("utf-8"))


def _seed_int(*parts: object) -> int:
    return int.from_bytes(derive_seed(*parts)[:8], "big")


@dataclass
class SimResult:
    config: SimConfig
    scenario: str
    trace: Trace
    metrics: MetricsCollector
    store: CloudStore
    op_dump: List[Record]
    dp_dump: List[Record]
    level1: List[FirstLevelDecision]
    level2: List[LiabilityDecision]
    case_labels: Dict[str, str]
    storage: Dict[str, str]
    violations: List[Dict[str, Any]]
    end_time: float

    def decision_for(
        self, label: str
    ) -> Tuple[Optional[FirstLevelDecision], Optional[LiabilityDecision]]:
        for decision in self.level1:
            labels = self.case_labels.get(decision.case_id, "").split("+")
            if label in labels:
                level2 = next((d for d in self.level2 if d.case_id == decision.case_id), None)
                return decision, level2
        return None, None

    def expectation_failures(self, scenario: Scenario) -> List[str]:
        failures = []
        for exp in scenario.expectations:
            level1, level2 = self.decision_for(exp.case)
            got1 = level1.liable_cav if level1 else None
            got2 = level2.kind.value if level2 else None
            if got1 != exp.level1 or got2 != exp.level2:
                failures.append(
                    f"{exp.case}: expected {exp.level1}/{exp.level2}, got {got1}/{got2}"
                )
        return failures

    def decisions(self) -> List[Dict[str, Any]]:
        rows: List[Dict[str, Any]] = []
        for d in self.level1:
            rows.append({"level": 1, "label": self.case_labels.get(d.case_id, ""), **d.to_json_dict()})
        for d2 in self.level2:
            rows.append({"level": 2, "label": self.case_labels.get(d2.case_id, ""), **d2.to_json_dict()})
        return rows

    def summary(self) -> Dict[str, Any]:
        return {
            "scenario": self.scenario,
            "seed": self.config.seed,
            "mode": self.config.mode,
            "end_time": self.end_time,
            "trace_digest": self.trace.digest(),
            "op_blocks": sum(1 for r in self.op_dump if r["type"] == "block"),
            "dp_blocks": sum(1 for r in self.dp_dump if r["type"] == "block"),
            "decisions": self.decisions(),
        }


def write_outputs(result: SimResult, out_dir: Union[str, Path]) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result.trace.write(out / "trace.ndjson")
    emit_metrics(result.metrics.records, out)
    write_dump(result.op_dump, out / "op_ledger.ndjson")
    write_dump(result.dp_dump, out / "dp_ledger.ndjson")
    with open(out / "decisions.ndjson", "w", encoding="utf-8", newline="\n") as f:
        for row in result.decisions():
            f.write(json.dumps(row, sort_keys=True, separators=(",", ":")) + "\n")
    result.store.write_manifest(out / "store_manifest.csv")
    return out


class Simulation:
    def __init__(
        self,
        config: SimConfig,
        scenario: Scenario,
        attacks: Sequence["BaseAttack"] = (),
    ):
        self.config = config.validate()
        self.attacks = list(attacks)
        for attack in self.attacks:
            scenario = attack.transform_scenario(scenario)
        self.scenario = scenario
        self.costs = config.effective_costs

        self.env = simpy.Environment()
        self.trace = Trace(lambda: float(self.env.now))
        self.streams = rng_streams(config.seed)
        self.net = SimNet(self.env, config.latency_model, self.streams.latency, self.trace)
        self.metrics = MetricsCollector(config.mode, config.seed)
        self.store = CloudStore()
        self.authority = CertificateAuthority(derive_seed("bfica-sim", config.seed))

        self.acknowledged: Dict[str, Set[Digest]] = {}
        self.net_ids: Dict[str, Digest] = {}
        self.pet_case: Dict[Digest, str] = {}
        self.evidence_handles: Dict[Digest, str] = {}
        self.pet_hooks: List[PetHook] = []
        self.ret_hooks: List[RetHook] = []
        self.ret_filters: List[RetFilter] = []
        self.fleet: List[str] = []
        self._pet_owner: Dict[Digest, Participant] = {}

        self._op_heap: List[Tuple[Tuple[float, Digest], int, Transaction]] = []
        self._op_seq = itertools.count()
        self._op_wake: Optional[simpy.Event] = None
        self._block_cost = 0.0
        self._ret_arrivals: Dict[str, float] = {}

        self.level1: List[FirstLevelDecision] = []
        self.level2: List[LiabilityDecision] = []
        self.case_labels: Dict[str, str] = {}
        self.storage: Dict[str, str] = {}
        self.result: Optional[SimResult] = None

        self._issue_identities()
        self._build_partitions()
        self._build_network()
        for attack in self.attacks:
            attack.validate_roles(self.scenario)
            attack.prepare(self)

    # Setup

    def _issue_identities(self) -> None:
        for spec in self.scenario.participants:
            memberships = [p for p in Partition if role_for(spec.kind, p) is not None]
            p = self.authority.issue_identity(
                spec.handle, spec.kind, memberships, maker=spec.maker, insurer=spec.insurer
            )
            if spec.kind == EntityKind.VEHICLE:
                self.authority.issue_pseudonyms(p, spec.pseudonyms)
                self.acknowledged[p.handle] = set()
            if spec.law_enforcement:
                self.authority.register_law_enforcement(p)

        if self.config.fleet_size <= 0 or self.config.duration <= 0:
            return
        maker = self._first(EntityKind.MANUFACTURER)
        insurer = self._first(EntityKind.INSURER)
        if maker is None or insurer is None:
            raise ConfigError("a workload fleet needs a manufacturer and an insurer")
        for i in range(self.config.fleet_size):
            cav = self.authority.issue_identity(
                f"W{i + 1:03d}", EntityKind.VEHICLE, [Partition.OP],
                maker=maker.handle, insurer=insurer.handle,
            )
            self.authority.issue_pseudonyms(cav, DEFAULT_PSEUDONYMS)
            self.acknowledged[cav.handle] = set()
            self.fleet.append(cav.handle)

    def _first(self, kind: EntityKind) -> Optional[Participant]:
        return next((p for p in self.authority.participants() if p.kind == kind), None)

    def _build_partitions(self) -> None:
        directory = self.authority.directory
        self.op_genesis = GenesisBlock(self.authority.credential(Partition.OP))
        self.dp_genesis = GenesisBlock(self.authority.credential(Partition.DP))
        people = self.authority.participants()
        op = [p for p in people if p.can_validate(Partition.OP)]
        dp = [p for p in people if p.can_validate(Partition.DP)]
        if not op or not dp:
            raise ConfigError("a scenario needs at least one OP and one DP validator")
        self.op_cluster = OpCluster(
            [OpValidator(p, self.op_genesis, directory, self.config.b_max) for p in op],
            self.config.consensus,
            resolver=self._resolve_escalation,
        )
        self.dp_cluster = DpCluster(
            [DpValidator(p, self.dp_genesis, directory, self.config.b_max) for p in dp]
        )
        enforcers = [p for p in dp if self.authority.is_law_enforcement(p)]
        self.responder = enforcers[0] if enforcers else dp[0]

    def _build_network(self) -> None:
        for p in self.authority.participants():
            self.net.add_node(p.handle, p.memberships, self._handler(p.handle))

    def _handler(self, handle: str) -> Callable[[Message, float], None]:
        return lambda msg, now: self._on_message(handle, msg, now)

    # Lookups used by the attack harness

    def participant(self, handle: str) -> Participant:
        return self.authority.participant(handle)

    def op_validator(self, handle: str) -> OpValidator:
        return self.op_cluster.validator(handle)

    def dp_validator(self, handle: str) -> DpValidator:
        for v in self.dp_cluster.validators:
            if v.handle == handle:
                return v
        raise KeyError(handle)

    def op_view(self, cav: Optional[Participant] = None) -> OpValidator:
        """The insurer's copy of the OP ledger when it validates, else the first validator's."""
        if cav is not None and cav.insurer:
            try:
                return self.op_cluster.validator(cav.insurer)
            except KeyError:
                pass
        return self.op_cluster.validators[0]

    def owner_of_pet(self, t_id: Digest) -> Optional[Participant]:
        return self._pet_owner.get(t_id)

    def vehicle_keys(self, cav: Participant) -> Set[bytes]:
        keys = {cav.public_key}
        if cav.pseudonyms is not None:
            keys.update(cav.pseudonyms.public_keys())
        return keys

    # Scheduling

    def schedule(self, t: float, fn: Callable[..., None], *args: Any) -> bool:
        """Run ``fn(*args)`` at simulated time ``t``; times past the run's end are skipped."""
        if t >= self.config.duration or t < self.env.now:
            return False
        self.env.process(self._call_at(t, fn, args))
        return True

    def _call_at(self, t: float, fn: Callable[..., None], args: Tuple[Any, ...]) -> Iterator[simpy.Event]:
        yield self.env.timeout(t - self.env.now)
        fn(*args)

    def _jitter(self) -> float:
        return self.costs.jitter * float(self.streams.jitter.random())

    def _schedule_scenario(self) -> None:
        sc = self.scenario
        for net in sc.nets:
            self.schedule(net.t, self._emit_net, net)
        for et in sc.ets:
            self.schedule(et.t, self._emit_et, et)
        for ese in sc.eses:
            self.schedule(ese.t, self._emit_ese, ese)
        for collision in sc.collisions:
            self.schedule(collision.t, self._emit_collision, collision)
        events = generate_workload(self.config, self.fleet, self.streams.workload,
                                   self.streams.locations)
        for event in events:
            self.schedule(event.t, self._emit_workload, event)
        for attack in self.attacks:
            if not self.schedule(attack.trigger, attack.fire, self):
                logging.warning("%s trigger %.1f is outside the run", attack.kind, attack.trigger)

    # Evidence generation

    def broadcast_op(self, tx: Transaction, sender: str) -> None:
        receivers = [v.handle for v in self.op_cluster.validators]
        msg = Message(tx.kind.value, Partition.OP, tx, ref=tx.t_id.hex())
        self.trace.record("submit", kind=tx.kind.value, t_id=tx.t_id.hex(), sender=sender)
        self.net.broadcast(msg, sender, receivers)
        release = max(self.env.now, tx.submitted_at) + SETTLE
        self.env.process(self._release(tx, release))

    def _emit_ese(self, spec: EseSpec) -> None:
        cav = self.participant(spec.vehicle)
        self.broadcast_op(make_ese(cav, spec.code, self.env.now, spec.loc, spec.detail), cav.handle)

    def _emit_net(self, spec: NetSpec) -> None:
        issuer, cav = self.participant(spec.issuer), self.participant(spec.vehicle)
        software = spec.instruction == InstructionKind.SOFTWARE_UPDATE
        meta = UpdateMeta(
            spec.instruction,
            update_file_hash(spec.file) if software else None,
            metadata=spec.label,
            file_pointer=f"updates://{spec.file}",
            subsystem=spec.subsystem,
        )
        self._issue_net(issuer, cav, meta, spec.label, spec.ack)

    def _issue_net(
        self, issuer: Participant, cav: Participant, meta: UpdateMeta, label: str, ack: bool
    ) -> Transaction:
        pending = make_net(issuer, cav, meta, self.env.now)
        if ack:
            tx = countersign_net(cav, pending)
            self.acknowledged[cav.handle].add(tx.t_id)
        else:
            tx = pending.as_transaction()
        self.net_ids[label] = tx.t_id
        self.broadcast_op(tx, issuer.handle)
        return tx

    def _emit_et(self, spec: EtSpec) -> None:
        net_ref = self.net_ids.get(spec.net_label)
        if net_ref is None:
            logging.warning("ET for %s before its instruction was issued; skipped", spec.net_label)
            return
        cav = self.participant(spec.vehicle)
        self.broadcast_op(make_et(cav, net_ref, spec.status, self.env.now), cav.handle)

    def _crash_loc(self, collision: CollisionSpec, crash: CrashSpec) -> Location:
        return collision.loc.offset(north_m=-VEHICLE_SPACING_M * crash.order)

    def _witness_account(
        self, collision: CollisionSpec, spec: WitnessSpec, subject_crash: CrashSpec
    ) -> WitnessCiphertext:
        witness = self.participant(spec.witness)
        subject = self.participant(spec.subject)
        record = WitnessRecord(
            witness_key=witness.active_pseudonym().public_key,
            subject_key=subject.active_pseudonym().public_key,
            loc=self._crash_loc(collision, subject_crash),
            ts=collision.t,
            subject_speed=subject_crash.speed,
            observed_events=spec.events,
        )
        ciphertext = encrypt_for(
            self.responder.box.public_key,
            record.encode(),
            derive_seed(self.config.seed, "witness", collision.case, spec.witness, spec.subject),
        )
        return WitnessCiphertext(record.witness_key, ciphertext)

    def _store_evidence(self, cav: Participant, size: int, *label: object) -> Tuple[str, Digest]:
        content = SyntheticContent(size, _seed_int(self.config.seed, "video", *label))
        obj = self.store.put(cav.handle, content, cav.public_key)
        for v in self.op_cluster.validators:
            if v.participant is not None:
                self.store.grant(obj.handle, v.participant.public_key)
        return obj.handle, obj.content_hash

    def _submit_pet(self, cav: Participant, record: CollisionRecord, handle: str, case: str) -> None:
        for hook in self.pet_hooks:
            record = hook(self, cav, record)
        pet = make_pet(cav, record, self.env.now)
        self.pet_case[pet.t_id] = case
        self._pet_owner[pet.t_id] = cav
        self.evidence_handles[pet.t_id] = handle
        self.broadcast_op(pet, cav.handle)

    def _emit_collision(self, collision: CollisionSpec) -> None:
        for crash in sorted(self.scenario.crashes_in(collision.case), key=lambda c: c.order):
            cav = self.participant(crash.vehicle)
            size = crash.video if crash.video is not None else self.config.video_size
            handle, ts_data = self._store_evidence(cav, size, collision.case, crash.vehicle)
            witnesses = [
                self._witness_account(collision, w, crash)
                for w in self.scenario.witnesses
                if w.case == collision.case and w.subject == crash.vehicle
            ]
            event = EventRecord(crash.order, crash.speed, crash.events, crash.fault)
            record = CollisionRecord.build(
                self._crash_loc(collision, crash), self.env.now, event.encode(), ts_data, witnesses
            )
            self._submit_pet(cav, record, handle, collision.case)

    def _emit_workload(self, event: WorkloadEvent) -> None:
        cav = self.participant(event.vehicle)
        label = f"{event.vehicle}#{event.seq}"
        if event.kind == "pet":
            assert event.loc is not None
            handle, ts_data = self._store_evidence(cav, self.config.video_size, "fleet", label)
            record = CollisionRecord.build(
                event.loc, self.env.now, EventRecord(0, event.speed).encode(), ts_data
            )
            self._submit_pet(cav, record, handle, f"fleet-{event.seq}")
        elif event.kind == "net":
            assert cav.maker is not None
            name = f"{event.vehicle}-fw-{event.seq}"
            meta = UpdateMeta(InstructionKind.SOFTWARE_UPDATE, update_file_hash(name),
                              metadata=label, file_pointer=f"updates://{name}",
                              subsystem=FLEET_SUBSYSTEM)
            self._issue_net(self.participant(cav.maker), cav, meta, label, True)
        else:
            self._emit_et(EtSpec(event.t, event.vehicle, label, ExecStatus.SUCCESS))

    # OP partition

    def _release(self, tx: Transaction, at: float) -> Iterator[simpy.Event]:
        yield self.env.timeout(at - self.env.now)
        heapq.heappush(self._op_heap, (tx.order_key, next(self._op_seq), tx))
        if self._op_wake is not None and not self._op_wake.triggered:
            self._op_wake.succeed()

    def _op_worker(self) -> Iterator[simpy.Event]:
        while True:
            if not self._op_heap:
                self._op_wake = self.env.event()
                yield self._op_wake
                continue
            _, _, tx = heapq.heappop(self._op_heap)
            duration = self._round_cost(tx)
            yield self.env.timeout(duration)
            self._block_cost += duration
            self._op_round(tx)

    def _round_cost(self, tx: Transaction) -> float:
        size = tx.size_bytes()
        check = tx.kind == TransactionKind.PET and self.config.mode != "b4f"
        slowest_verify = slowest = 0.0
        accepted = False
        for v in self.op_cluster.validators:
            verify = self.costs.verification_cost(len(tx.signatures), size, check) + self._jitter()
            ok = v.verify_transaction(tx).accepted
            accepted = accepted or ok
            validate = self.costs.validation_cost() if ok else 0.0
            slowest_verify = max(slowest_verify, verify)
            slowest = max(slowest, verify + validate)
        self.metrics.add(tx.kind.value, "verification_time", slowest_verify)
        if accepted:
            self.metrics.add(tx.kind.value, "validation_time", self.costs.validation_cost())
        return slowest

    def _op_round(self, tx: Transaction) -> None:
        first = self.op_cluster.validators[0]
        sealed_before = len(first.sealed)
        self.op_cluster.submit(tx)
        rnd = self.op_cluster.consensus_round(tx, at=self.env.now)
        verdict = rnd.verdict
        self.trace.record(
            "op_round",
            t_id=tx.t_id.hex(),
            kind=tx.kind.value,
            outcome=rnd.outcome.value,
            accepted=verdict.accepted,
            reason=verdict.reason.value if verdict.reason is not None else None,
            block_id=first.dblock.header.block_id.hex(),
        )
        if rnd.recovery is not None:
            self.trace.record(
                "rollback",
                t_id=tx.t_id.hex(),
                outcome=rnd.recovery.outcome.value,
                agreed_steps=rnd.recovery.agreed_steps,
                implicated=list(rnd.recovery.implicated),
            )
        for attack in self.attacks:
            attack.observe_round(self, rnd)

        if len(first.sealed) > sealed_before:
            block = first.sealed[-1]
            self.metrics.add("OP", "exposure_window", block.exposure_window)
            self.metrics.add("OP", "block_processing_time", self._block_cost)
            self._block_cost = 0.0
            self.trace.record("op_seal", seq_num=block.seq_num, block_id=block.block_id.hex())

        if verdict.accepted and tx.kind == TransactionKind.PET:
            self._request_evidence(tx)

    def _resolve_escalation(self, snapshot: EscalationSnapshot) -> EscalationResolution:
        ref = snapshot.tx_ref.hex()
        for handle in snapshot.expected:
            for dv in self.dp_cluster.validators:
                self.net.deliver(
                    Message("ESCALATION", Partition.OP, snapshot.views.get(handle), "escalation", ref),
                    handle, dv.handle,
                )
        resolution = resolve_escalation(snapshot)
        self.trace.record(
            "escalation",
            tx_ref=ref,
            implicated=dict(sorted(resolution.implicated.items())),
            partial=resolution.partial,
            authoritative=resolution.authoritative.block_id.hex(),
        )
        return resolution

    # DP partition

    def _request_evidence(self, pet: Transaction) -> None:
        cav = self._pet_owner.get(pet.t_id)
        if cav is None:
            return
        for handle in (cav.insurer, cav.maker):
            if not handle:
                continue
            proposer = self.participant(handle)
            if not all(allow(proposer, cav) for allow in self.ret_filters):
                self.trace.record("ret_withheld", pet_ref=pet.t_id.hex(), proposer=handle)
                continue
            source = pet
            for hook in self.ret_hooks:
                source = hook(self, proposer, source)
            ret = make_ret(proposer, source, self.op_view(proposer).validated_ids(), self.env.now)
            self.trace.record("ret", t_id=ret.t_id.hex(), pet_ref=pet.t_id.hex(), proposer=handle)
            msg = Message("RET", Partition.DP, ret, "ret", ret.t_id.hex())
            self.net.broadcast(msg, handle, [v.handle for v in self.dp_cluster.validators])

    def _on_message(self, handle: str, msg: Message, now: float) -> None:
        if msg.kind == "RET":
            ret = msg.payload
            verdict = self.dp_validator(handle).accept(ret)
            if verdict.accepted and handle == self.responder.handle:
                self._ret_arrivals[msg.ref] = now
                self.env.process(self._respond(ret))
            self._assemble_dp_blocks()
        elif msg.kind == "UNICAST":
            arrived = self._ret_arrivals.get(msg.ref)
            if arrived is not None:
                self.metrics.add("RET", "time_overhead", now - arrived)
            self.trace.record("unicast_received", to=handle, ref=msg.ref,
                              liable=msg.payload.decision.liable_cav)

    def _dp_known(self) -> List[Transaction]:
        lead = self.dp_validator(self.responder.handle)
        return list(lead.ledger.transactions()) + list(lead.running_pool)

    def _bundle_for(self, ret: Transaction) -> EvidenceBundle:
        body = ret.body
        assert isinstance(body, RetBody)
        nearby = []
        for r in self._dp_known():
            assert isinstance(r.body, RetBody)
            if r.body.pet_ref == body.pet_ref or abs(r.body.record.ts - body.record.ts) <= self.config.delta_t:
                nearby.append(r)
        groups = group_cases(nearby, self.config.delta_t, self.config.delta_d)
        group = next(g for g in groups if any(r.t_id == ret.t_id for r in g))
        return open_bundle(group, self.responder.box.secret_key)

    def _resolver(self) -> Optional[Callable[[bytes], str]]:
        if not self.authority.is_law_enforcement(self.responder):
            return None
        return lambda key: self.authority.resolve_pseudonym(self.responder, key).handle

    def _check(self, bundle: EvidenceBundle) -> None:
        bundle.consistency_report = integrity_check(
            bundle, self.config.delta_t, self.config.delta_d, self.config.delta_v
        )

    def _respond(self, ret: Transaction) -> Iterator[simpy.Event]:
        size = ret.size_bytes()
        cost = self.costs.request_cost(len(ret.signatures), size)
        if self.config.mode == "b4f":
            cost += self.costs.personal_store_fetch + self.costs.hash_cost(size)
        cost += self._jitter()
        yield self.env.timeout(cost)
        self.metrics.add("RET", "response_processing_time", cost)

        bundle = self._bundle_for(ret)
        self._check(bundle)
        report = bundle.consistency_report
        assert report is not None
        self.trace.record(
            "integrity_check",
            case_id=bundle.case_id,
            ret=ret.t_id.hex(),
            passed=report.passed,
            failed=sorted(report.failed_categories()),
        )
        for attack in self.attacks:
            attack.observe_integrity(self, bundle, report)

        decision = first_level_decision(bundle, self._resolver())
        requester = self.authority.by_identity_key(ret.signer)
        if requester is None:
            logging.warning("request %s from an unknown proposer", ret.t_id.hex()[:12])
            return
        evidence = unicast_complimentary_evidence(decision, bundle, requester)
        self.trace.record("unicast", case_id=bundle.case_id, to=requester.handle,
                          ref=ret.t_id.hex(), liable=decision.liable_cav)
        self.net.deliver(
            Message("UNICAST", Partition.DP, evidence, "unicast", ret.t_id.hex()),
            self.responder.handle, requester.handle,
        )

    def _assemble_dp_blocks(self) -> None:
        while all(v.pool_ready() for v in self.dp_cluster.validators):
            block = self.dp_cluster.assemble_and_validate_block(self.env.now)
            if block is None:
                return
            hash_only = self.config.mode == "b4f"
            self.metrics.add("DP", "block_processing_time",
                             dp_block_processing_time(block.txs, self.costs, hash_only))
            self.trace.record("dp_seal", seq_num=block.header.seq_num,
                              block_id=block.header.block_id.hex())
            members = [h for h in self.net.members(Partition.DP) if h != self.responder.handle]
            self.net.broadcast(
                Message("DP_BLOCK", Partition.DP, block.header, ref=block.header.block_id.hex()),
                self.responder.handle, members,
            )

    # Adjudication phase

    def _case_label(self, bundle: EvidenceBundle) -> str:
        labels = set()
        for r in bundle.rets:
            assert isinstance(r.body, RetBody)
            label = self.pet_case.get(r.body.pet_ref)
            if label:
                labels.add(label)
        return "+".join(sorted(labels)) or bundle.case_id

    def _device_states(self, cav: Participant) -> Dict[Digest, Optional[DeviceState]]:
        states: Dict[Digest, Optional[DeviceState]] = {}
        for spec in self.scenario.devices:
            if spec.vehicle != cav.handle or spec.net_label not in self.net_ids:
                continue
            net = self.scenario.net(spec.net_label)
            assert net is not None
            t_id = self.net_ids[spec.net_label]
            device_id = f"{cav.handle}:{net.subsystem}"
            if spec.state == "unavailable":
                states[t_id] = None
            elif spec.state == "installed":
                install = spec.install_time if spec.install_time is not None else net.t + 3600.0
                states[t_id] = DeviceState(device_id, update_file_hash(net.file), install)
            else:
                install = spec.install_time if spec.install_time is not None else 0.0
                states[t_id] = DeviceState(device_id, update_file_hash(f"stale:{net.file}"), install)
        return states

    def _classify(self, decision: FirstLevelDecision, bundle: EvidenceBundle) -> LiabilityDecision:
        assert decision.liable_key is not None
        cav = self.authority.resolve_pseudonym(self.responder, decision.liable_key)
        ledger = self.op_view(cav).ledger
        evidence = None
        if cav.insurer:
            try:
                evidence = unicast_complimentary_evidence(
                    decision, bundle, self.participant(cav.insurer)
                )
            except PermissionDenied:
                evidence = None
        flagged = owner_read_audit(ledger, cav, self.acknowledged.get(cav.handle, set()))
        disputed: FrozenSet[Digest] = frozenset(t.t_id for t in flagged)
        if disputed:
            self.trace.record("owner_audit", vehicle=cav.handle,
                              disputed=sorted(d.hex() for d in disputed))
        context = AdjudicationContext(
            cav=cav,
            lookup=self.authority.by_identity_key,
            device_states=self._device_states(cav),
            net_grace=self.config.net_grace,
            service_window=self.config.service_window,
            disputed=disputed,
        )
        return classify_liability(ledger, decision, evidence, context)

    def _adjudicate(self) -> None:
        rets = self._dp_known()
        if not rets:
            return
        bundles = build_bundles(rets, self.responder.box.secret_key,
                                self.config.delta_t, self.config.delta_d)
        for bundle in bundles:
            self._check(bundle)
            decision = first_level_decision(bundle, self._resolver())
            label = self._case_label(bundle)
            self.case_labels[decision.case_id] = label
            self.level1.append(decision)
            self.trace.record("level1", label=label, **decision.to_json_dict())
            if decision.undecidable:
                continue
            try:
                level2 = self._classify(decision, bundle)
            except BficaError as e:
                logging.warning("no second-level decision for %s: %s", label, e)
                self.trace.record("level2_failed", label=label, reason=str(e))
                continue
            self.level2.append(level2)
            self.trace.record("level2", label=label, **level2.to_json_dict())

    def _audit_storage(self) -> None:
        for tx in self.op_view().ledger.transactions():
            if tx.kind != TransactionKind.PET:
                continue
            assert isinstance(tx.body, PetBody)
            handle = self.evidence_handles.get(tx.t_id)
            outcome = (
                self.store.proof_of_storage(handle, tx.body.record.ts_data)
                if handle else StorageOutcome.UNAVAILABLE
            )
            self.storage[tx.t_id.hex()] = outcome.value
            self.trace.record("proof_of_storage", t_id=tx.t_id.hex(), outcome=outcome.value)

    def run(self) -> SimResult:
        if self.result is not None:
            return self.result
        self._schedule_scenario()
        self.env.process(self._op_worker())
        self.env.run()
        end_time = float(self.env.now)
        self._adjudicate()
        self._audit_storage()
        for attack in self.attacks:
            attack.finish(self)
        self.result = SimResult(
            config=self.config,
            scenario=self.scenario.name,
            trace=self.trace,
            metrics=self.metrics,
            store=self.store,
            op_dump=dump_op_ledger(self.op_view().ledger),
            dp_dump=dump_dp_ledger(self.dp_validator(self.responder.handle).ledger),
            level1=self.level1,
            level2=self.level2,
            case_labels=self.case_labels,
            storage=self.storage,
            violations=self.net.violations,
            end_time=end_time,
        )
        return self.result


def scenario_config(scenario: Scenario, base: Optional[SimConfig] = None, **overrides: Any) -> SimConfig:
    """Defaults, then the scenario's own ``config`` line, then ``overrides`` (None skipped)."""
    config = (base or SimConfig()).with_overrides(**scenario.config)
    return config.with_overrides(**overrides).validate()


def run_scenario(
    config: SimConfig,
    scenario: Scenario,
    out_dir: Union[str, Path, None] = None,
    attacks: Sequence["BaseAttack"] = (),
) -> SimResult:
    result = Simulation(config, scenario, attacks).run()
    failures = result.expectation_failures(scenario)
    for failure in failures:
        logging.warning("expectation not met: %s", failure)
    if out_dir is not None:
        write_outputs(result, out_dir)
    return result


# Mode comparison


@dataclass(frozen=True)
class ModeStats:
    mode: str
    seeds: Tuple[int, ...]
    overheads: Tuple[float, ...]
    pet_verification: Tuple[float, ...]

    @property
    def mean_overhead(self) -> float:
        return float(np.mean(self.overheads)) if self.overheads else 0.0

    @property
    def std_overhead(self) -> float:
        return float(np.std(self.overheads, ddof=1)) if len(self.overheads) > 1 else 0.0

    @property
    def mean_pet_verification(self) -> float:
        return float(np.mean(self.pet_verification)) if self.pet_verification else 0.0


@dataclass
class ComparisonTable:
    modes: Dict[str, ModeStats]
    records: List[MetricsRecord] = field(default_factory=list)

    COLUMNS = ["mode", "runs", "mean_time_overhead", "std_time_overhead", "mean_pet_verification"]

    def rows(self) -> List[List[object]]:
        return [
            [m.mode, len(m.seeds), repr(m.mean_overhead), repr(m.std_overhead),
             repr(m.mean_pet_verification)]
            for m in (self.modes[name] for name in MODES if name in self.modes)
        ]

    def write(self, out_dir: Union[str, Path]) -> Path:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        path = out / "compare.csv"
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            writer.writerows(self.rows())
        emit_metrics(self.records, out, prefix="compare_")
        return path


def _mode_run(job: Tuple[SimConfig, Scenario]) -> Tuple[str, int, float, float, List[MetricsRecord]]:
    config, scenario = job
    result = Simulation(config, scenario).run()
    return (
        config.mode,
        config.seed,
        result.metrics.mean("time_overhead"),
        result.metrics.mean("verification_time", TransactionKind.PET.value),
        result.metrics.records,
    )


def measure_modes(
    config: SimConfig,
    scenario: Scenario,
    seeds: Sequence[int],
    workers: int = 1,
    modes: Sequence[str] = MODES,
) -> ComparisonTable:
    """Runs every mode on the same seeds; results are ordered by mode then seed."""
    jobs = [(config.with_overrides(mode=m, seed=s), scenario) for m in modes for s in seeds]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outputs = list(pool.map(_mode_run, jobs))
    else:
        outputs = [_mode_run(job) for job in jobs]

    table = ComparisonTable({})
    for mode in modes:
        rows = [o for o in outputs if o[0] == mode]
        table.modes[mode] = ModeStats(
            mode,
            tuple(o[1] for o in rows),
            tuple(o[2] for o in rows),
            tuple(o[3] for o in rows),
        )
        for o in rows:
            table.records.extend(o[4])
    return table
