"""
NDJSON ledger dumps and their replay verification.

A dump starts with a genesis record, continues with one record per sealed
block (header fields, t_id hex list, transaction wire hex) and, for OP
ledgers, ends with a ``dynamic`` record for the live dynamic block.
"""
import json
import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Union

from bfica.errors import BficaError, DecodeError, NotFound
from bfica.ledger.dp_partition import DpLedger, dp_block_id
from bfica.ledger.op_partition import (
    OpLedger,
    fold_sequence,
    genesis_block_id,
)
from bfica.utils.crypto_identity import ZERO_DIGEST, Digest, GenesisCredential, Partition
from bfica.utils.tx_model import Transaction

Record = Dict[str, Any]


def _genesis_record(credential: GenesisCredential) -> Record:
    return {
        "type": "genesis",
        "partition": credential.partition.value,
        "seq_num": 0,
        "credential": credential.ca_verification_key.hex(),
        "block_id": genesis_block_id(credential).hex(),
    }


def _tx_fields(txs: Iterable[Transaction]) -> Record:
    txs = list(txs)
    return {
        "t_ids": [t.t_id.hex() for t in txs],
        "txs": [t.encode().hex() for t in txs],
    }


def dump_op_ledger(ledger: OpLedger) -> List[Record]:
    records = [_genesis_record(ledger.genesis.credential)]
    for block in ledger.sealed:
        records.append({
            "type": "block",
            "seq_num": block.seq_num,
            "block_id": block.block_id.hex(),
            "prev_bid": block.prev_bid.hex(),
            "t_alt_bid": block.t_alt_bid.hex(),
            **_tx_fields(block.txs),
        })
    h = ledger.dblock.header
    records.append({
        "type": "dynamic",
        "seq_num": h.seq_num,
        "block_id": h.block_id.hex(),
        "prev_bid": h.prev_bid.hex(),
        "t_alt_bid": h.t_alt_bid.hex(),
        **_tx_fields(ledger.dblock.txs),
    })
    return records


def dump_dp_ledger(ledger: DpLedger) -> List[Record]:
    records = [_genesis_record(ledger.genesis.credential)]
    for block in ledger.sealed:
        records.append({
            "type": "block",
            "seq_num": block.header.seq_num,
            "block_id": block.header.block_id.hex(),
            "prev_bid": block.header.prev_bid.hex(),
            **_tx_fields(block.txs),
        })
    return records


def render_dump(records: List[Record]) -> str:
    return "".join(json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in records)


def write_dump(records: List[Record], path: Union[str, Path]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as f:
        f.write(render_dump(records))


def read_dump(path: Union[str, Path]) -> List[Record]:
    records = []
    if not Path(path).is_file():
        raise NotFound(f"no ledger dump at {path}")
    with open(path, "r", encoding="utf-8") as f:
        for n, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                records.append(json.loads(line))
            except json.JSONDecodeError as e:
                raise DecodeError(f"line {n}: not a JSON record ({e})")
    return records


@dataclass
class VerifyResult:
    ok: bool
    partition: Optional[str] = None
    blocks: int = 0
    failed_height: Optional[int] = None
    reason: str = ""


class _Failure(Exception):
    def __init__(self, height: int, reason: str):
        super().__init__(reason)
        self.height = height
        self.reason = reason


def _digest(record: Record, key: str, height: int) -> Digest:
    try:
        return Digest.fromhex(record[key])
    except (KeyError, TypeError, BficaError):
        raise _Failure(height, f"missing or malformed {key}")


def _transactions(record: Record, height: int) -> List[Transaction]:
    txs = []
    wires = record.get("txs", [])
    ids = record.get("t_ids", [])
    if len(wires) != len(ids):
        raise _Failure(height, "t_id list and transaction list differ in length")
    for i, (wire, t_hex) in enumerate(zip(wires, ids)):
        try:
            tx = Transaction.decode(bytes.fromhex(wire))
        except (ValueError, BficaError) as e:
            raise _Failure(height, f"transaction {i} undecodable: {e}")
        if tx.t_id.hex() != t_hex:
            raise _Failure(height, f"transaction {i} t_id mismatch")
        if not tx.is_complete() or not tx.signatures_valid():
            raise _Failure(height, f"transaction {i} signature invalid")
        txs.append(tx)
    return txs


def verify_dump(records: List[Record]) -> VerifyResult:
    """Replays a dump from genesis, recomputing every id and link."""
    if not records:
        return VerifyResult(False, failed_height=0, reason="empty dump")
    try:
        return _verify(records)
    except _Failure as f:
        logging.warning("ledger verification failed at height %d: %s", f.height, f.reason)
        partition = records[0].get("partition") if isinstance(records[0], dict) else None
        return VerifyResult(False, partition, failed_height=f.height, reason=f.reason)


def _verify(records: List[Record]) -> VerifyResult:
    genesis = records[0]
    if genesis.get("type") != "genesis":
        raise _Failure(0, "first record is not a genesis record")
    try:
        partition = Partition(genesis["partition"])
        credential = GenesisCredential(partition, bytes.fromhex(genesis["credential"]))
    except (KeyError, ValueError, TypeError):
        raise _Failure(0, "malformed genesis record")
    if genesis_block_id(credential) != _digest(genesis, "block_id", 0):
        raise _Failure(0, "genesis block id mismatch")

    tip = genesis_block_id(credential)
    expected_seq = 1
    blocks = 0
    for index, record in enumerate(records[1:], 1):
        kind = record.get("type")
        height = record.get("seq_num", expected_seq)
        if not isinstance(height, int):
            raise _Failure(expected_seq, "malformed seq_num")
        if kind not in ("block", "dynamic"):
            raise _Failure(height, f"unknown record type {kind!r}")
        if kind == "dynamic" and (partition != Partition.OP or index != len(records) - 1):
            raise _Failure(height, "dynamic record out of place")
        if height != expected_seq:
            raise _Failure(expected_seq, f"expected height {expected_seq}, found {height}")
        if _digest(record, "prev_bid", height) != tip:
            raise _Failure(height, "prev_bid does not link to the previous block")

        txs = _transactions(record, height)
        block_id = _digest(record, "block_id", height)
        if partition == Partition.OP:
            steps = fold_sequence([t.t_id for t in txs], tip)
            if steps[-1] != block_id:
                raise _Failure(height, "block id does not match the transaction fold")
            t_alt = txs[-1].t_id if txs else ZERO_DIGEST
            if _digest(record, "t_alt_bid", height) != t_alt:
                raise _Failure(height, "t_alt_bid does not name the last transaction")
        else:
            if "t_alt_bid" in record:
                raise _Failure(height, "DP blocks carry no t_alt_bid")
            if dp_block_id(height, tip, txs) != block_id:
                raise _Failure(height, "block id does not match the batch hash")
        tip = block_id
        expected_seq += 1
        blocks += 1 if kind == "block" else 0
    return VerifyResult(True, partition.value, blocks)
