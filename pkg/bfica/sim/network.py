"""
Simulated message delivery between participants, with partition gating and
an NDJSON trace of everything that happened.
"""
import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Dict, FrozenSet, Iterator, List, Optional, Tuple, Union

import numpy as np
import simpy

from bfica.utils.crypto_identity import Partition

# Edges on which a message may leave its partition.
SANCTIONED_EDGES = frozenset({"escalation"})


@dataclass(frozen=True)
class Message:
    kind: str
    partition: Partition
    payload: Any
    edge: str = "broadcast"
    ref: str = ""


@dataclass
class Node:
    handle: str
    memberships: FrozenSet[Partition]
    inbox: List[Tuple[float, Message]] = field(default_factory=list)
    handler: Optional[Callable[[Message, float], None]] = None


class Trace:
    """Structured run log. Records render with sorted keys, so output is stable."""

    def __init__(self, clock: Callable[[], float]):
        self._clock = clock
        self.records: List[Dict[str, Any]] = []

    def record(self, event: str, **fields: Any) -> None:
        self.records.append({"t": self._clock(), "event": event, **fields})

    def __iter__(self) -> Iterator[Dict[str, Any]]:
        return iter(self.records)

    def __len__(self) -> int:
        return len(self.records)

    def of(self, event: str) -> List[Dict[str, Any]]:
        return [r for r in self.records if r["event"] == event]

    def render(self) -> str:
        return "".join(
            json.dumps(r, sort_keys=True, separators=(",", ":")) + "\n" for r in self.records
        )

    def digest(self) -> str:
        return hashlib.sha256(self.render().encode("utf-8")).hexdigest()

    def write(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="\n") as f:
            f.write(self.render())


class SimNet:
    def __init__(
        self,
        env: simpy.Environment,
        latency: Tuple[float, float],
        rng: np.random.Generator,
        trace: Trace,
    ):
        self.env = env
        self.latency = latency
        self.rng = rng
        self.trace = trace
        self.nodes: Dict[str, Node] = {}
        self.violations: List[Dict[str, Any]] = []

    def add_node(
        self,
        handle: str,
        memberships: FrozenSet[Partition],
        handler: Optional[Callable[[Message, float], None]] = None,
    ) -> Node:
        node = Node(handle, frozenset(memberships), handler=handler)
        self.nodes[handle] = node
        return node

    def node(self, handle: str) -> Node:
        return self.nodes[handle]

    def allowed(self, msg: Message, sender: Node, receiver: Node) -> bool:
        if msg.partition in sender.memberships and msg.partition in receiver.memberships:
            return True
        return msg.edge in SANCTIONED_EDGES and Partition.DP in receiver.memberships

    def sample_latency(self) -> float:
        lo, hi = self.latency
        return float(self.rng.uniform(lo, hi))

    def deliver(self, msg: Message, sender: str, receiver: str, delay: float = 0.0) -> Optional[float]:
        """Schedule arrival after ``delay`` plus a latency sample. None when dropped."""
        src, dst = self.nodes[sender], self.nodes[receiver]
        if not self.allowed(msg, src, dst):
            logging.warning("dropped %s from %s to %s: partition %s not shared",
                            msg.kind, sender, receiver, msg.partition.value)
            violation = {"kind": msg.kind, "from": sender, "to": receiver,
                         "partition": msg.partition.value, "edge": msg.edge}
            self.violations.append(violation)
            self.trace.record("partition_violation", **violation)
            return None
        arrival = self.env.now + delay + self.sample_latency()
        self.env.process(self._arrive(arrival, dst, msg, sender))
        return arrival

    def broadcast(
        self, msg: Message, sender: str, receivers: List[str], delay: float = 0.0
    ) -> Dict[str, Optional[float]]:
        return {r: self.deliver(msg, sender, r, delay) for r in receivers}

    def _arrive(self, arrival: float, node: Node, msg: Message, sender: str):  # type: ignore[no-untyped-def]
        yield self.env.timeout(arrival - self.env.now)
        node.inbox.append((self.env.now, msg))
        self.trace.record("arrive", kind=msg.kind, to=node.handle, sender=sender,
                          partition=msg.partition.value, edge=msg.edge, ref=msg.ref)
        if node.handler is not None:
            node.handler(msg, self.env.now)

    def members(self, partition: Partition) -> List[str]:
        return sorted(h for h, n in self.nodes.items() if partition in n.memberships)
