"""
Simulated cloud storage for picture and video evidence.

Only the hash of each file goes on-chain (as TS_data in a PET). Large files
are represented by ``SyntheticContent``: a size plus a seed for a numpy byte
stream, so multi-gigabyte evidence never has to be held in memory.
"""
import csv
import hashlib
import logging
from dataclasses import dataclass, field
from enum import Enum
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Set, Union

import numpy as np

from bfica.errors import ConfigError, NotFound, PermissionDenied
from bfica.utils.crypto_identity import Digest

CHUNK = 1 << 20

# Transfer cost calibration: sign and verify are fixed per object, decryption
# scales with size. 2 GB lands at 40 s and 8 GB at 120 s (decimal GB).
TRANSFER_RATE = 1.2e9
SIGN_COST = 20.0 / 3.0
VERIFY_COST = 20.0 / 3.0
DECRYPT_COST = 1.25e-8


@dataclass
class SyntheticContent:
    size: int
    seed: int
    patches: Dict[int, int] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.size < 0:
            raise ValueError("size must be nonnegative")

    def chunks(self, chunk: int = CHUNK) -> Iterator[bytes]:
        rng = np.random.default_rng(self.seed)
        offset = 0
        while offset < self.size:
            n = min(chunk, self.size - offset)
            data = bytearray(rng.bytes(n))
            for pos, value in self.patches.items():
                if offset <= pos < offset + n:
                    data[pos - offset] = value
            yield bytes(data)
            offset += n

    def digest(self) -> Digest:
        h = hashlib.sha256()
        for part in self.chunks():
            h.update(part)
        return Digest(h.digest())

    def materialize(self) -> bytes:
        return b"".join(self.chunks())


Content = Union[bytes, SyntheticContent]


def content_digest(content: Content) -> Digest:
    if isinstance(content, SyntheticContent):
        return content.digest()
    return Digest(hashlib.sha256(content).digest())


@dataclass
class StoredObject:
    handle: str
    owner: str
    content: Content
    content_hash: Digest
    access_keys: Set[bytes] = field(default_factory=set)

    @property
    def size(self) -> int:
        if isinstance(self.content, SyntheticContent):
            return self.content.size
        return len(self.content)


class StorageOutcome(str, Enum):
    INTACT = "intact"
    ALTERED = "altered"
    UNAVAILABLE = "unavailable"


@dataclass(frozen=True)
class TransferCostModel:
    sign_cost: float = SIGN_COST
    rate: float = TRANSFER_RATE
    verify_cost: float = VERIFY_COST
    decrypt_cost: float = DECRYPT_COST

    def __post_init__(self) -> None:
        if min(self.sign_cost, self.verify_cost, self.decrypt_cost) < 0 or self.rate <= 0:
            raise ConfigError("transfer costs must be nonnegative and the rate positive")


def estimate_transfer_time(model: TransferCostModel, size: int) -> float:
    """Sign, transmit, verify and decrypt an object of ``size`` bytes."""
    if size < 0:
        raise ValueError("size must be nonnegative")
    return model.sign_cost + size / model.rate + model.verify_cost + model.decrypt_cost * size


class CloudStore:
    """Key-gated object store. The owner's key and granted keys may read."""

    def __init__(self) -> None:
        self._objects: Dict[str, StoredObject] = {}
        self._counter = 0

    def put(self, owner: str, content: Content, owner_key: Optional[bytes] = None) -> StoredObject:
        self._counter += 1
        handle = f"cloud://{owner}/{self._counter:06d}"
        obj = StoredObject(handle, owner, content, content_digest(content))
        if owner_key is not None:
            obj.access_keys.add(owner_key)
        self._objects[handle] = obj
        return obj

    def _lookup(self, handle: str) -> StoredObject:
        try:
            return self._objects[handle]
        except KeyError:
            raise NotFound(f"no object at {handle}")

    def grant(self, handle: str, key: bytes) -> None:
        self._lookup(handle).access_keys.add(key)

    def get(self, requester_key: bytes, handle: str) -> bytes:
        obj = self._lookup(handle)
        if requester_key not in obj.access_keys:
            raise PermissionDenied(f"key not granted access to {handle}")
        if isinstance(obj.content, SyntheticContent):
            return obj.content.materialize()
        return obj.content

    def delete(self, handle: str) -> None:
        self._lookup(handle)
        del self._objects[handle]
        logging.info("deleted %s", handle)

    def mutate(self, handle: str, offset: int, value: int) -> None:
        """Owner-side alteration of one byte after the hash was anchored."""
        obj = self._lookup(handle)
        if not 0 <= offset < obj.size:
            raise ValueError("offset outside object")
        if isinstance(obj.content, SyntheticContent):
            obj.content.patches[offset] = value & 0xFF
        else:
            data = bytearray(obj.content)
            data[offset] = value & 0xFF
            obj.content = bytes(data)

    def proof_of_storage(self, handle: str, onchain_ts_data: Digest) -> StorageOutcome:
        obj = self._objects.get(handle)
        if obj is None:
            return StorageOutcome.UNAVAILABLE
        if content_digest(obj.content) == onchain_ts_data:
            return StorageOutcome.INTACT
        return StorageOutcome.ALTERED

    def objects(self) -> List[StoredObject]:
        return [self._objects[h] for h in sorted(self._objects)]

    def write_manifest(self, path: Union[str, Path]) -> None:
        with open(path, "w", encoding="utf-8", newline="") as f:
            writer = csv.writer(f, lineterminator="\n")
            writer.writerow(["handle", "size", "content_hash", "owner"])
            for obj in self.objects():
                writer.writerow([obj.handle, obj.size, obj.content_hash.hex(), obj.owner])
