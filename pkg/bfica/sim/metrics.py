"""Per-run metric rows and their CSV summaries."""
import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from bfica.config import CostModel
from bfica.utils.tx_model import Transaction

METRIC_COLUMNS = ["mode", "seed", "kind", "metric", "value"]
SUMMARY_COLUMNS = ["mode", "kind", "metric", "count", "mean", "std"]

HASH_ONLY_ENTRY = 32


@dataclass(frozen=True)
class MetricsRecord:
    mode: str
    seed: int
    kind: str
    metric: str
    value: float

    def __post_init__(self) -> None:
        if self.value < 0:
            raise ValueError(f"{self.metric} cannot be negative")

    def row(self) -> List[object]:
        return [self.mode, self.seed, self.kind, self.metric, repr(float(self.value))]


@dataclass
class MetricsCollector:
    mode: str
    seed: int
    records: List[MetricsRecord] = field(default_factory=list)

    def add(self, kind: str, metric: str, value: float) -> None:
        self.records.append(MetricsRecord(self.mode, self.seed, kind, metric, float(value)))

    def values(self, metric: str, kind: Optional[str] = None) -> List[float]:
        return [
            r.value for r in self.records
            if r.metric == metric and (kind is None or r.kind == kind)
        ]

    def mean(self, metric: str, kind: Optional[str] = None) -> float:
        vals = self.values(metric, kind)
        return float(np.mean(vals)) if vals else 0.0


def summarize(records: Iterable[MetricsRecord]) -> List[List[object]]:
    """Mean and standard deviation per (mode, kind, metric), across all runs given."""
    groups: Dict[Tuple[str, str, str], List[float]] = {}
    for r in records:
        groups.setdefault((r.mode, r.kind, r.metric), []).append(r.value)
    rows: List[List[object]] = []
    for (mode, kind, metric) in sorted(groups):
        vals = np.asarray(groups[(mode, kind, metric)])
        std = float(np.std(vals, ddof=1)) if len(vals) > 1 else 0.0
        rows.append([mode, kind, metric, len(vals), repr(float(vals.mean())), repr(std)])
    return rows


def _write(path: Path, header: List[str], rows: Iterable[List[object]]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)


def emit_metrics(
    records: Sequence[MetricsRecord], out_dir: Union[str, Path], prefix: str = ""
) -> Tuple[Path, Path]:
    """Writes ``metrics.csv`` (one row per sample) and ``summary.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    metrics_path = out / f"{prefix}metrics.csv"
    summary_path = out / f"{prefix}summary.csv"
    _write(metrics_path, METRIC_COLUMNS, (r.row() for r in records))
    _write(summary_path, SUMMARY_COLUMNS, summarize(records))
    return metrics_path, summary_path


def dp_block_processing_time(
    txs: Sequence[Transaction], cost: CostModel, hash_only: bool = False
) -> float:
    """
    Verifying every request in a block and hashing the batch. Hash-only
    storage hashes a 32-byte reference per request instead of its body.
    """
    total = 0.0
    batch = 0
    for tx in txs:
        size = HASH_ONLY_ENTRY if hash_only else tx.size_bytes()
        total += cost.verification_cost(len(tx.signatures), size, check_tdata=True)
        batch += size
    return total + cost.hash_cost(batch)
