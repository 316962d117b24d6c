"""
Simulation defaults, the processing-cost model and the run configuration.

Costs are read from ``calibration.json`` next to this module, or from the
file named by the ``BFICA_CALIBRATION`` environment variable.
"""
import dataclasses
import json
import logging
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Any, Dict, Tuple

from bfica.errors import ConfigError

DAY = 86400.0

B_MAX = 7
PET_RATE = 42.0
NET_PERIOD = 7 * DAY
DELTA_T = 120.0
DELTA_D = 200.0
DELTA_V = 5.0
SERVICE_WINDOW = 30 * DAY
NET_GRACE = 7 * DAY
LATENCY = (0.005, 0.050)

MODES = ("bfica", "baseline", "b4f")
CONSENSUS_MODES = ("unanimous", "majority")

CALIBRATION_PATH = Path(__file__).with_name("calibration.json")

DEFAULTS: Dict[str, Any] = {
    "b_max": B_MAX,
    "pet_rate": PET_RATE,
    "net_period": NET_PERIOD,
    "delta_t": DELTA_T,
    "delta_d": DELTA_D,
    "delta_v": DELTA_V,
    "service_window": SERVICE_WINDOW,
    "net_grace": NET_GRACE,
    "latency_model": LATENCY,
}


@dataclass(frozen=True)
class CostModel:
    """
    Per-operation processing costs in simulated seconds.
    ``*_per_kb`` coefficients scale with the canonical size of the
    transaction being processed.
    """

    verify_sig: float = 1.2
    tdata_check: float = 0.30
    hash_fixed: float = 0.045
    hash_per_kb: float = 0.001
    encrypt_per_kb: float = 0.002
    decrypt_fixed: float = 0.08
    decrypt_per_kb: float = 0.001
    fold_hash: float = 0.3
    consistency_round: float = 1.5
    personal_store_fetch: float = 0.25
    jitter: float = 0.05

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"cost '{f.name}' must be nonnegative")

    def for_mode(self, mode: str) -> "CostModel":
        """Baseline neither hashes nor encrypts transactions."""
        if mode == "baseline":
            return dataclasses.replace(
                self,
                hash_fixed=0.0,
                hash_per_kb=0.0,
                encrypt_per_kb=0.0,
                decrypt_fixed=0.0,
                decrypt_per_kb=0.0,
            )
        return self

    def hash_cost(self, size_bytes: int) -> float:
        return self.hash_fixed + self.hash_per_kb * size_bytes / 1024.0

    def decrypt_cost(self, size_bytes: int) -> float:
        return self.decrypt_fixed + self.decrypt_per_kb * size_bytes / 1024.0

    def encrypt_cost(self, size_bytes: int) -> float:
        return self.encrypt_per_kb * size_bytes / 1024.0

    def verification_cost(
        self, signatures: int, size_bytes: int, check_tdata: bool
    ) -> float:
        cost = self.verify_sig * signatures + self.hash_cost(size_bytes)
        if check_tdata:
            cost += self.tdata_check
        return cost

    def validation_cost(self) -> float:
        return self.fold_hash + self.consistency_round

    def security_cost(self, size_bytes: int) -> float:
        """Hash recomputation plus witness decryption on a request."""
        return self.hash_cost(size_bytes) + self.decrypt_cost(size_bytes)

    def request_cost(self, signatures: int, size_bytes: int) -> float:
        """Full processing of a request for evidence; the hash is charged once."""
        return self.verify_sig * signatures + self.tdata_check + self.security_cost(size_bytes)


def load_cost_model(path: str | Path | None = None) -> CostModel:
    if path is None:
        path = os.getenv("BFICA_CALIBRATION") or CALIBRATION_PATH
    return _load_cost_model(str(path))


@lru_cache(maxsize=8)
def _load_cost_model(path: str) -> CostModel:
    try:
        with open(path, "r", encoding="utf-8") as f:
            raw = json.load(f)
    except FileNotFoundError:
        raise ConfigError(f"calibration file not found: {path}")
    except json.JSONDecodeError as e:
        raise ConfigError(f"calibration file {path} is not valid JSON: {e}")

    known = {f.name for f in dataclasses.fields(CostModel)}
    values = {k: float(v) for k, v in raw.items() if k in known}
    unknown = sorted(k for k in raw if k not in known and not k.startswith("_"))
    if unknown:
        logging.warning("ignoring unknown calibration keys: %s", unknown)
    return CostModel(**values)


@dataclass(frozen=True)
class SimConfig:
    seed: int = 1
    b_max: int = B_MAX
    duration: float = DAY
    pet_rate: float = PET_RATE
    net_period: float = NET_PERIOD
    latency_model: Tuple[float, float] = LATENCY
    cost_model: CostModel = field(default_factory=load_cost_model)
    mode: str = "bfica"
    delta_t: float = DELTA_T
    delta_d: float = DELTA_D
    delta_v: float = DELTA_V
    service_window: float = SERVICE_WINDOW
    net_grace: float = NET_GRACE
    consensus: str = "unanimous"
    fleet_size: int = 20
    video_size: int = 4096

    def validate(self) -> "SimConfig":
        if self.b_max < 1:
            raise ConfigError("b_max must be at least 1")
        if self.duration < 0:
            raise ConfigError("duration must be nonnegative")
        if self.pet_rate < 0 or self.net_period <= 0:
            raise ConfigError("pet_rate must be nonnegative and net_period positive")
        lo, hi = self.latency_model
        if lo < 0 or lo > hi:
            raise ConfigError("latency model needs 0 <= min <= max")
        if self.mode not in MODES:
            raise ConfigError(f"unknown mode '{self.mode}' (expected one of {MODES})")
        if self.consensus not in CONSENSUS_MODES:
            raise ConfigError(f"unknown consensus mode '{self.consensus}'")
        if min(self.delta_t, self.delta_d, self.delta_v) < 0:
            raise ConfigError("consistency thresholds must be nonnegative")
        if self.fleet_size < 0 or self.video_size < 0:
            raise ConfigError("fleet_size and video_size must be nonnegative")
        return self

    @property
    def effective_costs(self) -> CostModel:
        return self.cost_model.for_mode(self.mode)

    def with_overrides(self, **overrides: Any) -> "SimConfig":
        """
        Returns a copy with the given fields replaced. String values (from
        scenario files or the command line) are coerced to the field's type.
        """
        names = {f.name for f in dataclasses.fields(self)}
        changes: Dict[str, Any] = {}
        for key, value in overrides.items():
            if value is None:
                continue
            if key not in names or key == "cost_model":
                raise ConfigError(f"unknown config key '{key}'")
            changes[key] = _coerce(getattr(self, key), value, key)
        return dataclasses.replace(self, **changes).validate()


def _coerce(current: Any, value: Any, key: str) -> Any:
    if not isinstance(value, str):
        return value
    try:
        if isinstance(current, bool):
            return value.lower() in ("1", "true", "yes")
        if isinstance(current, int):
            return int(value)
        if isinstance(current, float):
            return float(value)
        if isinstance(current, tuple):
            lo, hi = value.split(",")
            return (float(lo), float(hi))
    except ValueError:
        raise ConfigError(f"bad value for '{key}': {value!r}")
    return value
