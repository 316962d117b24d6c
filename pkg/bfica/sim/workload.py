"""
Synthetic workload: crashes as a Poisson process at ``pet_rate`` per day,
periodic instructions per vehicle, and the statistics used to check them.
"""
import math
from dataclasses import dataclass
from typing import Dict, List, NamedTuple, Optional, Sequence, Tuple

import numpy as np

from bfica.config import DAY, SimConfig
from bfica.utils.tx_model import Location

# Sydney CBD; crashes are spread over a square around it.
REGION_CENTRE = Location(-33.8688, 151.2093)
REGION_HALF_WIDTH_M = 20000.0
SPEED_RANGE = (5.0, 30.0)
ET_DELAY = 3600.0

# Chi-square critical values at alpha = 0.01, by degrees of freedom.
CHI2_CRITICAL_01 = {
    1: 6.635, 2: 9.210, 3: 11.345, 4: 13.277, 5: 15.086,
    6: 16.812, 7: 18.475, 8: 20.090, 9: 21.666, 10: 23.209,
}


class Streams(NamedTuple):
    latency: np.random.Generator
    jitter: np.random.Generator
    workload: np.random.Generator
    locations: np.random.Generator


def rng_streams(seed: int) -> Streams:
    """Independent generators, so adding draws to one never shifts another."""
    children = np.random.SeedSequence(seed).spawn(len(Streams._fields))
    return Streams(*(np.random.default_rng(c) for c in children))


def poisson_arrivals(rate_per_day: float, duration: float, rng: np.random.Generator) -> np.ndarray:
    """Arrival times in [0, duration) from exponential inter-arrival gaps."""
    if rate_per_day < 0:
        raise ValueError("rate must be nonnegative")
    if rate_per_day == 0 or duration <= 0:
        return np.empty(0)
    scale = DAY / rate_per_day
    expected = duration / scale
    chunk = int(expected + 5 * math.sqrt(expected) + 10)
    times = np.cumsum(rng.exponential(scale=scale, size=chunk))
    while times[-1] < duration:
        more = times[-1] + np.cumsum(rng.exponential(scale=scale, size=chunk))
        times = np.concatenate([times, more])
    return np.round(times[times < duration], decimals=6)


@dataclass(frozen=True)
class WorkloadEvent:
    t: float
    kind: str
    vehicle: str
    seq: int
    loc: Optional[Location] = None
    speed: float = 0.0

    @property
    def sort_key(self) -> Tuple[float, int, str, int]:
        return (self.t, ("net", "et", "pet").index(self.kind), self.vehicle, self.seq)


def net_timers(
    vehicles: Sequence[str], period: float, duration: float, rng: np.random.Generator
) -> List[Tuple[float, str]]:
    """One instruction per vehicle every ``period`` seconds from a random phase."""
    timers = []
    for vehicle in vehicles:
        phase = float(rng.uniform(0.0, period))
        k = 0
        while phase + k * period < duration:
            timers.append((round(phase + k * period, 6), vehicle))
            k += 1
    return timers


def generate_workload(
    config: SimConfig,
    vehicles: Sequence[str],
    workload_rng: np.random.Generator,
    location_rng: np.random.Generator,
) -> List[WorkloadEvent]:
    if not vehicles:
        return []
    events: List[WorkloadEvent] = []
    arrivals = poisson_arrivals(config.pet_rate, config.duration, workload_rng)
    owners = workload_rng.integers(0, len(vehicles), size=len(arrivals))
    for i, (t, owner) in enumerate(zip(arrivals, owners)):
        north, east = location_rng.uniform(-REGION_HALF_WIDTH_M, REGION_HALF_WIDTH_M, size=2)
        speed = float(location_rng.uniform(*SPEED_RANGE))
        events.append(WorkloadEvent(
            float(t), "pet", vehicles[int(owner)], i,
            REGION_CENTRE.offset(float(north), float(east)), round(speed, 3),
        ))

    counters: Dict[str, int] = {}
    for t, vehicle in net_timers(vehicles, config.net_period, config.duration, workload_rng):
        k = counters.get(vehicle, 0)
        counters[vehicle] = k + 1
        events.append(WorkloadEvent(t, "net", vehicle, k))
        if t + ET_DELAY < config.duration:
            events.append(WorkloadEvent(t + ET_DELAY, "et", vehicle, k))
    return sorted(events, key=lambda e: e.sort_key)


def daily_counts(seeds: Sequence[int], rate_per_day: float) -> List[int]:
    return [
        len(poisson_arrivals(rate_per_day, DAY, rng_streams(seed).workload)) for seed in seeds
    ]


def _poisson_pmf(k: int, lam: float) -> float:
    if lam == 0:
        return 1.0 if k == 0 else 0.0
    return math.exp(k * math.log(lam) - lam - math.lgamma(k + 1))


def poisson_bins(lam: float, n_bins: int = 6) -> List[Tuple[int, Optional[int], float]]:
    """
    Roughly equiprobable bins (lo, hi, probability); hi None means open ended.
    """
    cuts: List[int] = []
    cdf, k = 0.0, 0
    for i in range(1, n_bins):
        target = i / n_bins
        while cdf + _poisson_pmf(k, lam) < target:
            cdf += _poisson_pmf(k, lam)
            k += 1
        if not cuts or k > cuts[-1]:
            cuts.append(k)
    bins: List[Tuple[int, Optional[int], float]] = []
    lo = 0
    for hi in cuts:
        p = sum(_poisson_pmf(j, lam) for j in range(lo, hi + 1))
        bins.append((lo, hi, p))
        lo = hi + 1
    tail = 1.0 - sum(b[2] for b in bins)
    bins.append((lo, None, tail))
    return bins


@dataclass(frozen=True)
class ChiSquareResult:
    statistic: float
    dof: int
    critical: float
    mean: float
    samples: int

    @property
    def passed(self) -> bool:
        return self.statistic <= self.critical


def poisson_chi_square(counts: Sequence[int], lam: float, n_bins: int = 6) -> ChiSquareResult:
    """Goodness of fit of ``counts`` against Poisson(``lam``) at alpha = 0.01."""
    if not counts:
        raise ValueError("no samples")
    if lam <= 0:
        raise ValueError("lambda must be positive")
    data = np.asarray(counts)
    bins = poisson_bins(lam, n_bins)
    observed = np.array([
        np.count_nonzero((data >= lo) & (True if hi is None else data <= hi)) for lo, hi, _ in bins
    ], dtype=float)
    expected = np.array([p for _, _, p in bins]) * len(data)
    statistic = float(np.sum((observed - expected) ** 2 / expected))
    dof = len(bins) - 1
    return ChiSquareResult(statistic, dof, CHI2_CRITICAL_01[dof], float(data.mean()), len(data))


def workload_stats(config: SimConfig, runs: int) -> Dict[str, float]:
    """Daily crash counts over ``runs`` seeds starting at ``config.seed``."""
    counts = daily_counts(range(config.seed, config.seed + runs), config.pet_rate)
    vehicles = [f"V{i}" for i in range(max(config.fleet_size, 1))]
    timers = net_timers(vehicles, config.net_period, config.duration,
                        rng_streams(config.seed).workload)
    stats = {
        "runs": float(runs),
        "rate_per_day": config.pet_rate,
        "mean_daily_pets": float(np.mean(counts)) if counts else 0.0,
        "std_daily_pets": float(np.std(counts)) if counts else 0.0,
        "nets_in_duration": float(len(timers)),
    }
    if counts and config.pet_rate > 0:
        result = poisson_chi_square(counts, config.pet_rate)
        stats.update({
            "chi_square": round(result.statistic, 6),
            "chi_square_dof": float(result.dof),
            "chi_square_critical": result.critical,
            "chi_square_passed": float(result.passed),
        })
    return stats
