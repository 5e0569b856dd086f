"""
Level statistics, cost model, sample allocation and the nested multilevel estimator.

Level l contributes E[X-_l - X-_{l-1}] (cheap approximate paths) plus the
four-way correction E[X^_l - X^_{l-1} - X-_l + X-_{l-1}]; both terms come from
the coupled sampler in `sde`, so their sum telescopes to the standard
E[X^_l - X^_{l-1}].
"""
import asyncio
import math
from dataclasses import asdict, dataclass, field, fields, replace
from typing import Any, Callable, Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np
from scipy.stats import linregress

from .randvar import InvCdfApprox, derive_seed
from .sde import SdeModel, StreamBatch, simulate_coupled, simulate_fine_pair
from .softfloat import PrecisionSpec, parse_precision

DEFAULT_BATCH_SIZE = 2048
DEFAULT_PILOT_PATHS = 1000
HALF_PRECISION_MAX_BITS = 10


# ---------------------------------------------------------------------------
# Moments
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class RunningMoments:
    """
    Count, mean and central moment sums M2..M4, merged pairwise.

    Batches are summarised two-pass around their first element and combined
    with the Chan/Pebay update, which is exact for constant data.
    """

    count: int = 0
    mean: float = 0.0
    m2: float = 0.0
    m3: float = 0.0
    m4: float = 0.0

    @classmethod
    def from_samples(cls, values: np.ndarray) -> "RunningMoments":
        values = np.asarray(values, dtype=np.float64).reshape(-1)
        n = values.size
        if n == 0:
            return cls()
        shifted = values - values[0]
        offset = shifted.mean()
        d = shifted - offset
        d2 = d * d
        return cls(n, float(values[0] + offset), float(d2.sum()), float((d2 * d).sum()), float((d2 * d2).sum()))

    def merge(self, other: "RunningMoments") -> "RunningMoments":
        if other.count == 0:
            return self
        if self.count == 0:
            return other
        na, nb = self.count, other.count
        n = na + nb
        delta = other.mean - self.mean
        delta_n = delta / n
        mean = self.mean + delta_n * nb
        m2 = self.m2 + other.m2 + delta * delta_n * na * nb
        m3 = (self.m3 + other.m3
              + delta * delta_n * delta_n * na * nb * (na - nb)
              + 3.0 * delta_n * (na * other.m2 - nb * self.m2))
        m4 = (self.m4 + other.m4
              + delta * delta_n ** 3 * na * nb * (na * na - na * nb + nb * nb)
              + 6.0 * delta_n * delta_n * (na * na * other.m2 + nb * nb * self.m2)
              + 4.0 * delta_n * (na * other.m3 - nb * self.m3))
        return RunningMoments(n, mean, m2, m3, m4)

    @property
    def variance(self) -> float:
        """Unbiased sample variance (0 below two samples)."""
        return self.m2 / (self.count - 1) if self.count > 1 else 0.0

    @property
    def variance_stderr(self) -> float:
        """Delta-method standard error of the variance: sqrt(Var[(x - mean)^2] / n)."""
        if self.count < 2:
            return 0.0
        n = self.count
        spread = self.m4 / n - (self.m2 / n) ** 2
        return math.sqrt(max(spread, 0.0) / n)

    @property
    def mean_stderr(self) -> float:
        return math.sqrt(self.variance / self.count) if self.count > 1 else 0.0


def combine(parts: Sequence[RunningMoments]) -> RunningMoments:
    total = RunningMoments()
    for part in parts:
        total = total.merge(part)
    return total


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class CostModel:
    """Cycles per random number; the rest of a path is free unless per_step_arithmetic > 0."""

    cycles_exact_rng: float = 3.5
    cycles_approx_rng_single: float = 0.5
    cycles_approx_rng_half: float = 0.25
    kahan_overhead_factor: float = 1.4
    per_step_arithmetic: float = 0.0

    def __post_init__(self):
        for f in fields(self):
            value = getattr(self, f.name)
            if not math.isfinite(value):
                raise ValueError(f"{f.name} must be finite (got {value})")
            if f.name == "per_step_arithmetic":
                if value < 0:
                    raise ValueError(f"{f.name} must be >= 0 (got {value})")
            elif value <= 0:
                raise ValueError(f"{f.name} must be > 0 (got {value})")

    @classmethod
    def from_mapping(cls, values: Mapping[str, Any]) -> "CostModel":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(values) - known)
        if unknown:
            raise ValueError(f"unknown cost model keys: {', '.join(unknown)}")
        return cls(**{k: float(v) for k, v in values.items()})

    def rng_cycles(self, mantissa_bits: int, exact_variables: bool) -> float:
        if exact_variables:
            return self.cycles_exact_rng
        if mantissa_bits <= HALF_PRECISION_MAX_BITS:
            return self.cycles_approx_rng_half
        return self.cycles_approx_rng_single

    def level_costs(self, level: int, mantissa_bits: int, kahan: bool,
                    exact_variables: bool = False) -> Tuple[float, float, float]:
        """(c^, c-, C-) per sample at `level`; coarse paths reuse the fine draws."""
        fine = 1 << level
        steps = fine + fine // 2
        c_hat = fine * self.cycles_exact_rng + steps * self.per_step_arithmetic
        c_bar = fine * self.rng_cycles(mantissa_bits, exact_variables) + steps * self.per_step_arithmetic
        if kahan:
            c_bar *= self.kahan_overhead_factor
        return c_hat, c_bar, c_hat + c_bar


# ---------------------------------------------------------------------------
# Level statistics
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelStats:
    level: int
    precision: str
    kahan: bool
    approx: str
    m_hat: int
    m_bar: int
    M_bar: int
    mean_hat: float
    mean_bar: float
    mean_four: float
    v_hat: float
    v_bar: float
    V_bar: float
    se_v_hat: float = 0.0
    se_v_bar: float = 0.0
    se_V_bar: float = 0.0
    c_hat: float = 1.0
    c_bar: float = 1.0
    C_bar: float = 2.0

    @property
    def variant(self) -> str:
        return f"{self.precision}+kahan" if self.kahan else self.precision

    @property
    def contribution(self) -> float:
        """Nested level term: mean of the approximate correction plus the four-way correction."""
        return self.mean_bar + self.mean_four

    def with_costs(self, cost_model: CostModel) -> "LevelStats":
        spec = parse_precision(self.precision)
        c_hat, c_bar, C_bar = cost_model.level_costs(self.level, spec.mantissa_bits, self.kahan,
                                                     exact_variables=self.approx == "exact")
        return replace(self, c_hat=c_hat, c_bar=c_bar, C_bar=C_bar)

    def as_row(self) -> Dict[str, Any]:
        row = asdict(self)
        row["variant"] = self.variant
        row["paths"] = self.m_hat
        return row

    @classmethod
    def from_row(cls, row: Mapping[str, str]) -> "LevelStats":
        """Inverse of a level-stats table row; the table carries one `paths` count for all three terms."""
        paths = int(row["paths"])
        approx = (row.get("approx") or "").strip()
        if not approx:
            raise ValueError(f"level {row.get('level')} has no approx entry")
        values: Dict[str, Any] = {"m_hat": paths, "m_bar": paths, "M_bar": paths, "approx": approx}
        for f in fields(cls):
            raw = row.get(f.name)
            if f.name in values or raw in (None, ""):
                continue
            if f.name == "level":
                values[f.name] = int(raw)
            elif f.name == "kahan":
                values[f.name] = raw.strip().lower() == "true"
            elif f.name == "precision":
                values[f.name] = raw
            else:
                values[f.name] = float(raw)
        return cls(**values)


def _level_stats(level: int, spec: PrecisionSpec, kahan: bool, approx: Optional[InvCdfApprox],
                 hat: RunningMoments, bar: RunningMoments, four: RunningMoments,
                 cost_model: CostModel) -> LevelStats:
    c_hat, c_bar, C_bar = cost_model.level_costs(level, spec.mantissa_bits, kahan, approx is None)
    return LevelStats(
        level=level, precision=spec.name, kahan=kahan, approx="exact" if approx is None else approx.name,
        m_hat=hat.count, m_bar=bar.count, M_bar=four.count,
        mean_hat=hat.mean, mean_bar=bar.mean, mean_four=four.mean,
        v_hat=hat.variance, v_bar=bar.variance, V_bar=four.variance,
        se_v_hat=hat.variance_stderr, se_v_bar=bar.variance_stderr, se_V_bar=four.variance_stderr,
        c_hat=c_hat, c_bar=c_bar, C_bar=C_bar,
    )


def level_seed(seed: int, level: int) -> int:
    return derive_seed(seed, level)


def batch_partition(first_path: int, n_paths: int, batch_size: int) -> List[Tuple[int, int]]:
    """Fixed (start, count) batches; results depend on this partition, never on scheduling."""
    if batch_size < 1:
        raise ValueError(f"batch_size must be >= 1 (got {batch_size})")
    return [(start, min(batch_size, first_path + n_paths - start))
            for start in range(first_path, first_path + n_paths, batch_size)]


async def _gather_batches(work: Callable[[int, int], Any], batches: Sequence[Tuple[int, int]],
                          semaphore: Optional[asyncio.Semaphore]) -> List[Any]:
    """Run `work(start, count)` per batch in worker threads; results come back in batch order."""
    sem = semaphore or asyncio.Semaphore(1)

    async def run_one(start: int, count: int):
        async with sem:
            return await asyncio.to_thread(work, start, count)

    return list(await asyncio.gather(*(run_one(s, c) for s, c in batches)))


Moments3 = Tuple[RunningMoments, RunningMoments, RunningMoments]


async def _coupled_pass(model: SdeModel, level: int, spec_low: PrecisionSpec, approx: Optional[InvCdfApprox],
                        kahan: bool, seed: int, first_path: int, n_bar: int, n_four: int, batch_size: int,
                        semaphore: Optional[asyncio.Semaphore]) -> Moments3:
    """
    Moments of the two-way exact, two-way approximate and four-way differences.

    max(n_bar, n_four) coupled paths are simulated from `first_path` on; the
    two-way moments use the first n_bar of them and the four-way moments the
    first n_four.
    """
    stream_seed = level_seed(seed, level)

    def work(start: int, count: int) -> Moments3:
        result = simulate_coupled(model, level, spec_low, approx, kahan,
                                  StreamBatch.from_range(stream_seed, start, count))
        offset = start - first_path
        k_bar = int(np.clip(n_bar - offset, 0, count))
        k_four = int(np.clip(n_four - offset, 0, count))
        return (RunningMoments.from_samples(result.two_way_exact[:k_bar]),
                RunningMoments.from_samples(result.two_way_approx[:k_bar]),
                RunningMoments.from_samples(result.four_way[:k_four]))

    parts = await _gather_batches(work, batch_partition(first_path, max(n_bar, n_four), batch_size), semaphore)
    return tuple(combine([p[i] for p in parts]) for i in range(3))


async def estimate_level_stats_async(model: SdeModel, level: int, spec_low: PrecisionSpec,
                                     approx: Optional[InvCdfApprox], kahan: bool, n_paths: int, seed: int,
                                     cost_model: Optional[CostModel] = None,
                                     batch_size: int = DEFAULT_BATCH_SIZE, first_path: int = 0,
                                     semaphore: Optional[asyncio.Semaphore] = None) -> LevelStats:
    if n_paths < 2:
        raise ValueError(f"n_paths must be >= 2 (got {n_paths})")
    moments = await _coupled_pass(model, level, spec_low, approx, kahan, seed, first_path, n_paths, n_paths,
                                  batch_size, semaphore)
    return _level_stats(level, spec_low, kahan, approx, *moments, cost_model or CostModel())


def estimate_level_stats(model: SdeModel, level: int, spec_low: PrecisionSpec,
                         approx: Optional[InvCdfApprox], kahan: bool, n_paths: int, seed: int,
                         cost_model: Optional[CostModel] = None,
                         batch_size: int = DEFAULT_BATCH_SIZE, first_path: int = 0) -> LevelStats:
    """Coupled-path variances, means and per-sample costs at one level."""
    return asyncio.run(estimate_level_stats_async(model, level, spec_low, approx, kahan, n_paths, seed,
                                                  cost_model, batch_size, first_path))


async def estimate_path_discrepancy_async(model: SdeModel, level: int, spec: PrecisionSpec,
                                          approx: Optional[InvCdfApprox], kahan: bool, n_paths: int, seed: int,
                                          batch_size: int = DEFAULT_BATCH_SIZE,
                                          semaphore: Optional[asyncio.Semaphore] = None) -> RunningMoments:
    if n_paths < 2:
        raise ValueError(f"n_paths must be >= 2 (got {n_paths})")

    def work(start: int, count: int) -> RunningMoments:
        exact, low = simulate_fine_pair(model, level, spec, approx, kahan,
                                        StreamBatch.from_range(level_seed(seed, level), start, count))
        return RunningMoments.from_samples(exact - low)

    return combine(await _gather_batches(work, batch_partition(0, n_paths, batch_size), semaphore))


def estimate_path_discrepancy(model: SdeModel, level: int, spec: PrecisionSpec,
                              approx: Optional[InvCdfApprox], kahan: bool, n_paths: int, seed: int,
                              batch_size: int = DEFAULT_BATCH_SIZE) -> RunningMoments:
    """Moments of X^_N - X-_N (same level, exact carrier path against the `spec` path)."""
    return asyncio.run(estimate_path_discrepancy_async(model, level, spec, approx, kahan, n_paths, seed, batch_size))


# ---------------------------------------------------------------------------
# Allocation, timings, speedups
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Allocation:
    which: str
    counts: List[int]
    four_way_counts: List[int] = field(default_factory=list)
    zero_variance: bool = False

    def achieved_variance(self, stats: Sequence[LevelStats]) -> float:
        """sum v/m for the allocated counts (should be <= eps^2/2)."""
        if self.which == "standard":
            return sum(s.v_hat / m for s, m in zip(stats, self.counts))
        return sum(s.v_bar / m + s.V_bar / M for s, m, M in zip(stats, self.counts, self.four_way_counts))


def _check_allocation_inputs(stats: Sequence[LevelStats], eps: float) -> None:
    if not stats:
        raise ValueError("stats must be non-empty")
    if not eps > 0:
        raise ValueError(f"eps must be > 0 (got {eps})")


def allocate_samples(stats: Sequence[LevelStats], eps: float, which: str = "standard") -> Allocation:
    """Optimal per-level counts m_l = ceil(2 eps^-2 sqrt(v_l / c_l) S), at least 1."""
    _check_allocation_inputs(stats, eps)
    scale = 2.0 / (eps * eps)
    if which == "standard":
        total = sum(math.sqrt(s.v_hat * s.c_hat) for s in stats)
        if total == 0.0:
            return Allocation(which, [1] * len(stats), zero_variance=True)
        counts = [max(1, math.ceil(scale * math.sqrt(s.v_hat / s.c_hat) * total)) for s in stats]
        return Allocation(which, counts)
    if which == "nested":
        total = sum(math.sqrt(s.v_bar * s.c_bar) + math.sqrt(s.V_bar * s.C_bar) for s in stats)
        if total == 0.0:
            return Allocation(which, [1] * len(stats), [1] * len(stats), zero_variance=True)
        counts = [max(1, math.ceil(scale * math.sqrt(s.v_bar / s.c_bar) * total)) for s in stats]
        four = [max(1, math.ceil(scale * math.sqrt(s.V_bar / s.C_bar) * total)) for s in stats]
        return Allocation(which, counts, four)
    raise ValueError(f"which must be 'standard' or 'nested' (got {which!r})")


def predicted_times(stats: Sequence[LevelStats], eps: float,
                    cost_model: Optional[CostModel] = None) -> Tuple[float, float]:
    """(T^, T-) = 2 eps^-2 (sum sqrt(v^ c^))^2 and 2 eps^-2 (sum sqrt(v- c-) + sqrt(V- C-))^2."""
    _check_allocation_inputs(stats, eps)
    if cost_model is not None:
        stats = [s.with_costs(cost_model) for s in stats]
    scale = 2.0 / (eps * eps)
    standard = sum(math.sqrt(s.v_hat * s.c_hat) for s in stats)
    nested = sum(math.sqrt(s.v_bar * s.c_bar) + math.sqrt(s.V_bar * s.C_bar) for s in stats)
    return scale * standard ** 2, scale * nested ** 2


def per_level_speedup(stats: LevelStats) -> Tuple[float, bool]:
    """
    Reciprocal of the per-level savings bracket (v- c-)/(v^ c^) · (1 + sqrt(V- C- / (v- c-)))^2.

    Returns (speedup, degenerate); when v- is 0 the bracket is undefined and
    the cost ratio c^/c- is returned with degenerate=True.
    """
    if not (stats.v_hat > 0 and stats.c_hat > 0):
        raise ValueError(f"v_hat and c_hat must be > 0 at level {stats.level}")
    if stats.v_bar == 0.0:
        return stats.c_hat / stats.c_bar, True
    ratio = (stats.v_bar * stats.c_bar) / (stats.v_hat * stats.c_hat)
    bracket = ratio * (1.0 + math.sqrt(stats.V_bar * stats.C_bar / (stats.v_bar * stats.c_bar))) ** 2
    return 1.0 / bracket, False


def fit_log2_slope(x: Sequence[float], y: Sequence[float]) -> float:
    """Least-squares slope of log2(y) against log2(x)."""
    xs = np.asarray(x, dtype=np.float64)
    ys = np.asarray(y, dtype=np.float64)
    if xs.size < 2 or (xs <= 0).any() or (ys <= 0).any():
        raise ValueError("need at least two strictly positive points")
    return float(linregress(np.log2(xs), np.log2(ys)).slope)


def meeting_level(levels: Sequence[int], four_way: Sequence[float], two_way: Sequence[float],
                  ratio: float = 0.5) -> Optional[int]:
    """First level where the four-way variance reaches `ratio` times the two-way variance."""
    for level, four, two in zip(levels, four_way, two_way):
        if four >= ratio * two:
            return level
    return None


# ---------------------------------------------------------------------------
# Nested estimator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class EstimatorResult:
    value: float
    standard_value: float
    contributions: List[float]
    level_stats: List[LevelStats]
    allocation: Allocation
    T_hat: float
    T_bar: float
    eps: float
    paths_simulated: int

    @property
    def target_mse(self) -> float:
        return self.eps * self.eps


async def run_nested_estimator_async(model: SdeModel, max_level: int, spec_low: PrecisionSpec,
                                     approx: Optional[InvCdfApprox], kahan: bool, eps: float, seed: int,
                                     cost_model: Optional[CostModel] = None,
                                     pilot_paths: int = DEFAULT_PILOT_PATHS,
                                     batch_size: int = DEFAULT_BATCH_SIZE,
                                     semaphore: Optional[asyncio.Semaphore] = None,
                                     on_level: Optional[Callable[[str, LevelStats], None]] = None) -> EstimatorResult:
    """
    Two-stage nested MLMC: pilot, allocate, main pass, re-allocate, top up.

    Pilot paths use indices [0, pilot_paths); the main and top-up passes
    continue after them, so no path is used twice. Level means come from the
    main and top-up passes only; the second allocation also sees the pilot.
    Every term gets at least two paths so each reported variance is defined.
    """
    if max_level < 0:
        raise ValueError(f"max_level must be >= 0 (got {max_level})")
    if pilot_paths < 2:
        raise ValueError(f"pilot_paths must be >= 2 (got {pilot_paths})")
    if not eps > 0:
        raise ValueError(f"eps must be > 0 (got {eps})")
    cost_model = cost_model or CostModel()
    levels = range(max_level + 1)

    def stats_of(level: int, moments: Moments3) -> LevelStats:
        return _level_stats(level, spec_low, kahan, approx, *moments, cost_model)

    async def run_pass(level: int, first: int, n_bar: int, n_four: int) -> Moments3:
        return await _coupled_pass(model, level, spec_low, approx, kahan, seed, first, n_bar, n_four,
                                   batch_size, semaphore)

    pilot: List[Moments3] = []
    for level in levels:
        pilot.append(await run_pass(level, 0, pilot_paths, pilot_paths))
        if on_level:
            on_level("pilot", stats_of(level, pilot[-1]))
    first_allocation = allocate_samples([stats_of(l, m) for l, m in zip(levels, pilot)], eps, "nested")

    next_path = [pilot_paths] * len(levels)
    paths_simulated = pilot_paths * len(levels)
    main: List[Moments3] = []
    for level in levels:
        n_bar = max(2, first_allocation.counts[level])
        n_four = max(2, first_allocation.four_way_counts[level])
        main.append(await run_pass(level, next_path[level], n_bar, n_four))
        next_path[level] += max(n_bar, n_four)
        paths_simulated += max(n_bar, n_four)

    merged = [stats_of(l, tuple(p[i].merge(m[i]) for i in range(3))) for l, p, m in zip(levels, pilot, main)]
    allocation = allocate_samples(merged, eps, "nested")

    final: List[LevelStats] = []
    for level in levels:
        hat, bar, four = main[level]
        extra_bar = max(0, allocation.counts[level] - bar.count)
        extra_four = max(0, allocation.four_way_counts[level] - four.count)
        if extra_bar or extra_four:
            top = await run_pass(level, next_path[level], extra_bar, extra_four)
            hat, bar, four = hat.merge(top[0]), bar.merge(top[1]), four.merge(top[2])
            next_path[level] += max(extra_bar, extra_four)
            paths_simulated += max(extra_bar, extra_four)
        final.append(stats_of(level, (hat, bar, four)))
        if on_level:
            on_level("main", final[-1])

    contributions = [s.contribution for s in final]
    T_hat, T_bar = predicted_times(merged, eps)
    return EstimatorResult(
        value=sum(contributions),
        standard_value=sum(s.mean_hat for s in final),
        contributions=contributions,
        level_stats=final,
        allocation=allocation,
        T_hat=T_hat,
        T_bar=T_bar,
        eps=eps,
        paths_simulated=paths_simulated,
    )


def run_nested_estimator(model: SdeModel, max_level: int, spec_low: PrecisionSpec,
                         approx: Optional[InvCdfApprox], kahan: bool, eps: float, seed: int,
                         cost_model: Optional[CostModel] = None, pilot_paths: int = DEFAULT_PILOT_PATHS,
                         batch_size: int = DEFAULT_BATCH_SIZE) -> EstimatorResult:
    """Nested estimate of E[X^_L] targeting mean squared error eps^2."""
    return asyncio.run(run_nested_estimator_async(model, max_level, spec_low, approx, kahan, eps, seed,
                                                  cost_model, pilot_paths, batch_size))
