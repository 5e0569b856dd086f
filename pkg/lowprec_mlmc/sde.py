"""
Euler-Maruyama simulation in emulated precision.

One update is X <- X (+) ((a (x) dt) (+) ((b (x) sqrt_dt) (x) Z)) with every
binary operation rounded into the path's PrecisionSpec. Paths are advanced in
lockstep as numpy arrays, one array element per path; a path's draws depend
only on (seed, path index, step), so results do not depend on how paths are
batched.
"""
import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Callable, NamedTuple, Optional, Tuple, Union

import numpy as np

from .randvar import InvCdfApprox, UniformStream, draw_uniforms, gaussian_samples, path_keys
from .softfloat import (
    CARRIER,
    ArrayArithmetic,
    NonFiniteOperandError,
    NotRepresentableError,
    PrecisionSpec,
    array_arithmetic,
    is_representable,
    round_to_precision,
)

Real = Union[float, np.ndarray]


class NumericalError(RuntimeError):
    """A simulation step produced a non-finite value."""

    def __init__(self, message: str, step: Optional[int] = None, level: Optional[int] = None):
        super().__init__(message)
        self.step = step
        self.level = level


# ---------------------------------------------------------------------------
# Models
# ---------------------------------------------------------------------------

class SdeModel(ABC):
    """dX = a(t, X) dt + b(t, X) dW on [0, horizon], evaluated op by op in a given precision."""

    x0: float
    horizon: float

    @abstractmethod
    def drift(self, t: float, x: np.ndarray, arith: ArrayArithmetic) -> np.ndarray:
        ...

    @abstractmethod
    def diffusion(self, t: float, x: np.ndarray, arith: ArrayArithmetic) -> np.ndarray:
        ...


@dataclass(frozen=True)
class GeometricBrownianMotion(SdeModel):
    """a = mu·x, b = sigma·x; parameters are rounded into the working precision."""

    mu: float = 0.05
    sigma: float = 0.2
    x0: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        _check_model(self.x0, self.horizon)

    def drift(self, t, x, arith):
        return arith.mul(round_to_precision(self.mu, arith.spec), x)

    def diffusion(self, t, x, arith):
        return arith.mul(round_to_precision(self.sigma, arith.spec), x)

    def mean(self, t: Optional[float] = None) -> float:
        """E[X_t] = x0·exp(mu·t)."""
        return self.x0 * math.exp(self.mu * (self.horizon if t is None else t))

    def euler_mean(self, level: int) -> float:
        """E of the exact-arithmetic Euler terminal value, x0·(1 + mu·dt)^N."""
        spec = LevelSpec(level, self.horizon)
        return self.x0 * (1.0 + self.mu * spec.step) ** spec.steps


@dataclass(frozen=True)
class CallableModel(SdeModel):
    """Arbitrary carrier-precision a(t, x), b(t, x); each result is rounded once into the working precision."""

    drift_fn: Callable[[float, np.ndarray], np.ndarray]
    diffusion_fn: Callable[[float, np.ndarray], np.ndarray]
    x0: float = 1.0
    horizon: float = 1.0

    def __post_init__(self):
        _check_model(self.x0, self.horizon)

    def drift(self, t, x, arith):
        return arith.round(np.asarray(self.drift_fn(t, x), dtype=np.float64) + np.zeros_like(x))

    def diffusion(self, t, x, arith):
        return arith.round(np.asarray(self.diffusion_fn(t, x), dtype=np.float64) + np.zeros_like(x))


def _check_model(x0: float, horizon: float) -> None:
    if not math.isfinite(x0):
        raise ValueError(f"x0 must be finite (got {x0})")
    if not (math.isfinite(horizon) and horizon > 0):
        raise ValueError(f"horizon must be positive (got {horizon})")


# ---------------------------------------------------------------------------
# Value types
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LevelSpec:
    level: int
    horizon: float = 1.0

    def __post_init__(self):
        if self.level < 0:
            raise ValueError(f"level must be >= 0 (got {self.level})")
        if not self.horizon > 0:
            raise ValueError(f"horizon must be positive (got {self.horizon})")

    @property
    def steps(self) -> int:
        return 1 << self.level

    @property
    def step(self) -> float:
        return math.ldexp(self.horizon, -self.level)


@dataclass(frozen=True)
class KahanAccumulator:
    """Running sum `total` and the compensation `compensation` subtracted from the next increment."""

    total: Real
    compensation: Real = 0.0


@dataclass(frozen=True, eq=False)
class StreamBatch:
    """Paths sharing a seed; `counter` is the draw index of the first step."""

    seed: int
    path_indices: np.ndarray = field(repr=False)
    counter: int = 0

    @classmethod
    def from_range(cls, seed: int, start: int, count: int) -> "StreamBatch":
        return cls(seed, np.arange(start, start + count, dtype=np.int64))

    @classmethod
    def of(cls, stream: UniformStream) -> "StreamBatch":
        return cls(stream.seed, np.array([stream.path_index], dtype=np.int64), stream.counter)

    def __len__(self) -> int:
        return len(self.path_indices)


class PathResult(NamedTuple):
    terminal: float
    draws: int
    steps: int


@dataclass(frozen=True, eq=False)
class CoupledResult:
    """Terminal values of the four coupled path families, one entry per path."""

    x_hat_fine: np.ndarray
    x_hat_coarse: np.ndarray
    x_bar_fine: np.ndarray
    x_bar_coarse: np.ndarray
    draws: int
    steps: int

    @property
    def two_way_exact(self) -> np.ndarray:
        return self.x_hat_fine - self.x_hat_coarse

    @property
    def two_way_approx(self) -> np.ndarray:
        return self.x_bar_fine - self.x_bar_coarse

    @property
    def four_way(self) -> np.ndarray:
        return self.two_way_exact - self.two_way_approx


class StepErrorStats(NamedTuple):
    mean_eta: float
    mean_abs_eta: float
    mean_eta_prime: float
    mean_abs_eta_prime: float


# ---------------------------------------------------------------------------
# Single steps
# ---------------------------------------------------------------------------

def _increment_parts(x, t, dt, scale, z, model: SdeModel, arith: ArrayArithmetic):
    """A = a (x) dt and B = (b (x) scale) (x) z, or b (x) scale when z is None."""
    a = arith.mul(model.drift(t, x, arith), dt)
    b = arith.mul(model.diffusion(t, x, arith), scale)
    if z is not None:
        b = arith.mul(b, z)
    return a, b


def _kahan_update(total, compensation, increment, arith: ArrayArithmetic):
    y = arith.sub(increment, compensation)
    new_total = arith.add(total, y)
    new_compensation = arith.sub(arith.sub(new_total, total), y)
    return new_total, new_compensation


def _step_inputs(spec: PrecisionSpec, x, dt, z, sqrt_dt):
    arrays = [np.atleast_1d(np.asarray(v, dtype=np.float64)) for v in (x, dt, z)]
    for name, arr in zip(("x", "dt", "z"), arrays):
        if not np.isfinite(arr).all():
            raise NonFiniteOperandError(f"non-finite {name}")
        if __debug__ and not is_representable(arr, spec):
            raise NotRepresentableError(f"{name} is not representable in {spec.name}")
    if sqrt_dt is None:
        sqrt_dt = round_to_precision(math.sqrt(float(dt)), spec)
    return arrays[0], arrays[1], arrays[2], sqrt_dt


def _finish(values: np.ndarray, like, step: Optional[int]) -> Real:
    if not np.isfinite(values).all():
        where = "" if step is None else f" at step {step}"
        raise NumericalError(f"non-finite value in Euler step{where}", step=step)
    return float(values[0]) if np.ndim(like) == 0 else values


def em_step(x: Real, t: float, dt: float, z: Real, model: SdeModel, spec: PrecisionSpec,
            sqrt_dt: Optional[float] = None, step: Optional[int] = None) -> Real:
    """
    One Euler-Maruyama update with every operation rounded into `spec`.

    `step` is only used to label a NumericalError raised on a non-finite result.
    """
    arith = array_arithmetic(spec)
    xa, dta, za, sqrt_dt = _step_inputs(spec, x, dt, z, sqrt_dt)
    a, b = _increment_parts(xa, t, dta, sqrt_dt, za, model, arith)
    return _finish(arith.add(xa, arith.add(a, b)), x, step)


def em_step_kahan(x: Real, kahan: KahanAccumulator, t: float, dt: float, z: Real, model: SdeModel,
                  spec: PrecisionSpec, sqrt_dt: Optional[float] = None,
                  step: Optional[int] = None) -> Tuple[Real, KahanAccumulator]:
    """Euler-Maruyama update whose outer accumulation is Kahan-compensated."""
    if not np.array_equal(np.asarray(kahan.total, dtype=np.float64), np.asarray(x, dtype=np.float64)):
        raise ValueError("Kahan accumulator total must equal the current state")
    arith = array_arithmetic(spec)
    xa, dta, za, sqrt_dt = _step_inputs(spec, x, dt, z, sqrt_dt)
    a, b = _increment_parts(xa, t, dta, sqrt_dt, za, model, arith)
    comp = np.atleast_1d(np.asarray(kahan.compensation, dtype=np.float64))
    total, comp = _kahan_update(xa, comp, arith.add(a, b), arith)
    new_x = _finish(total, x, step)
    new_c = float(comp[0]) if np.ndim(x) == 0 else comp
    return new_x, KahanAccumulator(new_x, new_c)


def kahan_sum(increments, spec: PrecisionSpec, initial: float = 0.0) -> KahanAccumulator:
    """Compensated summation of `increments` (each representable in `spec`) onto `initial`."""
    arith = array_arithmetic(spec)
    values = np.asarray(increments, dtype=np.float64).reshape(-1)
    if not is_representable(values, spec) or not is_representable(initial, spec):
        raise NotRepresentableError(f"summands must be representable in {spec.name}")
    total = np.array([initial], dtype=np.float64)
    comp = np.zeros(1)
    for value in values:
        total, comp = _kahan_update(total, comp, np.array([value]), arith)
    return KahanAccumulator(float(total[0]), float(comp[0]))


# ---------------------------------------------------------------------------
# Path families
# ---------------------------------------------------------------------------

class _PathFamily:
    """Paths in one precision advanced together; optionally Kahan-compensated."""

    def __init__(self, model: SdeModel, spec: PrecisionSpec, n_paths: int, dt: float, kahan: bool):
        self.model = model
        self.arith = array_arithmetic(spec)
        self.dt = round_to_precision(dt, spec)
        self.sqrt_dt = round_to_precision(math.sqrt(dt), spec)
        self.x = np.full(n_paths, round_to_precision(model.x0, spec))
        self.compensation = np.zeros(n_paths) if kahan else None

    def advance(self, t: float, scale, z: Optional[np.ndarray]) -> None:
        arith = self.arith
        a, b = _increment_parts(self.x, t, self.dt, scale, z, self.model, arith)
        increment = arith.add(a, b)
        if self.compensation is None:
            self.x = arith.add(self.x, increment)
        else:
            self.x, self.compensation = _kahan_update(self.x, self.compensation, increment, arith)

    def check(self, step: int, level: int) -> None:
        if not np.isfinite(self.x).all():
            raise NumericalError(
                f"non-finite state in {self.arith.spec.name} path at step {step} of level {level}",
                step=step, level=level,
            )


def _level(level: Union[int, LevelSpec], model: SdeModel) -> LevelSpec:
    return level if isinstance(level, LevelSpec) else LevelSpec(level, model.horizon)


def simulate_paths(model: SdeModel, level: Union[int, LevelSpec], spec: PrecisionSpec,
                   approx: Optional[InvCdfApprox], kahan: bool, streams: StreamBatch) -> np.ndarray:
    """Terminal values of N-step paths in `spec`; `approx=None` draws exact normals."""
    lvl = _level(level, model)
    family = _PathFamily(model, spec, len(streams), lvl.step, kahan)
    keys = path_keys(streams.seed, streams.path_indices)
    for n in range(lvl.steps):
        z = family.arith.round(gaussian_samples(draw_uniforms(keys, streams.counter + n), approx))
        family.advance(n * lvl.step, family.sqrt_dt, z)
        family.check(n, lvl.level)
    return family.x


def simulate_path(model: SdeModel, level: Union[int, LevelSpec], spec: PrecisionSpec,
                  approx: Optional[InvCdfApprox], kahan: bool, stream: UniformStream) -> PathResult:
    lvl = _level(level, model)
    terminal = simulate_paths(model, lvl, spec, approx, kahan, StreamBatch.of(stream))
    return PathResult(float(terminal[0]), lvl.steps, lvl.steps)


def simulate_fine_pair(model: SdeModel, level: Union[int, LevelSpec], spec: PrecisionSpec,
                       approx: Optional[InvCdfApprox], kahan: bool,
                       streams: StreamBatch) -> Tuple[np.ndarray, np.ndarray]:
    """(X^_N, X-_N): exact carrier path and approximate `spec` path on shared uniforms."""
    lvl = _level(level, model)
    exact = _PathFamily(model, CARRIER, len(streams), lvl.step, False)
    low = _PathFamily(model, spec, len(streams), lvl.step, kahan)
    keys = path_keys(streams.seed, streams.path_indices)
    for n in range(lvl.steps):
        u = draw_uniforms(keys, streams.counter + n)
        t = n * lvl.step
        exact.advance(t, exact.sqrt_dt, gaussian_samples(u, None))
        low.advance(t, low.sqrt_dt, low.arith.round(gaussian_samples(u, approx)))
        exact.check(n, lvl.level)
        low.check(n, lvl.level)
    return exact.x, low.x


def simulate_coupled(model: SdeModel, level: Union[int, LevelSpec], spec_low: PrecisionSpec,
                     approx: Optional[InvCdfApprox], kahan: bool, streams: StreamBatch) -> CoupledResult:
    """
    Exact/approximate x fine/coarse paths on one set of uniforms.

    The coarse paths take no draws of their own: each coarse increment is the
    pairwise sum of two fine increments sqrt_dt (x) Z, formed in the precision
    of the path it drives. At level 0 the coarse values are 0.
    """
    lvl = _level(level, model)
    n_paths = len(streams)
    dt = lvl.step
    keys = path_keys(streams.seed, streams.path_indices)
    hat = _PathFamily(model, CARRIER, n_paths, dt, False)
    bar = _PathFamily(model, spec_low, n_paths, dt, kahan)
    coupled = lvl.level > 0
    if coupled:
        hat_coarse = _PathFamily(model, CARRIER, n_paths, 2.0 * dt, False)
        bar_coarse = _PathFamily(model, spec_low, n_paths, 2.0 * dt, kahan)
        pending_hat = pending_bar = None
    for n in range(lvl.steps):
        u = draw_uniforms(keys, streams.counter + n)
        t = n * dt
        z_hat = gaussian_samples(u, None)
        z_bar = bar.arith.round(gaussian_samples(u, approx))
        hat.advance(t, hat.sqrt_dt, z_hat)
        bar.advance(t, bar.sqrt_dt, z_bar)
        hat.check(n, lvl.level)
        bar.check(n, lvl.level)
        if not coupled:
            continue
        dw_hat = hat.arith.mul(hat.sqrt_dt, z_hat)
        dw_bar = bar.arith.mul(bar.sqrt_dt, z_bar)
        if pending_hat is None:
            pending_hat, pending_bar = dw_hat, dw_bar
            continue
        t_coarse = (n - 1) * dt
        hat_coarse.advance(t_coarse, hat.arith.add(pending_hat, dw_hat), None)
        bar_coarse.advance(t_coarse, bar.arith.add(pending_bar, dw_bar), None)
        hat_coarse.check(n // 2, lvl.level - 1)
        bar_coarse.check(n // 2, lvl.level - 1)
        pending_hat = pending_bar = None
    if coupled:
        x_hat_coarse, x_bar_coarse = hat_coarse.x, bar_coarse.x
        steps = lvl.steps + lvl.steps // 2
    else:
        x_hat_coarse = x_bar_coarse = np.zeros(n_paths)
        steps = lvl.steps
    return CoupledResult(hat.x, x_hat_coarse, bar.x, x_bar_coarse, draws=lvl.steps, steps=steps)


def step_error_probe(model: SdeModel, level: Union[int, LevelSpec], spec: PrecisionSpec,
                     approx: Optional[InvCdfApprox], n_samples: int, seed: int = 0) -> StepErrorStats:
    """
    Per-step rounding residuals along uncompensated paths in `spec`.

    eta is the step result minus X + (A + B) taken in the carrier; eta' is the
    inner-sum residual (A (+) B) - (A + B). Means run over every step of
    ceil(n_samples / N) paths.
    """
    if n_samples < 10_000:
        raise ValueError(f"n_samples must be >= 10^4 (got {n_samples})")
    lvl = _level(level, model)
    n_paths = -(-n_samples // lvl.steps)
    family = _PathFamily(model, spec, n_paths, lvl.step, False)
    arith = family.arith
    keys = path_keys(seed, np.arange(n_paths))
    sums = np.zeros(4)
    for n in range(lvl.steps):
        z = arith.round(gaussian_samples(draw_uniforms(keys, n), approx))
        a, b = _increment_parts(family.x, n * lvl.step, family.dt, family.sqrt_dt, z, model, arith)
        inner = arith.add(a, b)
        exact_inner = a + b
        stepped = arith.add(family.x, inner)
        eta = stepped - (family.x + exact_inner)
        eta_prime = inner - exact_inner
        sums += (eta.sum(), np.abs(eta).sum(), eta_prime.sum(), np.abs(eta_prime).sum())
        family.x = stepped
        family.check(n, lvl.level)
    means = sums / (n_paths * lvl.steps)
    return StepErrorStats(*(float(m) for m in means))
