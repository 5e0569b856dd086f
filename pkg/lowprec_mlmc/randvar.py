"""
Random variables: counter-based uniforms, the exact Gaussian inverse CDF and
piecewise-polynomial approximations of it.

Every evaluator works in terms of t = min(u, 1 - u) and restores the sign by
reflection, so Z(1 - u) = -Z(u) holds bit for bit. For generated uniforms
1 - u is always exact.
"""
import math
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.polynomial import legendre
from scipy.special import ndtr

from .softfloat import DomainError

Real = Union[float, np.ndarray]

_MASK64 = 0xFFFFFFFFFFFFFFFF
_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)
_SHIFT30 = np.uint64(30)
_SHIFT27 = np.uint64(27)
_SHIFT31 = np.uint64(31)
_SHIFT12 = np.uint64(12)
_UNIFORM_SCALE = math.ldexp(1.0, -52)

QUADRATURE_NODES = 32
MAX_INTERVALS = 1024
APPROX_KINDS = {"linear": 1, "cubic": 3}


# ---------------------------------------------------------------------------
# Uniform streams
# ---------------------------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    """SplitMix64 finaliser, applied elementwise (uint64 arithmetic wraps)."""
    z = z + _GAMMA
    z = (z ^ (z >> _SHIFT30)) * _MIX1
    z = (z ^ (z >> _SHIFT27)) * _MIX2
    return z ^ (z >> _SHIFT31)


def _as_u64(value: int, size: int) -> np.ndarray:
    return np.full(size, int(value) & _MASK64, dtype=np.uint64)


def derive_seed(seed: int, *labels: int) -> int:
    """Fold integer labels (level, experiment id, ...) into a 64-bit seed."""
    key = _as_u64(seed, 1)
    for label in labels:
        key = _mix64(key ^ _mix64(_as_u64(label, 1)))
    return int(key[0])


def path_keys(seed: int, path_indices: Sequence[int]) -> np.ndarray:
    """Per-path stream keys; draws for a path depend only on (seed, path index, counter)."""
    paths = np.atleast_1d(np.asarray(path_indices, dtype=np.int64))
    if (paths < 0).any():
        raise ValueError("path indices must be non-negative")
    return _mix64(_as_u64(seed, paths.size) ^ _mix64(paths.astype(np.uint64)))


def draw_uniforms(keys: np.ndarray, counter: int) -> np.ndarray:
    """Uniforms (k + 1/2)·2^-52 in the open interval (0, 1), one per key."""
    h = _mix64(keys ^ _mix64(_as_u64(counter, keys.size)))
    return ((h >> _SHIFT12).astype(np.float64) + 0.5) * _UNIFORM_SCALE


def uniform_block(seed: int, path_indices: Sequence[int], counter: int) -> np.ndarray:
    return draw_uniforms(path_keys(seed, path_indices), counter)


@dataclass(frozen=True)
class UniformStream:
    seed: int
    path_index: int
    counter: int = 0

    def __post_init__(self):
        if self.path_index < 0 or self.counter < 0:
            raise ValueError("path_index and counter must be non-negative")


def next_uniform(stream: UniformStream) -> Tuple[float, UniformStream]:
    u = uniform_block(stream.seed, [stream.path_index], stream.counter)[0]
    return float(u), replace(stream, counter=stream.counter + 1)


# ---------------------------------------------------------------------------
# Exact inverse CDF
# ---------------------------------------------------------------------------

# Acklam's rational approximation (relative error ~1e-9), refined below.
_A = (-3.969683028665376e+01, 2.209460984245205e+02, -2.759285104469687e+02,
      1.383577518672690e+02, -3.066479806614716e+01, 2.506628277459239e+00)
_B = (-5.447609879822406e+01, 1.615858368580409e+02, -1.556989798598866e+02,
      6.680131188771972e+01, -1.328068155288572e+01)
_C = (-7.784894002430293e-03, -3.223964580411365e-01, -2.400758277161838e+00,
      -2.549732539343734e+00, 4.374664141464968e+00, 2.938163982698783e+00)
_D = (7.784695709041462e-03, 3.224671290700398e-01, 2.445134137142996e+00,
      3.754408661907416e+00)
_P_LOW = 0.02425
_SQRT_2PI = math.sqrt(2.0 * math.pi)
# below this tail mass Phi and phi underflow; the rational step alone is kept
_NEWTON_FLOOR = 1e-300


def _horner(coeffs, x):
    acc = np.full_like(x, coeffs[0])
    for c in coeffs[1:]:
        acc = acc * x + c
    return acc


def _lower_quantile(t: np.ndarray) -> np.ndarray:
    """Phi^-1(t) for t in (0, 1/2]; non-positive."""
    x = np.empty_like(t)
    tail = t < _P_LOW
    if tail.any():
        q = np.sqrt(-2.0 * np.log(t[tail]))
        x[tail] = _horner(_C, q) / (_horner(_D, q) * q + 1.0)
    body = ~tail
    if body.any():
        q = t[body] - 0.5
        r = q * q
        x[body] = _horner(_A, r) * q / (_horner(_B, r) * r + 1.0)
    refine = t > _NEWTON_FLOOR
    xr = x[refine]
    x[refine] = xr - (ndtr(xr) - t[refine]) * _SQRT_2PI * np.exp(0.5 * xr * xr)
    return np.minimum(x, 0.0)


def _check_unit_interval(arr: np.ndarray) -> None:
    if not (np.isfinite(arr).all() and (arr > 0.0).all() and (arr < 1.0).all()):
        raise DomainError("uniform argument must lie in the open interval (0, 1)")


def _reflect(u: np.ndarray, lower_values: np.ndarray) -> np.ndarray:
    out = np.where(u > 0.5, -lower_values, lower_values)
    out[u == 0.5] = 0.0
    return out


def _exact(u: np.ndarray) -> np.ndarray:
    return _reflect(u, _lower_quantile(np.minimum(u, 1.0 - u)))


def exact_inv_cdf(u: Real) -> Real:
    """Phi^-1(u): rational start plus one Newton step on Phi."""
    arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    _check_unit_interval(arr)
    out = _exact(arr)
    return float(out[0]) if np.ndim(u) == 0 else out.reshape(np.shape(u))


# ---------------------------------------------------------------------------
# Piecewise-polynomial approximation
# ---------------------------------------------------------------------------

@dataclass(frozen=True, eq=False)
class InvCdfApprox:
    """
    Piecewise polynomial Phi~^-1 on geometric (dyadic) intervals.

    Pieces live on the half line t = min(u, 1-u) in (0, 1/2] and are mirrored
    onto (1/2, 1). Piece k covers t in [2^-(k+2), 2^-(k+1)), so piece 0 is
    u in [1/2, 3/4), and the deepest piece K-1 is truncated to (0, 2^-K).
    Doubling K only deepens the tail: the pieces above t = 2^-K are unchanged.
    Each piece stores Legendre coefficients in its local coordinate
    x = 2(t - lo)/(hi - lo) - 1, which increases with t.
    """

    kind: str
    interval_count: int
    lower: np.ndarray = field(repr=False)
    upper: np.ndarray = field(repr=False)
    coefficients: np.ndarray = field(repr=False)

    @property
    def degree(self) -> int:
        return APPROX_KINDS[self.kind]

    @property
    def name(self) -> str:
        return f"{self.kind}:{self.interval_count}"

    @property
    def breakpoints(self) -> List[float]:
        """Interval boundaries in u, ascending within (1/2, 1)."""
        return [1.0 - float(hi) for hi in self.upper[1:]]

    @property
    def support_bound(self) -> float:
        """Largest |Z~|, attained at the open end of the deepest piece."""
        deepest = self.coefficients[-1]
        return float(abs(legendre.legval(-1.0, deepest)))

    def pieces(self, t: np.ndarray) -> np.ndarray:
        """Index of the piece holding each t in (0, 1/2]."""
        _, exponent = np.frexp(t)
        return np.clip(-exponent - 1, 0, self.interval_count - 1)

    def evaluate(self, u: np.ndarray) -> np.ndarray:
        """Evaluate on uniforms already known to lie in (0, 1)."""
        t = np.minimum(u, 1.0 - u)
        piece = self.pieces(t)
        lo = self.lower[piece]
        hi = self.upper[piece]
        x = 2.0 * (t - lo) / (hi - lo) - 1.0
        values = legendre.legval(x, self.coefficients[piece].T, tensor=False)
        return _reflect(u, values)


def _piece_windows(K: int) -> Tuple[np.ndarray, np.ndarray]:
    depth = np.arange(K, dtype=np.int32)
    lower = np.ldexp(1.0, -(depth + 2))
    upper = np.ldexp(1.0, -(depth + 1))
    lower[K - 1] = 0.0
    return lower, upper


def _quadrature(lo: float, hi: float) -> Tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Gauss-Legendre nodes in local x, the matching t nodes and weights in t."""
    x, w = legendre.leggauss(QUADRATURE_NODES)
    t = lo + (hi - lo) * (x + 1.0) * 0.5
    return x, t, w * (hi - lo) * 0.5


def _project(K: int, degree: int, lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    coefficients = np.zeros((K, degree + 1))
    x, w = legendre.leggauss(QUADRATURE_NODES)
    basis = legendre.legvander(x, degree)  # (nodes, degree + 1)
    norms = (2.0 * np.arange(degree + 1) + 1.0) / 2.0
    for k in range(K):
        _, t, _ = _quadrature(lower[k], upper[k])
        coefficients[k] = norms * (basis * (w * _lower_quantile(t))[:, None]).sum(axis=0)
    return coefficients


def _min_slope(coef: np.ndarray) -> float:
    """Minimum over x in [-1, 1] of the derivative of a Legendre series."""
    slope = legendre.legder(coef)
    candidates = [-1.0, 1.0]
    if len(slope) > 1:
        candidates.extend(r.real for r in legendre.legroots(legendre.legder(slope))
                          if abs(r.imag) < 1e-12 and -1.0 <= r.real <= 1.0)
    return float(min(legendre.legval(c, slope) for c in candidates))


def _repair_monotone(coefficients: np.ndarray) -> None:
    """
    Remove downward jumps at breakpoints by lowering the P1 coefficients.

    Lowering P1 of a piece raises its left end and lowers its right end,
    which can only widen the gaps at its other breakpoint, so each breakpoint
    is fixed on its own within a per-piece budget of half the minimum slope.
    The central piece is first pulled below zero at t = 1/2 the same way,
    so the mirrored halves keep the sign of the exact variable.
    """
    K = coefficients.shape[0]
    for k in range(K):
        if _min_slope(coefficients[k]) <= 0.0:
            coefficients[k, 2:] = 0.0
    centre = legendre.legval(1.0, coefficients[0])
    if centre > 0.0:
        coefficients[0, 1] -= centre + 4.0 * np.finfo(float).eps * max(abs(coefficients[0, 1]), 1.0)
        if _min_slope(coefficients[0]) <= 0.0:
            raise ValueError("cannot keep the central piece below zero")
    budget = np.array([0.5 * _min_slope(c) for c in coefficients])
    for k in range(1, K):
        left, right = coefficients[k], coefficients[k - 1]
        left_end = legendre.legval(1.0, left)
        right_start = legendre.legval(-1.0, right)
        deficit = left_end - right_start
        if deficit <= 0.0:
            continue
        deficit += 4.0 * np.finfo(float).eps * max(abs(left_end), 1.0)
        take_left = min(budget[k], 0.5 * deficit)
        take_right = min(budget[k - 1], deficit - take_left)
        take_left = min(budget[k], deficit - take_right)
        if take_left + take_right < deficit:
            raise ValueError(f"cannot make the approximation monotone at breakpoint {k}")
        left[1] -= take_left
        right[1] -= take_right
        budget[k] -= take_left
        budget[k - 1] -= take_right


def build_inv_cdf_approx(kind: str, K: int) -> InvCdfApprox:
    """L2-optimal piecewise polynomial of degree 1 (linear) or 3 (cubic) on K dyadic intervals."""
    if kind not in APPROX_KINDS:
        raise ValueError(f"unknown approximation kind '{kind}' (choose from {', '.join(APPROX_KINDS)})")
    if isinstance(K, bool) or not isinstance(K, int) or K < 2 or K & (K - 1):
        raise ValueError(f"interval count must be a power of two >= 2 (got {K!r})")
    if K > MAX_INTERVALS:
        raise ValueError(f"interval count must be <= {MAX_INTERVALS} (got {K})")
    lower, upper = _piece_windows(K)
    coefficients = _project(K, APPROX_KINDS[kind], lower, upper)
    _repair_monotone(coefficients)
    coefficients.setflags(write=False)
    return InvCdfApprox(kind, K, lower, upper, coefficients)


def parse_approx(name: str) -> Optional[InvCdfApprox]:
    """`exact` gives None (use exact_inv_cdf); `linear:K` / `cubic:K` build an approximation."""
    key = name.strip().lower()
    if key == "exact":
        return None
    kind, sep, count = key.partition(":")
    if not sep:
        raise ValueError(f"invalid approximation '{name}': expected exact, linear:K or cubic:K")
    try:
        K = int(count)
    except ValueError as e:
        raise ValueError(f"invalid interval count in '{name}'") from e
    return build_inv_cdf_approx(kind, K)


def approx_inv_cdf(approx: InvCdfApprox, u: Real) -> Real:
    arr = np.atleast_1d(np.asarray(u, dtype=np.float64))
    _check_unit_interval(arr)
    out = approx.evaluate(arr)
    return float(out[0]) if np.ndim(u) == 0 else out.reshape(np.shape(u))


def gaussian_samples(u: np.ndarray, approx: Optional[InvCdfApprox]) -> np.ndarray:
    """Exact or approximate normals from uniforms in (0, 1)."""
    return _exact(u) if approx is None else approx.evaluate(u)


# ---------------------------------------------------------------------------
# Diagnostics
# ---------------------------------------------------------------------------

def _piece_rules(approx: InvCdfApprox):
    """Quadrature over the half line piece by piece: (x nodes, t nodes, u-measure weights)."""
    for k in range(approx.interval_count):
        x, t, w = _quadrature(approx.lower[k], approx.upper[k])
        yield k, x, t, w


def moment_diagnostics(approx: InvCdfApprox, p_max: int) -> List[float]:
    """E[Z~^p] for p = 1..p_max by Gauss quadrature (exact for these polynomial degrees)."""
    if not 1 <= p_max <= 8:
        raise ValueError(f"p_max must be in 1..8 (got {p_max})")
    moments = []
    for p in range(1, p_max + 1):
        total = 0.0
        for k, x, _, w in _piece_rules(approx):
            values = legendre.legval(x, approx.coefficients[k])
            total += float(np.sum(w * values ** p)) + float(np.sum(w * (-values) ** p))
        moments.append(total)
    return moments


def l2_error(approx: InvCdfApprox) -> float:
    """E[(Z - Z~)^2] by piecewise Gauss quadrature."""
    total = 0.0
    for k, x, t, w in _piece_rules(approx):
        residual = _lower_quantile(t) - legendre.legval(x, approx.coefficients[k])
        total += 2.0 * float(np.sum(w * residual ** 2))
    return total


def density_histogram(approx: Optional[InvCdfApprox], bins: int, n_samples: int, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sampled density of Z~ (or Z when approx is None): bin centres and densities."""
    if bins < 1 or n_samples < 1:
        raise ValueError("bins and n_samples must be positive")
    u = uniform_block(seed, np.arange(n_samples), 0)
    values = gaussian_samples(u, approx)
    bound = approx.support_bound if approx is not None else float(np.abs(values).max())
    density, edges = np.histogram(values, bins=bins, range=(-bound, bound), density=True)
    return 0.5 * (edges[:-1] + edges[1:]), density
