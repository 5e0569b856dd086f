"""
Binary floating-point emulation with round-to-nearest-even on a binary64 carrier.

Values are always carried as binary64 (Python floats or numpy float64 arrays);
a PrecisionSpec only decides how many stored mantissa bits survive a rounding.
The exponent range is unbounded: overflow, underflow and subnormals of the
emulated format are not modelled, only its relative rounding error.

Every public operation accepts a scalar or an array and returns the same kind.
The `ArrayArithmetic` helper is the unchecked fast path used by the simulators.
"""
import json
import math
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Dict, Union

import importlib.resources as pkg_resources

import numpy as np

from . import presets as _presets_pkg

CARRIER_MANTISSA_BITS = 52
MAX_EMULATED_MANTISSA_BITS = 26
# widest format for which one binary64 rounding never lands on a false tie
SINGLE_ROUNDING_MANTISSA_BITS = 24
# Veltkamp splitter 2^27 + 1
_SPLITTER = 134217729.0

Real = Union[float, np.ndarray]


class NonFiniteOperandError(ArithmeticError):
    """An operand or result is NaN or infinite."""


class DomainError(ArithmeticError, ValueError):
    """Argument outside the mathematical domain of an operation."""


class NotRepresentableError(ValueError):
    """Operand is not exactly representable in the requested precision."""


@dataclass(frozen=True)
class PrecisionSpec:
    """Emulated binary format: `mantissa_bits` stored fraction bits, ties to even."""

    mantissa_bits: int
    name: str = field(default="", compare=False)

    def __post_init__(self):
        m = self.mantissa_bits
        if isinstance(m, bool) or not isinstance(m, int):
            raise TypeError(f"mantissa_bits must be an int (got {m!r})")
        if m != CARRIER_MANTISSA_BITS and not 1 <= m <= MAX_EMULATED_MANTISSA_BITS:
            raise ValueError(
                f"mantissa_bits must be in 1..{MAX_EMULATED_MANTISSA_BITS} "
                f"or {CARRIER_MANTISSA_BITS} for the carrier (got {m})"
            )
        if not self.name:
            object.__setattr__(self, "name", f"custom:{m}")

    @property
    def unit_roundoff(self) -> float:
        """Maximum relative error of one rounding, 2^-(m+1)."""
        return math.ldexp(1.0, -(self.mantissa_bits + 1))

    @property
    def is_carrier(self) -> bool:
        return self.mantissa_bits == CARRIER_MANTISSA_BITS


_PRESETS_RAW = json.loads(pkg_resources.files(_presets_pkg).joinpath("defaults.json").read_text())
PRESETS: Dict[str, PrecisionSpec] = {
    name: PrecisionSpec(bits, name) for name, bits in _PRESETS_RAW["precisions"].items()
}
CARRIER = PRESETS["fp64"]


def parse_precision(name: str) -> PrecisionSpec:
    """Resolve `bf16 | fp16 | fp22 | fp32 | fp64 | custom:m` to a PrecisionSpec."""
    key = name.strip().lower()
    if key in PRESETS:
        return PRESETS[key]
    if key.startswith("custom:"):
        try:
            bits = int(key.split(":", 1)[1])
        except ValueError as e:
            raise ValueError(f"invalid custom precision '{name}': expected custom:<bits>") from e
        return PrecisionSpec(bits, key)
    raise ValueError(f"unknown precision '{name}' (choose from {', '.join(PRESETS)} or custom:m)")


def _split(a):
    t = _SPLITTER * a
    hi = t - (t - a)
    return hi, a - hi


def _product_error(a, b, p):
    """Exact a*b - p for p = fl(a*b), barring overflow."""
    a_hi, a_lo = _split(a)
    b_hi, b_lo = _split(b)
    return ((a_hi * b_hi - p) + a_hi * b_lo + a_lo * b_hi) + a_lo * b_lo


class ArrayArithmetic:
    """
    Unchecked elementwise arithmetic on float64 arrays, each result rounded into `spec`.

    Rounding works on the binary64 bit pattern: add half an ULP of the target
    format (minus one when the kept least-significant bit is even) and clear the
    dropped bits. A carry out of the kept mantissa bumps the exponent, which is
    exactly the renormalisation a round-up needs.

    Up to 24 stored bits the binary64 result of +, -, *, / and sqrt rounds to
    the same value as the exact result. Above that the carrier can itself
    round onto a midpoint of the target grid, so each op also computes its
    exact residual (TwoSum, Dekker's TwoProduct) and a carrier midpoint with a
    nonzero residual is moved one carrier ULP towards the exact value before
    the final rounding.
    """

    __slots__ = ("spec", "_shift", "_one", "_half_minus_one", "_keep_mask", "_drop_mask", "_midpoint",
                 "_exact_ties")

    def __init__(self, spec: PrecisionSpec):
        self.spec = spec
        shift = CARRIER_MANTISSA_BITS - spec.mantissa_bits
        self._shift = np.uint64(shift)
        self._one = np.uint64(1)
        self._half_minus_one = np.uint64((1 << (shift - 1)) - 1) if shift else np.uint64(0)
        self._keep_mask = np.uint64(~((1 << shift) - 1) & 0xFFFFFFFFFFFFFFFF)
        self._drop_mask = np.uint64((1 << shift) - 1)
        self._midpoint = np.uint64(1 << (shift - 1)) if shift else np.uint64(0)
        self._exact_ties = spec.is_carrier or spec.mantissa_bits <= SINGLE_ROUNDING_MANTISSA_BITS

    def round(self, x: np.ndarray) -> np.ndarray:
        if self.spec.is_carrier:
            return x
        bits = np.ascontiguousarray(x, dtype=np.float64).view(np.uint64)
        lsb = (bits >> self._shift) & self._one
        return ((bits + (self._half_minus_one + lsb)) & self._keep_mask).view(np.float64)

    def _round_with_residual(self, r: np.ndarray, residual: np.ndarray) -> np.ndarray:
        """Round `r`, whose exact value is r + residual, breaking carrier-made ties by the residual sign."""
        r = np.ascontiguousarray(r, dtype=np.float64)
        on_midpoint = (r.view(np.uint64) & self._drop_mask) == self._midpoint
        nudge = on_midpoint & (residual != 0) & np.isfinite(residual)
        if nudge.any():
            r = np.where(nudge, np.nextafter(r, np.copysign(np.inf, residual)), r)
        return self.round(r)

    def add(self, x, y) -> np.ndarray:
        s = np.add(x, y)
        if self._exact_ties:
            return self.round(s)
        with np.errstate(invalid="ignore", over="ignore"):
            virtual = s - x
            residual = (x - (s - virtual)) + (y - virtual)
        return self._round_with_residual(s, residual)

    def sub(self, x, y) -> np.ndarray:
        if self._exact_ties:
            return self.round(np.subtract(x, y))
        return self.add(x, np.negative(y))

    def mul(self, x, y) -> np.ndarray:
        p = np.multiply(x, y)
        if self._exact_ties:
            return self.round(p)
        with np.errstate(invalid="ignore", over="ignore"):
            residual = _product_error(x, y, p)
        return self._round_with_residual(p, residual)

    def div(self, x, y) -> np.ndarray:
        q = np.divide(x, y)
        if self._exact_ties:
            return self.round(q)
        # x - q*y is exact; its sign times sign(y) is the sign of x/y - q
        with np.errstate(invalid="ignore", over="ignore", divide="ignore"):
            p = np.multiply(q, y)
            remainder = np.subtract(x, p) - _product_error(q, y, p)
            residual = np.where(np.signbit(y), -remainder, remainder)
        return self._round_with_residual(q, residual)

    def sqrt(self, x) -> np.ndarray:
        s = np.sqrt(x)
        if self._exact_ties:
            return self.round(s)
        with np.errstate(invalid="ignore", over="ignore"):
            p = np.multiply(s, s)
            residual = np.subtract(x, p) - _product_error(s, s, p)
        return self._round_with_residual(s, residual)


@lru_cache(maxsize=None)
def array_arithmetic(spec: PrecisionSpec) -> ArrayArithmetic:
    return ArrayArithmetic(spec)


def _as_carrier(x: Real) -> np.ndarray:
    return np.ascontiguousarray(x, dtype=np.float64)


def _restore(result: np.ndarray, *operands: Real) -> Real:
    if all(np.ndim(op) == 0 for op in operands):
        return float(result.reshape(-1)[0])
    return result


def _require_finite(arr: np.ndarray, what: str = "operand") -> None:
    if not np.isfinite(arr).all():
        raise NonFiniteOperandError(f"non-finite {what}")


def _checked(result: np.ndarray, *operands: Real) -> Real:
    _require_finite(result, "result")
    return _restore(result, *operands)


def _require_representable(arr: np.ndarray, spec: PrecisionSpec) -> None:
    if spec.is_carrier:
        return
    if not np.array_equal(array_arithmetic(spec).round(arr), arr):
        raise NotRepresentableError(f"operand not representable in {spec.name}")


def _operands(spec: PrecisionSpec, *values: Real):
    arrays = [_as_carrier(v) for v in values]
    for arr in arrays:
        _require_finite(arr)
        if __debug__:
            _require_representable(arr, spec)
    return arrays


def round_to_precision(x: Real, spec: PrecisionSpec) -> Real:
    """Nearest value with `spec.mantissa_bits` stored bits; ties go to the even mantissa."""
    arr = _as_carrier(x)
    _require_finite(arr)
    return _checked(array_arithmetic(spec).round(arr), x)


def is_representable(x: Real, spec: PrecisionSpec) -> bool:
    arr = _as_carrier(x)
    return bool(np.isfinite(arr).all() and np.array_equal(array_arithmetic(spec).round(arr), arr))


def fp_add(x: Real, y: Real, spec: PrecisionSpec) -> Real:
    xa, ya = _operands(spec, x, y)
    return _checked(array_arithmetic(spec).add(xa, ya), x, y)


def fp_sub(x: Real, y: Real, spec: PrecisionSpec) -> Real:
    xa, ya = _operands(spec, x, y)
    return _checked(array_arithmetic(spec).sub(xa, ya), x, y)


def fp_mul(x: Real, y: Real, spec: PrecisionSpec) -> Real:
    xa, ya = _operands(spec, x, y)
    return _checked(array_arithmetic(spec).mul(xa, ya), x, y)


def fp_div(x: Real, y: Real, spec: PrecisionSpec) -> Real:
    xa, ya = _operands(spec, x, y)
    if (ya == 0).any():
        raise DomainError("division by zero")
    return _checked(array_arithmetic(spec).div(xa, ya), x, y)


def fp_sqrt(x: Real, spec: PrecisionSpec) -> Real:
    (xa,) = _operands(spec, x)
    if (xa < 0).any():
        raise DomainError("square root of a negative operand")
    return _checked(array_arithmetic(spec).sqrt(xa), x)


def ulp_spacing(x: Real, spec: PrecisionSpec) -> Real:
    """Gap to the next representable of larger magnitude: 2^(k-m) for |x| in [2^k, 2^(k+1))."""
    arr = _as_carrier(x)
    _require_finite(arr)
    if (arr == 0).any():
        raise DomainError("ulp_spacing is undefined at zero (no smallest normal in the emulation)")
    _, exponent = np.frexp(np.abs(arr))
    return _restore(np.ldexp(1.0, exponent - 1 - spec.mantissa_bits), x)
