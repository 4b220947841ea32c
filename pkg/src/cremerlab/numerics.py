"""Exact dyadic values, parameter oracles with query pricing, and complex balls.

An oracle for a constant ``c`` answers a query at precision index ``n`` with a
dyadic ``d`` satisfying ``|c - d| < 2**-n`` and charges ``n`` units to its
meter. Complex balls carry a center at extended precision together with an
outward-rounded radius so that long iterations keep a rigorous enclosure.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Union

import mpmath

__all__ = [
    "DEFAULT_BITS",
    "PrecisionError",
    "OracleError",
    "DyadicComplex",
    "CostMeter",
    "Oracle",
    "ComplexBall",
    "ball_mul",
    "default_bits",
    "exact_oracle",
    "mp_oracle",
    "oracle_query",
]

DEFAULT_BITS = 128


def default_bits() -> int:
    """Working mantissa size; ``CREMERLAB_BITS`` overrides the default."""
    env = os.environ.get("CREMERLAB_BITS")
    if env:
        return int(env)
    return DEFAULT_BITS


class PrecisionError(ArithmeticError):
    """Raised when the working precision cannot certify a result."""


class OracleError(RuntimeError):
    """Raised when an oracle's value generator fails."""


@dataclass(frozen=True)
class DyadicComplex:
    """The value ``(re_num + i*im_num) / 2**exp``, kept in canonical form."""

    re_num: int
    im_num: int = 0
    exp: int = 0

    def __post_init__(self):
        if self.exp < 0:
            raise ValueError("exp must be non-negative")
        re, im, e = self.re_num, self.im_num, self.exp
        while e > 0 and re % 2 == 0 and im % 2 == 0:
            re //= 2
            im //= 2
            e -= 1
        object.__setattr__(self, "re_num", re)
        object.__setattr__(self, "im_num", im)
        object.__setattr__(self, "exp", e)

    @classmethod
    def from_fraction(cls, re: Fraction, im: Fraction = Fraction(0)) -> "DyadicComplex":
        re, im = Fraction(re), Fraction(im)
        den = math.lcm(re.denominator, im.denominator)
        if den & (den - 1):
            raise ValueError("not a dyadic rational")
        return cls(int(re * den), int(im * den), den.bit_length() - 1)

    @property
    def real(self) -> Fraction:
        return Fraction(self.re_num, 1 << self.exp)

    @property
    def imag(self) -> Fraction:
        return Fraction(self.im_num, 1 << self.exp)

    def to_complex(self) -> complex:
        return complex(float(self.real), float(self.imag))

    def to_mpc(self) -> mpmath.mpc:
        # exact as long as the working precision covers the numerators
        return mpmath.mpc(
            mpmath.ldexp(self.re_num, -self.exp), mpmath.ldexp(self.im_num, -self.exp)
        )

    def __str__(self) -> str:
        return f"({self.re_num}+{self.im_num}i)/2^{self.exp}"


@dataclass
class CostMeter:
    """Monotone unit accumulator; the only mutable object in the numerics layer."""

    units: int = 0

    def charge(self, k: int) -> None:
        if k < 0:
            raise ValueError("cost must be non-negative")
        self.units += int(k)

    def merge(self, other: "CostMeter") -> None:
        self.units += other.units


Approximator = Callable[[int], Union[Fraction, mpmath.mpf, mpmath.mpc, complex, tuple]]


def _round_half_up(x, n: int) -> int:
    """floor(2**n * x + 1/2) for an exact Fraction or an mpf of enough precision."""
    if isinstance(x, Fraction):
        y = x * (1 << n) + Fraction(1, 2)
        return y.numerator // y.denominator
    return int(mpmath.floor(mpmath.ldexp(x, n) + mpmath.mpf(0.5)))


@dataclass
class Oracle:
    """Answers precision-indexed queries about one complex constant.

    ``approx(bits)`` must return the constant to within ``2**-bits`` (exact
    ``Fraction`` pairs are also accepted). Answers are rounded half-up onto
    the ``2**-(n+1)`` grid, so every answer is within ``2**-n`` and two
    constants agreeing on their first ``m`` bits give identical answers for
    all ``n <= m - 2``.
    """

    approx: Approximator
    meter: CostMeter = field(default_factory=CostMeter)
    label: str = ""
    guard_bits: int = 64
    kind: str = ""  # which constant: "c", "lambda" or "theta"
    exact: Optional[tuple] = None  # (re, im) Fractions when the constant is a known rational

    def query(self, n: int) -> DyadicComplex:
        if n < 0:
            raise ValueError("precision index must be >= 0")
        try:
            raw = self.approx(n + self.guard_bits)
        except Exception as exc:  # generator failure is surfaced, never hidden
            raise OracleError(f"oracle {self.label!r} failed at n={n}: {exc}") from exc
        self.meter.charge(n)
        re, im = _split(raw, n + self.guard_bits)
        return DyadicComplex(_round_half_up(re, n + 1), _round_half_up(im, n + 1), n + 1)

    def with_meter(self, meter: CostMeter) -> "Oracle":
        return Oracle(self.approx, meter, self.label, self.guard_bits, self.kind, self.exact)

    def is_exact_answer(self, d: DyadicComplex) -> bool:
        """True when ``d`` is the constant itself, not merely an approximation."""
        return self.exact is not None and (d.real, d.imag) == self.exact


def _split(raw, bits: int):
    if isinstance(raw, tuple):
        return raw
    if isinstance(raw, (Fraction, int)):
        return Fraction(raw), Fraction(0)
    with mpmath.workprec(bits + 16):
        v = mpmath.mpmathify(raw)
        if isinstance(v, mpmath.mpc):
            return v.real, v.imag
        return v, mpmath.mpf(0)


def oracle_query(o: Oracle, n: int) -> DyadicComplex:
    return o.query(n)


def exact_oracle(re, im=0, meter: CostMeter | None = None, label: str = "", kind: str = "") -> Oracle:
    """Oracle for an exactly known rational constant."""
    re, im = Fraction(re), Fraction(im)
    return Oracle(lambda bits: (re, im), meter or CostMeter(), label or f"{re}+{im}i", kind=kind, exact=(re, im))


def mp_oracle(fn: Callable[[], object], meter: CostMeter | None = None, label: str = "",
              kind: str = "") -> Oracle:
    """Oracle from a zero-argument mpmath expression evaluated at the requested precision."""

    def approx(bits: int):
        with mpmath.workprec(bits + 32):
            v = mpmath.mpmathify(fn())
            if isinstance(v, mpmath.mpc):
                return (+v.real, +v.imag)
            return (+v, mpmath.mpf(0))

    return Oracle(approx, meter or CostMeter(), label, kind=kind)


class ComplexBall:
    """Closed disk ``{z : |z - center| <= radius}`` with outward-rounded arithmetic.

    Centers live at ``bits`` of mantissa. Every operation inflates the radius
    by a relative slack of ``2**(4 - bits)`` times the magnitudes involved,
    which dominates the rounding of both the center and the radius updates.
    """

    __slots__ = ("center", "radius", "bits")

    def __init__(self, center, radius=0, bits: int | None = None):
        self.bits = bits or default_bits()
        with mpmath.workprec(self.bits + 64):
            wide = mpmath.mpc(center)
            rad = mpmath.mpf(radius)
        with mpmath.workprec(self.bits):
            self.center = +wide
        with mpmath.workprec(self.bits + 64):
            err = abs(wide - self.center)
        with mpmath.workprec(self.bits):
            # round the radius up past the dropped center digits
            self.radius = mpmath.mpf(rad + err) * (1 + mpmath.ldexp(1, 2 - self.bits))
        self._check()

    @classmethod
    def _exact(cls, center: mpmath.mpc, radius: mpmath.mpf, bits: int) -> "ComplexBall":
        # center already rounded at ``bits``; radius already outward-rounded
        b = object.__new__(cls)
        b.center, b.radius, b.bits = center, radius, bits
        b._check()
        return b

    def _check(self) -> None:
        if not mpmath.isfinite(self.radius) or self.radius < 0:
            raise PrecisionError(f"invalid ball radius {self.radius}")
        if not (mpmath.isfinite(self.center.real) and mpmath.isfinite(self.center.imag)):
            raise PrecisionError("ball center overflowed")

    @classmethod
    def from_dyadic(cls, d: DyadicComplex, radius=0, bits: int | None = None) -> "ComplexBall":
        bits = bits or default_bits()
        with mpmath.workprec(max(bits, d.exp + max(abs(d.re_num), abs(d.im_num)).bit_length() + 2)):
            c = d.to_mpc()
        return cls(c, radius, bits)

    def _slack(self, mag) -> mpmath.mpf:
        return mpmath.ldexp(mag, 4 - self.bits)

    def _coerce(self, other) -> "ComplexBall":
        if isinstance(other, ComplexBall):
            return other
        return ComplexBall(other, 0, self.bits)

    def __add__(self, other) -> "ComplexBall":
        o = self._coerce(other)
        with mpmath.workprec(self.bits):
            c = self.center + o.center
            r = self.radius + o.radius + self._slack(abs(c))
        return ComplexBall._exact(c, r, self.bits)

    __radd__ = __add__

    def __neg__(self) -> "ComplexBall":
        with mpmath.workprec(self.bits):
            c = -self.center
        return ComplexBall._exact(c, self.radius, self.bits)

    def __sub__(self, other) -> "ComplexBall":
        return self + (-self._coerce(other))

    def __rsub__(self, other) -> "ComplexBall":
        return self._coerce(other) - self

    def __mul__(self, other) -> "ComplexBall":
        return ball_mul(self, self._coerce(other))

    __rmul__ = __mul__

    def sqr(self) -> "ComplexBall":
        return ball_mul(self, self)

    def abs_upper(self) -> mpmath.mpf:
        with mpmath.workprec(self.bits):
            m = abs(self.center)
            return m + self.radius + self._slack(m)

    def abs_lower(self) -> mpmath.mpf:
        with mpmath.workprec(self.bits):
            m = abs(self.center)
            return max(mpmath.mpf(0), m - self.radius - self._slack(m))

    def contains(self, z) -> bool:
        with mpmath.workprec(self.bits + 32):
            return abs(mpmath.mpc(z) - self.center) <= self.radius

    def __repr__(self) -> str:
        return f"ComplexBall({mpmath.nstr(self.center, 12)}, r={mpmath.nstr(self.radius, 3)})"


def ball_mul(a: ComplexBall, b: ComplexBall) -> ComplexBall:
    """Product ball: radius ``(|a|+ra)(|b|+rb) - |a||b|`` plus rounding slack."""
    bits = max(a.bits, b.bits)
    with mpmath.workprec(bits):
        c = a.center * b.center
        ma, mb = abs(a.center), abs(b.center)
        r = ma * b.radius + mb * a.radius + a.radius * b.radius
        r += mpmath.ldexp(ma * mb + abs(c) + r, 4 - bits)
    if not mpmath.isfinite(r) or r > mpmath.ldexp(1, 1 << 20):
        raise PrecisionError("ball product overflowed the working format")
    return ComplexBall._exact(c, r, bits)


def pi_ball(bits: int | None = None) -> ComplexBall:
    bits = bits or default_bits()
    with mpmath.workprec(bits):
        return ComplexBall._exact(mpmath.mpc(+mpmath.pi), mpmath.ldexp(1, 2 - bits), bits)


def expi2pi(theta: ComplexBall) -> ComplexBall:
    """Ball for ``exp(2*pi*i*theta)`` given a ball around a real ``theta``."""
    bits = theta.bits
    with mpmath.workprec(bits + 8):
        t = theta.center.real
        c = mpmath.expjpi(2 * t)
        # |d/dtheta| = 2*pi on the real line
        r = 2 * mpmath.pi * theta.radius * (1 + theta.radius * 8)
        r += mpmath.ldexp(1, 6 - bits) * (1 + abs(t))
    with mpmath.workprec(bits):
        return ComplexBall._exact(+c, +r, bits)

