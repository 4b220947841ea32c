"""The quadratic family in lambda-form ``f(z) = lam*z + z**2`` and c-form ``p(z) = z**2 + c``.

The two forms are conjugate through ``w = z - lam/2`` with ``c = lam/2 - lam**2/4``.
Periodic orbits are located by Newton's method on ``f^p(z) - z`` with the
derivative accumulated forward along the orbit.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import mpmath
import numpy as np

from .numerics import ComplexBall, PrecisionError, default_bits, expi2pi

__all__ = [
    "QuadraticMap",
    "PeriodicOrbit",
    "IterateResult",
    "NoOrbitError",
    "c_map",
    "lambda_map",
    "theta_map",
    "convert",
    "to_c_coordinate",
    "to_lambda_coordinate",
    "iterate",
    "escape_radius",
    "find_periodic_orbit",
    "small_cycle_search",
    "format_orbit",
]


class NoOrbitError(RuntimeError):
    """Newton's method failed to settle on a periodic orbit."""


@dataclass(frozen=True)
class QuadraticMap:
    """One quadratic polynomial; ``param_radius`` bounds the parameter's uncertainty."""

    form: str  # "lambda" or "c"
    parameter: mpmath.mpc
    theta: Optional[mpmath.mpf] = None
    param_radius: mpmath.mpf = mpmath.mpf(0)
    bits: int = field(default_factory=default_bits)

    def __post_init__(self):
        if self.form not in ("lambda", "c"):
            raise ValueError(f"unknown form {self.form!r}")

    @property
    def lam(self) -> mpmath.mpc:
        if self.form != "lambda":
            raise ValueError("c-form map has no distinguished multiplier")
        return self.parameter

    @property
    def c(self) -> mpmath.mpc:
        if self.form == "c":
            return self.parameter
        with mpmath.workprec(self.bits):
            lam = self.parameter
            return lam / 2 - lam * lam / 4

    def __call__(self, z):
        with mpmath.workprec(self.bits):
            z = mpmath.mpc(z)
            if self.form == "c":
                return z * z + self.parameter
            return self.parameter * z + z * z

    def derivative(self, z):
        with mpmath.workprec(self.bits):
            if self.form == "c":
                return 2 * z
            return self.parameter + 2 * z

    def param_ball(self) -> ComplexBall:
        return ComplexBall(self.parameter, self.param_radius, self.bits)

    def c_ball(self) -> ComplexBall:
        if self.form == "c":
            return self.param_ball()
        lam = self.param_ball()
        half = ComplexBall(mpmath.mpf(0.5), 0, self.bits)
        return lam * half - lam.sqr() * ComplexBall(mpmath.mpf(0.25), 0, self.bits)

    def describe(self) -> str:
        if self.theta is not None:
            return f"theta={mpmath.nstr(self.theta, 25)}"
        p = complex(self.parameter)
        return f"{self.form}={p.real!r},{p.imag!r}"


def c_map(c, bits: int | None = None, radius=0) -> QuadraticMap:
    bits = bits or default_bits()
    with mpmath.workprec(bits):
        return QuadraticMap("c", mpmath.mpc(c), None, mpmath.mpf(radius), bits)


def lambda_map(lam, bits: int | None = None, radius=0) -> QuadraticMap:
    bits = bits or default_bits()
    with mpmath.workprec(bits):
        return QuadraticMap("lambda", mpmath.mpc(lam), None, mpmath.mpf(radius), bits)


_EXACT_TURNS = {
    mpmath.mpf(0): mpmath.mpc(1), mpmath.mpf(0.25): mpmath.mpc(0, 1),
    mpmath.mpf(0.5): mpmath.mpc(-1), mpmath.mpf(0.75): mpmath.mpc(0, -1),
}


def theta_map(theta, bits: int | None = None, theta_radius=0) -> QuadraticMap:
    """``f_theta(z) = exp(2 pi i theta) z + z**2``; a theta ball yields a multiplier ball."""
    bits = bits or default_bits()
    with mpmath.workprec(bits + 16):
        t = mpmath.mpf(theta)
    if not theta_radius and t in _EXACT_TURNS:
        # multipliers 1, i, -1, -i are exact; keep the parabolic cases sharp
        return QuadraticMap("lambda", _EXACT_TURNS[t], t, mpmath.mpf(0), bits)
    ball = expi2pi(ComplexBall(t, theta_radius, bits))
    return QuadraticMap("lambda", ball.center, t, ball.radius, bits)


def convert(m: QuadraticMap, target: str):
    """Conjugate map in ``target`` form.

    lambda -> c gives one map. c -> lambda solves ``lam**2 - 2 lam + 4c = 0``
    and returns both roots; the caller picks the fixed point it wants at 0.
    """
    if target == m.form:
        return m
    with mpmath.workprec(m.bits):
        if target == "c":
            return QuadraticMap("c", m.c, None, _c_radius(m), m.bits)
        disc = mpmath.sqrt(1 - 4 * m.parameter)
        return tuple(
            QuadraticMap("lambda", 1 + s * disc, None, m.param_radius * 8, m.bits) for s in (-1, 1)
        )


def _c_radius(m: QuadraticMap) -> mpmath.mpf:
    if not m.param_radius:
        return mpmath.mpf(0)
    return m.c_ball().radius


def to_lambda_coordinate(m: QuadraticMap, z, lam=None):
    """c-form point z -> lambda-form point ``z - lam/2``."""
    lam = m.lam if lam is None else lam
    with mpmath.workprec(m.bits):
        return mpmath.mpc(z) - lam / 2


def to_c_coordinate(m: QuadraticMap, w, lam=None):
    lam = m.lam if lam is None else lam
    with mpmath.workprec(m.bits):
        return mpmath.mpc(w) + lam / 2


def escape_radius(m: QuadraticMap, sharp: bool = False) -> mpmath.mpf:
    """Radius M (in c-form coordinates) with ``|p_c(z)| > 2|z|`` whenever ``|z| > M``.

    Default ``|c| + 2``: ``|z|^2 - |c| - 2|z| = |z|(|z| - 2) - |c| > 0``.
    The sharper root of ``r^2 - 2r - |c| = 0`` is ``1 + sqrt(1 + |c|)``.
    """
    with mpmath.workprec(m.bits):
        cabs = m.c_ball().abs_upper()
        if sharp:
            return (1 + mpmath.sqrt(1 + cabs)) * (1 + mpmath.ldexp(1, 4 - m.bits))
        return cabs + 2


def escape_radius_lambda(m: QuadraticMap) -> mpmath.mpf:
    """Radius around 0 in lambda coordinates that contains the filled Julia set."""
    with mpmath.workprec(m.bits):
        return escape_radius(m) + abs(m.parameter) / 2 + m.param_radius


@dataclass
class IterateResult:
    ball: ComplexBall
    steps: int
    escaped: bool


def _step_ball(m: QuadraticMap, z: ComplexBall, par: ComplexBall) -> ComplexBall:
    if m.form == "c":
        return z.sqr() + par
    return par * z + z.sqr()


def iterate(m: QuadraticMap, z0, n: int, stop_on_escape: bool = True) -> IterateResult:
    """Enclosure of ``f^n(z0)`` for every point of the ball ``z0``.

    Stops early once the orbit is certified to escape: the lower modulus
    bound (in c-form coordinates) exceeds the escape radius.
    """
    if n < 0:
        raise ValueError("n must be >= 0")
    z = z0 if isinstance(z0, ComplexBall) else ComplexBall(z0, 0, m.bits)
    par = m.param_ball()
    M = escape_radius(m)
    half_lam = None if m.form == "c" else par * ComplexBall(mpmath.mpf(0.5), 0, m.bits)
    for k in range(n):
        if stop_on_escape and _escaped(z, half_lam, M):
            return IterateResult(z, k, True)
        z = _step_ball(m, z, par)
        if z.radius > 1 and not _escaped(z, half_lam, M):
            raise PrecisionError(f"ball radius {mpmath.nstr(z.radius, 3)} > 1 after {k + 1} steps; raise the mantissa")
    return IterateResult(z, n, stop_on_escape and _escaped(z, half_lam, M))


def _escaped(z: ComplexBall, half_lam, M) -> bool:
    zc = z if half_lam is None else z + half_lam
    return zc.abs_lower() > M


@dataclass(frozen=True)
class PeriodicOrbit:
    points: tuple
    period: int
    multiplier: mpmath.mpc
    residual: mpmath.mpf
    minimal_period: int

    @property
    def collapsed(self) -> bool:
        return self.minimal_period < self.period

    def max_modulus(self) -> mpmath.mpf:
        return max(abs(z) for z in self.points)

    def min_modulus(self) -> mpmath.mpf:
        return min(abs(z) for z in self.points)


def _newton_mp(m: QuadraticMap, p: int, z, tol, max_steps: int, deflate_zero: bool):
    with mpmath.workprec(m.bits):
        z = mpmath.mpc(z)
        for _ in range(max_steps):
            w, d = z, mpmath.mpc(1)
            for _ in range(p):
                d *= m.derivative(w)
                w = m(w)
            F, dF = w - z, d - 1
            if deflate_zero:
                # G = F/z removes the fixed point at the origin
                G, dG = F / z, (dF * z - F) / (z * z)
            else:
                G, dG = F, dF
            if dG == 0:
                raise NoOrbitError("zero derivative in Newton step")
            step = G / dG
            z -= step
            if not (mpmath.isfinite(z.real) and mpmath.isfinite(z.imag)) or abs(z) > 1e6:
                raise NoOrbitError("Newton iterate diverged")
            if abs(step) <= tol * mpmath.mpf(2) ** -20 * max(abs(z), mpmath.ldexp(1, -m.bits // 2)):
                return z
        raise NoOrbitError(f"no convergence in {max_steps} Newton steps")


def _orbit_from(m: QuadraticMap, p: int, z0, tol) -> PeriodicOrbit:
    with mpmath.workprec(m.bits):
        pts = [mpmath.mpc(z0)]
        mult = mpmath.mpc(1)
        for _ in range(p - 1):
            mult *= m.derivative(pts[-1])
            pts.append(m(pts[-1]))
        mult *= m.derivative(pts[-1])
        residual = abs(m(pts[-1]) - pts[0])
        minimal = p
        for k in range(1, p):
            if p % k == 0 and abs(pts[k] - pts[0]) < 10 * tol * max(1, abs(pts[0])):
                minimal = k
                break
    return PeriodicOrbit(tuple(pts), p, mult, residual, minimal)


def find_periodic_orbit(m: QuadraticMap, p: int, seed, tol=1e-25, max_steps: int = 200,
                        deflate_zero: bool = False) -> PeriodicOrbit:
    """Newton on ``f^p(z) - z`` from ``seed``; residual must end below ``tol``."""
    if p < 1 or tol <= 0:
        raise ValueError("need p >= 1 and tol > 0")
    z = _newton_mp(m, p, seed, tol, max_steps, deflate_zero)
    orbit = _orbit_from(m, p, z, tol)
    if orbit.residual >= tol * max(1, orbit.max_modulus()):
        raise NoOrbitError(f"residual {mpmath.nstr(orbit.residual, 3)} above tolerance")
    return orbit


def _newton_batch(lam: complex, p: int, seeds: np.ndarray, steps: int = 60) -> np.ndarray:
    """Vectorised float Newton on (f^p(z) - z)/z in lambda form; returns converged seeds."""
    z = seeds.astype(np.complex128)
    with np.errstate(all="ignore"):
        for _ in range(steps):
            w = z.copy()
            d = np.ones_like(z)
            for _ in range(p):
                d *= lam + 2 * w
                w = lam * w + w * w
            F, dF = w - z, d - 1
            G = F / z
            dG = (dF * z - F) / (z * z)
            z = z - G / dG
    ok = np.isfinite(z) & (np.abs(z) < 10)
    return z[ok]


def small_cycle_search(m: QuadraticMap, n: int, P: int, tol=None) -> Optional[PeriodicOrbit]:
    """A non-zero cycle of period <= P inside ``0 < |z| <= 2**-n``, or None.

    None only means nothing was found up to (P, n, precision); it is never a
    certificate of absence.
    """
    if m.form != "lambda":
        raise ValueError("small-cycle search needs the lambda form")
    r = mpmath.ldexp(1, -n)
    if n > m.bits - 24:
        raise PrecisionError(f"radius 2^-{n} is below what {m.bits}-bit Newton can resolve; raise the mantissa")
    tol = tol or mpmath.ldexp(1, -(m.bits - 24))
    lam = complex(m.parameter)
    found: dict[tuple, PeriodicOrbit] = {}
    for p in range(1, P + 1):
        angles = np.exp(2j * np.pi * (np.arange(8 * P) + 0.5) / (8 * P))
        seeds = np.concatenate([angles * float(r) / 2, angles * float(r)])
        for cand in _newton_batch(lam, p, seeds):
            if cand == 0 or abs(cand) > 2 * float(r):
                continue
            try:
                orb = find_periodic_orbit(m, p, complex(cand), tol=tol, deflate_zero=True)
            except NoOrbitError:
                continue
            if orb.collapsed or orb.min_modulus() == 0 or orb.max_modulus() > r:
                continue
            # cycles are equal as point sets; compare on a grid well below r
            key = (p,) + tuple(sorted((round(float(z.real) / float(r), 6),
                                       round(float(z.imag) / float(r), 6)) for z in orb.points))
            found.setdefault(key, orb)
    if not found:
        return None
    return min(found.values(), key=lambda o: (o.max_modulus(), o.period,
                                              float(mpmath.arg(min(o.points, key=abs)))))


def format_orbit(o: PeriodicOrbit) -> str:
    mu = complex(o.multiplier)
    lines = [f"ORBIT p={o.period} mult={mu.real!r},{mu.imag!r}"]
    for z in o.points:
        lines.append(f"{mpmath.nstr(z.real, 30)} {mpmath.nstr(z.imag, 30)}")
    return "\n".join(lines) + "\n"
