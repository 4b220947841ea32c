"""Continued fractions, Brjuno sums and near-parabolic perturbation schedules.

Rotation numbers are written ``theta = 1/(a1 + 1/(a2 + ...))`` with
convergents ``p_n/q_n`` from the usual recurrence seeded by
``p_{-1}=1, p_0=0, q_{-1}=0, q_0=1``. Denominators are tracked exactly while
they fit under a bit budget, and always on a logarithmic track, which is what
keeps Brjuno sums for super-exponential quotient rules computable.
"""

from __future__ import annotations

import math
import threading
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Sequence, Union

import mpmath

from .numerics import CostMeter, Oracle, PrecisionError, default_bits, mp_oracle

__all__ = [
    "Huge",
    "QValue",
    "RotationNumber",
    "PerturbationSchedule",
    "GATE_CONSTANT",
    "PI_GATE_CONSTANT",
    "DEFAULT_N_LIST",
    "RULES",
    "const1",
    "exp2q",
    "convergents",
    "brjuno_partial_sum",
    "make_high_type",
    "perturbation_schedule",
    "shared_dyadic_prefix",
    "format_cf",
    "parse_cf",
    "format_schedule",
    "parse_schedule",
]

# exact integers above this size are only followed on the log track
EXACT_BIT_CAP = 1 << 22
# q_n with log q_n above this cannot be materialised even as a float
LOG_TRACK_CAP = 2 ** 40


@dataclass(frozen=True)
class Huge:
    """A positive integer known only through its natural logarithm."""

    log: mpmath.mpf


Quotient = Union[int, Huge]


@dataclass(frozen=True)
class QValue:
    """A convergent denominator: exact when small enough, always with its log."""

    exact: int | None
    log: mpmath.mpf

    @property
    def value(self) -> mpmath.mpf:
        if self.exact is not None:
            return mpmath.mpf(self.exact)
        if self.log > LOG_TRACK_CAP:
            raise OverflowError("denominator beyond the range of the log track")
        return mpmath.exp(self.log)


Rule = Callable[[Sequence[QValue]], Quotient]


def const1(qs: Sequence[QValue]) -> int:
    return 1


def exp2q(qs: Sequence[QValue]) -> Quotient:
    """a_{n+1} = 2**q_n."""
    q = qs[-1]
    if q.exact is not None and q.exact <= 1 << 16:
        return 1 << q.exact
    return Huge(q.value * mpmath.log(2))


RULES: dict[str, Rule] = {"const1": const1, "exp2q": exp2q}


def _log_quotient(a: Quotient) -> mpmath.mpf:
    return a.log if isinstance(a, Huge) else mpmath.log(a)


class RotationNumber:
    """Continued-fraction expansion with lazily extended quotients.

    Either a finite list of partial quotients or a seed list plus a rule that
    produces ``a_{n+1}`` from the denominators ``q_1..q_n``.
    """

    def __init__(self, partial_quotients: Sequence[Quotient], rule: Rule | None = None,
                 bits: int | None = None, name: str = ""):
        for a in partial_quotients:
            if not isinstance(a, Huge) and a < 1:
                raise ValueError(f"partial quotients must be >= 1, got {a}")
        self._a: list[Quotient] = list(partial_quotients)
        self.rule = rule
        self.bits = bits or default_bits()
        self.name = name
        self._lock = threading.Lock()
        self._q: list[QValue] = []
        self._p: list[int | None] = []

    @property
    def partial_quotients(self) -> list[Quotient]:
        return list(self._a)

    def _extend(self, k: int) -> None:
        if len(self._a) >= k:
            return
        if self.rule is None:
            raise IndexError(f"{len(self._a)} partial quotients available, {k} requested")
        with self._lock:
            while len(self._a) < k:
                qs = self._denominators(len(self._a))
                with mpmath.workprec(self.bits):
                    a = self.rule(qs)
                if not isinstance(a, Huge) and a < 1:
                    raise ValueError(f"rule produced quotient {a} < 1")
                self._a.append(a)

    def quotients(self, k: int) -> list[Quotient]:
        self._extend(k)
        return self._a[:k]

    def _denominators(self, k: int) -> list[QValue]:
        """q_1..q_k, assuming k quotients are present."""
        with mpmath.workprec(self.bits):
            if not self._q:
                prev, cur = QValue(0, mpmath.mpf("-inf")), QValue(1, mpmath.mpf(0))
                p_prev, p_cur = 1, 0
                self._chain = [(prev, cur, p_prev, p_cur)]
            while len(self._q) < k:
                prev, cur, p_prev, p_cur = self._chain[-1]
                a = self._a[len(self._q)]
                if (cur.exact is not None and prev.exact is not None and not isinstance(a, Huge)
                        and a.bit_length() + cur.exact.bit_length() < EXACT_BIT_CAP):
                    qn = a * cur.exact + prev.exact
                    nxt = QValue(qn, mpmath.log(qn))
                    pn = a * p_cur + p_prev if p_cur is not None and p_prev is not None else None
                else:
                    la = _log_quotient(a)
                    gap = prev.log - la - cur.log
                    tail = mpmath.log1p(mpmath.exp(gap)) if gap > -4 * self.bits else mpmath.mpf(0)
                    nxt = QValue(None, la + cur.log + tail)
                    pn = None
                self._q.append(nxt)
                self._p.append(pn)
                self._chain.append((cur, nxt, p_cur, pn))
        return self._q[:k]

    def denominators(self, k: int) -> list[QValue]:
        self._extend(k)
        return self._denominators(k)

    def theta_fraction(self) -> Fraction:
        """Exact value of a finite expansion."""
        if self.rule is not None:
            raise ValueError("expansion is infinite")
        p, q = convergents(self, len(self._a))[-1]
        return Fraction(p, q)

    def approx(self, bits: int) -> mpmath.mpf:
        """theta within 2**-bits, using |theta - p_n/q_n| < 1/(q_n q_{n+1})."""
        if self.rule is None:
            f = self.theta_fraction()
            return mpmath.mpf(f.numerator) / f.denominator
        k = 1
        while True:
            qs = self.denominators(k + 1)
            if qs[-1].log + qs[-2].log > (bits + 2) * math.log(2):
                break
            k += 1
        p, q = convergents(self, k)[-1]
        with mpmath.workprec(bits + 16):
            return mpmath.mpf(p) / q

    def oracle(self, meter: CostMeter | None = None) -> Oracle:
        return Oracle(lambda bits: (self.approx(bits), mpmath.mpf(0)), meter or CostMeter(),
                      self.name or format_cf(self), kind="theta")


def convergents(r: RotationNumber, k: int) -> list[tuple[int, int]]:
    """First ``k`` convergents ``(p_n, q_n)``, exact and in lowest terms."""
    qs = r.denominators(k)
    out = []
    for p, q in zip(r._p[:k], qs):
        if p is None or q.exact is None:
            raise OverflowError("convergent too large for exact arithmetic; use the log track")
        out.append((p, q.exact))
    return out


def brjuno_partial_sum(r: RotationNumber, k: int) -> mpmath.mpf:
    """sum_{n=1}^{k} log(q_{n+1}) / q_n at the number's working precision."""
    if k < 1:
        raise ValueError("k must be >= 1")
    qs = r.denominators(k + 1)
    with mpmath.workprec(r.bits):
        total = mpmath.mpf(0)
        for n in range(k):
            total += qs[n + 1].log / qs[n].value
        return total


def make_high_type(rule: Rule | str, depth: int, bits: int | None = None) -> RotationNumber:
    """Expansion starting with a_1 = 1 and continued by ``rule`` to ``depth`` quotients."""
    if depth < 1:
        raise ValueError("depth must be >= 1")
    name = rule if isinstance(rule, str) else getattr(rule, "__name__", "rule")
    if isinstance(rule, str):
        rule = RULES[rule]
    r = RotationNumber([1], rule, bits, name=name)
    r.quotients(depth)
    if depth >= 2:
        sums = [brjuno_partial_sum(r, k) for k in range(1, depth)]
        if any(b <= a for a, b in zip(sums, sums[1:])):
            raise ArithmeticError("Brjuno partial sums failed to increase")
    return r


# -1/(eps q^2) + N -> sigma is the transit law for multipliers exp(2 pi i (p/q + eps));
# the c-family form of the same transit law carries pi instead.
GATE_CONSTANT = mpmath.mpf(1)
PI_GATE_CONSTANT = "pi"
DEFAULT_N_LIST = (100, 1000, 10000)


@dataclass(frozen=True)
class PerturbationSchedule:
    """Terms (eps_k, N_k) with -kappa/(eps_k q^2) + N_k = sigma for every k.

    ``N_k`` counts iterates of the first return map ``f^q``.
    """

    p: int
    q: int
    sigma: Fraction
    terms: tuple
    gate_constant: object = field(default=GATE_CONSTANT)
    bits: int = 128

    @property
    def kappa(self) -> mpmath.mpf:
        with mpmath.workprec(self.bits):
            return +mpmath.pi if self.gate_constant == "pi" else mpmath.mpf(self.gate_constant)

    def eps(self, k: int) -> mpmath.mpf:
        return self.terms[k][0]

    def N(self, k: int) -> int:
        return self.terms[k][1]

    def theta(self, k: int) -> mpmath.mpf:
        with mpmath.workprec(self.bits):
            return mpmath.mpf(self.p) / self.q + self.eps(k)

    def theta_oracle(self, k: int, meter: CostMeter | None = None) -> Oracle:
        p, q, N, sigma, gate = self.p, self.q, self.N(k), self.sigma, self.gate_constant

        def value():
            kappa = +mpmath.pi if gate == "pi" else mpmath.mpf(gate)
            return mpmath.mpf(p) / q + kappa / (q * q * (N - mpmath.mpf(sigma.numerator) / sigma.denominator))

        return mp_oracle(value, meter, f"{p}/{q}+sched(N={N},sigma={sigma})", kind="theta")

    def identity_residual(self, k: int) -> mpmath.mpf:
        with mpmath.workprec(self.bits):
            s = mpmath.mpf(self.sigma.numerator) / self.sigma.denominator
            return abs(-self.kappa / (self.eps(k) * self.q ** 2) + self.N(k) - s)


def _as_fraction(x) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, float):
        return Fraction(repr(x))
    return Fraction(x)


def perturbation_schedule(p: int, q: int, sigma=0, N_list: Sequence[int] = DEFAULT_N_LIST,
                          gate_constant=GATE_CONSTANT, bits: int = 128) -> PerturbationSchedule:
    """eps_k = kappa / (q^2 (N_k - sigma)); every term satisfies the schedule identity."""
    if q < 1 or math.gcd(p, q) != 1:
        raise ValueError(f"{p}/{q} is not a reduced fraction")
    if isinstance(sigma, complex):
        raise TypeError("schedules take real sigma only")
    sigma = _as_fraction(sigma)
    terms = []
    with mpmath.workprec(bits):
        kappa = +mpmath.pi if gate_constant == "pi" else mpmath.mpf(gate_constant)
        s = mpmath.mpf(sigma.numerator) / sigma.denominator
        for N in N_list:
            if N <= sigma:
                raise ValueError(f"N={N} must exceed sigma={sigma}")
            terms.append((kappa / (q * q * (N - s)), int(N)))
    return PerturbationSchedule(p, q, sigma, tuple(terms), gate_constant, bits)


def _floor_bounds(x, m: int, guard: int = 16) -> tuple[int, int]:
    """Lower and upper candidates for floor(2**m x)."""
    if isinstance(x, (int, Fraction)):
        v = Fraction(x) * (1 << m)
        f = v.numerator // v.denominator
        return f, f
    if isinstance(x, float):
        return _floor_bounds(Fraction(x), m)
    if isinstance(x, mpmath.mpf):
        man, exp = x.man_exp
        return _floor_bounds(Fraction(man) * Fraction(2) ** exp, m)
    if callable(x):
        bits = m + guard
        with mpmath.workprec(bits + 16):
            v = mpmath.mpf(x(bits))
            err = mpmath.ldexp(1, -bits)
            lo = int(mpmath.floor(mpmath.ldexp(v - err, m)))
            hi = int(mpmath.floor(mpmath.ldexp(v + err, m)))
        return lo, hi
    raise TypeError(f"cannot read binary digits of {type(x).__name__}")


def shared_dyadic_prefix(x, y, max_bits: int) -> int:
    """Largest m <= max_bits with floor(2**m x) == floor(2**m y).

    ``x`` and ``y`` are exact (int, Fraction, float, mpf) or callables
    ``bits -> approximation within 2**-bits``; if an approximation cannot
    settle the answer a ``PrecisionError`` is raised instead of truncating.
    """
    for v in (x, y):
        if not callable(v) and not (0 <= v < 1):
            raise ValueError("prefix comparison expects values in [0, 1)")
    xs, ys = _floor_bounds(x, max_bits), _floor_bounds(y, max_bits)
    answers = {max_bits - (a ^ b).bit_length() for a in set(xs) for b in set(ys)}
    if len(answers) != 1:
        raise PrecisionError("approximations too coarse to fix the shared prefix")
    return answers.pop()


def format_cf(r: RotationNumber, k: int | None = None) -> str:
    qs = r.quotients(k) if k is not None else r.partial_quotients
    if any(isinstance(a, Huge) for a in qs):
        raise OverflowError("cannot serialise quotients known only by their logarithm")
    return "CF 1: " + " ".join(str(a) for a in qs)


def parse_cf(line: str) -> RotationNumber:
    head, _, body = line.partition(":")
    if head.strip() != "CF 1":
        raise ValueError(f"bad CF header: {line!r}")
    return RotationNumber([int(t) for t in body.split()])


def format_schedule(s: PerturbationSchedule) -> str:
    lines = [f"SCHED 1 p={s.p} q={s.q} sigma={float(s.sigma)!r}"]
    for eps, N in s.terms:
        lines.append(f"N={N} eps_re={mpmath.nstr(eps, 40)} eps_im=0")
    return "\n".join(lines) + "\n"


def parse_schedule(text: str, gate_constant=GATE_CONSTANT) -> PerturbationSchedule:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    head = lines[0].split()
    if head[:2] != ["SCHED", "1"]:
        raise ValueError(f"bad SCHED header: {lines[0]!r}")
    f = dict(tok.split("=", 1) for tok in head[2:])
    Ns = [int(dict(tok.split("=", 1) for tok in ln.split())["N"]) for ln in lines[1:]]
    return perturbation_schedule(int(f["p"]), int(f["q"]), _as_fraction(float(f["sigma"])), Ns,
                                 gate_constant)
