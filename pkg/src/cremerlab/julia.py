"""Set-computers for filled Julia sets and Julia sets on dyadic grids.

A set-computer answers, for a grid point ``z`` at resolution ``n``, whether
``z`` lies within ``2**-(n+2)`` of the set (1), at least ``2 * 2**-(n+2)``
away (0), or gives up because its per-cell budget ran out. Parameters are
only ever seen through an :class:`~cremerlab.numerics.Oracle`, and every
query and every map application is charged to the oracle's meter.

The escape-time computer iterates a disk of radius ``2**-(n+2)`` around each
grid point in float64 ball arithmetic (outward-rounded). A cell is 0 only
when the whole disk is certified to leave ``|z| <= M``. It is 1 either when
the disk lands inside a certified trap (a disk mapped into itself by some
iterate) or when the budget runs out; the latter cells are reported as
exhausted rather than silently counted as decided.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional

import mpmath
import numba
import numpy as np
from scipy import ndimage

from .dyadic_set import DyadicSet, atomic_write, grid_range, pitch
from .numerics import ComplexBall, CostMeter, Oracle, PrecisionError, exact_oracle, expi2pi
from .quadratic import NoOrbitError, QuadraticMap, c_map, find_periodic_orbit

__all__ = [
    "EXHAUSTED",
    "UndecidedError",
    "ExceptionalPointError",
    "ParameterBall",
    "SetComputer",
    "ApproxResult",
    "PointCloud",
    "map_oracle",
    "parameter_ball",
    "find_traps",
    "escape_time_computer",
    "constant_computer",
    "sampled_escape_computer",
    "run_computer",
    "escape_time_filled",
    "inverse_iteration",
    "rasterize",
    "boundary_extract",
    "h_value",
    "timed_run",
    "format_pgm",
    "format_meta",
    "write_pgm",
]

EXHAUSTED = -1

# raster codes
ZERO, ONE, OUT_OF_BUDGET, OUT_OF_PRECISION = 0, 1, 2, 3

U = 2.0 ** -50  # dominates float64 rounding in one ball step
EXTENT_BITS = 8  # coarse, unmetered query used only to size the grid


class UndecidedError(LookupError):
    """The computer gave up on this grid point."""


class ExceptionalPointError(ValueError):
    """Backward orbit of an exceptional point: it is its own only preimage."""

    def __init__(self, msg: str, points):
        super().__init__(msg)
        self.points = points


def default_param_bits(n: int) -> int:
    return n + 6


# ---------------------------------------------------------------- parameters


def map_oracle(m: QuadraticMap, meter: CostMeter | None = None) -> Oracle:
    """Oracle for the constant that defines ``m`` (theta, lambda or c)."""
    meter = meter or CostMeter()
    if m.theta is not None:
        # a theta map stores its angle as an exact binary fraction
        t = _mpf_fraction(m.theta)
        return exact_oracle(t, 0, meter, f"theta={mpmath.nstr(m.theta, 20)}", "theta")
    if m.param_radius:
        raise ValueError("an uncertain parameter has no oracle; pass its defining constant instead")
    p = m.parameter
    return exact_oracle(_mpf_fraction(p.real), _mpf_fraction(p.imag), meter, f"{m.form}={complex(p)}", m.form)


def _mpf_fraction(x) -> Fraction:
    x = mpmath.mpf(x)
    man, exp = x.man_exp  # unsigned mantissa
    v = Fraction(int(man)) * Fraction(2) ** int(exp)
    return -v if x < 0 else v


_TURNS = {
    Fraction(0): mpmath.mpc(1), Fraction(1, 4): mpmath.mpc(0, 1),
    Fraction(1, 2): mpmath.mpc(-1), Fraction(3, 4): mpmath.mpc(0, -1),
}


@dataclass(frozen=True)
class ParameterBall:
    """Float view of an oracle answer, in c-form coordinates.

    ``c`` and ``shift`` (``lam/2``, zero for c-form) carry outward radii
    ``rc`` and ``rshift``. Grid points of a lambda-form map live at
    ``w``; the iteration runs at ``w + shift``.
    """

    c: complex
    rc: float
    shift: complex
    rshift: float
    kind: str
    exact: bool
    query_bits: int

    @property
    def escape_radius(self) -> float:
        return _up(abs(self.c) * (1 + U) + self.rc + 2.0)

    @property
    def extent(self) -> float:
        """Half-width of a square (in the map's own coordinates) containing the filled set."""
        return _up(self.escape_radius + abs(self.shift) * (1 + U) + self.rshift)


def _up(x: float) -> float:
    return math.nextafter(x, math.inf)


def _float_ball(b: ComplexBall) -> tuple[complex, float]:
    z = complex(b.center)
    with mpmath.workprec(b.bits + 8):
        err = abs(b.center - mpmath.mpc(z))
        r = b.radius + err
    if r == 0:
        return z, 0.0
    return z, _up(float(r) * (1 + U))


def parameter_ball(oracle: Oracle, p: int, bits: int = 128) -> ParameterBall:
    """Query ``oracle`` at precision ``p`` (charged) and build the parameter ball.

    Half-up rounding on the ``2**-(p+1)`` grid is off by at most ``2**-(p+2)``
    per component, so ``2**-(p+1)`` bounds the modulus error. An answer that
    equals a known rational constant carries no error at all.
    """
    d = oracle.query(p)
    exact = oracle.is_exact_answer(d)
    rad = 0 if exact else mpmath.ldexp(1, -(p + 1))
    kind = oracle.kind or "c"
    if kind == "theta":
        if exact and d.real in _TURNS:
            lam = ComplexBall(_TURNS[d.real], 0, bits)
        else:
            with mpmath.workprec(bits):
                t = ComplexBall.from_dyadic(d, 0, bits).center.real
            lam = expi2pi(ComplexBall(t, rad, bits))
            exact = False
    else:
        base = ComplexBall.from_dyadic(d, rad, bits)
        lam = base if kind == "lambda" else None
    if lam is None:
        c_ball, shift_ball = base, None
    elif exact:
        # Gaussian-integer multipliers: c and lam/2 are exact binary fractions
        with mpmath.workprec(bits):
            c_ball = ComplexBall._exact(lam.center / 2 - lam.center ** 2 / 4, mpmath.mpf(0), bits)
            shift_ball = ComplexBall._exact(lam.center / 2, mpmath.mpf(0), bits)
    else:
        half = ComplexBall(mpmath.mpf(0.5), 0, bits)
        c_ball = lam * half - lam.sqr() * ComplexBall(mpmath.mpf(0.25), 0, bits)
        shift_ball = lam * half
    c, rc = _float_ball(c_ball)
    shift, rshift = _float_ball(shift_ball) if shift_ball is not None else (0j, 0.0)
    return ParameterBall(c, rc, shift, rshift, kind, exact, p)


def grid_cells(pb: ParameterBall, n: int):
    """Index arrays (I, J) of the grid covering ``[-L, L]**2``, row-major with j outer."""
    L = pb.extent
    k = grid_range(n, -L, L)
    i = np.arange(k.start, k.stop, dtype=np.int64)
    J, I = np.meshgrid(i, i, indexing="ij")
    return I, J


def _extent_ball(oracle: Oracle, bits: int = 128) -> ParameterBall:
    # sizing the grid is the harness's job, not the computer's: no charge
    return parameter_ball(oracle.with_meter(CostMeter()), EXTENT_BITS, bits)


# ---------------------------------------------------------------- traps


def find_traps(pb: ParameterBall, bits: int = 128, max_period: int = 64) -> list[tuple[float, float, float]]:
    """Certified trap disks ``(x, y, rho)`` in c-coordinates.

    A trap is a disk ``D`` with ``f^p(D)`` inside ``D`` for every parameter in
    the ball, so any orbit that enters ``D`` is bounded. Attracting cycles are
    located from the critical orbit; an exactly parabolic ``c = 1/4`` gets the
    invariant disk ``|z - 1/4| < 1/4`` bordering the fixed point.
    """
    traps = []
    if pb.rc == 0 and pb.c == 0.25:
        traps.append((0.25, 0.0, 0.25))
        return traps
    M = pb.escape_radius
    z = 0j
    orbit = []
    for _ in range(4000):
        z = z * z + pb.c
        if abs(z) > M:
            return traps
        orbit.append(z)
    tail = orbit[-(max_period + 1):]
    period = next((p for p in range(1, max_period + 1) if abs(tail[-1] - tail[-1 - p]) < 1e-9), None)
    if period is None:
        return traps
    m = c_map(pb.c, bits)
    try:
        o = find_periodic_orbit(m, period, tail[-1], tol=1e-30)
    except NoOrbitError:
        return traps
    if abs(o.multiplier) >= 1:
        return traps
    centre = complex(o.points[0])
    cball = ComplexBall(pb.c, pb.rc, bits)
    with mpmath.workprec(bits):
        for k in range(1, 41):
            rho = mpmath.ldexp(1, -k)
            try:
                b = ComplexBall(centre, rho, bits)
                for _ in range(o.period):
                    b = b.sqr() + cball
                inside = abs(b.center - mpmath.mpc(centre)) + b.radius < rho
            except PrecisionError:
                inside = False
            if inside:
                traps.append((centre.real, centre.imag, float(rho)))
                break
    return traps


# ---------------------------------------------------------------- escape time


@numba.njit(cache=True)
def _escape_kernel(x0, y0, h, extra, cr, ci, rc, M, traps, max_steps, levels, status, used):
    cabs = math.hypot(cr, ci)
    root2 = math.sqrt(2.0) * (1 + U)
    cap = 4 * levels + 4
    sx = np.empty(cap)
    sy = np.empty(cap)
    sl = np.empty(cap, np.int64)
    for k in range(x0.size):
        sx[0], sy[0], sl[0] = x0[k], y0[k], 0
        sp = 1
        u = 0
        trapped = False
        blown = False
        starved = False
        while sp > 0:
            sp -= 1
            qx, qy, lev = sx[sp], sy[sp], sl[sp]
            if lev == 0:
                r = h + extra[k]
            else:
                r = h / 2.0 ** lev * root2 + extra[k] + U * (abs(qx) + abs(qy))
            x, y = qx, qy
            outcome = 0  # 0 escaped, 1 trapped, 2 out of budget, 3 blown
            while True:
                mod = math.hypot(x, y)
                if mod * (1 - U) - r > M:
                    break
                hit = False
                for t in range(traps.shape[0]):
                    if math.hypot(x - traps[t, 0], y - traps[t, 1]) * (1 + U) + r < traps[t, 2] * (1 - U):
                        hit = True
                        break
                if hit:
                    outcome = 1
                    break
                # a ball swallowing |w| <= M contains the whole filled set and can never clear M
                if r >= mod * (1 + U) + M:
                    outcome = 3
                    break
                if u >= max_steps[k]:
                    outcome = 2
                    break
                u += 1
                r = (2 * mod * r * (1 + U) + r * r + rc + U * (mod * mod + cabs)) * (1 + U)
                x, y = x * x - y * y + cr, 2 * x * y + ci
            # every piece is run out, so neither verdict nor cost depends on visiting order
            if outcome == 1:
                trapped = True
            elif outcome == 2:
                starved = True
                break
            elif outcome == 3:
                if lev >= levels:
                    blown = True
                else:
                    side = h / 2.0 ** (lev + 1)
                    for dx, dy in ((1.0, 1.0), (-1.0, 1.0), (1.0, -1.0), (-1.0, -1.0)):
                        sx[sp], sy[sp], sl[sp] = qx + dx * side, qy + dy * side, lev + 1
                        sp += 1
        if starved:
            state = OUT_OF_BUDGET
        elif trapped:
            state = ONE
        elif blown:
            state = OUT_OF_PRECISION
        else:
            state = ZERO
        status[k] = state
        used[k] = u


def _run_cells(x0, y0, h: float, extra, pb: ParameterBall, traps, max_steps: int, levels: int = 3):
    """Escape-time verdicts for many cells; returns raster codes and map applications per cell.

    Cell ``k`` starts as the disk of radius ``h + extra[k]`` about ``(x0, y0)``.
    A disk that swallows ``|w| <= M`` cannot be certified any more, so the cell
    restarts as four sub-disks covering its bounding square, down to ``levels``
    halvings. Every piece is followed until it escapes, lands in a trap or
    blows up. The cell is 1 if some piece is trapped, 0 if all escape, and
    exhausted when the budget runs out or only finest pieces that blew up
    remain undecided. Every piece's steps are charged to its cell.
    """
    x0 = np.ascontiguousarray(x0, float).ravel()
    y0 = np.ascontiguousarray(y0, float).ravel()
    extra = np.ascontiguousarray(np.broadcast_to(np.asarray(extra, float), x0.shape))
    tr = np.array(traps, float).reshape(-1, 3)
    steps = np.maximum(np.broadcast_to(np.asarray(max_steps, np.int64), x0.shape), 0).astype(np.int64)
    status = np.empty(x0.size, np.int8)
    used = np.empty(x0.size, np.int64)
    _escape_kernel(x0, y0, float(h), extra, pb.c.real, pb.c.imag, pb.rc, pb.escape_radius, tr,
                   steps, int(levels), status, used)
    return status, used


@dataclass
class SetComputer:
    """A budgeted machine answering 1, 0 or :data:`EXHAUSTED` per grid point.

    ``bulk`` optionally evaluates many cells at once and must agree exactly,
    decisions and cost, with calling ``compute`` cell by cell.
    """

    name: str
    compute: Callable[[int, tuple, Oracle, int], int]
    budget: int
    bulk: Optional[Callable] = None
    options: dict = field(default_factory=dict)


def _cell_balls(n: int, I, J, pb: ParameterBall):
    h = pitch(n)
    x = I * h + pb.shift.real
    y = J * h + pb.shift.imag
    # grid coordinates are exact; the shift and its rounding widen the disk
    extra = pb.rshift + (U * (np.abs(x) + np.abs(y)) if pb.shift else 0.0)
    return x, y, h, np.broadcast_to(np.asarray(extra, float), x.shape).copy()


def escape_time_computer(budget: int, param_bits: Callable[[int], int] = default_param_bits,
                         bits: int = 128, levels: int = 3, max_param_bits: int = 64) -> SetComputer:
    """Escape-time set-computer for filled Julia sets with ``budget`` units per cell.

    A cell first queries the parameter at ``param_bits(n)``. If its finest
    sub-disks still blow up while the parameter is only approximately known,
    it asks again at twice the precision (up to ``max_param_bits``) and starts
    over. Queries cost their precision index, map applications one unit each,
    and everything a cell spends counts against its own budget.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    trap_cache: dict = {}

    def traps_for(pb):
        key = (pb.c, pb.rc)
        if key not in trap_cache:
            trap_cache[key] = find_traps(pb, bits)
        return trap_cache[key]

    def schedule(n):
        p = param_bits(n)
        out = [p]
        while 2 * out[-1] <= max_param_bits:
            out.append(2 * out[-1])
        return out

    def run(n, I, J, oracle, budget_):
        I, J = np.asarray(I).ravel(), np.asarray(J).ravel()
        status = np.full(I.size, OUT_OF_BUDGET, np.int8)
        spent = np.zeros(I.size, np.int64)
        pending = np.arange(I.size)
        for p in schedule(n):
            if not pending.size:
                break
            pb = parameter_ball(oracle, p, bits)
            # each pending cell makes this same query on its own
            oracle.meter.charge(p * (pending.size - 1))
            spent[pending] += p
            x, y, h, extra = _cell_balls(n, I[pending], J[pending], pb)
            st, used = _run_cells(x, y, h, extra, pb, traps_for(pb), budget_ - spent[pending], levels)
            oracle.meter.charge(int(used.sum()))
            spent[pending] += used
            status[pending] = st
            if pb.exact:
                break
            pending = pending[(st == OUT_OF_PRECISION) & (spent[pending] < budget_)]
        return status, spent

    def compute(n, z, oracle, budget_=budget):
        status, _ = run(n, [z[0]], [z[1]], oracle, budget_)
        return {ZERO: 0, ONE: 1}.get(int(status[0]), EXHAUSTED)

    def bulk(n, I, J, oracle, budget_=budget):
        status, _ = run(n, I, J, oracle, budget_)
        return status.reshape(np.shape(I)), None

    return SetComputer("escape-time", compute, budget, bulk,
                       {"param_bits": param_bits, "bits": bits, "levels": levels,
                        "max_param_bits": max_param_bits, "run": run})


def constant_computer(value: int) -> SetComputer:
    """Answers ``value`` everywhere, at one unit per grid point and no queries."""
    if value not in (0, 1):
        raise ValueError("a constant computer answers 0 or 1")

    def compute(n, z, oracle, budget=1):
        oracle.meter.charge(1)
        return value

    def bulk(n, I, J, oracle, budget=1):
        oracle.meter.charge(I.size)
        return np.full(I.shape, ONE if value else ZERO, np.int8), None

    return SetComputer(f"constant-{value}", compute, 1, bulk)


@numba.njit(cache=True)
def _center_kernel(x0, y0, cr, ci, M, max_steps, status, used):
    M2 = M * M
    for k in range(x0.size):
        x, y = x0[k], y0[k]
        u = 0
        state = OUT_OF_BUDGET
        while u < max_steps[k]:
            if x * x + y * y > M2:
                state = ZERO
                break
            x, y = x * x - y * y + cr, 2 * x * y + ci
            u += 1
        if state == OUT_OF_BUDGET and x * x + y * y > M2:
            state = ZERO
        status[k] = state
        used[k] = u


def full_param_bits(n: int) -> int:
    """Parameter precision for computers without a certificate to steer refinement."""
    return 64


def sampled_escape_computer(budget: int, param_bits: Callable[[int], int] = full_param_bits,
                            bits: int = 128) -> SetComputer:
    """Uncertified escape time: only the cell center is iterated, in floating point.

    A cell is 0 when its center's orbit leaves the escape radius within the
    budget and otherwise 1 with the budget recorded as exhausted. This is the
    plain pixel-center algorithm; it resolves thin features that ball
    arithmetic cannot, at the price of certifying nothing.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")

    def run(n, I, J, oracle, budget_):
        I, J = np.asarray(I).ravel(), np.asarray(J).ravel()
        p = param_bits(n)
        pb = parameter_ball(oracle, p, bits)
        oracle.meter.charge(p * max(I.size - 1, 0))
        x, y, _, _ = _cell_balls(n, I, J, pb)
        status = np.empty(I.size, np.int8)
        used = np.empty(I.size, np.int64)
        steps = np.full(I.size, max(budget_ - p, 0), np.int64)
        _center_kernel(np.ascontiguousarray(x, float), np.ascontiguousarray(y, float),
                       pb.c.real, pb.c.imag, pb.escape_radius, steps, status, used)
        oracle.meter.charge(int(used.sum()))
        return status, used

    def compute(n, z, oracle, budget_=budget):
        status, _ = run(n, [z[0]], [z[1]], oracle, budget_)
        return 0 if status[0] == ZERO else EXHAUSTED

    def bulk(n, I, J, oracle, budget_=budget):
        status, used = run(n, I, J, oracle, budget_)
        return status.reshape(np.shape(I)), used.reshape(np.shape(I))

    return SetComputer("escape-sampled", compute, budget, bulk,
                       {"param_bits": param_bits, "bits": bits, "run": run})


# ---------------------------------------------------------------- results


@dataclass(eq=False)
class ApproxResult:
    """Outcome of running a set-computer over the whole grid.

    ``set`` holds every cell answered 1, including exhausted cells, which are
    also listed in ``exhausted_cells``. ``status`` is the raster (row ``j``,
    column ``i``) with 0/1 for decided cells and 2/3 for cells that ran out
    of budget or of working precision.
    """

    set: DyadicSet
    n: int
    exhausted_cells: tuple
    total_cost: int
    computer: str
    parameters: dict
    status: np.ndarray = field(repr=False)
    origin: tuple = (0, 0)

    @property
    def cell_count(self) -> int:
        return int(self.status.size)

    @property
    def exhausted_fraction(self) -> float:
        return len(self.exhausted_cells) / max(self.cell_count, 1)

    @property
    def decided_ones(self) -> frozenset:
        return frozenset(self.set.cells) - frozenset(self.exhausted_cells)

    def code_at(self, z) -> Optional[int]:
        i, j = z[0] - self.origin[0], z[1] - self.origin[1]
        rows, cols = self.status.shape
        if 0 <= j < rows and 0 <= i < cols:
            return int(self.status[j, i])
        return None


def _result_from_raster(status, I, J, n, cost, name, params) -> ApproxResult:
    ones = (status != ZERO).ravel()
    cells = zip(I.ravel()[ones].tolist(), J.ravel()[ones].tolist())
    ex = (status >= OUT_OF_BUDGET).ravel()
    exhausted = tuple(sorted(zip(I.ravel()[ex].tolist(), J.ravel()[ex].tolist()), key=lambda c: (c[1], c[0])))
    origin = (int(I[0, 0]), int(J[0, 0])) if I.size else (0, 0)
    return ApproxResult(DyadicSet(n, cells), n, exhausted, cost, name, params, status, origin)


def run_computer(sc: SetComputer, oracle: Oracle, n: int, budget: int | None = None,
                 parameters: dict | None = None) -> ApproxResult:
    """Run ``sc`` on every grid point of the square that contains the filled set."""
    budget = sc.budget if budget is None else budget
    I, J = grid_cells(_extent_ball(oracle), n)
    before = oracle.meter.units
    if sc.bulk is not None:
        status, _ = sc.bulk(n, I, J, oracle, budget)
    else:
        status = np.empty(I.shape, np.int8)
        for idx in np.ndindex(I.shape):
            v = sc.compute(n, (int(I[idx]), int(J[idx])), oracle, budget)
            status[idx] = OUT_OF_BUDGET if v == EXHAUSTED else (ONE if v else ZERO)
    cost = oracle.meter.units - before
    params = {"oracle": oracle.label, "kind": oracle.kind or "c", "budget": budget}
    params.update(parameters or {})
    if "param_bits" in sc.options:
        params["param_bits"] = sc.options["param_bits"](n)
    if "max_param_bits" in sc.options:
        params["max_param_bits"] = sc.options["max_param_bits"]
    return _result_from_raster(status, I, J, n, cost, sc.name, params)


def escape_time_filled(m: QuadraticMap, n: int, budget: int, param_bits: Callable[[int], int] = default_param_bits,
                       meter: CostMeter | None = None) -> ApproxResult:
    """Filled Julia set of ``m`` at resolution ``n`` by budgeted escape time."""
    sc = escape_time_computer(budget, param_bits, m.bits)
    return run_computer(sc, map_oracle(m, meter), n, parameters={"map": m.describe()})


def timed_run(sc: SetComputer, m: QuadraticMap, n: int) -> tuple[ApproxResult, int]:
    """Run ``sc`` for ``m`` at resolution ``n`` on a fresh meter; return result and cost."""
    res = run_computer(sc, map_oracle(m, CostMeter()), n, parameters={"map": m.describe()})
    return res, res.total_cost


# ---------------------------------------------------------------- boundary and h


def boundary_extract(filled: ApproxResult) -> DyadicSet:
    """Cells answered 1 that touch (8-adjacency) a 0 cell or the grid frame."""
    status = filled.status
    if status.size == 0 or np.all(status >= OUT_OF_BUDGET):
        raise ValueError("every cell is exhausted; nothing to extract")
    inside = status != ZERO
    near_out = ndimage.binary_dilation(~inside, structure=np.ones((3, 3), bool), border_value=1)
    jj, ii = np.nonzero(inside & near_out)
    i0, j0 = filled.origin
    return DyadicSet(filled.n, zip((ii + i0).tolist(), (jj + j0).tolist()))


def h_value(result, z) -> int:
    """The computed answer at grid point ``z``; exhausted points raise :class:`UndecidedError`."""
    z = (int(z[0]), int(z[1]))
    if isinstance(result, DyadicSet):
        return int(z in result.cells)
    code = result.code_at(z)
    if code is not None and code >= OUT_OF_BUDGET:
        raise UndecidedError(f"cell {z} ran out of {'budget' if code == OUT_OF_BUDGET else 'precision'}")
    return int(z in result.set.cells)


# ---------------------------------------------------------------- inverse iteration


@dataclass(frozen=True)
class PointCloud:
    """Backward orbit points with a common error bound ``radius``."""

    points: np.ndarray
    radius: float
    depth: int
    collapsed: int  # points merged as duplicates or double roots
    multiplicity: np.ndarray = None  # preimages represented by each point; sums to 2**depth

    def __len__(self) -> int:
        return int(self.points.size)


def inverse_iteration(m: QuadraticMap, z0, depth: int, n: int | None = None) -> PointCloud:
    """All preimages of ``z0`` under the ``depth``-th iterate, in the map's coordinates.

    Each level takes both square roots of ``z - c``. Points closer than
    ``2**-(n+4)`` are merged when ``n`` is given (exact duplicates always).
    """
    if depth < 0:
        raise ValueError("depth must be >= 0")
    c, rc = _float_ball(m.c_ball())
    if m.form == "lambda":
        with mpmath.workprec(m.bits):
            shift, rshift = _float_ball(m.param_ball() * ComplexBall(mpmath.mpf(0.5), 0, m.bits))
    else:
        shift, rshift = 0j, 0.0
    z = complex(z0) + shift
    if c == 0 and rc == 0 and z == 0:
        raise ExceptionalPointError("0 is totally invariant for z^2: its only preimage is itself",
                                    np.array([complex(z0)]))
    pts = np.array([z])
    rad = np.array([_up(abs(z) * U) if shift else 0.0])
    mult = np.ones(1, np.int64)
    quantum = 2.0 ** -(n + 4) if n is not None else None
    collapsed = 0
    for _ in range(depth):
        w = pts - c
        rw = rad + rc + U * np.abs(w)
        s = np.sqrt(w)
        sa = np.abs(s)
        with np.errstate(divide="ignore", invalid="ignore"):
            rs = np.minimum(np.sqrt(rw), np.where(sa > 0, rw / sa, np.inf)) * (1 + U) + U * sa
        pts = np.concatenate([s, -s])
        rad = np.concatenate([rs, rs])
        mult = np.concatenate([mult, mult])
        pts, rad, mult, k = _dedupe(pts, rad, mult, quantum)
        collapsed += k
    return PointCloud(pts - shift, float(rad.max() + rshift) if rad.size else 0.0, depth, collapsed, mult)


def _dedupe(pts, rad, mult, quantum):
    if quantum is None:
        key = np.stack([pts.real, pts.imag], axis=1)
    else:
        key = np.stack([np.floor(pts.real / quantum), np.floor(pts.imag / quantum)], axis=1)
    _, first, inverse = np.unique(key, axis=0, return_index=True, return_inverse=True)
    total = np.zeros(first.size, np.int64)
    np.add.at(total, inverse.ravel(), mult)
    # merged points keep the worst radius of their group
    worst = np.zeros(first.size)
    np.maximum.at(worst, inverse.ravel(), rad)
    order = np.argsort(first)
    return pts[first[order]], worst[order], total[order], pts.size - first.size


def rasterize(cloud, n: int) -> DyadicSet:
    """Nearest grid cell of each point."""
    pts = cloud.points if isinstance(cloud, PointCloud) else np.asarray(cloud)
    h = pitch(n)
    i = np.rint(pts.real / h).astype(np.int64)
    j = np.rint(pts.imag / h).astype(np.int64)
    return DyadicSet(n, zip(i.tolist(), j.tolist()))


# ---------------------------------------------------------------- output


def format_pgm(result) -> str:
    """P2 graymap: 1 black, 0 white, exhausted mid-gray; top row is the largest ``j``."""
    if isinstance(result, ApproxResult):
        shade = np.array([255, 0, 128, 128], np.int64)[result.status]
    else:
        cells = result.as_array()
        if cells.size == 0:
            return "P2\n0 0\n255\n"
        i0, j0 = cells.min(axis=0)
        i1, j1 = cells.max(axis=0)
        shade = np.full((j1 - j0 + 1, i1 - i0 + 1), 255, np.int64)
        shade[cells[:, 1] - j0, cells[:, 0] - i0] = 0
    rows, cols = shade.shape
    lines = ["P2", f"{cols} {rows}", "255"]
    lines += [" ".join(map(str, row)) for row in shade[::-1]]
    return "\n".join(lines) + "\n"


def format_meta(result: ApproxResult) -> str:
    codes = np.bincount(result.status.ravel(), minlength=4)
    lines = ["META 1", f"computer={result.computer}", f"n={result.n}"]
    lines += [f"{k}={v}" for k, v in sorted(result.parameters.items())]
    lines += [
        f"cells={result.cell_count}",
        f"zeros={int(codes[ZERO])}",
        f"ones={len(result.set)}",
        f"exhausted={len(result.exhausted_cells)}",
        f"exhausted_budget={int(codes[OUT_OF_BUDGET])}",
        f"exhausted_precision={int(codes[OUT_OF_PRECISION])}",
        f"total_cost={result.total_cost}",
    ]
    return "\n".join(lines) + "\n"


def write_pgm(path, result) -> None:
    atomic_write(path, format_pgm(result))
