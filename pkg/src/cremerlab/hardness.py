"""Adversary rounds against budgeted set-computers, and cost probes.

True Cremer parameters cannot be reached at finite precision, so every
experiment here works with near-parabolic surrogates
``theta = p/q + kappa / (q^2 (N - sigma))`` taken from perturbation schedules. Two phases ``sigma`` give two
parameters whose binary expansions agree on a long prefix while their Julia
sets stay visibly apart, which is the geometry an adversary needs.
"""

from __future__ import annotations

import math
import os
import re
import tempfile
import warnings
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Callable, Optional, Sequence

import mpmath
import numpy as np

from .dyadic_set import DyadicSet, atomic_write, hausdorff_distance, pitch, read_dyset, write_dyset
from .julia import (
    OUT_OF_BUDGET,
    OUT_OF_PRECISION,
    ApproxResult,
    SetComputer,
    boundary_extract,
    map_oracle,
    run_computer,
    sampled_escape_computer,
)
from .numerics import CostMeter
from .quadratic import QuadraticMap, small_cycle_search, theta_map
from .rotation import GATE_CONSTANT, perturbation_schedule, shared_dyadic_prefix

__all__ = [
    "SURROGATE_LABEL",
    "InconclusiveError",
    "RoundFailed",
    "CandidatePair",
    "WitnessRound",
    "ProbeReport",
    "candidate_pair",
    "pair_details",
    "separation_measure",
    "adversary_round",
    "check_witness",
    "complexity_probe",
    "cost_bound",
    "format_witness",
]

SURROGATE_LABEL = "desk-scale surrogate"
EXHAUSTION_LIMIT = 0.05
N_CAP = 10**6
PREFIX_CAP = 120  # binary digits compared; parameters carry 128 bits


class InconclusiveError(RuntimeError):
    """A measurement whose inputs were too exhausted to support a value."""


class RoundFailed(RuntimeError):
    """The set-computer decided both parameters correctly; ``transcript`` holds the details."""

    def __init__(self, msg: str, transcript: dict):
        super().__init__(msg)
        self.transcript = transcript


# ---------------------------------------------------------------- parameter pairs


@dataclass(frozen=True)
class CandidatePair:
    """Two surrogate parameters sharing the base rational ``p/q`` and ``N``."""

    p: int
    q: int
    sigmas: tuple
    N: int
    thetas: tuple
    gate_constant: object = GATE_CONSTANT

    @property
    def prefix_bits(self) -> int:
        return shared_dyadic_prefix(self.thetas[0], self.thetas[1], PREFIX_CAP)

    @property
    def distance(self) -> mpmath.mpf:
        return abs(self.thetas[0] - self.thetas[1])

    def provenance(self, s: int) -> str:
        return f"p={self.p} q={self.q} sigma={self.sigmas[s]} N={self.N} gate={self.gate_constant}"


def pair_details(p: int, q: int, sigma_1, sigma_2, N: int, gate_constant=GATE_CONSTANT, bits: int = 128) -> CandidatePair:
    """:func:`candidate_pair` with its provenance kept."""
    s1, s2 = Fraction(sigma_1), Fraction(sigma_2)
    if s1 == s2:
        raise ValueError("the two phases coincide; the pair is degenerate")
    if abs(s1 - s2) < Fraction(1, 1 << 10):
        warnings.warn("phases closer than 2^-10: the separation may be unmeasurable at desk resolution",
                      stacklevel=2)
    if N <= max(s1, s2):
        raise ValueError(f"N={N} must exceed both phases")
    thetas = tuple(perturbation_schedule(p, q, s, [N], gate_constant, bits).theta(0) for s in (s1, s2))
    return CandidatePair(p, q, (s1, s2), N, thetas, gate_constant)


def candidate_pair(p: int, q: int, sigma_1, sigma_2, N: int, gate_constant=GATE_CONSTANT,
                   bits: int = 128) -> tuple[mpmath.mpf, mpmath.mpf]:
    """``theta_s = p/q + kappa / (q^2 (N - sigma_s))`` for the two phases.

    ``kappa`` is the schedule's gate constant; ``gate_constant="pi"`` gives
    the parameters ``p/q + pi / (q^2 (N - sigma_s))``.
    """
    return pair_details(p, q, sigma_1, sigma_2, N, gate_constant, bits).thetas


# ---------------------------------------------------------------- separation


def _gate_steps(theta, limit: int = 10**7) -> int:
    """Rough number of f steps an orbit needs to cross the gate near ``theta``: ``1/(q d)``."""
    t = Fraction(float(theta) % 1)
    r = t.limit_denominator(64)
    d = abs(float(t - r))
    if d == 0:
        return limit
    return min(limit, int(1 / (r.denominator * d)) + 1)


def default_budget(theta) -> int:
    """Per-cell step budget for the sampled escape computer: fifteen gate crossings."""
    return max(10**4, 15 * _gate_steps(theta))


def _sampled_julia(theta, n: int, budget: int) -> tuple[ApproxResult, float]:
    """Filled-set approximation by center sampling and its budget-doubling instability."""
    m = theta_map(theta)
    sc = sampled_escape_computer(2 * budget)
    short = run_computer(sc, map_oracle(m), n, budget, {"map": m.describe()})
    long = run_computer(sc, map_oracle(m), n, 2 * budget, {"map": m.describe()})
    changed = int(np.count_nonzero((short.status == 0) != (long.status == 0)))
    return long, changed / max(len(boundary_extract(long)), 1)


def _julia_set(theta, n: int, budget: int) -> DyadicSet:
    res, instability = _sampled_julia(theta, n, budget)
    if instability > EXHAUSTION_LIMIT:
        raise InconclusiveError(f"theta={mpmath.nstr(theta, 12)}: {instability:.1%} of the boundary "
                                "changes when the budget doubles")
    return boundary_extract(res)


def separation_measure(theta_1, theta_2, n: int, budget: Optional[int] = None) -> float:
    """Hausdorff distance between the Julia approximations of ``f_theta_1`` and ``f_theta_2``.

    Both sets come from the center-sampled escape computer; a set whose
    boundary moves by more than 5% when the budget doubles makes the value
    inconclusive.
    """
    if mpmath.mpf(theta_1) == mpmath.mpf(theta_2):
        return 0.0
    b1 = budget or default_budget(theta_1)
    b2 = budget or default_budget(theta_2)
    return hausdorff_distance(_julia_set(theta_1, n, b1), _julia_set(theta_2, n, b2))


# ---------------------------------------------------------------- cost bounds


def cost_bound(spec: str) -> Callable[[int], int]:
    """Parse ``n^K``, ``K^n``, ``C*n^K`` or a table ``n:t,n:t``."""
    s = spec.replace(" ", "")
    if ":" in s:
        table = {int(a): int(b) for a, b in (item.split(":") for item in s.split(","))}

        def from_table(n: int) -> int:
            if n not in table:
                raise KeyError(f"cost bound table has no entry for n={n}")
            return table[n]

        from_table.__doc__ = spec
        return from_table
    m = re.fullmatch(r"(?:(\d+)\*)?n\^(\d+)", s)
    if m:
        c, k = int(m.group(1) or 1), int(m.group(2))
        f = lambda n: c * n**k
    else:
        m = re.fullmatch(r"(\d+)\^n", s)
        if not m:
            raise ValueError(f"unrecognised cost bound {spec!r}")
        base = int(m.group(1))
        f = lambda n: base**n
    f.__doc__ = spec
    return f


def _describe_bound(t: Callable[[int], int]) -> str:
    return (t.__doc__ or getattr(t, "__name__", "t")).strip().splitlines()[0]


# ---------------------------------------------------------------- witness rounds


@dataclass
class WitnessRound:
    """Outcome of one adversary round, with the raw artifacts it was judged on."""

    theta0: Fraction
    epsilon0: float
    n0: int
    bound: str
    pair: CandidatePair
    chosen: int  # 0 or 1: the parameter the machine fails on
    epsilon_1: mpmath.mpf
    n_1: int
    separation: float
    separation_n: int
    N_sep: int
    prefix_bits: int
    cost_cap: int
    machine: str
    machine_verdict: str  # "timeout", "non-output", "same-output-wrong" or "wrong-output"
    costs: tuple
    errors: tuple  # d_H of each machine output from its reference, inf for no output
    small_cycle: Optional[object] = None
    unanswered: tuple = (0, 0)  # grid points without an answer within the cap
    artifacts: dict = field(default_factory=dict)
    verified: Optional[bool] = None

    @property
    def theta_1(self) -> mpmath.mpf:
        return self.pair.thetas[self.chosen]


def _exact_binary(x, bits: int = 128) -> str:
    with mpmath.workprec(bits):
        man, exp = mpmath.mpf(x).man_exp
    man, exp = int(man), int(exp)
    if exp >= 0:
        return str(man << exp)
    return f"{man}/2^{-exp}"


def _parse_binary(text: str) -> Fraction:
    if "/2^" in text:
        num, e = text.split("/2^")
        return Fraction(int(num), 1 << int(e))
    return Fraction(int(text))


def _fmt(x) -> str:
    return "inf" if x == math.inf else repr(float(x))


def format_witness(w: WitnessRound) -> str:
    lines = [
        "WITNESS 1",
        f"label={SURROGATE_LABEL}",
        f"theta0={w.theta0.numerator}/{w.theta0.denominator}",
        f"epsilon0={w.epsilon0!r}",
        f"n0={w.n0}",
        f"cost_bound={w.bound}",
        f"machine={w.machine}",
    ]
    for s in (0, 1):
        lines.append(f"theta_{s + 1}={_exact_binary(w.pair.thetas[s])}")
        lines.append(f"theta_{s + 1}_approx={mpmath.nstr(w.pair.thetas[s], 25)}")
        lines.append(f"provenance_{s + 1}={w.pair.provenance(s)}")
    lines += [
        f"chosen={w.chosen + 1}",
        f"epsilon_1=2^-{w.prefix_bits}",
        f"n_1={w.n_1}",
        f"separation={_fmt(w.separation)}",
        f"separation_n={w.separation_n}",
        f"N_sep={w.N_sep}",
        f"prefix_bits={w.prefix_bits}",
        f"cost_cap={w.cost_cap}",
        f"cost_1={w.costs[0]}",
        f"cost_2={w.costs[1]}",
        f"unanswered_1={w.unanswered[0]}",
        f"unanswered_2={w.unanswered[1]}",
        f"error_1={_fmt(w.errors[0])}",
        f"error_2={_fmt(w.errors[1])}",
        f"machine_verdict={w.machine_verdict}",
    ]
    if w.small_cycle is not None:
        o = w.small_cycle
        lines.append(f"small_cycle=period {o.period} max_modulus {mpmath.nstr(o.max_modulus(), 8)} "
                     f"residual {mpmath.nstr(o.residual, 3)}")
    else:
        lines.append("small_cycle=none")
    for key in sorted(w.artifacts):
        lines.append(f"artifact_{key}={w.artifacts[key]}")
    if w.verified is not None:
        lines.append(f"VERIFIED={'yes' if w.verified else 'no'}")
    return "\n".join(lines) + "\n"


def _parse_block(text: str) -> dict:
    lines = text.strip().splitlines()
    if not lines or lines[0].strip() != "WITNESS 1":
        raise ValueError("not a WITNESS 1 block")
    out = {}
    for line in lines[1:]:
        key, sep, value = line.partition("=")
        if not sep:
            raise ValueError(f"malformed witness line {line!r}")
        out[key.strip()] = value.strip()
    return out


def _dist(a: DyadicSet, b: DyadicSet) -> float:
    if not a.cells and not b.cells:
        return 0.0
    if not a.cells or not b.cells:
        return math.inf
    return hausdorff_distance(a, b)


def check_witness(text: str, base_dir: str | os.PathLike | None = None) -> tuple[bool, list[str]]:
    """Re-verify a ``WITNESS 1`` block from its stored artifacts alone.

    Nothing computed by the generator is trusted: the prefix is recomputed
    from the stored exact parameters, the separation and the machine errors
    from the stored DYSET files.
    """
    rec = _parse_block(text)
    base = os.fspath(base_dir) if base_dir is not None else ""
    problems = []

    def load(key: str) -> DyadicSet:
        path = rec[f"artifact_{key}"]
        return read_dyset(path if os.path.isabs(path) else os.path.join(base, path))

    t1, t2 = _parse_binary(rec["theta_1"]), _parse_binary(rec["theta_2"])
    n0, n1 = int(rec["n0"]), int(rec["n_1"])
    t0 = Fraction(rec["theta0"])
    eps0 = float(rec["epsilon0"])
    bound = cost_bound(rec["cost_bound"])
    prefix = shared_dyadic_prefix(t1 % 1, t2 % 1, PREFIX_CAP)
    if prefix != int(rec["prefix_bits"]):
        problems.append(f"prefix_bits: stored {rec['prefix_bits']}, recomputed {prefix}")
    if prefix <= bound(n0):
        problems.append(f"prefix {prefix} does not exceed t(n0)={bound(n0)}")
    for t in (t1, t2):
        if abs(float(t - t0)) >= eps0:
            problems.append("a parameter lies outside the epsilon0 neighbourhood")
    if n1 <= n0:
        problems.append("n_1 must exceed n0")
    sep = _dist(load("separation_1"), load("separation_2"))
    N_sep = int(rec["N_sep"])
    if not sep > 2.0 ** (1 - N_sep):
        problems.append(f"separation {sep} is not above 2^(1-{N_sep})")
    if N_sep > n1:
        problems.append("N_sep exceeds n_1")
    if abs(sep - float(rec["separation"])) > 1e-12:
        problems.append(f"separation: stored {rec['separation']}, recomputed {sep}")
    chosen = int(rec["chosen"])
    verdict = rec["machine_verdict"]
    cap = int(rec["cost_cap"])
    if cap != bound(n1):
        problems.append("cost cap differs from t(n_1)")
    if verdict in ("timeout", "non-output"):
        # the machine left grid points unanswered, so there is no output to compare
        if int(rec[f"unanswered_{chosen}"]) <= 0:
            problems.append(f"{verdict} claimed but every grid point was answered")
    else:
        out = load(f"output_{chosen}")
        ref = load(f"reference_{chosen}")
        err = _dist(out, ref)
        if not err > pitch(n1 - 2):
            problems.append(f"output is within 2^-{n1} of the reference ({err})")
        if verdict == "same-output-wrong":
            other = 3 - chosen
            if load(f"output_{other}").cells != out.cells:
                problems.append("outputs differ although the verdict says they coincide")
    return not problems, problems


def _select_sigmas(p: int, q: int, n: int, N: int, candidates: Sequence, gate_constant) -> tuple:
    """The phase pair with the largest measured separation at a trial ``N``."""
    sets = {}
    for s in candidates:
        theta = perturbation_schedule(p, q, s, [N], gate_constant).theta(0)
        try:
            sets[s] = _julia_set(theta, n, default_budget(theta))
        except InconclusiveError:
            continue
    best, pair = -1.0, None
    keys = sorted(sets)
    for a in range(len(keys)):
        for b in range(a + 1, len(keys)):
            d = hausdorff_distance(sets[keys[a]], sets[keys[b]])
            if d > best:
                best, pair = d, (keys[a], keys[b])
    if pair is None:
        raise InconclusiveError("no pair of phases gave a measurable separation")
    return pair


def _run_machine(sc: SetComputer, theta, n: int, cap: int) -> tuple[Optional[DyadicSet], int, str, int]:
    """Run ``sc`` with ``cap`` units per grid point; its Julia output is the boundary of its answer."""
    m = theta_map(theta)
    # a machine with a smaller budget of its own gives up before the cap
    res = run_computer(sc, map_oracle(m, CostMeter()), n, min(sc.budget, cap), {"map": m.describe()})
    timed_out = int(np.count_nonzero(res.status == OUT_OF_BUDGET))
    gave_up = int(np.count_nonzero(res.status == OUT_OF_PRECISION))
    if timed_out:
        return None, res.total_cost, "timeout", timed_out
    if gave_up:
        return None, res.total_cost, "non-output", gave_up
    return boundary_extract(res), res.total_cost, "output", 0


def adversary_round(sc: SetComputer, t: Callable[[int], int], theta0, epsilon0: float, n0: int,
                    sigmas: Optional[Sequence] = None, N_start: int = 1000, artifact_dir=None,
                    sigma_candidates: Sequence = tuple(Fraction(k, 8) for k in range(8)),
                    gate_constant=GATE_CONSTANT, N_max: int = N_CAP) -> WitnessRound:
    """One round of the adversary: find two close parameters the machine cannot both handle.

    ``N`` doubles from ``N_start`` until the pair lies in the
    ``epsilon0``-neighbourhood of ``theta0``, shares more than ``t(n0)``
    binary digits, and is separated by more than ``2^-n0`` at resolution
    ``n0``. The machine then runs on both parameters at resolution ``n_1``
    with cost cap ``t(n_1)`` per grid point, the time allowed for one
    evaluation of the machine's answer function. ``N`` never exceeds ``N_max``.
    """
    theta0 = Fraction(theta0)
    p, q = theta0.numerator % theta0.denominator, theta0.denominator
    if sigmas is None:
        sigmas = _select_sigmas(p, q, n0, N_start, sigma_candidates, gate_constant)
    need = t(n0)
    N = N_start
    while True:
        pair = pair_details(p, q, sigmas[0], sigmas[1], N, gate_constant)
        close = all(abs(th - mpmath.mpf(p) / q) < epsilon0 for th in pair.thetas)
        if close and pair.prefix_bits > need:
            refs = [_julia_set(th, n0, default_budget(th)) for th in pair.thetas]
            sep = hausdorff_distance(*refs)
            if sep > pitch(n0 - 2):
                break
        if 2 * N > N_max:
            raise RoundFailed("no N up to the cap satisfies the round's conditions",
                              {"N": N, "sigmas": sigmas, "need_prefix": need})
        N *= 2
    # smallest N_sep with sep > 2^(1 - N_sep)
    N_sep = max(0, math.floor(1 - math.log2(sep)) + 1)
    while not sep > 2.0 ** (1 - N_sep):
        N_sep += 1
    n_1 = max(N_sep, n0 + 1)
    cap = t(n_1)
    outs = [_run_machine(sc, th, n_1, cap) for th in pair.thetas]
    references = [_julia_set(th, n_1, default_budget(th)) for th in pair.thetas]
    errors = tuple(math.inf if o[0] is None else _dist(o[0], r) for o, r in zip(outs, references))
    tol = pitch(n_1 - 2)
    kinds = [o[2] for o in outs]
    transcript = {"N": N, "sigmas": sigmas, "costs": [o[1] for o in outs], "kinds": kinds,
                  "unanswered": [o[3] for o in outs], "errors": errors, "n_1": n_1, "cap": cap}
    if "timeout" in kinds or "non-output" in kinds:
        chosen = kinds.index("timeout") if "timeout" in kinds else kinds.index("non-output")
        verdict = kinds[chosen]
    elif outs[0][0].cells == outs[1][0].cells:
        # one output, two sets farther apart than twice the tolerance: it misses at least one
        chosen = int(errors[1] > errors[0])
        verdict = "same-output-wrong"
        if not errors[chosen] > tol:
            raise RoundFailed("shared output approximates both references", transcript)
    else:
        wrong = [k for k in (0, 1) if errors[k] > tol]
        if not wrong:
            raise RoundFailed("the machine distinguished and approximated both parameters", transcript)
        chosen, verdict = wrong[0], "wrong-output"
    theta_1 = pair.thetas[chosen]
    cycle = None
    m1 = theta_map(theta_1)
    if n_1 <= m1.bits - 24:
        cycle = small_cycle_search(m1, n_1, 2)
    w = WitnessRound(theta0, epsilon0, n0, _describe_bound(t), pair, chosen, mpmath.ldexp(1, -pair.prefix_bits),
                     n_1, sep, n0, N_sep, pair.prefix_bits, cap, sc.name, verdict,
                     tuple(o[1] for o in outs), errors, cycle, unanswered=tuple(o[3] for o in outs))
    directory = os.fspath(artifact_dir) if artifact_dir is not None else tempfile.mkdtemp(prefix="witness-")
    for s in (0, 1):
        w.artifacts[f"separation_{s + 1}"] = _store(directory, f"separation_{s + 1}.dyset", refs[s])
        w.artifacts[f"reference_{s + 1}"] = _store(directory, f"reference_{s + 1}.dyset", references[s])
        if outs[s][0] is not None:
            w.artifacts[f"output_{s + 1}"] = _store(directory, f"output_{s + 1}.dyset", outs[s][0])
    ok, _ = check_witness(format_witness(w))
    w.verified = ok
    atomic_write(os.path.join(directory, "witness.txt"), format_witness(w))
    return w


def _store(directory: str, name: str, s: DyadicSet) -> str:
    path = os.path.join(directory, name)
    write_dyset(path, s)
    return path


# ---------------------------------------------------------------- complexity probes


@dataclass
class ProbeReport:
    """Cost of a set-computer per parameter and resolution, from its cost meter."""

    computer: str
    family: str
    rows: list = field(default_factory=list)  # (label, n, cost, exhausted fraction, cells)
    baseline: Optional[str] = None

    def costs(self, label: str) -> dict:
        return {r[1]: r[2] for r in self.rows if r[0] == label}

    def per_cell(self, label: str) -> dict:
        return {r[1]: r[2] / r[4] for r in self.rows if r[0] == label}

    def exponent(self, label: str) -> Optional[float]:
        """Least-squares slope of log cost against log grid size."""
        pts = [(math.log(r[4]), math.log(r[2])) for r in self.rows if r[0] == label and r[2] > 0]
        if len(pts) < 2:
            return None
        x, y = np.array(pts).T
        if np.ptp(x) == 0:
            return None
        return float(np.polyfit(x, y, 1)[0])

    def excess(self, label: str, n: int) -> Optional[float]:
        """Per-cell cost of ``label`` over the baseline's at resolution ``n``."""
        if self.baseline is None:
            return None
        a, b = self.per_cell(label).get(n), self.per_cell(self.baseline).get(n)
        if a is None or not b:
            return None
        return a / b

    def format(self) -> str:
        labels = list(dict.fromkeys(r[0] for r in self.rows))
        width = max([len("parameter")] + [len(x) for x in labels])
        lines = [f"# computer={self.computer} family={self.family}",
                 f"{'parameter':<{width}} {'n':>3} {'cost':>14} {'per cell':>12} {'exhausted':>10}"]
        for label, n, cost, ex, cells in self.rows:
            lines.append(f"{label:<{width}} {n:>3} {cost:>14} {cost / cells:>12.2f} {ex:>10.4f}")
        lines.append(f"COMPUTER={self.computer}")
        lines.append(f"BASELINE={self.baseline or 'none'}")
        for label in labels:
            e = self.exponent(label)
            lines.append(f"EXPONENT[{label}]={'nan' if e is None else f'{e:.4f}'}")
            for n in sorted(self.per_cell(label)):
                x = self.excess(label, n)
                if x is not None and label != self.baseline:
                    lines.append(f"EXCESS[{label},n={n}]={x:.4f}")
        return "\n".join(lines) + "\n"


def complexity_probe(sc: SetComputer, params: Sequence[QuadraticMap], n_range: Sequence[int],
                     baseline: Optional[int] = 0, family: str = "") -> ProbeReport:
    """Run ``sc`` for every parameter and resolution; costs come from a fresh meter each run."""
    n_range = list(n_range)
    if any(b <= a for a, b in zip(n_range, n_range[1:])):
        raise ValueError("n_range must be ascending")
    labels = [m.describe() for m in params]
    rep = ProbeReport(sc.name, family or ", ".join(labels),
                      baseline=labels[baseline] if params and baseline is not None else None)
    for m, label in zip(params, labels):
        for n in n_range:
            res = run_computer(sc, map_oracle(m, CostMeter()), n, parameters={"map": label})
            rep.rows.append((label, n, res.total_cost, res.exhausted_fraction, res.cell_count))
    rep.rows.sort(key=lambda r: (labels.index(r[0]), r[1]))
    return rep
