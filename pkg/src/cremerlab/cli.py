"""Command-line front end: ``cremerlab {render,implode,brjuno,witness,probe,replay}``.

Every run writes a ``CONFIG`` file into its output directory. The file
holds the fully resolved command line, so ``cremerlab replay DIR/CONFIG``
reproduces the run's files byte for byte. Exit codes: 0 on success, 2 on
bad usage, 3 when the run is inconclusive or a witness round fails.
"""

from __future__ import annotations

import argparse
import os
import shlex
import sys
from dataclasses import dataclass
from fractions import Fraction
from typing import Optional, Sequence

import mpmath

from . import __version__
from .dyadic_set import atomic_write, format_dyset
from .hardness import (
    EXHAUSTION_LIMIT,
    InconclusiveError,
    RoundFailed,
    adversary_round,
    complexity_probe,
    cost_bound,
    default_budget,
    format_witness,
)
from .julia import (
    ExceptionalPointError,
    boundary_extract,
    constant_computer,
    escape_time_computer,
    format_meta,
    format_pgm,
    inverse_iteration,
    map_oracle,
    rasterize,
    run_computer,
    sampled_escape_computer,
)
from .numerics import default_bits
from .parabolic import (
    boundary_exhaustion,
    implosion_convergence,
    inclusion_chain_check,
    lavaurs_map,
)
from .quadratic import QuadraticMap, c_map, theta_map
from .rotation import (
    DEFAULT_N_LIST,
    GATE_CONSTANT,
    PerturbationSchedule,
    RULES,
    Huge,
    brjuno_partial_sum,
    make_high_type,
    parse_cf,
    perturbation_schedule,
)

EXIT_OK, EXIT_USAGE, EXIT_INCONCLUSIVE = 0, 2, 3
C_BUDGET = 10**4
DIGITS = 20


class UsageError(ValueError):
    """A flag value that parses but makes no sense."""


class Inconclusive(RuntimeError):
    """The run finished without a trustworthy answer."""


# ---------------------------------------------------------------- parameters


def _fraction(text: str) -> Fraction:
    try:
        return Fraction(text.strip())
    except (ValueError, ZeroDivisionError):
        raise UsageError(f"not a rational or decimal number: {text!r}") from None


def _mp(x: Fraction) -> mpmath.mpf:
    return mpmath.mpf(x.numerator) / x.denominator


@dataclass
class ThetaSpec:
    """A parsed ``--theta`` value.

    Forms: ``P/Q`` or a decimal; ``pi/K`` or ``pi*X``; ``cf:PATH`` for a
    continued-fraction file; ``P/Q+sched:N=...,sigma=...[,gate=1|pi][,k=...]``
    for a schedule term, where ``N`` may list several values joined by ``:``.
    """

    text: str
    rational: Optional[Fraction] = None
    schedule: Optional[PerturbationSchedule] = None
    term: int = -1
    cf_text: Optional[str] = None
    value: Optional[mpmath.mpf] = None

    @property
    def pq(self) -> tuple[int, int]:
        if self.rational is None:
            raise UsageError(f"{self.text!r} is not a rational base point p/q")
        return self.rational.numerator, self.rational.denominator


def parse_theta(text: str, bits: int, sigma: Optional[Fraction] = None) -> ThetaSpec:
    spec = ThetaSpec(text)
    with mpmath.workprec(bits + 16):
        if text.startswith("cf:"):
            path = text[3:]
            try:
                with open(path) as fh:
                    spec.cf_text = fh.read()
            except OSError as exc:
                raise UsageError(f"cannot read continued-fraction file: {exc}") from None
            line = next((ln for ln in spec.cf_text.splitlines() if ln.strip()), "")
            try:
                spec.value = parse_cf(line).approx(bits + 16)
            except ValueError as exc:
                raise UsageError(str(exc)) from None
            return spec
        if text.startswith("pi"):
            rest = text[2:]
            if not rest:
                raise UsageError("theta=pi is not in [0, 1)")
            op, arg = rest[0], _fraction(rest[1:])
            if op == "/" and arg != 0:
                spec.value = mpmath.pi / _mp(arg)
            elif op == "*":
                spec.value = mpmath.pi * _mp(arg)
            else:
                raise UsageError(f"bad pi form: {text!r}")
            return spec
        base, plus, tail = text.partition("+")
        spec.rational = _fraction(base)
        if not plus:
            spec.value = _mp(spec.rational)
            return spec
        if not tail.startswith("sched:"):
            raise UsageError(f"expected '+sched:' after the base point in {text!r}")
        fields = {}
        for tok in filter(None, tail[6:].split(",")):
            key, eq, val = tok.partition("=")
            if not eq:
                raise UsageError(f"schedule field without '=': {tok!r}")
            fields[key.strip()] = val.strip()
        unknown = set(fields) - {"N", "sigma", "gate", "k"}
        if unknown:
            raise UsageError(f"unknown schedule fields: {', '.join(sorted(unknown))}")
        try:
            Ns = [int(v) for v in fields["N"].split(":")] if "N" in fields else list(DEFAULT_N_LIST)
        except ValueError:
            raise UsageError(f"bad N list: {fields['N']!r}") from None
        s = _fraction(fields["sigma"]) if "sigma" in fields else (sigma if sigma is not None else Fraction(0))
        if sigma is not None and s != sigma:
            raise UsageError(f"--sigma {sigma} disagrees with the schedule's sigma={s}")
        gate = fields.get("gate", "1")
        gate = "pi" if gate == "pi" else (GATE_CONSTANT if gate == "1" else _mp(_fraction(gate)))
        p, q = spec.pq
        try:
            spec.schedule = perturbation_schedule(p % q, q, s, Ns, gate, bits)
        except ValueError as exc:
            raise UsageError(str(exc)) from None
        spec.term = int(fields.get("k", len(Ns) - 1))
        if not 0 <= spec.term < len(Ns):
            raise UsageError(f"schedule term k={spec.term} out of range")
        spec.value = spec.schedule.theta(spec.term)
    return spec


def parse_c(text: str, bits: int) -> mpmath.mpc:
    parts = text.split(",")
    if len(parts) > 2:
        raise UsageError(f"--c takes RE or RE,IM, got {text!r}")
    re, im = (_fraction(x) for x in (parts + ["0"])[:2])
    with mpmath.workprec(bits):
        return mpmath.mpc(_mp(re), _mp(im))


def _map_from_args(args) -> tuple[QuadraticMap, Optional[ThetaSpec]]:
    if args.c is not None:
        return c_map(parse_c(args.c, args.bits), args.bits), None
    spec = parse_theta(args.theta, args.bits, _sigma(args))
    return theta_map(spec.value, args.bits), spec


def _sigma(args) -> Optional[Fraction]:
    return None if getattr(args, "sigma", None) is None else _fraction(args.sigma)


def _int_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise UsageError(f"expected comma-separated integers, got {text!r}") from None


# ---------------------------------------------------------------- output helpers


def _num(x) -> str:
    """Decimal with DIGITS significant digits."""
    return mpmath.nstr(mpmath.mpf(x), DIGITS)


class Run:
    """Output directory bookkeeping for one subcommand."""

    def __init__(self, args, argv: list[str]):
        self.out = args.out
        self.argv = argv
        self.written: list[str] = []
        os.makedirs(self.out, exist_ok=True)

    def write(self, name: str, text: str) -> str:
        path = os.path.join(self.out, name)
        atomic_write(path, text)
        self.written.append(path)
        return path

    def config(self, extra: dict) -> None:
        lines = ["CONFIG 1", f"version={__version__}", f"argv={shlex.join(self.argv)}"]
        lines += [f"{k}={v}" for k, v in extra.items()]
        self.write("CONFIG", "\n".join(lines) + "\n")


def _canonical_argv(parser: argparse.ArgumentParser, args) -> list[str]:
    """Subcommand plus every option at its resolved value."""
    out = [args.command]
    for action in parser._actions:
        if not action.option_strings or action.dest == "help":
            continue
        v = getattr(args, action.dest, None)
        if v is None or v is False:
            continue
        flag = action.option_strings[-1]
        if v is True:
            out.append(flag)
        else:
            out += [flag, str(v)]
    return out


# ---------------------------------------------------------------- subcommands


def cmd_render(args, run: Run) -> int:
    m, spec = _map_from_args(args)
    extra = {"map": m.describe(), "bits": args.bits, "budget": args.budget}
    if spec is not None and spec.cf_text is not None:
        extra["cf"] = spec.cf_text.strip()
    if args.algo == "inverse":
        z0 = _repelling_fixed_point(m)
        try:
            cloud = inverse_iteration(m, z0, args.depth, args.n)
        except ExceptionalPointError as exc:
            raise Inconclusive(f"inverse iteration has no useful start: {exc}") from None
        s = rasterize(cloud, args.n)
        run.write("render.dyset", format_dyset(s))
        run.write("render.pgm", format_pgm(s))
        meta = ["META 1", "computer=inverse-iteration", f"n={args.n}", f"depth={args.depth}",
                f"map={m.describe()}", f"z0={complex(z0)!r}", f"points={len(cloud)}",
                f"collapsed={cloud.collapsed}", f"radius={cloud.radius!r}", f"cells={len(s)}"]
        run.write("render.meta", "\n".join(meta) + "\n")
        run.config(extra)
        print(f"render: {len(s)} cells from {len(cloud)} backward-orbit points")
        return EXIT_OK
    res = run_computer(escape_time_computer(args.budget, bits=args.bits), map_oracle(m), args.n,
                       parameters={"map": m.describe()})
    run.write("render.pgm", format_pgm(res))
    try:
        boundary = boundary_extract(res)
    except ValueError as exc:
        run.write("render.meta", format_meta(res))
        run.config(extra)
        raise Inconclusive(str(exc)) from None
    ex = boundary_exhaustion(res)
    meta = format_meta(res) + f"boundary_cells={len(boundary)}\nboundary_exhausted={ex!r}\n"
    run.write("render.dyset", format_dyset(boundary))
    run.write("render.meta", meta)
    run.config(extra)
    print(f"render: {len(boundary)} boundary cells, {len(res.exhausted_cells)} exhausted of {res.cell_count}")
    if ex > EXHAUSTION_LIMIT:
        raise Inconclusive(f"{ex:.1%} of the boundary ran out of budget; raise --budget")
    return EXIT_OK


def _repelling_fixed_point(m: QuadraticMap):
    """beta = (1 + sqrt(1 - 4c))/2 for c-maps, 1 - lambda for the multiplier form."""
    with mpmath.workprec(m.bits):
        if m.form == "c":
            return (1 + mpmath.sqrt(1 - 4 * m.parameter)) / 2
        return 1 - m.parameter


def cmd_implode(args, run: Run) -> int:
    spec = parse_theta(args.theta, args.bits, _sigma(args))
    p, q = spec.pq
    sched = spec.schedule or perturbation_schedule(p % q, q, _sigma(args) or 0, DEFAULT_N_LIST, bits=args.bits)
    cached = os.path.exists(os.path.join(run.out, "charts.txt"))
    # up to double precision the charts run in numpy floats
    bits = None if args.bits <= 53 else args.bits
    L = lavaurs_map(p % q, q, 0, bits=bits)
    charts = ["CHARTS 1", f"p={p % q}", f"q={q}", f"bits={args.bits}",
              f"attracting_residual={float(L.attracting.residual)!r}",
              f"repelling_residual={float(L.repelling.residual)!r}"]
    run.write("charts.txt", "\n".join(charts) + "\n")
    print(f"charts: {'rebuilt' if cached else 'built'}, Abel residuals "
          f"{float(L.attracting.residual):.3e} / {float(L.repelling.residual):.3e}")
    conv = implosion_convergence(Fraction(p, q), sched, bits=bits, L=L)
    run.write("convergence.txt", conv.format())
    print(conv.format(), end="")
    extra = {"bits": args.bits, "budget": args.budget, "depth": args.depth}
    verdict = None
    if not args.no_inclusion:
        rep = inclusion_chain_check(Fraction(p, q), sched.sigma, sched, args.n, args.budget, args.depth,
                                    tau=conv.tau)
        run.write("inclusion.txt", rep.format())
        print(rep.format(), end="")
        verdict = rep.verdict
    run.config(extra)
    if verdict == "INCONCLUSIVE":
        raise Inconclusive("the inclusion check could not settle its cells within the budget")
    return EXIT_OK


def cmd_brjuno(args, run: Run) -> int:
    if args.theta is not None:
        spec = parse_theta(args.theta, args.bits)
        if spec.cf_text is None:
            raise UsageError("brjuno --theta expects a continued-fraction file (cf:PATH)")
        r = parse_cf(next(ln for ln in spec.cf_text.splitlines() if ln.strip()))
        r.bits = args.bits
        depth = min(args.depth, len(r.partial_quotients) - 1)
        if depth < 1:
            raise UsageError("the expansion needs at least two partial quotients")
        label = args.theta
    else:
        if args.depth < 1:
            raise UsageError("--depth must be >= 1")
        r = make_high_type(args.rule, args.depth, args.bits)
        depth, label = args.depth, f"rule={args.rule}"
    qs = r.denominators(depth + 1)
    lines = [f"# {label} bits={args.bits} digits={DIGITS}",
             f"{'k':>4} {'a_k':>12} {'log q_k':>26} {'S_k':>26}"]
    sums = []
    for k in range(1, depth + 1):
        a = r.quotients(k)[k - 1]
        s = brjuno_partial_sum(r, k)
        sums.append(s)
        a_txt = f"e^{mpmath.nstr(a.log, 6)}" if isinstance(a, Huge) else (str(a) if a < 10**11 else f"{float(a):.4e}")
        lines.append(f"{k:>4} {a_txt:>12} {_num(qs[k - 1].log):>26} {_num(s):>26}")
    lines += [f"DEPTH={depth}", f"S_FINAL={_num(sums[-1])}", f"S_MAX={_num(max(sums))}"]
    run.write("brjuno.txt", "\n".join(lines) + "\n")
    run.config({"bits": args.bits})
    print("\n".join(lines))
    return EXIT_OK


def _machine(name: str, budget: int):
    if name == "const0":
        return constant_computer(0)
    if name == "const1":
        return constant_computer(1)
    if name == "escape":
        return escape_time_computer(budget)
    if name == "sampled":
        return sampled_escape_computer(budget)
    raise UsageError(f"unknown machine {name!r}")


def cmd_witness(args, run: Run) -> int:
    theta0 = _fraction(args.pq)
    sigmas = None
    if args.sigmas is not None:
        parts = [_fraction(x) for x in args.sigmas.split(",")]
        if len(parts) != 2:
            raise UsageError("--sigmas takes two phases")
        sigmas = tuple(parts)
    try:
        t = cost_bound(args.t)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    sc = _machine(args.machine, args.budget)
    run.config({"machine": sc.name})
    try:
        w = adversary_round(sc, t, theta0, args.epsilon0, args.n0, sigmas=sigmas, N_start=args.N_start,
                            artifact_dir=run.out, N_max=args.N_max)
    except (RoundFailed, InconclusiveError) as exc:
        transcript = getattr(exc, "transcript", {})
        lines = ["ROUND FAILED", f"reason={exc.args[0]}"] + [f"{k}={v}" for k, v in transcript.items()]
        run.write("round.txt", "\n".join(lines) + "\n")
        raise Inconclusive(f"witness round failed: {exc.args[0]}") from None
    text = format_witness(w)
    print(text, end="")
    if not w.verified:
        raise Inconclusive("the independent checker rejected the witness")
    return EXIT_OK


def cmd_probe(args, run: Run) -> int:
    params = [c_map(parse_c(c, args.bits), args.bits) for c in args.c or []]
    params += [theta_map(parse_theta(t, args.bits).value, args.bits) for t in args.theta or []]
    if not params:
        raise UsageError("probe needs at least one --c or --theta")
    if not 0 <= args.baseline < len(params):
        raise UsageError("--baseline indexes the parameters in --c, then --theta order")
    try:
        rep = complexity_probe(_machine(args.machine, args.budget), params, _int_list(args.n), args.baseline)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    run.write("probe.txt", rep.format())
    run.config({"bits": args.bits})
    print(rep.format(), end="")
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p: argparse.ArgumentParser, n_default: Optional[int] = None, budget=True) -> None:
    p.add_argument("--n", type=int, default=n_default, help="resolution: grid pitch 2^-(n+2)")
    if budget:
        p.add_argument("--budget", type=int, help="per-cell step budget")
    p.add_argument("--bits", type=int, help="working precision (default: $CREMERLAB_BITS or 128)")
    p.add_argument("--out", default="cremerlab-out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="cremerlab", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="escape-time or inverse-iteration Julia set")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--c", help="c-form parameter RE[,IM]")
    g.add_argument("--theta", help="rotation number spec")
    _common(p, 4)
    p.add_argument("--algo", choices=("escape", "inverse"), default="escape")
    p.add_argument("--depth", type=int, default=14, help="backward-orbit depth for --algo inverse")
    p.add_argument("--sigma", help="schedule phase when --theta has a +sched: part")

    p = sub.add_parser("implode", help="Lavaurs limit convergence and inclusion checks")
    p.add_argument("--theta", default="0/1", help="p/q, optionally with +sched:N=a:b:c")
    p.add_argument("--sigma", help="schedule phase (default 0)")
    _common(p, 4)
    p.add_argument("--depth", type=int, default=3, help="Lavaurs backward depth")
    p.set_defaults(bits=53)
    p.add_argument("--no-inclusion", action="store_true", help="skip the inclusion chain check")

    p = sub.add_parser("brjuno", help="Brjuno partial sums for a quotient rule or CF file")
    g = p.add_mutually_exclusive_group(required=True)
    g.add_argument("--rule", choices=sorted(RULES))
    g.add_argument("--theta", help="cf:PATH")
    p.add_argument("--depth", type=int, default=30)
    _common(p, budget=False)

    p = sub.add_parser("witness", help="one adversary round against a set-computer")
    p.add_argument("--pq", default="0/1", help="rational base point theta0")
    p.add_argument("--sigmas", help="two phases, comma separated (default: most separated of k/8)")
    p.add_argument("--t", default="n^3", help="cost bound: n^K, C*n^K, K^n or n:t,...")
    p.add_argument("--n0", type=int, default=3)
    p.add_argument("--epsilon0", type=float, default=0.01)
    p.add_argument("--machine", choices=("const0", "const1", "escape", "sampled"), default="const0")
    p.add_argument("--N-start", dest="N_start", type=int, default=1000)
    p.add_argument("--N-max", dest="N_max", type=int, default=64000)
    _common(p)

    p = sub.add_parser("probe", help="cost of a set-computer across parameters and resolutions")
    p.add_argument("--c", action="append", help="c-form parameter (repeatable)")
    p.add_argument("--theta", action="append", help="rotation number spec (repeatable)")
    p.add_argument("--machine", choices=("const0", "const1", "escape", "sampled"), default="escape")
    p.add_argument("--baseline", type=int, default=0, help="index of the baseline parameter")
    _common(p)
    # probe takes a list of resolutions
    for a in p._actions:
        if a.dest == "n":
            a.type, a.default, a.help = str, "2,3,4", "comma-separated ascending resolutions"

    p = sub.add_parser("replay", help="rerun a CONFIG file")
    p.add_argument("config")
    return parser


COMMANDS = {"render": cmd_render, "implode": cmd_implode, "brjuno": cmd_brjuno,
            "witness": cmd_witness, "probe": cmd_probe}


def _resolve(args) -> None:
    if getattr(args, "bits", None) is None and "bits" in vars(args):
        args.bits = default_bits()
    if "budget" in vars(args) and args.budget is None:
        if args.command == "render" and args.theta is not None:
            args.budget = default_budget(parse_theta(args.theta, args.bits, _sigma(args)).value)
        else:
            args.budget = C_BUDGET
    if "budget" in vars(args) and args.budget <= 0:
        raise UsageError("--budget must be positive")
    if isinstance(getattr(args, "n", None), int) and args.n < 0:
        raise UsageError("--n must be >= 0")


def _replay_argv(path: str) -> list[str]:
    try:
        with open(path) as fh:
            lines = fh.read().splitlines()
    except OSError as exc:
        raise UsageError(f"cannot read {path}: {exc.strerror}") from None
    for line in lines:
        if line.startswith("argv="):
            return shlex.split(line[5:])
    raise UsageError(f"{path} has no argv line")


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = parser.parse_args(argv)
        sub = parser._subparsers._group_actions[0].choices[args.command]
        try:
            if args.command == "replay":
                return main(_replay_argv(args.config))
            _resolve(args)
            run = Run(args, _canonical_argv(sub, args))
            return COMMANDS[args.command](args, run)
        except UsageError as exc:
            sub.error(str(exc))
    except SystemExit as exc:
        return int(exc.code or 0)
    except Inconclusive as exc:
        print(f"inconclusive: {exc}", file=sys.stderr)
        return EXIT_INCONCLUSIVE


if __name__ == "__main__":
    sys.exit(main())
