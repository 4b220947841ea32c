import cmath
from fractions import Fraction

import mpmath
import numpy as np
import pytest

from cremerlab.julia import ZERO, escape_time_filled
from cremerlab.parabolic import (
    ChartDomainError,
    ShrinkRadiusError,
    build_petals,
    extend_attracting,
    fatou_attracting,
    fatou_repelling_inverse,
    implosion_convergence,
    inclusion_chain_check,
    lavaurs_eval,
    lavaurs_julia,
    lavaurs_map,
)
from cremerlab.quadratic import theta_map
from cremerlab.rotation import perturbation_schedule


@pytest.fixture(scope="module")
def petals0():
    return build_petals(0, 1)


@pytest.fixture(scope="module")
def charts0(petals0):
    return fatou_attracting(petals0, bits=None), fatou_repelling_inverse(petals0, bits=None)


@pytest.fixture(scope="module")
def lav0():
    return lavaurs_map(0, 1, 0, bits=None)


def newton(fn, target, z, steps=40, h=1e-7):
    for _ in range(steps):
        v = complex(fn(z)) - target
        d = (complex(fn(z + h)) - complex(fn(z))) / h
        z -= v / d
        if abs(v) < 1e-13:
            break
    return z


# ---------------------------------------------------------------- petals


def test_petals_for_zero(petals0):
    assert complex(petals0.A) == 1
    assert complex(petals0.attracting[0]) == pytest.approx(-1)
    assert complex(petals0.repelling[0]) == pytest.approx(1)
    assert petals0.drift == 1
    assert petals0.r0 == 0.25


@pytest.mark.parametrize("p,q", [(1, 2), (1, 3), (3, 4)])
def test_petal_directions(p, q):
    ps = build_petals(p, q)
    A = complex(ps.A)
    assert len(ps.attracting) == len(ps.repelling) == q
    for a, r in zip(ps.attracting, ps.repelling):
        assert (A * complex(a) ** q).real == pytest.approx(-abs(A))
        assert (A * complex(r) ** q).real == pytest.approx(abs(A))
    assert 0 < ps.r0 <= 0.5


def test_normal_form_kills_nonresonant_terms():
    # f^2 = z - 2 z^3 + z^4 for f = -z + z^2; the z^4 term is not resonant
    ps = build_petals(1, 2)
    assert complex(ps.A) == pytest.approx(-2)
    assert len(ps.conj) > 2
    with mpmath.workprec(128):
        z = mpmath.mpc(1e-3, 2e-4)
        lam = ps.lam
        psi = lambda w: sum(c * w**k for k, c in enumerate(ps.conj))
        f2 = lambda w: lam * (lam * w + w * w) + (lam * w + w * w) ** 2
        lhs = f2(psi(z))
        rhs = psi(z + ps.A * z**3 + ps.B * z**5)
        assert abs(lhs - rhs) < 1e-3 ** 7 * 100


def test_radius_too_large():
    with pytest.raises(ShrinkRadiusError) as info:
        build_petals(0, 1, r0=0.5)
    assert info.value.suggested == 0.25


def test_bad_rational():
    with pytest.raises(ValueError):
        build_petals(2, 4)


# ---------------------------------------------------------------- charts


def test_abel_residual_high_precision(petals0):
    chart = fatou_attracting(petals0, bits=128)
    assert chart.residual < 1e-6


@pytest.mark.parametrize("p,q", [(0, 1), (1, 2), (1, 3)])
def test_charts_satisfy_functional_equations(p, q):
    ps = build_petals(p, q)
    assert fatou_attracting(ps, bits=None).residual < 1e-6
    assert fatou_repelling_inverse(ps, bits=None).residual < 1e-6


def test_attracting_normalization(charts0):
    phi, _ = charts0
    assert abs(phi(-0.5)) < 1e-12
    assert abs(phi(-0.25) - 1) < 1e-9
    z = -0.5
    for _ in range(10):
        z = z + z * z
    assert abs(phi(z) - 10) < 1e-9


def test_attracting_independent_of_cutoff(charts0):
    from dataclasses import replace

    phi, _ = charts0
    fine = replace(phi, cutoff=1e4).reanchored(phi.anchor)
    z = -0.5 + np.linspace(-0.05, 0.05, 7) * (1 + 1j)
    assert np.max(np.abs(phi(z) - fine(z))) < 1e-8


def test_extension_consistent(charts0):
    phi, _ = charts0
    z = -0.7 + 0.3j
    assert abs(extend_attracting(phi, z, 5) - extend_attracting(phi, z, 8)) < 1e-9
    assert abs(extend_attracting(phi, z) - extend_attracting(phi, z, 5)) < 1e-9


def test_outside_basin_rejected(charts0):
    phi, _ = charts0
    with pytest.raises(ChartDomainError):
        phi(0.5)
    with pytest.raises(ChartDomainError):
        extend_attracting(phi, 3.0, 2)


def test_repelling_decay_and_far_field(charts0):
    _, psi = charts0
    mags = [abs(psi(-t)) for t in (10, 100, 1000, 10000)]
    assert all(b < a for a, b in zip(mags, mags[1:]))
    assert mags[-1] < 2e-4
    # Psi(w) behaves like -1/w, with a logarithmic correction
    assert abs(psi(-1e5) * -1e5 + 1) < 1e-3


def test_repelling_points_leave_under_backward_orbit(charts0):
    _, psi = charts0
    z = psi(-3 + 0.4j)
    assert abs(z + z * z - psi(-2 + 0.4j)) < 1e-6


# ---------------------------------------------------------------- Lavaurs maps


def test_lavaurs_at_anchor(lav0, charts0):
    _, psi = charts0
    assert abs(lavaurs_eval(lav0, -0.5) - psi(0)) < 1e-12
    v, err = lavaurs_eval(lav0, -0.5, with_error=True)
    assert err < 1e-5


def test_lavaurs_abel_push_through(lav0):
    # phases far to the left keep the images near the parabolic point
    pts = [-0.5 + 0.1j, -0.6, -0.45 - 0.05j]
    for z in pts:
        lhs = lav0.with_sigma(-3)(z + z * z)
        rhs = lav0.with_sigma(-2)(z)
        assert np.isfinite(lhs)
        assert abs(lhs - rhs) < 1e-8


@pytest.mark.parametrize("tau", [1 / 3, 1.0, 2.7])
def test_phase_covariance(lav0, tau):
    phi = lav0.attracting
    # solve Phi = k - tau in (1, 2], away from the critical point, then pull back k times
    k = int(np.ceil(tau)) + 1
    zt = newton(phi, k - tau, -0.25 + 0.01j)
    for _ in range(k):
        zt = (-1 + cmath.sqrt(1 + 4 * zt)) / 2
    zt = newton(phi, -tau, zt)
    assert abs(phi(zt) + tau) < 1e-10
    moved = type(lav0)(phi.reanchored(zt), lav0.repelling, -4)
    ref = lav0.with_sigma(-4 + tau)
    rng = np.random.default_rng(4)
    z = -0.5 + rng.uniform(-0.08, 0.08, 20) + 1j * rng.uniform(-0.08, 0.08, 20)
    a, b = moved.evaluate(z)[0], ref.evaluate(z)[0]
    assert np.all(np.isfinite(a))
    assert np.max(np.abs(a - b)) < 1e-5


def test_shifted_chart_matches_phase(lav0):
    tau = 0.4 - 0.2j
    moved = type(lav0)(lav0.attracting.shifted(tau), lav0.repelling, -3)
    z = np.array([-0.55, -0.5 + 0.05j])
    assert np.max(np.abs(moved.evaluate(z)[0] - lav0.with_sigma(tau - 3).evaluate(z)[0])) < 1e-12


# ---------------------------------------------------------------- Lavaurs Julia sets


@pytest.fixture(scope="module")
def k0():
    return escape_time_filled(theta_map(0), 3, 3000)


def test_lavaurs_depth_zero_reproduces_filled_set(k0, lav0):
    r = lavaurs_julia(Fraction(0), 0, 3, 0, 3000, filled=k0, L=lav0)
    assert set(r.set.cells) == set(k0.set.cells)


def test_lavaurs_set_inside_filled_set(k0, lav0):
    r = lavaurs_julia(Fraction(0), 0, 3, 2, 3000, filled=k0, L=lav0, tau=1.77 + np.pi * 1j)
    a, b = set(r.set.cells), set(k0.set.cells)
    assert a < b
    # the removed cells lie in the basin, so the parabolic point survives
    assert r.code_at((0, 0)) != ZERO


# ---------------------------------------------------------------- convergence and inclusion


def test_single_sample_at_anchor(lav0):
    s = perturbation_schedule(0, 1, 0, [100])
    rep = implosion_convergence(0, s, samples=[-0.5], bits=None, L=lav0)
    N, eps, D, tk = rep.rows[0]
    # one sample pins tau exactly, so Psi(sigma + tau) reproduces the orbit point
    z = mpmath.mpc(-0.5)
    with mpmath.workprec(64):
        lam = mpmath.expjpi(2 * s.theta(0))
        for _ in range(N):
            z = lam * z + z * z
    assert D < 1e-8
    assert abs(lav0.repelling(rep.tau) - complex(z)) < 1e-8


def test_offset_fit_is_stable():
    s = perturbation_schedule(0, 1, 0, [100, 1000])
    rep = implosion_convergence(0, s, bits=None)
    assert len(rep.rows) == 2
    assert rep.tau_spread < 1e-2
    text = rep.format()
    assert "MONOTONE=" in text and text.rstrip().splitlines()[-1].startswith("TAU_VARIANCE=")


def test_margin_enforced(lav0):
    s = perturbation_schedule(0, 1, 0, [100])
    with pytest.raises(ChartDomainError):
        implosion_convergence(0, s, samples=[-0.99], bits=None, L=lav0, margin=0.05)


def test_degenerate_schedule_report():
    s = perturbation_schedule(0, 1, 0, [100])
    rep = inclusion_chain_check(0, 0, s, 3, budget=2000)
    text = rep.format()
    assert "check b is informational" in text
    assert text.rstrip().splitlines()[-1].startswith("VERDICT=")
    assert rep.witnesses["a"] is not None
    assert rep.verdict in ("PASS", "FAIL", "INCONCLUSIVE")
    # b does not decide the verdict with one term
    others = [ok for name, (ok, _, _) in rep.checks.items() if not name.startswith("b")]
    if all(others) and max(rep.exhaustion.values()) <= 0.05:
        assert rep.verdict == "PASS"
