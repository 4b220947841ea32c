import math
import random

import pytest
from hypothesis import given, settings, strategies as st

from cremerlab.dyadic_set import (
    DyadicSet,
    dyadic_grid,
    format_dyset,
    hausdorff_distance,
    hausdorff_sq_units,
    parse_dyset,
    read_dyset,
    write_dyset,
)


def brute_force_hausdorff(s, t):
    # plain all-pairs scan over real centres, independent of the library path
    h = 2.0 ** -(s.n + 2)
    pa = [(i * h, j * h) for i, j in s.cells]
    pb = [(i * h, j * h) for i, j in t.cells]

    def directed(x, y):
        return max(min(math.dist(a, b) for b in y) for a in x)

    return max(directed(pa, pb), directed(pb, pa))


def random_set(rng, n, k, span=40):
    return DyadicSet(n, {(rng.randrange(-span, span), rng.randrange(-span, span)) for _ in range(k)})


def test_identity_distance_zero():
    s = DyadicSet(3, [(0, 0), (1, 2), (-4, 5)])
    assert hausdorff_distance(s, s) == 0


def test_two_single_cells():
    # one pitch apart at n=-2 would be 1; at n=0 the pitch is 1/4, so use i=4
    s = DyadicSet(0, [(0, 0)])
    t = DyadicSet(0, [(4, 0)])
    assert hausdorff_distance(s, t) == 1.0


def test_empty_set_is_an_error():
    with pytest.raises(ValueError):
        hausdorff_distance(DyadicSet(2, []), DyadicSet(2, [(0, 0)]))


def test_random_sets_match_brute_force():
    rng = random.Random(7)
    for _ in range(20):
        s, t = random_set(rng, 4, 30), random_set(rng, 4, 30)
        assert hausdorff_distance(s, t) == pytest.approx(brute_force_hausdorff(s, t), rel=1e-15)


def test_transform_equals_exhaustive_exactly():
    rng = random.Random(2024)
    for _ in range(100):
        s = random_set(rng, 4, rng.randrange(1, 201), span=60)
        t = random_set(rng, 4, rng.randrange(1, 201), span=60)
        assert hausdorff_sq_units(s, t, "exhaustive") == hausdorff_sq_units(s, t, "transform")
        assert hausdorff_distance(s, t, "exhaustive") == hausdorff_distance(s, t, "transform")


cells = st.sets(st.tuples(st.integers(-20, 20), st.integers(-20, 20)), min_size=1, max_size=25)


@settings(max_examples=60, deadline=None)
@given(cells, cells, cells)
def test_metric_properties(a, b, c):
    s, t, u = DyadicSet(3, a), DyadicSet(3, b), DyadicSet(3, c)
    assert hausdorff_distance(s, t) == hausdorff_distance(t, s)
    lhs = hausdorff_distance(s, u)
    rhs = hausdorff_distance(s, t) + hausdorff_distance(t, u)
    assert lhs <= rhs + 2 * math.ulp(rhs)


def test_grid_unit_square_n0():
    pts = dyadic_grid(0, (0, 1, 0, 1))
    assert len(pts) == 25
    assert pts[0] == (0, 0) and pts[1] == (1, 0) and pts[-1] == (4, 4)


def test_grid_degenerate_box():
    assert dyadic_grid(1, (0.25, 0.25, -0.5, -0.5)) == [(2, -4)]


def test_grid_count_n2():
    n = 2
    side = 2 * 2 ** (n + 2) + 1
    assert len(dyadic_grid(n, (-1, 1, -1, 1))) == side * side == 33 * 33


def test_grid_empty_box():
    assert dyadic_grid(3, (1, 0, 0, 1)) == []


def test_dyset_roundtrip(tmp_path):
    s = DyadicSet(5, [(3, -1), (-2, 7), (0, 0)])
    text = format_dyset(s)
    assert text.splitlines()[0] == "DYSET 1 n=5 count=3"
    assert text.splitlines()[1:] == ["-2 7", "0 0", "3 -1"]
    assert text.endswith("\n")
    p = tmp_path / "s.dyset"
    write_dyset(p, s)
    assert read_dyset(p) == s
    assert parse_dyset(text) == s


def test_dyset_rejects_unsorted():
    with pytest.raises(ValueError):
        parse_dyset("DYSET 1 n=1 count=2\n3 0\n1 0\n")
