import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genbranch import umspace as U
from genbranch.feller_sim import GwConfig, extract_ums, simulate_gw
from genbranch.polynomials import PhiSpec, Window, eval_batch, eval_polynomial
from genbranch.spatial_sim import (
    AncestralPath,
    MarkedUms,
    SiteSpace,
    adjust_paths,
    agree_until,
    batch_chi,
    concat_marked,
    eval_marked_polynomial,
    extract_marked_ums,
    historical_projection,
    lineage_path,
    marked_from_json,
    marked_to_json,
    mean_occupation,
    occupation_measure,
    sample_marked_batch,
    simulate_brw,
    site_histogram,
    truncate_marked,
)

CYCLE = SiteSpace(np.array([[0.2, 0.8, 0.0], [0.0, 0.2, 0.8], [0.8, 0.0, 0.2]]))


def brw(space, init, N=6, a=0.3, t=0.8, seed=3, replicate=0):
    c = GwConfig(N=N, b=1.0, a=a, initial=init.unmarked(), horizon=t, seed=seed, replicate=replicate)
    return simulate_brw(space, c, init)


# site spaces and paths ---------------------------------------------------------------------


def test_site_space_validation():
    with pytest.raises(ValueError):
        SiteSpace(np.array([[0.5, 0.5], [0.9, 0.1]]))  # not doubly stochastic
    with pytest.raises(ValueError):
        SiteSpace(np.array([[1.2, -0.2], [-0.2, 1.2]]))
    with pytest.raises(ValueError):
        SiteSpace(np.ones((2, 3)) / 3)
    assert np.allclose(SiteSpace.torus(5).kernel.sum(axis=0), 1.0)
    assert np.array_equal(CYCLE.reversed_kernel, CYCLE.kernel.T)


def test_path_normalization_and_evaluation():
    p = AncestralPath([0.2, 0.5, 0.7, 1.5], [0, 1, 1, 2, 0], 0.0, 1.0)
    assert p.times.tolist() == [0.2, 0.7] and p.sites.tolist() == [0, 1, 2]
    assert p.at(0.1) == 0 and p.at(0.2) == 1 and p.at(0.69) == 1 and p.at(2.0) == 2 and p.at(-5) == 0
    assert p.end == 2
    assert p.average([1.0, 0.0, 0.0], 0.0, 1.0) == pytest.approx(0.2)
    with pytest.raises(ValueError):
        AncestralPath([0.5, 0.2], [0, 1, 2], 0, 1)


def test_adjusted_path_examples():
    c = AncestralPath.constant(2, 0.0, 1.0)
    assert c.shift(-1.0).sites.tolist() == [2]
    p = AncestralPath([0.4], [0, 1], 0.0, 1.0)
    q = p.shift(-1.0)
    assert q.times.tolist() == [pytest.approx(-0.6)]
    assert q.shift(1.0) == p


def test_truncate_marked_path_example():
    p = AncestralPath([-0.9, -0.3], [0, 1, 2], -1.0, 0.0)
    u = MarkedUms([1.0], [], 0.0, [p], "path")
    v = truncate_marked(u, 0.5)
    m = v.marks[0]
    assert m.times.tolist() == [-0.3]
    assert m.at(-0.8) == m.at(-0.5) == 1
    assert truncate_marked(v, 0.5) == v


def test_truncate_marked_location_mode():
    u = MarkedUms([1.0, 2.0], [0.7], None, [0, 1])
    v = truncate_marked(u, 0.3)
    assert v.marks == u.marks
    assert np.array_equal(v.gaps, U.truncate(u.unmarked(), 0.3).gaps)


def test_concat_marked_examples():
    u = MarkedUms([1.0, 2.0], [0.1], None, [0, 1])
    v = MarkedUms([0.5], [], None, [1])
    w = concat_marked(u, v, 0.4)
    assert U.total_mass(w) == 3.5
    assert w.marks == (0, 1, 1)
    assert w.distances()[0, 2] == pytest.approx(0.8)
    assert U.is_isomorphic(concat_marked(u, MarkedUms.zero(), 0.4), truncate_marked(u, 0.4))


def test_marked_json_round_trip():
    p = AncestralPath([-0.9, -0.3], [0, 1, 2], -1.0, 0.0)
    u = MarkedUms([1.0, 0.5], [0.2], 0.4, [p, AncestralPath.constant(1, -1.0, 0.0)], "path")
    assert marked_from_json(marked_to_json(u)) == u
    v = MarkedUms([1.0, 0.5], [0.0], None, [0, 1])
    assert marked_from_json(marked_to_json(v)) == v


# simulation -----------------------------------------------------------------------------


def test_single_site_reduces_to_unmarked_model():
    init = MarkedUms([1.0, 0.5], [0.2], None, [0, 0])
    one = SiteSpace(np.ones((1, 1)))
    for r in range(5):
        g = brw(one, init, replicate=r)
        h = simulate_gw(GwConfig(N=6, b=1.0, a=0.3, initial=init.unmarked(), horizon=0.8, seed=3, replicate=r))
        assert np.array_equal(g.parent, h.parent) and np.array_equal(g.birth, h.birth)
        u = extract_marked_ums(g, 0.8)
        assert set(u.marks) <= {0}
        assert u.unmarked() == extract_ums(h, 0.8)


def test_non_branching_particle_path_is_its_trajectory():
    init = MarkedUms([1.0], [], None, [0])
    # b tiny: no branching before the horizon
    c = GwConfig(N=1, b=1e-9, a=0.0, initial=init.unmarked(), horizon=3.0, seed=5)
    g = simulate_brw(CYCLE, c, init)
    assert len(g.parent) == 1
    p = lineage_path(g, 0, 3.0)
    assert len(g.jump_time) > 0
    # self-jumps leave the path unchanged, every other recorded jump is a path jump
    assert set(p.times.tolist()) <= set(g.jump_time.tolist())
    assert p.at(0.0) == 0
    for tj, sj in zip(g.jump_time, g.jump_site):
        assert p.at(tj) == sj


def test_extraction_consistency_and_path_coupling():
    init = MarkedUms([1.0, 0.5], [0.0], None, [0, 2])
    t = 0.8
    for r in range(30):
        g = brw(CYCLE, init, replicate=r)
        loc = extract_marked_ums(g, t, "location")
        path = extract_marked_ums(g, t, "path")
        assert list(loc.marks) == [m.at(t) for m in path.marks]
        assert loc.unmarked() == path.unmarked()
        D = path.distances()
        for i in range(len(path)):
            for j in range(i + 1, len(path)):
                if D[i, j] < 2 * t:
                    assert agree_until(path.marks[i], path.marks[j], t - D[i, j] / 2)


def test_adjustment_round_trip_on_simulated_states():
    init = MarkedUms([1.0], [], None, [1])
    g = brw(CYCLE, init, a=0.5, t=1.0)
    u = extract_marked_ums(g, 1.0, "path")
    assert adjust_paths(adjust_paths(u, 1.0), 1.0, inverse=True) == u
    with pytest.raises(U.DomainError):
        adjust_paths(extract_marked_ums(g, 1.0, "location"), 1.0)


def test_historical_projection():
    p = AncestralPath([0.3], [0, 1], 0.0, 1.0)
    u = MarkedUms([0.7], [], None, [p], "path")
    assert historical_projection(u) == [(p, 0.7)]
    init = MarkedUms([1.0, 0.5], [0.3], None, [0, 1])
    for r in range(10):
        g = brw(CYCLE, init, replicate=r)
        path = extract_marked_ums(g, 0.8, "path")
        hp = historical_projection(path)
        assert sum(w for _, w in hp) == pytest.approx(U.total_mass(path), abs=1e-12)
        occ = occupation_measure(hp, 0.8, 3)
        assert np.allclose(occ, site_histogram(extract_marked_ums(g, 0.8), 3), atol=1e-12)


def test_mean_occupation_matches_ode():
    init = MarkedUms([1.0, 0.5], [0.0], None, [0, 1])
    H = np.array([site_histogram(extract_marked_ums(brw(CYCLE, init, N=10, seed=8, replicate=r), 0.8), 3)
                  for r in range(6000)])
    target = mean_occupation(CYCLE, 0.3, [1.0, 0.5, 0.0], 0.8)
    se = H.std(axis=0, ddof=1) / math.sqrt(len(H))
    assert np.all(np.abs(H.mean(axis=0) - target) < 3 * se)


# marked polynomials -------------------------------------------------------------------------


def test_marked_polynomial_examples():
    u = MarkedUms([1.0, 2.0, 0.5], [0.1, 0.4], None, [0, 1, 1])
    assert eval_marked_polynomial(u, PhiSpec(2, "exp", (1.0,))) == eval_polynomial(u.unmarked(), PhiSpec(2, "exp", (1.0,)))
    spec = PhiSpec(1, chi="site", chi_params={"sites": [1]})
    assert eval_marked_polynomial(u, spec) == pytest.approx(2.5)
    with pytest.raises(U.DomainError):
        eval_marked_polynomial(u, PhiSpec(1, chi="path_site", chi_params={"times": [0.0], "sites": [[0]]}))


def test_path_polynomial_hand_computed():
    # two leaves at distance 0.6; paths evaluated at -0.2 and 0
    p = AncestralPath([-0.1], [0, 1], -1.0, 0.0)  # (0, 1) at (-0.2, 0)
    q = AncestralPath([], [1], -1.0, 0.0)  # (1, 1)
    u = MarkedUms([0.5, 2.0], [0.3], None, [p, q], "path")
    spec = PhiSpec(2, "exp", (1.0,), chi="path_site",
                   chi_params={"times": [-0.2, 0.0], "sites": [[0, 1], [1, 1]]})
    # slot 1 must follow p, slot 2 must follow q: only (p, q) contributes
    expect = 0.5 * 2.0 * math.exp(-0.6)
    assert eval_marked_polynomial(u, spec) == pytest.approx(expect, rel=1e-12)


@given(st.integers(0, 2**32 - 1), st.floats(0.1, 1.0))
def test_marked_truncated_polynomials_are_additive(seed, t):
    rng = np.random.default_rng(seed)
    def rand():
        L = int(rng.integers(1, 7))
        return MarkedUms(rng.uniform(0.1, 1, L), rng.uniform(0, 1, L - 1), None, rng.integers(0, 2, L))
    x, y = truncate_marked(rand(), t), truncate_marked(rand(), t)
    spec = PhiSpec(2, "exp", (1.0,), chi="site", chi_params={"sites": [0, 1]})
    f = lambda z: eval_marked_polynomial(z, spec, window=Window("sharp", t))
    xy = concat_marked(x, y, t)
    assert abs(f(xy) - f(x) - f(y)) <= 1e-9
    assert abs(math.exp(-f(xy)) - math.exp(-f(x)) * math.exp(-f(y))) <= 1e-9


def test_path_truncated_polynomials_are_additive():
    t = 0.6
    init = MarkedUms([0.5, 0.5], [0.0], None, [0, 1])
    spec = PhiSpec(2, chi="path_site", chi_params={"times": [-0.3, 0.0], "sites": [[0, 0], [1, 0]]})
    f = lambda z: eval_marked_polynomial(z, spec, window=Window("sharp", t))
    for r in range(10):
        x = truncate_marked(adjust_paths(extract_marked_ums(brw(CYCLE, init, t=t, replicate=r), t, "path"), t), t)
        y = truncate_marked(adjust_paths(extract_marked_ums(brw(CYCLE, init, t=t, replicate=r + 50), t, "path"), t), t)
        assert abs(f(concat_marked(x, y, t)) - f(x) - f(y)) <= 1e-9


# batch sampler ----------------------------------------------------------------------------


def test_marked_batch_matches_particle_simulation():
    init = MarkedUms([1.0, 0.5], [0.0], None, [0, 1])
    t = 0.6
    c = GwConfig(N=6, b=1.0, a=0.3, initial=init.unmarked(), horizon=t, seed=4)
    spec = PhiSpec(2, "exp", (1.0,), chi="site", chi_params={"sites": [0, 2]})
    pspec = PhiSpec(1, chi="path_site", chi_params={"times": [-0.3, 0.0], "sites": [[1, 2]]})
    R = 4000
    b = sample_marked_batch(CYCLE, c, [0, 1], 0, R, query_times=np.array([0.3, 0.6]))
    masses = np.full(len(b.gaps), 1.0 / b.N)
    fast = eval_batch(b.offsets, b.gaps, masses, spec, chi=batch_chi(spec, b))
    pfast = eval_batch(b.offsets, b.gaps, masses, pspec, chi=batch_chi(pspec, b))
    slow, pslow = [], []
    for r in range(R):
        g = brw(CYCLE, init, N=6, t=t, seed=40, replicate=r)
        slow.append(eval_marked_polynomial(extract_marked_ums(g, t), spec))
        pslow.append(eval_marked_polynomial(adjust_paths(extract_marked_ums(g, t, "path"), t), pspec))
    for x, y in ((fast, slow), (pfast, pslow)):
        y = np.asarray(y)
        se = math.sqrt(x.var(ddof=1) / len(x) + y.var(ddof=1) / len(y))
        assert abs(x.mean() - y.mean()) < 3 * se
    # the batch's own states give the same values one by one
    for r in range(50):
        u = b.marked_state(r, "location")
        assert eval_marked_polynomial(u, spec) == pytest.approx(fast[r], rel=1e-12, abs=1e-15)
        v = adjust_paths(b.marked_state(r, "path"), t)
        assert eval_marked_polynomial(v, pspec) == pytest.approx(pfast[r], rel=1e-12, abs=1e-15)
