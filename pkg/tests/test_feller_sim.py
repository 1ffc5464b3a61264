import math

import numpy as np
import pytest

from genbranch import seeding
from genbranch import umspace as U
from genbranch.feller_sim import (
    BATCH_BLOCK,
    Genealogy,
    GwConfig,
    ResourceError,
    concat_batches,
    extract_ums,
    family_size_law,
    mass_moments,
    sample_batch,
    sample_state,
    sample_tuples,
    simulate_gw,
    total_mass_path,
    truncate_batch,
)
from genbranch.polynomials import PhiSpec, eval_polynomial, eval_truncated_polynomial


def cfg(**kw):
    base = dict(N=10, b=1.0, a=0.0, initial=U.Ums.leaf(1.0), horizon=0.5, seed=7)
    base.update(kw)
    return GwConfig(**base)


def z(x, y):
    x, y = np.asarray(x, float), np.asarray(y, float)
    se = math.sqrt(x.var(ddof=1) / len(x) + y.var(ddof=1) / len(y))
    return (x.mean() - y.mean()) / se


def hand_genealogy(N, horizon, parent, birth, death):
    n = len(parent)
    return Genealogy(N=N, horizon=horizon, initial=U.Ums.leaf(1.0 / N), founder_leaf=np.zeros(1, dtype=np.int64),
                     parent=np.array(parent), birth=np.array(birth, float), death=np.array(death, float),
                     founder=np.zeros(n, dtype=np.int64))


def test_config_invariants():
    with pytest.raises(ValueError):
        cfg(N=0)
    with pytest.raises(ValueError):
        cfg(a=20.0)
    with pytest.raises(ValueError):
        cfg(b=0.0)
    with pytest.raises(ValueError):
        cfg(horizon=-1.0)


def test_zero_initial_mass_stays_zero():
    g = simulate_gw(cfg(initial=U.Ums.zero()))
    for t in (0.0, 0.25, 0.5):
        assert extract_ums(g, t).is_zero
    assert total_mass_path(g, [0.0, 0.5]).tolist() == [0.0, 0.0]


def test_single_particle_without_events():
    g = hand_genealogy(5, 1.0, [-1], [0.0], [np.inf])
    u = extract_ums(g, 1.0)
    assert len(u) == 1 and u.masses[0] == pytest.approx(0.2)


def test_one_split_gives_distance_twice_age():
    s, t = 0.3, 1.0
    g = hand_genealogy(1, t, [-1, 0, 0], [0.0, s, s], [s, np.inf, np.inf])
    u = extract_ums(g, t)
    assert len(u) == 2
    assert u.distances()[0, 1] == pytest.approx(2 * (t - s))


def test_deterministic_given_seed():
    a, b = simulate_gw(cfg(a=0.3)), simulate_gw(cfg(a=0.3))
    assert a.dumps() == b.dumps()
    c = simulate_gw(cfg(a=0.3, replicate=1))
    assert c.dumps() != a.dumps()


def test_extracted_states_are_ultrametric_with_event_heights():
    c = cfg(N=20, a=0.5, horizon=0.8, initial=U.Ums([0.5, 0.5], [0.3]))
    for r in range(20):
        g = simulate_gw(GwConfig(**{**c.__dict__, "replicate": r}))
        for t in (0.4, 0.8):
            u = extract_ums(g, t)
            if u.is_zero:
                continue
            assert U.is_ultrametric(u.distances())
            # every merge height is t minus a split time, or t plus an initial separation
            allowed = set(np.round(t - g.birth, 12)) | {round(t + 0.3, 12), round(t, 12)}
            assert set(np.round(u.gaps, 12)) <= allowed


def test_single_founder_lies_in_s_t():
    for r in range(10):
        g = simulate_gw(cfg(N=1, a=0.5, replicate=r))
        u = extract_ums(g, 0.5)
        assert U.in_s(u, 0.5)


def test_total_mass_path_examples():
    g = simulate_gw(cfg(N=10, a=0.5, initial=U.Ums.leaf(1.3)))
    assert total_mass_path(g, [0.0])[0] == pytest.approx(1.3)
    events = np.unique(np.r_[g.birth[g.birth > 0], g.death[np.isfinite(g.death)]])
    grid = np.linspace(0, 0.5, 401)
    path = total_mass_path(g, grid)
    # the count only changes across event times
    for k in np.flatnonzero(np.diff(path)):
        assert np.any((events > grid[k]) & (events <= grid[k + 1]))
    with pytest.raises(U.DomainError):
        total_mass_path(g, [0.6])


def test_family_squares_consistency():
    c = cfg(N=10, a=0.3, horizon=0.6)
    for r in range(10):
        g = simulate_gw(GwConfig(**{**c.__dict__, "replicate": r}))
        u = extract_ums(g, 0.6)
        alive = g.alive_at(0.6)
        fam = np.bincount(g.founder[alive]) / g.N if len(alive) else np.zeros(0)
        val = eval_truncated_polynomial(u, PhiSpec(2), 0.6, exact_threshold=np.inf)
        assert val == pytest.approx(float(np.sum(fam**2)), abs=1e-12)


def test_resource_cap():
    with pytest.raises(ResourceError):
        simulate_gw(cfg(N=100, a=2.0, horizon=3.0, cap=500))


def test_mean_mass_matches_exponential_growth():
    c = cfg(N=20, a=0.5, horizon=1.0, seed=11)
    m = np.array([total_mass_path(simulate_gw(GwConfig(**{**c.__dict__, "replicate": r})), [1.0])[0]
                  for r in range(10_000)])
    se = m.std(ddof=1) / math.sqrt(len(m))
    assert abs(m.mean() - math.exp(0.5)) < 3 * se


def test_critical_mean_is_initial_mass():
    c = cfg(N=20, a=0.0, horizon=1.0, seed=12, initial=U.Ums.leaf(0.7))
    m = np.array([total_mass_path(simulate_gw(GwConfig(**{**c.__dict__, "replicate": r})), [1.0])[0]
                  for r in range(10_000)])
    assert abs(m.mean() - 0.7) < 3 * m.std(ddof=1) / math.sqrt(len(m))


def test_moment_formulas():
    mean, var = mass_moments(1.0, 1.0, 1.0)
    assert mean == pytest.approx(math.e)
    assert var == pytest.approx(math.e**2 - math.e)
    assert mass_moments(0.0, 2.0, 0.5, 3.0)[1] == pytest.approx(3.0)
    assert mass_moments(1e-7, 2.0, 0.5, 3.0)[1] == pytest.approx(3.0, rel=1e-6)


def test_family_size_law_mean():
    for lam, mu, T in ((10.0, 10.0, 0.5), (12.0, 8.0, 1.0), (8.0, 12.0, 1.0)):
        ps, q = family_size_law(T, lam, mu)
        assert ps / q == pytest.approx(math.exp((lam - mu) * T), rel=1e-12)


def test_direct_sampler_matches_particle_simulation():
    """The exact state sampler and the event-driven simulation agree in law."""
    c = cfg(N=8, a=0.4, horizon=0.7, seed=21, initial=U.Ums([0.5, 0.5], [0.2]))
    spec = PhiSpec(2, "exp", (1.0,))
    R = 4000
    sim = [eval_polynomial(extract_ums(simulate_gw(GwConfig(**{**c.__dict__, "replicate": r}))), spec)
           for r in range(R)]
    direct = [eval_polynomial(sample_state(c, seeding.stream(99, r, seeding.SAMPLING)), spec) for r in range(R)]
    assert abs(z(sim, direct)) < 3


def test_markov_restart():
    """Simulating to s, restarting from the extracted state and running to t matches one run to t."""
    s, t = 0.3, 0.6
    c = cfg(N=8, a=0.2, horizon=t, seed=31)
    spec = PhiSpec(2, "exp", (2.0,))
    one, two = [], []
    for r in range(3000):
        g = simulate_gw(GwConfig(**{**c.__dict__, "replicate": r}))
        one.append(eval_polynomial(extract_ums(g, t), spec))
        mid = extract_ums(simulate_gw(GwConfig(**{**c.__dict__, "horizon": s, "seed": 32, "replicate": r})), s)
        g2 = simulate_gw(GwConfig(N=c.N, b=c.b, a=c.a, initial=mid, horizon=t - s, seed=33, replicate=r))
        two.append(eval_polynomial(extract_ums(g2, t - s), spec))
    assert abs(z(one, two)) < 3


def test_batch_is_split_invariant():
    c = cfg(N=50, a=0.2)
    whole = sample_batch(c, 0, 2 * BATCH_BLOCK + 10)
    head = sample_batch(c, 0, BATCH_BLOCK)
    tail = sample_batch(c, BATCH_BLOCK, BATCH_BLOCK + 10)
    np.testing.assert_array_equal(np.r_[head.offsets, tail.offsets[1:] + head.offsets[-1]], whole.offsets)
    np.testing.assert_array_equal(np.r_[head.gaps, tail.gaps], whole.gaps)
    with pytest.raises(ValueError):
        sample_batch(c, 5, 10)


def test_batch_matches_particle_simulation():
    c = cfg(N=8, a=0.4, horizon=0.7, seed=22, initial=U.Ums([0.5, 0.5], [0.2]))
    spec = PhiSpec(2, "exp", (1.0,))
    b = sample_batch(c, 0, 4000)
    direct = [eval_polynomial(b.state(r), spec) for r in range(b.n_reps)]
    sim = [eval_polynomial(extract_ums(simulate_gw(GwConfig(**{**c.__dict__, "replicate": r}))), spec)
           for r in range(4000)]
    assert abs(z(sim, direct)) < 3


def test_batch_concat_and_truncate_match_state_operations():
    c1 = cfg(N=6, a=0.3, horizon=0.5, seed=1)
    c2 = cfg(N=6, a=0.3, horizon=0.5, seed=2, initial=U.Ums([0.5, 0.5], [0.0]))
    b1, b2 = sample_batch(c1, 0, 300), sample_batch(c2, 0, 300)
    cat = concat_batches(b1, b2, 0.5)
    tr = truncate_batch(b1, 0.2)
    for r in range(300):
        assert U.is_isomorphic(cat.state(r), U.concat(b1.state(r), b2.state(r), 0.5))
        assert U.is_isomorphic(tr.state(r), U.truncate(b1.state(r), 0.2))


def test_tuple_sampler_matches_batch_statistics():
    c = cfg(N=200, a=0.3, horizon=0.5, seed=5, initial=U.Ums([0.6, 0.4], [0.25]))
    spec = PhiSpec(2, "exp", (1.0,))
    ts = sample_tuples(c, 2, 0, 20_000)
    fwd = ts.mass**2 * np.exp(-ts.D[:, 0, 1])
    b = sample_batch(GwConfig(**{**c.__dict__, "seed": 6}), 0, 20_000)
    from genbranch.polynomials import eval_batch
    ref = eval_batch(b.offsets, b.gaps, np.full(len(b.gaps), 1.0 / b.N), spec)
    assert abs(z(fwd, ref)) < 3
