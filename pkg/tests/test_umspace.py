import json

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from genbranch import umspace as U
from conftest import ums_strategy


def two(m1, m2, d):
    return U.Ums([m1, m2], [d / 2])


# construction -----------------------------------------------------------------


def test_zero_mass_leaves_are_pruned():
    u = U.Ums([1.0, 0.0, 2.0], [0.5, 0.2])
    assert len(u) == 2
    # the pruned leaf's neighbours merge at the larger adjacent height
    assert u.gaps.tolist() == [0.5]


def test_invalid_inputs_rejected():
    with pytest.raises(ValueError):
        U.Ums([1.0, 1.0], [])
    with pytest.raises(ValueError):
        U.Ums([-1.0])
    with pytest.raises(ValueError):
        U.Ums([1.0, 1.0], [0.5], ceiling=0.1)
    with pytest.raises(ValueError):
        U.Ums([1.0, 1.0], [-0.5])


def test_immutable():
    u = U.Ums.leaf(1.0)
    with pytest.raises(AttributeError):
        u.ceiling = 3.0
    with pytest.raises(ValueError):
        u.masses[0] = 2.0


# total mass ----------------------------------------------------------------------


def test_total_mass_examples():
    assert U.total_mass(U.Ums.zero()) == 0.0
    assert U.total_mass(two(2, 3, 1.0)) == 5.0


@given(ums_strategy(), ums_strategy(), st.floats(0.0, 3.0))
def test_total_mass_additive_under_concat(u, v, h):
    assert U.total_mass(U.concat(u, v, h)) == pytest.approx(U.total_mass(u) + U.total_mass(v), abs=1e-12)


# truncate ----------------------------------------------------------------------


def test_truncate_examples():
    u = two(1, 1, 5.0)
    assert U.truncate(u, 1.0).distances()[0, 1] == 2.0
    small = two(1, 1, 1.0)
    assert U.truncate(small, 1.0) == small


@given(ums_strategy(), st.floats(0, 3), st.floats(0, 3))
def test_truncate_composes_as_min(u, h1, h2):
    assert U.truncate(U.truncate(u, h1), h2) == U.truncate(u, min(h1, h2))


@given(ums_strategy(), ums_strategy(), st.floats(0, 3))
def test_truncate_retracts_concat(u, v, h):
    x = U.concat(u, v, h)
    assert U.truncate(x, h) == x
    assert U.in_s(x, h)


def test_truncate_rejects_negative_level():
    with pytest.raises(U.DomainError):
        U.truncate(U.Ums.leaf(1), -1.0)


# concat ----------------------------------------------------------------------------


@given(ums_strategy(), ums_strategy(), ums_strategy(), st.floats(0.01, 3))
def test_concat_semigroup_laws(u, v, w, h):
    assert U.is_isomorphic(U.concat(U.concat(u, v, h), w, h), U.concat(u, U.concat(v, w, h), h))
    assert U.is_isomorphic(U.concat(u, v, h), U.concat(v, u, h))
    assert U.is_isomorphic(U.concat(u, U.Ums.zero(), h), U.truncate(u, h))


def test_concat_cross_distance_is_2h(rng):
    u = U.Ums([1.0, 2.0], [0.3])
    v = U.Ums([0.5, 0.5, 1.0], [0.1, 0.2])
    h = 0.7
    D = U.concat(u, v, h).distances()
    assert np.all(D[:2, 2:] == 2 * h)


# decompose ----------------------------------------------------------------------


def test_decompose_examples():
    u = U.Ums([1.0, 2.0], [0.3])
    assert U.decompose(u, 1.0) == [u]
    v = U.Ums([0.5, 0.5], [0.1])
    parts = U.decompose(U.concat(u, v, 1.0), 1.0)
    assert len(parts) == 2
    assert U.is_isomorphic(parts[0], u) and U.is_isomorphic(parts[1], v)
    three = U.Ums([1, 1, 1], [1.0, 1.0])
    assert [U.total_mass(p) for p in U.decompose(three, 1.0)] == [1, 1, 1]
    assert all(len(p) == 1 for p in U.decompose(three, 1.0))


def test_decompose_requires_membership():
    with pytest.raises(U.DomainError):
        U.decompose(two(1, 1, 4.0), 1.0)
    with pytest.raises(U.DomainError):
        U.decompose(two(1, 1, 0.0), 0.0)


@given(ums_strategy(), st.floats(0.01, 3))
def test_decompose_concat_round_trip(u, h):
    x = U.truncate(u, h)
    parts = U.decompose(x, h)
    assert U.is_isomorphic(U.concat_all(parts, h), x)
    assert sum(U.total_mass(p) for p in parts) == pytest.approx(U.total_mass(x), abs=1e-12)


# trunk ------------------------------------------------------------------------------


def test_trunk_single_ball():
    u = U.Ums([1.0, 2.0, 0.5], [0.1, 0.2])
    t = U.trunk(u, 0.5)
    assert len(t) == 1 and U.total_mass(t) == pytest.approx(3.5)


def test_trunk_three_families():
    # three families of internal depth < h, mutually at 2t
    t, h = 1.0, 0.5
    fam = [U.Ums([1.0, 1.0], [0.2]), U.Ums([0.5]), U.Ums([0.25, 0.25, 1.0], [0.1, 0.3])]
    u = U.concat_all(fam, t)
    tr = U.trunk(u, h, t)
    assert tr.masses.tolist() == [2.0, 0.5, 1.5]
    # distances shrink by 2h: 2t - 2h
    D = tr.distances()
    assert np.allclose(D[np.triu_indices(3, 1)], 2 * (t - h))


def test_trunk_full_depth_without_structure():
    u = U.Ums([1.0, 2.0], [0.0])
    tr = U.trunk(u, 0.5)
    assert U.total_mass(tr) == 3.0


@given(ums_strategy(), st.floats(0.01, 2.0), st.floats(0.05, 1.0))
def test_trunk_conserves_mass(u, t, frac):
    x = U.truncate(u, t)
    assert U.total_mass(U.trunk(x, frac * t, t)) == pytest.approx(U.total_mass(x), abs=1e-12)


def test_trunk_preconditions():
    with pytest.raises(U.DomainError):
        U.trunk(U.Ums.leaf(1), 0.0)
    with pytest.raises(U.DomainError):
        U.trunk(two(1, 1, 0.2), 2.0, 1.0)


# sampling --------------------------------------------------------------------------


def test_sample_single_leaf(rng):
    assert U.sample_distance_matrix(U.Ums.leaf(2.0), 2, rng).entries == (0.0,)


def test_sample_two_leaves_distance_law(rng):
    p, d = 0.3, 1.4
    u = two(p, 1 - p, d)
    n = 40_000
    hits = sum(U.sample_distance_matrix(u, 2, rng).entries[0] == d for _ in range(n))
    expect = 2 * p * (1 - p)
    se = np.sqrt(expect * (1 - expect) / n)
    assert abs(hits / n - expect) < 3 * se


@given(ums_strategy(), st.integers(2, 6), st.integers(0, 2**32 - 1))
def test_sampled_matrices_are_ultrametric(u, n, seed):
    dm = U.sample_distance_matrix(u, n, np.random.default_rng(seed))
    assert U.is_ultrametric(dm)


def test_sampling_zero_tree_fails(rng):
    with pytest.raises(U.DomainError):
        U.sample_distance_matrix(U.Ums.zero(), 2, rng)


# canonical form / serialization -----------------------------------------------------


def test_isomorphism_examples():
    assert U.is_isomorphic(two(1, 2, 1.0), two(2, 1, 1.0))
    assert not U.is_isomorphic(two(1, 1, 2.0), two(1, 1, 4.0))


@given(ums_strategy(), st.integers(0, 2**32 - 1))
def test_canonical_form_invariant_under_relabelling(u, seed):
    # rebuild from a permuted distance matrix
    perm = np.random.default_rng(seed).permutation(len(u))
    D = u.distances()[np.ix_(perm, perm)]
    v = U.from_distance_matrix(u.masses[perm], D, u.ceiling)
    assert U.canonical_form(u) == U.canonical_form(v)


@given(ums_strategy())
def test_json_round_trip_bit_exact(u):
    v = U.from_json(json.loads(json.dumps(U.to_json(u))))
    assert v == u


def test_canonical_form_rejects_bad_tolerance():
    with pytest.raises(ValueError):
        U.canonical_form(two(1, 1, 1.0), tol=0.0)
    with pytest.raises(ValueError):
        U.canonical_form(two(1, 1, 1.0), tol=1e-300)


def test_json_round_trip_preserves_layout():
    u = U.Ums([0.5, 0.25, 1.0], [0.1, 0.3], 0.5)
    v = U.loads(U.dumps(u))
    assert v == u
