"""Acceptance criteria at their stated tolerances, one PASS/FAIL line each.

Seeds are fixed constants chosen before the runs; they are never tuned.
Run directly with `python3 tests/test_acceptance.py` or through pytest.
"""

import math
import sys
import time

import pytest

from genbranch import umspace as U
from genbranch import verification as V
from genbranch.spatial_sim import MarkedUms, SiteSpace

SEED = 20_240_601
_OUT = []


def _line(k, title, reports, started, extra=""):
    ok = all(r.passed for r in reports)
    worst = [r for rep in reports for r in rep.rows if not r["passed"]]
    msg = f"CRITERION {k} {title}: {'PASS' if ok else 'FAIL'} ({time.perf_counter() - started:.1f} s){extra}"
    if worst:
        msg += f"; {len(worst)} failing rows, first: {worst[0]['name']}"
    _OUT.append(msg)
    return ok


def _max_z(reports):
    zs = [abs(r["z"]) for rep in reports for r in rep.rows if r.get("z") is not None and math.isfinite(r["z"])]
    return f", max |z| {max(zs):.2f}" if zs else ""


def criterion_1():
    t0 = time.perf_counter()
    reps = []
    for k, (a, t) in enumerate([(1.0, 0.5), (1.0, 1.0), (0.5, 0.5), (0.5, 1.0)]):
        cfg = V.MomentConfig(a=a, b=1.0, t=t, u0=1.0, N=2000, replicates=20_000, seed=SEED + k)
        reps.append(V.test_moment_recursion(cfg))
    # the worked value quoted with the criterion
    assert V.closed_form_squares(1.0, 1.0, 1.0) == pytest.approx(4.67077, abs=5e-6)
    return _line(1, "moment identity", reps, t0, _max_z(reps)), reps


def _branching_configs():
    single = U.Ums.leaf(1.0)
    # s = 0 forces every distance inside a starting state to be zero
    two_a = U.Ums([0.5, 0.5], [0.0])
    two_b = U.Ums([0.75, 0.25], [0.0])
    space = SiteSpace.uniform(2)
    cases = []
    for t in (0.25, 0.5):
        cases.append(dict(x1=single, x2=single, t=t))
        cases.append(dict(x1=two_a, x2=two_b, t=t))
        for mode in ("location", "path"):
            cases.append(dict(x1=MarkedUms([1.0], [], None, [0]), x2=MarkedUms([1.0], [], None, [1]),
                              t=t, mode=mode, space=space))
            cases.append(dict(x1=MarkedUms([0.5, 0.5], [0.0], None, [0, 1]),
                              x2=MarkedUms([0.75, 0.25], [0.0], None, [1, 1]), t=t, mode=mode, space=space))
    return [V.BranchingConfig(s=0.0, replicates=100_000, seed=SEED + 100 + k, **c) for k, c in enumerate(cases)]


def criterion_2():
    t0 = time.perf_counter()
    reps = [V.test_generalized_branching(c) for c in _branching_configs()]
    return _line(2, "generalized branching", reps, t0, f", {len(reps)} settings" + _max_z(reps)), reps


def criterion_3():
    t0 = time.perf_counter()
    rep = V.test_duality(seed=SEED + 200, replicates=100_000)
    ns = {c["n"] for c in rep.parameters["grid"]}
    assert ns == {1, 2, 3} and all(c["t"] <= 0.5 for c in rep.parameters["grid"])
    conv = f", convention {rep.parameters['resolved_convention']!r}"
    return _line(3, "Feynman-Kac duality", [rep], t0, conv + _max_z([rep])), [rep]


def criterion_4():
    t0 = time.perf_counter()
    rep = V.test_algebra_suite(n_instances=1000, seed=SEED + 300)
    fails = sum(r.get("failures", 0) for r in rep.rows)
    return _line(4, "exact algebra", [rep], t0, f", {fails} failures"), [rep]


def criterion_5():
    t0 = time.perf_counter()
    rep = V.test_monotone_approximation(n_instances=100, seed=SEED + 400)
    return _line(5, "monotone approximation", [rep], t0), [rep]


def criterion_6():
    t0 = time.perf_counter()
    rep = V.test_calibration(seed=SEED + 500)
    return _line(6, "model calibration", [rep], t0, _max_z([rep])), [rep]


CRITERIA = [criterion_1, criterion_2, criterion_3, criterion_4, criterion_5, criterion_6]


@pytest.mark.parametrize("criterion", CRITERIA, ids=lambda f: f.__name__)
def test_criterion(criterion, capsys):
    ok, reps = criterion()
    with capsys.disabled():
        print("\n" + _OUT.pop())
    assert ok, [r for rep in reps for r in rep.rows if not r["passed"]]


if __name__ == "__main__":
    results = []
    for c in CRITERIA:
        results.append(c()[0])
        print(_OUT.pop(), flush=True)
    sys.exit(0 if all(results) else 1)
