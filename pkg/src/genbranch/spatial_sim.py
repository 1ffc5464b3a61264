"""Spatial (marked) genealogies on a finite site space.

Particles branch as in feller_sim and jump at rate 1 with the reversed
kernel abar(x, y) = a(y, x).  States carry one mark per leaf: the current
site (location mode) or the whole line of descent as a piecewise-constant
path (path mode).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from numba import njit
from scipy.linalg import expm

from . import seeding
from . import umspace
from .feller_sim import (
    BATCH_BLOCK,
    GwConfig,
    StateBatch,
    _sample_batch_block,
    reconstruct,
    run_particles,
)
from .polynomials import NO_WINDOW, Window, eval_polynomial
from .umspace import DomainError, Ums

MODES = ("location", "path")


@dataclass(frozen=True)
class SiteSpace:
    """Finite site set 0..n-1 with migration kernel a (a stochastic matrix).

    The kernel must be doubly stochastic so that the reversed kernel used by
    the particles is again a probability kernel and the mean occupation
    follows dm/dt = (a - I) m + drift m.
    """

    kernel: np.ndarray

    def __post_init__(self):
        k = np.array(self.kernel, dtype=float)
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] < 1:
            raise ValueError("kernel must be a square matrix")
        if np.any(k < 0):
            raise ValueError("kernel entries must be nonnegative")
        if not np.allclose(k.sum(axis=1), 1.0, atol=1e-12):
            raise ValueError("kernel rows must sum to 1")
        if not np.allclose(k.sum(axis=0), 1.0, atol=1e-12):
            raise ValueError("kernel must be doubly stochastic (columns sum to 1)")
        k.setflags(write=False)
        object.__setattr__(self, "kernel", k)

    @property
    def n_sites(self):
        return self.kernel.shape[0]

    @property
    def reversed_kernel(self):
        return self.kernel.T

    @classmethod
    def uniform(cls, n):
        return cls(np.full((n, n), 1.0 / n))

    @classmethod
    def torus(cls, n):
        """Nearest-neighbour walk on Z_n."""
        k = np.zeros((n, n))
        for i in range(n):
            k[i, (i - 1) % n] += 0.5
            k[i, (i + 1) % n] += 0.5
        return cls(k)

    def to_json(self):
        return {"kernel": self.kernel.tolist()}


# ancestral paths --------------------------------------------------------------------


class AncestralPath:
    """Right-continuous piecewise-constant path, frozen outside the window [lo, hi].

    sites[0] is the value up to the first jump, sites[k] the value from
    times[k-1] on.  Jumps outside (lo, hi] and jumps to the current site are
    dropped on construction, so equal paths have equal representations.
    A shifted path keeps its unshifted coordinates and the offset, so that
    shifting back restores the original path exactly.
    """

    __slots__ = ("times", "sites", "lo", "hi", "_base", "_offset")

    def __init__(self, times, sites, lo, hi):
        times = np.asarray(times, dtype=float).reshape(-1)
        sites = np.asarray(sites, dtype=np.int64).reshape(-1)
        if len(sites) != len(times) + 1:
            raise ValueError("need one more site than jump times")
        lo, hi = float(lo), float(hi)
        if not lo <= hi:
            raise ValueError("window must satisfy lo <= hi")
        if len(times) and np.any(np.diff(times) < 0):
            raise ValueError("jump times must be ascending")
        # value at lo becomes the start; jumps after hi never happen
        k0 = int(np.searchsorted(times, lo, side="right"))
        k1 = int(np.searchsorted(times, hi, side="right"))
        t = times[k0:k1]
        s = sites[k0:k1 + 1]
        keep = np.r_[True, s[1:] != s[:-1]]
        jumps = keep[1:]
        self._set((umspace._frozen(t[jumps]), umspace._frozen(s[keep], np.int64), lo, hi), 0.0)

    def _set(self, base, offset):
        times, sites, lo, hi = base
        if offset:
            times = umspace._frozen(times + offset)
            lo, hi = lo + offset, hi + offset
        for name, value in (("times", times), ("sites", sites), ("lo", lo), ("hi", hi),
                            ("_base", base), ("_offset", offset)):
            object.__setattr__(self, name, value)

    def __setattr__(self, name, value):
        raise AttributeError("AncestralPath is immutable")

    @classmethod
    def constant(cls, site, lo=0.0, hi=0.0):
        return cls([], [site], lo, hi)

    def at(self, s):
        """Site occupied at time(s) s."""
        s = np.clip(np.asarray(s, dtype=float), self.lo, self.hi)
        return self.sites[np.searchsorted(self.times, s, side="right")]

    @property
    def end(self):
        return int(self.sites[-1])

    def average(self, weights, lo, hi):
        """Time average of weights[v(s)] over [lo, hi] (the value at hi if lo == hi)."""
        w = np.asarray(weights, dtype=float)
        if hi < lo:
            raise ValueError("need lo <= hi")
        if hi == lo:
            return float(w[self.at(hi)])
        cuts = np.r_[lo, self.times[(self.times > lo) & (self.times < hi)], hi]
        vals = w[self.at(cuts[:-1])]
        return float(np.dot(vals, np.diff(cuts)) / (hi - lo))

    def shift(self, c):
        out = object.__new__(AncestralPath)
        out._set(self._base, self._offset + c)
        return out

    def freeze_before(self, s):
        """Constant v(s) before s (the path truncation)."""
        if s <= self.lo:
            return self
        return AncestralPath(self.times, self.sites, min(s, self.hi), self.hi)

    def key(self):
        return (tuple(self.times.tolist()), tuple(self.sites.tolist()), self.lo, self.hi)

    def __eq__(self, other):
        if not isinstance(other, AncestralPath):
            return NotImplemented
        return self.key() == other.key()

    def __hash__(self):
        return hash(self.key())

    def __repr__(self):
        return f"AncestralPath(times={self.times.tolist()}, sites={self.sites.tolist()}, window=[{self.lo}, {self.hi}])"

    def to_json(self):
        return {"times": self.times.tolist(), "sites": self.sites.tolist(), "window": [self.lo, self.hi]}

    @classmethod
    def from_json(cls, d):
        lo, hi = d["window"]
        return cls(d["times"], d["sites"], lo, hi)


def agree_until(p, q, s):
    """True if the two paths coincide on (-inf, s]."""
    grid = np.r_[p.times[p.times <= s], q.times[q.times <= s], s, min(p.lo, q.lo)]
    return bool(np.array_equal(p.at(grid), q.at(grid)))


# marked spaces -----------------------------------------------------------------------


class MarkedUms(Ums):
    """Ums with one mark per leaf: an int site (location mode) or an AncestralPath."""

    __slots__ = ("mode",)

    def __init__(self, masses=(), gaps=(), ceiling=None, marks=None, mode="location"):
        if mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}")
        if marks is None:
            marks = [] if len(np.atleast_1d(masses)) == 0 else None
        if marks is None:
            raise ValueError("MarkedUms needs marks")
        if mode == "location":
            marks = [int(m) for m in marks]
        elif not all(isinstance(m, AncestralPath) for m in marks):
            raise ValueError("path mode marks must be AncestralPath values")
        super().__init__(masses, gaps, ceiling, marks)
        object.__setattr__(self, "mode", mode)

    def _like(self, masses, gaps, ceiling, marks):
        return MarkedUms(masses, gaps, ceiling, [] if marks is None else marks, self.mode)

    @classmethod
    def zero(cls, mode="location"):
        return cls([], [], 0.0, [], mode)

    def __eq__(self, other):
        base = super().__eq__(other)
        if base is NotImplemented or not base:
            return base
        return self.mode == other.mode

    __hash__ = None

    def sites(self, s=None):
        """Site of every leaf (at time s in path mode; default the path end)."""
        if self.mode == "location":
            return np.array(self.marks, dtype=np.int64)
        if s is None:
            return np.array([m.end for m in self.marks], dtype=np.int64)
        return np.array([int(m.at(s)) for m in self.marks], dtype=np.int64)

    def unmarked(self):
        return Ums(self.masses, self.gaps, self.ceiling)


def encode_mark(m):
    return m.to_json() if isinstance(m, AncestralPath) else int(m)


def decode_mark(d):
    return AncestralPath.from_json(d) if isinstance(d, dict) else int(d)


def marked_to_json(u):
    doc = umspace.to_json(u, encode_mark)
    doc["mode"] = u.mode
    return doc


def marked_from_json(doc):
    ceiling = float(doc["ceiling"])
    masses, gaps, marks = umspace._flatten(doc["trees"], ceiling, decode_mark)
    return MarkedUms(masses, gaps, ceiling, marks or [], doc.get("mode", "location"))


def _require(u, mode):
    if not isinstance(u, MarkedUms) or u.mode != mode:
        raise DomainError(f"operation needs a {mode}-mode MarkedUms")


# simulation and extraction -----------------------------------------------------------


def simulate_brw(space, cfg, init):
    """Branching random walk: feller_sim branching plus rate-1 jumps with the reversed kernel.

    init is a MarkedUms whose Ums part must equal cfg.initial; path-mode
    initial marks contribute only their end site.
    """
    if init.unmarked() != Ums(cfg.initial.masses, cfg.initial.gaps, cfg.initial.ceiling):
        raise ValueError("cfg.initial must be the unmarked part of init")
    sites = init.sites()
    if len(sites) and (sites.min() < 0 or sites.max() >= space.n_sites):
        raise ValueError("initial site outside the site space")
    return run_particles(cfg, sites=sites, kernel=space.kernel)


def _jumps_by_particle(g):
    order = np.lexsort((g.jump_time, g.jump_particle))
    jp, jt, js = g.jump_particle[order], g.jump_time[order], g.jump_site[order]
    bounds = np.searchsorted(jp, np.arange(len(g.parent) + 1))
    return jt, js, bounds


def lineage_path(g, particle, t, jumps=None):
    """Raw path (window [0, t]) along the line of descent of a particle."""
    jt, js, bounds = jumps if jumps is not None else _jumps_by_particle(g)
    chain = []
    x = int(particle)
    while x >= 0:
        chain.append(x)
        x = int(g.parent[x])
    times, sites = [], [int(g.site[chain[-1]])]
    for x in reversed(chain):
        a, b = bounds[x], bounds[x + 1]
        sel = jt[a:b] <= t
        times.extend(jt[a:b][sel].tolist())
        sites.extend(js[a:b][sel].tolist())
    return AncestralPath(times, sites, 0.0, t)


def site_at(g, particles, t, jumps=None):
    jt, js, bounds = jumps if jumps is not None else _jumps_by_particle(g)
    out = np.empty(len(particles), dtype=np.int64)
    for k, x in enumerate(particles):
        a, b = bounds[x], bounds[x + 1]
        n = int(np.searchsorted(jt[a:b], t, side="right"))
        out[k] = js[a + n - 1] if n else g.site[x]
    return out


def extract_marked_ums(g, t=None, mode="location"):
    """Time-t marked state of a spatial genealogy (raw paths in path mode)."""
    if mode not in MODES:
        raise ValueError(f"mode must be one of {MODES}")
    if g.site is None:
        raise ValueError("genealogy carries no sites")
    t = g.horizon if t is None else float(t)
    leaves, gaps = reconstruct(g, t)
    jumps = _jumps_by_particle(g)
    if mode == "location":
        marks = site_at(g, leaves, t, jumps).tolist()
    else:
        marks = [lineage_path(g, x, t, jumps) for x in leaves]
    return MarkedUms(np.full(len(leaves), 1.0 / g.N), gaps, t + g.initial.ceiling, marks, mode)


def adjust_paths(u, t, inverse=False):
    """R_t: shift every path by -t (by +t when inverse)."""
    _require(u, "path")
    c = t if inverse else -t
    return u._like(u.masses, u.gaps, u.ceiling, [m.shift(c) for m in u.marks])


def truncate_marked(u, h):
    """Cap distances at 2h; in path mode also freeze each path before hi - h."""
    if not h >= 0:
        raise DomainError(f"truncation level must be >= 0, got {h}")
    if u.mode == "path":
        marks = [m.freeze_before(m.hi - h) for m in u.marks]
        u = u._like(u.masses, u.gaps, u.ceiling, marks)
    return umspace.truncate(u, h)


def concat_marked(u, v, h):
    return umspace.concat(truncate_marked(u, h), truncate_marked(v, h), h)


def historical_projection(u):
    """Mass of every distinct path: list of (AncestralPath, mass) in first-seen order."""
    _require(u, "path")
    acc = {}
    for m, w in zip(u.marks, u.masses):
        acc[m] = acc.get(m, 0.0) + float(w)
    return list(acc.items())


def occupation_measure(atoms, s, n_sites):
    """Mass at each site at time s of a weighted list of paths."""
    out = np.zeros(n_sites)
    for p, w in atoms:
        out[int(p.at(s))] += w
    return out


def site_histogram(u, n_sites):
    """Per-site mass of a location-mode state."""
    _require(u, "location")
    return np.bincount(np.asarray(u.marks, dtype=np.int64), weights=u.masses, minlength=n_sites)


def eval_marked_polynomial(u, spec, *, window=NO_WINDOW, **kw):
    """Phi^{n,phi,chi} on a marked state; chi must match the mark mode."""
    if spec.marked:
        if not isinstance(u, MarkedUms):
            raise DomainError("marked functional on an unmarked state")
        if spec.chi_mode != u.mode:
            raise DomainError(f"chi {spec.chi!r} does not apply to {u.mode}-mode marks")
    return eval_polynomial(u, spec, window=window, **kw)


def mean_occupation(space, drift, m0, t):
    """Solution of dm/dt = (a - I) m + drift m at time t."""
    Q = space.kernel - np.eye(space.n_sites) + drift * np.eye(space.n_sites)
    return expm(Q * t) @ np.asarray(m0, dtype=float)


# batched exact sampler ------------------------------------------------------------------


@njit(cache=True)
def _site_on(k, s, birth, first, start, joff, jt, js):
    # walk to the ancestor lineage alive at time s
    while s < birth[k] and not first[k]:
        k -= 1
    a, b = joff[k], joff[k + 1]
    n = np.searchsorted(jt[a:b], s, side="right")
    return js[a + n - 1] if n > 0 else start[k]


@njit(cache=True)
def _paint(birth, first, root_site, joff, jt, ju, cum, queries, start, js, at):
    K = birth.shape[0]
    for k in range(K):
        if first[k]:
            s = root_site[k]
        else:
            s = _site_on(k - 1, birth[k], birth, first, start, joff, jt, js)
        start[k] = s
        a, b = joff[k], joff[k + 1]
        jt[a:b] = np.sort(jt[a:b])
        for j in range(a, b):
            row = cum[s]
            u = ju[j]
            nxt = 0
            while nxt < row.shape[0] - 1 and row[nxt] <= u:
                nxt += 1
            s = nxt
            js[j] = s
        for q in range(queries.shape[0]):
            at[k, q] = _site_on(k, queries[q], birth, first, start, joff, jt, js)


@dataclass
class MarkedBatch(StateBatch):
    """StateBatch with migration along the tree.

    Tip k's own lineage starts at time birth[k] (0 for the first tip of a
    family) from the site its left neighbour's line occupies then; its jumps
    are jump_time/jump_site[joff[k]:joff[k+1]].  site is the site at the
    horizon and at[:, j] the site at raw time query_times[j].
    """

    birth: np.ndarray = None
    first: np.ndarray = None
    start: np.ndarray = None
    joff: np.ndarray = None
    jump_time: np.ndarray = None
    jump_site: np.ndarray = None
    site: np.ndarray = None
    at: np.ndarray = None
    query_times: np.ndarray = None

    def path(self, k):
        """Raw path (window [0, horizon]) of tip k."""
        segs = []
        while True:
            a, b = self.joff[k], self.joff[k + 1]
            segs.append((self.birth[k], self.start[k], self.jump_time[a:b], self.jump_site[a:b]))
            if self.first[k]:
                break
            k -= 1
            # the left neighbour's line before the birth of the current segment
            while not self.first[k] and self.birth[k] >= segs[-1][0]:
                k -= 1
        times, sites = [], [int(segs[-1][1])]
        for i in range(len(segs) - 1, -1, -1):
            _, _, jt, js = segs[i]
            stop = segs[i - 1][0] if i else np.inf
            sel = jt < stop
            times.extend(jt[sel].tolist())
            sites.extend(js[sel].tolist())
        return AncestralPath(times, sites, 0.0, self.horizon)

    def marked_state(self, r, mode="location"):
        a, b = self.offsets[r], self.offsets[r + 1]
        if mode == "location":
            marks = self.site[a:b].tolist()
        else:
            marks = [self.path(k) for k in range(a, b)]
        return MarkedUms(np.full(b - a, 1.0 / self.N), self.gaps[a + 1:b], self.ceiling, marks, mode)


def _paint_block(cfg, cum, init_sites, parts, rng, queries):
    offsets, gaps, leaf, family = parts
    T = float(cfg.horizon)
    K = len(gaps)
    first = np.r_[True, family[1:] != family[:-1]] if K else np.zeros(0, dtype=bool)
    birth = np.where(first, 0.0, T - np.nan_to_num(gaps, nan=T))
    length = T - birth
    nj = rng.poisson(length)
    joff = np.r_[0, np.cumsum(nj)].astype(np.int64)
    jt = np.repeat(birth, nj) + rng.random(joff[-1]) * np.repeat(length, nj)
    ju = rng.random(joff[-1])
    start = np.zeros(K, dtype=np.int64)
    js = np.zeros(joff[-1], dtype=np.int64)
    at = np.zeros((K, len(queries)), dtype=np.int64)
    root = np.asarray(init_sites, dtype=np.int64)[leaf]
    _paint(birth, first, root, joff, jt, ju, cum, queries, start, js, at)
    last = joff[1:] - 1
    site = np.where(nj > 0, js[np.maximum(last, 0)], start)
    return dict(birth=birth, first=first, start=start, joff=joff, jump_time=jt, jump_site=js, site=site, at=at)


def sample_marked_batch(space, cfg, init_sites, start, count, query_times=()):
    """Marked states of replicates start..start+count-1 (see feller_sim.sample_batch).

    init_sites gives the site of every leaf of cfg.initial; query_times are raw
    times in [0, horizon] at which every tip's ancestral site is recorded.
    """
    if start % BATCH_BLOCK:
        raise ValueError(f"start must be a multiple of {BATCH_BLOCK}")
    cum = np.cumsum(space.reversed_kernel, axis=1)
    cum[:, -1] = 1.0
    queries = np.asarray(query_times, dtype=float)
    pieces = []
    done = 0
    while done < count:
        k = (start + done) // BATCH_BLOCK
        n = min(BATCH_BLOCK, count - done)
        parts = _sample_batch_block(cfg, BATCH_BLOCK, seeding.stream(cfg.seed, k, seeding.BATCH_SAMPLING))
        extra = _paint_block(cfg, cum, init_sites, parts, seeding.stream(cfg.seed, k, seeding.BATCH_MARKS), queries)
        pieces.append((parts, extra, n))
        done += n
    return _join_marked(cfg, pieces, queries)


def _join_marked(cfg, pieces, queries):
    offs, cols = [np.zeros(1, dtype=np.int64)], {}
    base = fam_base = jbase = 0
    for (offsets, gaps, leaf, family), extra, n in pieces:
        end = offsets[n]
        offs.append(offsets[1:n + 1] + base)
        je = extra["joff"][end]
        vals = dict(gaps=gaps[:end], leaf=leaf[:end], family=family[:end] + fam_base,
                    birth=extra["birth"][:end], first=extra["first"][:end], start=extra["start"][:end],
                    site=extra["site"][:end], at=extra["at"][:end],
                    joff=extra["joff"][1:end + 1] + jbase,
                    jump_time=extra["jump_time"][:je], jump_site=extra["jump_site"][:je])
        for name, v in vals.items():
            cols.setdefault(name, []).append(v)
        fam_base += (family[end - 1] + 1) if end else 0
        base += end
        jbase += je
    joined = {name: np.concatenate(v) for name, v in cols.items()}
    joined["joff"] = np.r_[0, joined["joff"]].astype(np.int64)
    return MarkedBatch(
        N=cfg.N,
        horizon=float(cfg.horizon),
        ceiling=float(cfg.horizon + cfg.initial.ceiling),
        offsets=np.concatenate(offs),
        query_times=queries,
        **joined,
    )


# sites of n sampled leaves -------------------------------------------------------------


def evolve_sites(sites, dt, cum, rng):
    """Run independent rate-1 jump chains (cumulative kernel rows cum) for times dt."""
    sites = np.array(sites, dtype=np.int64)
    nj = rng.poisson(np.maximum(dt, 0.0))
    for k in range(int(nj.max()) if len(nj) else 0):
        idx = np.flatnonzero(nj > k)
        u = rng.random(len(idx))
        rows = cum[sites[idx]]
        sites[idx] = np.minimum((u[:, None] >= rows).sum(axis=1), cum.shape[1] - 1)
    return sites


def _tuple_sites(ts, T, init_sites, cum, rng):
    R, n = ts.leaf.shape
    root = np.asarray(init_sites, dtype=np.int64)[ts.leaf]
    # branch time of sorted sample j off the line of sample j-1 (0 for a new founder)
    bt = np.zeros((R, n))
    if n > 1:
        bt[:, 1:] = np.where(ts.same, T - ts.heights, 0.0)
    levels = np.sort(np.concatenate([bt[:, 1:], np.full((R, 1), T)], axis=1), axis=1)
    V = np.zeros((R, n, n), dtype=np.int64)  # V[:, j, e] = site of line j at levels[:, e]
    rows = np.arange(R)
    for j in range(n):
        if j == 0:
            cur = root[:, 0].copy()
        else:
            e_j = np.argmax(levels >= bt[:, j:j + 1], axis=1)
            cur = np.where(ts.same[:, j - 1], V[rows, j - 1, e_j], root[:, j])
        cur_t = bt[:, j].copy()
        for e in range(n):
            tau = levels[:, e]
            before = tau <= bt[:, j]
            if j:
                inherit = np.where(ts.same[:, j - 1], V[:, j - 1, e], root[:, j])
            else:
                inherit = root[:, 0]
            moved = evolve_sites(cur, np.where(before, 0.0, tau - cur_t), cum, rng)
            cur = np.where(before, cur, moved)
            cur_t = np.where(before, cur_t, tau)
            V[:, j, e] = np.where(before, inherit, cur)
    sorted_sites = V[:, :, n - 1]
    return np.take_along_axis(sorted_sites, ts.order, axis=1)


def sample_marked_tuples(space, cfg, init_sites, n, start, count):
    """(TupleSample, sites at the horizon in sample order) for replicates start..start+count-1."""
    from .feller_sim import TupleSample, _sample_tuples_block

    if start % BATCH_BLOCK:
        raise ValueError(f"start must be a multiple of {BATCH_BLOCK}")
    cum = np.cumsum(space.reversed_kernel, axis=1)
    cum[:, -1] = 1.0
    parts, sites = [], []
    done = 0
    fields = TupleSample.__dataclass_fields__
    while done < count:
        k = (start + done) // BATCH_BLOCK
        m = min(BATCH_BLOCK, count - done)
        ts = _sample_tuples_block(cfg, n, BATCH_BLOCK, seeding.stream(cfg.seed, k, seeding.BATCH_SAMPLING))
        s = _tuple_sites(ts, float(cfg.horizon), init_sites, cum, seeding.stream(cfg.seed, k, seeding.BATCH_MARKS))
        parts.append(TupleSample(*(getattr(ts, f)[:m] for f in fields)))
        sites.append(s[:m])
        done += m
    ts = TupleSample(*(np.concatenate([getattr(p, f) for p in parts]) for f in fields))
    return ts, np.concatenate(sites)


def batch_chi(spec, batch, adjusted=True):
    """chi^k at every tip of a (marked) batch, or None for unmarked functionals.

    Path functionals read the recorded sites batch.at; their evaluation times
    are taken in adjusted coordinates (0 = the horizon) unless adjusted=False.
    """
    if not spec.marked:
        return None
    cp = spec.chi_params
    if spec.chi_mode == "location":
        site = batch.tip_array("site")
        if site is None:
            raise DomainError("batch carries no sites")
        if spec.chi == "site":
            return [(site == cp["sites"][k]).astype(float) for k in range(spec.n)]
        return [np.asarray(cp["weights"][k], dtype=float)[site] for k in range(spec.n)]
    at = batch.tip_array("at")
    times = np.asarray(cp["times"], dtype=float) + (batch.horizon if adjusted else 0.0)
    qt = batch.tip_array("query_times")
    if at is None or qt is None or len(qt) != len(times) or not np.allclose(qt, times, atol=1e-12):
        raise DomainError("batch was not sampled at the functional's evaluation times")
    if spec.chi == "path_site":
        return [np.all(at == np.asarray(cp["sites"][k])[None, :], axis=1).astype(float) for k in range(spec.n)]
    if spec.chi == "path_weight":
        cols = np.arange(at.shape[1])
        return [np.prod(np.asarray(cp["weights"][k], dtype=float)[cols, at], axis=1) for k in range(spec.n)]
    raise DomainError(f"chi {spec.chi!r} is not available on batches")
