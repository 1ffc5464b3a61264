"""Individual-based approximation of the genealogy-valued Feller diffusion.

Each unit of mass is carried by N particles of mass 1/N.  A particle waits an
Exp(b N) time and then splits in two with probability (1 + a/(bN))/2 or dies
otherwise, so the mass has mean e^{at} and variance b(e^{2at} - e^{at})/a per
unit of initial mass.

Two samplers are provided.  simulate_gw runs the particle system event by
event and records the whole genealogy.  sample_state draws the time-t
genealogy of the same particle system directly: the reconstructed tree of a
linear birth-death process started from one particle is a coalescent point
process (tips in planar order, i.i.d. node depths), so only surviving
lineages are ever generated.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np
from numba import njit

from . import seeding
from .umspace import Ums, DomainError

PARTICLE_CAP = 10_000_000
_BLOCK = 4096


class ResourceError(RuntimeError):
    """The particle count exceeded the configured cap."""


@dataclass
class GwConfig:
    N: int
    b: float
    a: float
    initial: Ums
    horizon: float
    seed: int = 0
    replicate: int = 0
    cap: int = PARTICLE_CAP

    def __post_init__(self):
        if int(self.N) != self.N or self.N < 1:
            raise ValueError("N must be an integer >= 1")
        self.N = int(self.N)
        if not self.b > 0:
            raise ValueError("b must be > 0")
        if not abs(self.a) < self.b * self.N:
            raise ValueError("need |a| < b N so that offspring probabilities lie in [0, 1]")
        if not self.horizon >= 0:
            raise ValueError("horizon must be >= 0")

    @property
    def event_rate(self):
        return self.b * self.N

    @property
    def p_split(self):
        return 0.5 * (1.0 + self.a / (self.b * self.N))

    @property
    def birth_rate(self):
        return self.event_rate * self.p_split

    @property
    def death_rate(self):
        return self.event_rate * (1.0 - self.p_split)


def founder_layout(initial, N):
    """Founder counts per initial leaf (round(mass N)) and each founder's leaf index."""
    counts = np.rint(np.asarray(initial.masses) * N).astype(np.int64)
    leaf_of = np.repeat(np.arange(len(counts)), counts)
    return counts, leaf_of


def founder_separation(initial, leaf_a, leaf_b):
    """Merge height in the initial space between founders on leaves leaf_a <= leaf_b."""
    if leaf_a == leaf_b:
        return 0.0
    return float(initial.gaps[leaf_a:leaf_b].max())


@dataclass
class Genealogy:
    """Record of every particle: parent, birth and death times, founder.

    Founders are records 0..F-1 (parent -1, born at 0); a split at time s ends
    the parent at s and creates two consecutive records born at s.  Particles
    alive at the horizon have death = inf.  Spatial runs also carry the site at
    birth and the list of migration jumps (particle, time, new site).
    """

    N: int
    horizon: float
    initial: Ums
    founder_leaf: np.ndarray
    parent: np.ndarray
    birth: np.ndarray
    death: np.ndarray
    founder: np.ndarray
    site: np.ndarray | None = None
    jump_particle: np.ndarray | None = None
    jump_time: np.ndarray | None = None
    jump_site: np.ndarray | None = None
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.parent)

    def alive_at(self, t):
        return np.flatnonzero((self.birth <= t) & (self.death > t))

    def to_json(self):
        events = []
        for i in range(len(self.parent)):
            d = self.death[i]
            events.append(
                {
                    "id": i,
                    "parent": int(self.parent[i]),
                    "birth": float(self.birth[i]),
                    "death": None if not np.isfinite(d) else float(d),
                    "founder": int(self.founder[i]),
                }
            )
        doc = {"N": self.N, "horizon": self.horizon, "particles": events}
        if self.jump_particle is not None:
            doc["jumps"] = [
                {"particle": int(p), "time": float(t), "site": int(s)}
                for p, t, s in zip(self.jump_particle, self.jump_time, self.jump_site)
            ]
            doc["birth_site"] = [int(s) for s in self.site]
        return doc

    def dumps(self):
        return json.dumps(self.to_json(), sort_keys=True)


# event-driven kernel -----------------------------------------------------------------

# status codes returned by the kernel
_DONE, _NEED_B, _NEED_M, _NEED_REC, _NEED_JUMP, _CAP = 0, 1, 2, 3, 4, 5


@njit(cache=True, nogil=True)
def _kernel(sf, si, alive, parent, birth, death, founder, site, cursite,
            jp, jt, js, ub, um, rate, p_split, horizon, cum, migrate, cap):
    # sf = [time, t_branch, t_migrate]; si = [count, n_rec, n_jump, ib, im, need_b, need_m]
    time, t_b, t_m = sf[0], sf[1], sf[2]
    count, n_rec, n_jump, ib, im, need_b, need_m = si[0], si[1], si[2], si[3], si[4], si[5], si[6]
    status = _DONE
    while True:
        if count == 0:
            status = _DONE
            break
        if need_b == 1:
            if ib >= ub.shape[0]:
                status = _NEED_B
                break
            t_b = time - np.log1p(-ub[ib, 0]) / (rate * count)
            need_b = 0
        if migrate:
            if need_m == 1:
                if im >= um.shape[0]:
                    status = _NEED_M
                    break
                t_m = time - np.log1p(-um[im, 0]) / count
                need_m = 0
            if t_m < t_b and t_m <= horizon:
                if n_jump >= jp.shape[0]:
                    status = _NEED_JUMP
                    break
                time = t_m
                j = alive[int(um[im, 1] * count)]
                row = cum[cursite[j]]
                u = um[im, 2]
                dest = 0
                while dest < row.shape[0] - 1 and u >= row[dest]:
                    dest += 1
                im += 1
                need_m = 1
                if dest != cursite[j]:
                    cursite[j] = dest
                    jp[n_jump] = j
                    jt[n_jump] = time
                    js[n_jump] = dest
                    n_jump += 1
                continue
        if t_b > horizon:
            time = horizon
            status = _DONE
            break
        if n_rec + 2 > parent.shape[0] or count + 1 > alive.shape[0]:
            status = _NEED_REC
            break
        time = t_b
        pick = int(ub[ib, 1] * count)
        coin = ub[ib, 2]
        ib += 1
        need_b = 1
        old = count
        j = alive[pick]
        death[j] = time
        if coin < p_split:
            for c in (n_rec, n_rec + 1):
                parent[c] = j
                birth[c] = time
                death[c] = np.inf
                founder[c] = founder[j]
                site[c] = cursite[j]
                cursite[c] = cursite[j]
            alive[pick] = n_rec
            alive[count] = n_rec + 1
            n_rec += 2
            count += 1
            if count > cap:
                status = _CAP
                break
        else:
            alive[pick] = alive[count - 1]
            count -= 1
        if migrate and need_m == 0 and count > 0:
            # the residual Exp(old) migration time rescaled to the new total rate
            t_m = time + (t_m - time) * old / count
    sf[0], sf[1], sf[2] = time, t_b, t_m
    si[0], si[1], si[2], si[3], si[4], si[5], si[6] = count, n_rec, n_jump, ib, im, need_b, need_m
    return status


def _grow(a, n, fill=0):
    out = np.full(n, fill, dtype=a.dtype)
    out[: len(a)] = a
    return out


def run_particles(cfg, sites=None, kernel=None):
    """Event-driven simulation; sites (per initial leaf) and kernel enable migration."""
    counts, leaf_of = founder_layout(cfg.initial, cfg.N)
    F = len(leaf_of)
    migrate = kernel is not None
    cap0 = max(64, 4 * F)
    parent = np.full(cap0, -1, dtype=np.int64)
    birth = np.zeros(cap0)
    death = np.full(cap0, np.inf)
    founder = np.zeros(cap0, dtype=np.int64)
    site = np.zeros(cap0, dtype=np.int64)
    founder[:F] = np.arange(F)
    if sites is not None:
        site[:F] = np.asarray(sites, dtype=np.int64)[leaf_of]
    cursite = site.copy()
    alive = np.zeros(cap0, dtype=np.int64)
    alive[:F] = np.arange(F)
    jp = np.zeros(64 if migrate else 0, dtype=np.int64)
    jt = np.zeros(len(jp))
    js = np.zeros(len(jp), dtype=np.int64)
    if migrate:
        cum = np.cumsum(np.asarray(kernel, dtype=float).T, axis=1)  # rows of the reversed kernel
        cum[:, -1] = 1.0
    else:
        cum = np.ones((1, 1))
    rb = seeding.stream(cfg.seed, cfg.replicate, seeding.BRANCHING)
    rm = seeding.stream(cfg.seed, cfg.replicate, seeding.MIGRATION)
    ub = np.zeros((0, 3))
    um = np.zeros((0, 3))
    sf = np.array([0.0, np.inf, np.inf])
    si = np.array([F, F, 0, 0, 0, 1, 1], dtype=np.int64)
    while True:
        status = _kernel(sf, si, alive, parent, birth, death, founder, site, cursite,
                         jp, jt, js, ub, um, cfg.event_rate, cfg.p_split, cfg.horizon, cum, migrate, cfg.cap)
        if status == _DONE:
            break
        if status == _NEED_B:
            ub = rb.random((_BLOCK, 3))
            si[3] = 0
        elif status == _NEED_M:
            um = rm.random((_BLOCK, 3))
            si[4] = 0
        elif status == _NEED_REC:
            n = 2 * len(parent)
            parent, birth, death = _grow(parent, n, -1), _grow(birth, n), _grow(death, n, np.inf)
            founder, site, cursite = _grow(founder, n), _grow(site, n), _grow(cursite, n)
            alive = _grow(alive, n)
        elif status == _NEED_JUMP:
            n = 2 * len(jp)
            jp, jt, js = _grow(jp, n), _grow(jt, n), _grow(js, n)
        elif status == _CAP:
            raise ResourceError(f"particle count exceeded cap {cfg.cap}")
    n_rec, n_jump = int(si[1]), int(si[2])
    g = Genealogy(
        N=cfg.N,
        horizon=float(cfg.horizon),
        initial=cfg.initial,
        founder_leaf=leaf_of,
        parent=parent[:n_rec].copy(),
        birth=birth[:n_rec].copy(),
        death=death[:n_rec].copy(),
        founder=founder[:n_rec].copy(),
    )
    if migrate:
        g.site = site[:n_rec].copy()
        g.jump_particle = jp[:n_jump].copy()
        g.jump_time = jt[:n_jump].copy()
        g.jump_site = js[:n_jump].copy()
    return g


def simulate_gw(cfg):
    """Simulate the particle system of cfg up to its horizon."""
    return run_particles(cfg)


# extraction -----------------------------------------------------------------------


@njit(cache=True)
def _reconstruct(parent, birth, death, n_founders, t):
    """Leaves alive at t in depth-first order with the merge height before each."""
    n = parent.shape[0]
    first_child = np.full(n, -1, dtype=np.int64)
    for i in range(n):
        p = parent[i]
        if p >= 0 and birth[i] <= t and first_child[p] == -1:
            first_child[p] = i
    leaves = np.empty(n, dtype=np.int64)
    gaps = np.empty(n, dtype=np.float64)
    owner = np.empty(n, dtype=np.int64)
    n_leaves = 0
    stack = np.empty(2 * n + 2, dtype=np.int64)
    sep = np.empty(2 * n + 2, dtype=np.float64)
    for f in range(n_founders):
        top = 0
        stack[0] = f
        sep[0] = np.inf
        pending = np.inf
        first = True
        while top >= 0:
            x = stack[top]
            s = sep[top]
            top -= 1
            if s < pending:
                pending = s
            if birth[x] <= t and death[x] > t:
                if not first:
                    gaps[n_leaves] = t - pending
                else:
                    gaps[n_leaves] = -1.0
                    first = False
                leaves[n_leaves] = x
                owner[n_leaves] = f
                n_leaves += 1
                pending = np.inf
            elif death[x] <= t and first_child[x] >= 0:
                c = first_child[x]
                top += 1
                stack[top] = c + 1
                sep[top] = death[x]
                top += 1
                stack[top] = c
                sep[top] = np.inf
    return leaves[:n_leaves], gaps[:n_leaves], owner[:n_leaves]


def reconstruct(g, t):
    """(leaf particle ids, merge heights between consecutive leaves)."""
    if t > g.horizon + 1e-12:
        raise DomainError(f"t = {t} beyond the simulated horizon {g.horizon}")
    F = len(g.founder_leaf)
    leaves, gaps, owner = _reconstruct(g.parent, g.birth, g.death, F, float(t))
    out = gaps[1:].copy()
    # between founders: t plus the founders' merge height in the initial space
    cross = np.flatnonzero(gaps[1:] < 0)
    for k in cross:
        la = g.founder_leaf[owner[k]]
        lb = g.founder_leaf[owner[k + 1]]
        out[k] = t + founder_separation(g.initial, la, lb)
    return leaves, out


def extract_ums(g, t=None):
    """The time-t state: one leaf of mass 1/N per particle alive at t."""
    t = g.horizon if t is None else t
    leaves, gaps = reconstruct(g, t)
    return Ums(np.full(len(leaves), 1.0 / g.N), gaps, t + g.initial.ceiling)


def total_mass_path(g, grid):
    """Number of particles alive at each grid time, divided by N."""
    grid = np.asarray(grid, dtype=float)
    if np.any(grid < 0) or np.any(grid > g.horizon + 1e-12):
        raise DomainError("grid must lie in [0, horizon]")
    # +1 at each birth, -1 at each death, founders born at 0
    births = np.sort(g.birth)
    deaths = np.sort(g.death[np.isfinite(g.death)])
    alive = np.searchsorted(births, grid, side="right") - np.searchsorted(deaths, grid, side="right")
    return alive / g.N


# direct sampling of the time-t genealogy ----------------------------------------------


def _F(s, lam, r):
    s = np.asarray(s, dtype=float)
    if r == 0:
        return 1.0 + lam * s
    return 1.0 + lam * np.expm1(r * s) / r


def _F_inv(z, lam, r):
    z = np.asarray(z, dtype=float)
    if r == 0:
        return (z - 1.0) / lam
    return np.log1p(r * (z - 1.0) / lam) / r


def survival_probability(T, lam, mu):
    """P(a birth-death lineage started at 0 has descendants at T)."""
    return family_size_law(T, lam, mu)[0]


def family_size_law(T, lam, mu):
    """(P(survive to T), success probability of the geometric size given survival)."""
    r = lam - mu
    FT = float(_F(T, lam, r))
    q = 1.0 / FT
    return q * np.exp(r * T), q


def depth_quantile(y, T, lam, mu):
    """Inverse CDF of a node depth H conditioned on H < T, at levels y in [0, 1)."""
    r = lam - mu
    GT = 1.0 - 1.0 / float(_F(T, lam, r))
    z = 1.0 / (1.0 - np.asarray(y) * GT)
    return _F_inv(z, lam, r)


def sample_family_sizes(n_founders, T, lam, mu, rng):
    """Numbers of descendants at T of n_founders independent particles."""
    if T <= 0:
        return np.ones(n_founders, dtype=np.int64)
    ps, q = family_size_law(T, lam, mu)
    alive = rng.binomial(n_founders, min(ps, 1.0))
    return rng.geometric(q, size=alive)


def sample_genealogy_arrays(cfg, rng):
    """Gaps and owning initial leaf of the time-T tips, drawn without simulating dead lineages.

    Returns (n_tips, gaps, leaf_of_tip, family_of_tip).
    """
    T = float(cfg.horizon)
    lam, mu = cfg.birth_rate, cfg.death_rate
    counts, _ = founder_layout(cfg.initial, cfg.N)
    init = cfg.initial
    gaps_parts, leaf_parts, fam_parts = [], [], []
    prev_leaf = None
    n_fam = 0
    for leaf, c in enumerate(counts):
        if c == 0:
            continue
        sizes = sample_family_sizes(int(c), T, lam, mu, rng)
        if len(sizes) == 0:
            continue
        total = int(sizes.sum())
        if T > 0:
            g = depth_quantile(rng.random(total), T, lam, mu)
        else:
            g = np.zeros(total)
        # the first tip of every family is separated from the previous family at T
        starts = np.r_[0, np.cumsum(sizes)[:-1]]
        g[starts] = T
        if prev_leaf is not None:
            g[0] = T + founder_separation(init, prev_leaf, leaf)
        gaps_parts.append(g)
        leaf_parts.append(np.full(total, leaf))
        fam_parts.append(np.repeat(np.arange(n_fam, n_fam + len(sizes)), sizes))
        n_fam += len(sizes)
        prev_leaf = leaf
    if not gaps_parts:
        return 0, np.empty(0), np.empty(0, dtype=int), np.empty(0, dtype=int)
    gaps = np.concatenate(gaps_parts)[1:]
    return len(gaps) + 1, gaps, np.concatenate(leaf_parts), np.concatenate(fam_parts)


def sample_state(cfg, rng=None):
    """Draw the time-horizon state with the same law as extract_ums(simulate_gw(cfg))."""
    if rng is None:
        rng = seeding.stream(cfg.seed, cfg.replicate, seeding.SAMPLING)
    n, gaps, _, _ = sample_genealogy_arrays(cfg, rng)
    return Ums(np.full(n, 1.0 / cfg.N), gaps, cfg.horizon + cfg.initial.ceiling)


def sample_total_mass(cfg, rng):
    """Total mass at the horizon (exact law), without the genealogy."""
    counts, _ = founder_layout(cfg.initial, cfg.N)
    n = sum(int(sample_family_sizes(int(c), cfg.horizon, cfg.birth_rate, cfg.death_rate, rng).sum()) for c in counts if c)
    return n / cfg.N


def mass_moments(a, b, t, u0=1.0):
    """Mean and variance of the total mass of the particle system (exact for every N)."""
    mean = u0 * np.exp(a * t)
    var = u0 * b * t if a == 0 else u0 * b * (np.exp(2 * a * t) - np.exp(a * t)) / a
    return mean, var


# batches of states ---------------------------------------------------------------------

BATCH_BLOCK = 1024


@dataclass
class StateBatch:
    """Many sampled states stored flat: tips of replicate r are offsets[r]:offsets[r+1].

    gaps[k] is the merge height between tip k-1 and tip k of the same replicate
    (nan for the first tip of a replicate); leaf is the initial leaf a tip
    descends from, family its founder (numbered within the batch).
    """

    N: int
    horizon: float
    ceiling: float
    offsets: np.ndarray
    gaps: np.ndarray
    leaf: np.ndarray
    family: np.ndarray
    extra: dict = field(default_factory=dict)

    @property
    def n_reps(self):
        return len(self.offsets) - 1

    def sizes(self):
        return np.diff(self.offsets)

    def tip_array(self, name):
        """Per-tip array stored as a field or in extra (None if absent)."""
        x = getattr(self, name, None)
        return self.extra.get(name) if x is None else x

    def masses(self):
        return self.sizes() / self.N

    def state(self, r):
        a, b = self.offsets[r], self.offsets[r + 1]
        return Ums(np.full(b - a, 1.0 / self.N), self.gaps[a + 1:b], self.ceiling)


def _separation_matrix(initial):
    L = len(initial.masses)
    sep = np.zeros((L, L))
    for i in range(L):
        for j in range(i + 1, L):
            sep[i, j] = sep[j, i] = initial.gaps[i:j].max()
    return sep


def _sample_batch_block(cfg, n_reps, rng):
    T = float(cfg.horizon)
    lam, mu = cfg.birth_rate, cfg.death_rate
    counts, _ = founder_layout(cfg.initial, cfg.N)
    L0 = len(counts)
    if T > 0:
        ps, q = family_size_law(T, lam, mu)
        surv = rng.binomial(counts[None, :], min(ps, 1.0), size=(n_reps, L0))
        sizes = rng.geometric(q, size=int(surv.sum()))
    else:
        surv = np.broadcast_to(counts, (n_reps, L0)).copy()
        sizes = np.ones(int(surv.sum()), dtype=np.int64)
    fam_rep = np.repeat(np.repeat(np.arange(n_reps), L0), surv.reshape(-1))
    fam_leaf = np.repeat(np.tile(np.arange(L0), n_reps), surv.reshape(-1))
    K = int(sizes.sum())
    gaps = depth_quantile(rng.random(K), T, lam, mu) if T > 0 else np.zeros(K)
    fam_start = np.cumsum(sizes) - sizes
    # first tip of each family: separated from the previous family of the replicate
    sep = _separation_matrix(cfg.initial)
    prev_leaf = np.r_[-1, fam_leaf[:-1]]
    same_rep = np.r_[False, fam_rep[1:] == fam_rep[:-1]]
    head = np.where(same_rep, T + sep[np.maximum(prev_leaf, 0), fam_leaf], np.nan)
    gaps[fam_start] = head
    tip_rep_counts = np.bincount(fam_rep, weights=sizes, minlength=n_reps).astype(np.int64)
    offsets = np.r_[0, np.cumsum(tip_rep_counts)]
    leaf = np.repeat(fam_leaf, sizes)
    family = np.repeat(np.arange(len(sizes)), sizes)
    return offsets, gaps, leaf, family


def sample_batch(cfg, start, count):
    """States of replicates start..start+count-1, drawn block by block.

    Block k (replicates k*BATCH_BLOCK ...) uses the stream keyed (seed, k), so
    results do not depend on how the range is split, as long as splits fall on
    block boundaries.
    """
    if start % BATCH_BLOCK:
        raise ValueError(f"start must be a multiple of {BATCH_BLOCK}")
    parts = []
    done = 0
    while done < count:
        k = (start + done) // BATCH_BLOCK
        n = min(BATCH_BLOCK, count - done)
        rng = seeding.stream(cfg.seed, k, seeding.BATCH_SAMPLING)
        parts.append(_sample_batch_block(cfg, BATCH_BLOCK, rng) + (n,))
        done += n
    return _join_blocks(cfg, parts)


def _join_blocks(cfg, parts):
    offs, gaps, leaf, family = [np.zeros(1, dtype=np.int64)], [], [], []
    base = 0
    fam_base = 0
    for offsets, g, lf, fam, n in parts:
        # keep only the first n replicates of the block
        end = offsets[n]
        offs.append(offsets[1:n + 1] + base)
        gaps.append(g[:end])
        leaf.append(lf[:end])
        family.append(fam[:end] + fam_base)
        fam_base += (fam[end - 1] + 1) if end else 0
        base += end
    return StateBatch(
        N=cfg.N,
        horizon=float(cfg.horizon),
        ceiling=float(cfg.horizon + cfg.initial.ceiling),
        offsets=np.concatenate(offs),
        gaps=np.concatenate(gaps) if gaps else np.empty(0),
        leaf=np.concatenate(leaf) if leaf else np.empty(0, dtype=np.int64),
        family=np.concatenate(family) if family else np.empty(0, dtype=np.int64),
    )


# n mass-weighted samples from the time-T state ----------------------------------------


@dataclass
class TupleSample:
    """n i.i.d. mass-weighted leaves from each of R sampled states.

    Sorted order (by planar position): heights[:, k] is the merge height
    between sorted samples k and k+1, same[:, k] whether they share a founder,
    leaf[:, k] the initial leaf of sorted sample k.  order[:, i] is the sorted
    rank of sample i, and D the distance matrices in sample order.
    """

    mass: np.ndarray
    heights: np.ndarray
    same: np.ndarray
    leaf: np.ndarray
    order: np.ndarray
    D: np.ndarray


def _sample_tuples_block(cfg, n, R, rng):
    T = float(cfg.horizon)
    lam, mu = cfg.birth_rate, cfg.death_rate
    counts, _ = founder_layout(cfg.initial, cfg.N)
    L0 = len(counts)
    if T > 0:
        ps, q = family_size_law(T, lam, mu)
        surv = rng.binomial(counts[None, :], min(ps, 1.0), size=(R, L0))
        sizes = rng.geometric(q, size=int(surv.sum()))
    else:
        # nothing has happened yet: one family per leaf holding all its founders
        surv = np.ones((R, L0), dtype=np.int64)
        sizes = np.tile(np.asarray(counts, dtype=np.int64), R)
    fam_rep = np.repeat(np.repeat(np.arange(R), L0), surv.reshape(-1))
    fam_leaf = np.repeat(np.tile(np.arange(L0), R), surv.reshape(-1))
    K = np.bincount(fam_rep, weights=sizes, minlength=R).astype(np.int64)
    mass = K / cfg.N
    tip_base = np.r_[0, np.cumsum(K)[:-1]]
    fam_end = np.cumsum(sizes)
    pos = rng.integers(0, np.maximum(K, 1)[:, None], size=(R, n))
    order = np.argsort(np.argsort(pos, axis=1, kind="stable"), axis=1, kind="stable")
    sp = np.sort(pos, axis=1)
    glob = tip_base[:, None] + sp
    fam = np.searchsorted(fam_end, glob, side="right")
    alive = K > 0
    fam = np.where(alive[:, None], fam, 0)
    leaf = fam_leaf[fam] if len(fam_leaf) else np.zeros((R, n), dtype=np.int64)
    gap_n = np.diff(sp, axis=1)
    same = np.diff(fam, axis=1) == 0
    sep = _separation_matrix(cfg.initial)
    u = rng.random((R, max(n - 1, 0)))
    with np.errstate(divide="ignore"):
        # the largest of m i.i.d. depths has distribution function G^m
        y = u ** (1.0 / np.maximum(gap_n, 1))
    inner = depth_quantile(y, T, lam, mu) if T > 0 else np.zeros_like(y)
    inner = np.where(gap_n == 0, 0.0, inner)
    cross = T + sep[leaf[:, :-1], leaf[:, 1:]]
    heights = np.where(same, inner, cross)
    Ds = np.zeros((R, n, n))
    for i in range(n - 1):
        Ds[:, i, i + 1:] = np.maximum.accumulate(heights[:, i:], axis=1)
    Ds = 2.0 * (Ds + Ds.transpose(0, 2, 1))
    D = np.take_along_axis(np.take_along_axis(Ds, order[:, :, None], axis=1), order[:, None, :], axis=2)
    return TupleSample(mass, heights, same, leaf, order, D)


def sample_tuples(cfg, n, start, count, sub=seeding.BATCH_SAMPLING):
    """TupleSample for replicates start..start+count-1 (block-keyed streams as sample_batch)."""
    if start % BATCH_BLOCK:
        raise ValueError(f"start must be a multiple of {BATCH_BLOCK}")
    parts = []
    done = 0
    while done < count:
        k = (start + done) // BATCH_BLOCK
        m = min(BATCH_BLOCK, count - done)
        ts = _sample_tuples_block(cfg, n, BATCH_BLOCK, seeding.stream(cfg.seed, k, sub))
        parts.append(TupleSample(*(getattr(ts, f)[:m] for f in TupleSample.__dataclass_fields__)))
        done += m
    return TupleSample(*(np.concatenate([getattr(p, f) for p in parts]) for f in TupleSample.__dataclass_fields__))


def concat_batches(b1, b2, h):
    """Replicate-wise h-concatenation of two batches with the same replicate count.

    Per-tip array fields present in both (e.g. sites) are carried along.
    """
    if b1.n_reps != b2.n_reps:
        raise ValueError("batches must have the same number of replicates")
    s1, s2 = b1.sizes(), b2.sizes()
    sizes = s1 + s2
    offsets = np.r_[0, np.cumsum(sizes)]
    K = int(offsets[-1])
    rep1 = np.repeat(np.arange(b1.n_reps), s1)
    rep2 = np.repeat(np.arange(b2.n_reps), s2)
    pos1 = offsets[rep1] + (np.arange(len(rep1)) - b1.offsets[rep1])
    pos2 = offsets[rep2] + s1[rep2] + (np.arange(len(rep2)) - b2.offsets[rep2])
    gaps = np.full(K, np.nan)
    gaps[pos1] = np.minimum(b1.gaps, h)
    gaps[pos2] = np.minimum(b2.gaps, h)
    # the first tip of the second part joins at height h unless the first part is empty
    heads = offsets[:-1] + s1
    has2 = s2 > 0
    gaps[heads[has2 & (s1 > 0)]] = h
    gaps[offsets[:-1][sizes > 0]] = np.nan

    def merge(x1, x2):
        out = np.zeros((K,) + x1.shape[1:], dtype=x1.dtype)
        out[pos1] = x1
        out[pos2] = x2
        return out

    out = StateBatch(
        N=b1.N, horizon=b1.horizon, ceiling=float(h), offsets=offsets, gaps=gaps,
        leaf=merge(b1.leaf, b2.leaf), family=merge(b1.family, b2.family + (b1.family.max() + 1 if len(b1.family) else 0)),
    )
    for name in ("site", "at"):
        x1, x2 = b1.tip_array(name), b2.tip_array(name)
        if x1 is not None and x2 is not None:
            out.extra[name] = merge(x1, x2)
    if b1.tip_array("query_times") is not None:
        out.extra["query_times"] = b1.tip_array("query_times")
    return out


def truncate_batch(b, h):
    """Replicate-wise truncation at level h (per-tip arrays shared, not copied)."""
    out = StateBatch(N=b.N, horizon=b.horizon, ceiling=min(b.ceiling, h), offsets=b.offsets,
                     gaps=np.minimum(b.gaps, h), leaf=b.leaf, family=b.family)
    out.extra = {k: b.tip_array(k) for k in ("site", "at", "query_times") if b.tip_array(k) is not None}
    return out
