"""Coalescent duals with Feynman-Kac weights and both sides of the duality.

n lineages start as singletons.  Every pair of blocks (every co-located pair
in the spatial version) merges at rate b, distances between elements of
different blocks grow at rate 2, and the weight exp(beta) accumulates

    beta = int_0^t  c_pairs(s) * (#coexisting pairs) + a * (#blocks) ds

with c_pairs = b (convention "b", the default) or 1 (convention "unit").
The pairing H(u0, C) integrates phi(r^p + r') over one mass-weighted leaf of
u0 per block.
"""

from __future__ import annotations

import itertools
import string
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .feller_sim import GwConfig, sample_tuples
from .polynomials import NO_WINDOW, PhiSpec, SmoothTruncation, Window, contract, integrand_pairs
from .spatial_sim import AncestralPath, MarkedUms, SiteSpace, sample_marked_tuples
from .umspace import DomainError, Ums, total_mass

CONVENTIONS = ("b", "unit")
MAX_N = 4


def _pair_rate(b, convention):
    if convention not in CONVENTIONS:
        raise ValueError(f"convention must be one of {CONVENTIONS}")
    return b if convention == "b" else 1.0


@dataclass
class CoalescentState:
    """Partition (tuple of sorted blocks), distances r', block sites, time, FK exponent."""

    partition: tuple
    rprime: np.ndarray
    s: float = 0.0
    beta: float = 0.0
    sites: tuple | None = None
    active: tuple | None = None

    @property
    def n(self):
        return len(self.rprime)

    @property
    def n_blocks(self):
        return len(self.partition)

    def block_of(self):
        out = np.empty(self.n, dtype=np.int64)
        for k, blk in enumerate(self.partition):
            out[list(blk)] = k
        return out

    def to_json(self):
        d = {"partition": [list(b) for b in self.partition], "rprime": self.rprime.tolist(),
             "s": self.s, "beta": self.beta}
        if self.sites is not None:
            d["sites"] = list(self.sites)
        return d


def _snapshot(blocks, rp, s, beta, sites=None, active=None):
    part = tuple(sorted(tuple(sorted(b)) for b in blocks))
    st = None
    if sites is not None:
        st = tuple(sites[min(b)] for b in part)
    return CoalescentState(part, rp.copy(), s, beta, st, None if active is None else tuple(active))


def simulate_kingman(n, b, horizon, rng, a=0.0, convention="b", activation=None):
    """Trajectory (state at 0, after every merge, at the horizon) of the weighted Kingman coalescent.

    activation[i] is the time element i joins (default 0); inactive elements
    neither merge nor count towards beta, and their distances do not grow.
    """
    if n < 1:
        raise ValueError("n must be >= 1")
    cp = _pair_rate(b, convention)
    rng = seeding.as_generator(rng)
    act = np.zeros(n) if activation is None else np.asarray(activation, dtype=float)
    blocks = [{i} for i in range(n)]
    rp = np.zeros((n, n))
    s = beta = 0.0
    traj = [_snapshot(blocks, rp, s, beta, active=None if activation is None else act <= s)]
    while True:
        on = [k for k, blk in enumerate(blocks) if act[min(blk)] <= s]
        k = len(on)
        rate = b * k * (k - 1) / 2
        w = rng.exponential() / rate if rate > 0 else np.inf
        pending = act[act > s]
        nxt_act = pending.min() if len(pending) else np.inf
        step = min(w, nxt_act - s, horizon - s)
        live = act <= s
        grow = live[:, None].astype(float) + live[None, :]
        block_of = np.empty(n, dtype=np.int64)
        for kk, blk in enumerate(blocks):
            block_of[list(blk)] = kk
        apart = block_of[:, None] != block_of[None, :]
        rp += step * grow * apart
        beta += step * (cp * k * (k - 1) / 2 + a * k)
        s += step
        if s >= horizon:
            break
        if w <= nxt_act - (s - step):
            i, j = sorted(rng.choice(k, size=2, replace=False))
            bi, bj = on[i], on[j]
            blocks[bi] |= blocks[bj]
            del blocks[bj]
        traj.append(_snapshot(blocks, rp, s, beta, active=None if activation is None else act <= s))
    traj.append(_snapshot(blocks, rp, horizon, beta, active=None if activation is None else act <= horizon))
    return traj


def simulate_spatial_coalescent(n, sites, space, b, horizon, rng, a=0.0, convention="b"):
    """Blocks jump at rate 1 with the kernel a and co-located pairs merge at rate b.

    Returns (trajectory, paths): paths[i] is the backward path of element i
    (dual time, window [0, horizon]).
    """
    cp = _pair_rate(b, convention)
    rng = seeding.as_generator(rng)
    site = np.array(sites, dtype=np.int64)
    if len(site) != n:
        raise ValueError("one initial site per lineage")
    if space.n_sites == 1:
        # every jump is a no-op: this is the Kingman coalescent with constant paths
        traj = simulate_kingman(n, b, horizon, rng, a=a, convention=convention)
        for c in traj:
            c.sites = (0,) * c.n_blocks
        return traj, [AncestralPath.constant(0, 0.0, horizon) for _ in range(n)]
    cum = np.cumsum(space.kernel, axis=1)
    cum[:, -1] = 1.0
    blocks = [{i} for i in range(n)]
    rp = np.zeros((n, n))
    s = beta = 0.0
    jumps = [([], [int(site[i])]) for i in range(n)]
    traj = [_snapshot(blocks, rp, s, beta, site)]
    while True:
        reps = [min(blk) for blk in blocks]
        k = len(blocks)
        pairs = [(x, y) for x, y in itertools.combinations(range(k), 2) if site[reps[x]] == site[reps[y]]]
        rate = k + b * len(pairs)
        w = rng.exponential() / rate
        step = min(w, horizon - s)
        block_of = np.empty(n, dtype=np.int64)
        for kk, blk in enumerate(blocks):
            block_of[list(blk)] = kk
        rp += 2.0 * step * (block_of[:, None] != block_of[None, :])
        beta += step * (cp * len(pairs) + a * k)
        s += step
        if s >= horizon:
            break
        u = rng.random() * rate
        if u < k:
            x = int(u)
            dest = int(np.searchsorted(cum[site[reps[x]]], rng.random(), side="right"))
            dest = min(dest, space.n_sites - 1)
            for i in blocks[x]:
                site[i] = dest
                jumps[i][0].append(s)
                jumps[i][1].append(dest)
        else:
            x, y = pairs[min(int((u - k) / b), len(pairs) - 1)]
            blocks[x] |= blocks[y]
            del blocks[y]
        traj.append(_snapshot(blocks, rp, s, beta, site))
    traj.append(_snapshot(blocks, rp, horizon, beta, site))
    paths = [AncestralPath(t, v, 0.0, horizon) for t, v in jumps]
    return traj, paths


# pairing --------------------------------------------------------------------------------


def _window(rho, t):
    return NO_WINDOW if rho is None else Window("smooth", t, rho)


def _check_spec(u0, spec):
    if spec.n > MAX_N:
        raise ValueError(f"dual evaluations are capped at n <= {MAX_N}")
    spatial = isinstance(u0, MarkedUms)
    if spatial:
        if u0.mode != "location":
            raise DomainError("the spatial dual pairs with location-mode states")
        if spec.chi != "site":
            raise DomainError("spatial duality needs chi = 'site'")
    elif spec.chi != "one":
        raise DomainError("marked functional on an unmarked state")
    return spatial


def duality_pairing(u0, c, spec, rho=None, t=0.0):
    """H(u0, C): one mass-weighted leaf of u0 per block, phi * window at r^p + r'."""
    spatial = _check_spec(u0, spec)
    if u0.is_zero or total_mass(u0) <= 0:
        raise DomainError("pairing needs a state with positive mass")
    if c.n != spec.n:
        raise ValueError("coalescent size does not match n")
    var = c.block_of()
    weights = []
    for k, blk in enumerate(c.partition):
        w = np.array(u0.masses, dtype=float)
        if spatial:
            w = w * (np.asarray(u0.marks) == c.sites[k])
        weights.append(w)
    ip = integrand_pairs(spec, _window(rho, t), offsets=c.rprime)
    pairs = [(var[p], var[q], h) for (p, q), (h, _) in ip.items()]
    return contract(u0, weights, pairs, spec.scale, exact_threshold=np.inf).value


# vectorized dual runs ---------------------------------------------------------------------


@dataclass
class DualBatch:
    """Final states of R dual runs: block representative of each element, r', the
    integrals of #pairs and #blocks over [0, t], and (spatial) each element's site."""

    labels: np.ndarray
    rprime: np.ndarray
    pair_time: np.ndarray
    block_time: np.ndarray
    sites: np.ndarray | None = None

    def beta(self, b, a, convention="b"):
        return _pair_rate(b, convention) * self.pair_time + a * self.block_time


def dual_batch(n, b, t, R, rng, sites=None, kernel=None):
    """R independent dual runs to time t (Kingman when kernel is None)."""
    P = list(itertools.combinations(range(n), 2))
    pi = np.array([p[0] for p in P], dtype=np.int64)
    pj = np.array([p[1] for p in P], dtype=np.int64)
    lab = np.tile(np.arange(n), (R, 1))
    mt = np.full((R, n, n), float(t))
    mt[:, np.arange(n), np.arange(n)] = 0.0
    site = None if kernel is None else np.tile(np.asarray(sites, dtype=np.int64), (R, 1))
    if kernel is not None:
        cum = np.cumsum(np.asarray(kernel, dtype=float), axis=1)
        cum[:, -1] = 1.0
    s = np.zeros(R)
    pair_time = np.zeros(R)
    block_time = np.zeros(R)
    active = np.ones(R, dtype=bool)
    ar = np.arange(n)
    while active.any():
        idx = np.flatnonzero(active)
        L = lab[idx]
        isrep = L == ar
        k = isrep.sum(axis=1)
        valid = isrep[:, pi] & isrep[:, pj] if len(P) else np.zeros((len(idx), 0), dtype=bool)
        if kernel is not None and len(P):
            st = site[idx]
            valid &= st[:, pi] == st[:, pj]
        c = valid.sum(axis=1)
        # on a single site jumps change nothing and are left out
        mig = k if kernel is not None and len(cum) > 1 else np.zeros_like(k)
        rate = b * c + mig
        u = rng.random((len(idx), 3))
        with np.errstate(divide="ignore"):
            w = np.where(rate > 0, -np.log1p(-u[:, 0]) / rate, np.inf)
        dt = np.minimum(w, t - s[idx])
        pair_time[idx] += c * dt
        block_time[idx] += k * dt
        s[idx] += dt
        go = w < (t - s[idx] + dt)
        done = idx[~go]
        active[done] = False
        if not go.any():
            break
        g = np.flatnonzero(go)
        rows = idx[g]
        x = u[g, 1] * rate[g]
        coal = x < b * c[g]
        # coalescence: the m-th valid pair
        cr = g[coal]
        if len(cr):
            m = np.floor(x[coal] / b).astype(np.int64)
            m = np.minimum(m, c[cr] - 1)
            which = np.argmax(np.cumsum(valid[cr], axis=1) > m[:, None], axis=1)
            ri, rj = pi[which], pj[which]
            rr = idx[cr]
            Lr = lab[rr]
            inI = Lr == ri[:, None]
            inJ = Lr == rj[:, None]
            cross = (inI[:, :, None] & inJ[:, None, :]) | (inJ[:, :, None] & inI[:, None, :])
            mts = mt[rr]
            mts[cross] = np.broadcast_to(s[rr][:, None, None], cross.shape)[cross]
            mt[rr] = mts
            lab[rr] = np.where(inJ, ri[:, None], Lr)
        mr = g[~coal]
        if len(mr):
            rr = idx[mr]
            m = np.floor(x[~coal] - b * c[mr]).astype(np.int64)
            m = np.clip(m, 0, k[mr] - 1)
            rep = np.argmax(np.cumsum(isrep[mr], axis=1) > m[:, None], axis=1)
            cur = site[rr, rep]
            dest = np.minimum((u[mr, 2][:, None] >= cum[cur]).sum(axis=1), cum.shape[1] - 1)
            site[rr] = np.where(lab[rr] == rep[:, None], dest[:, None], site[rr])
    return DualBatch(lab, 2.0 * mt, pair_time, block_time, site)


def pairing_batch(u0, db, spec, rho=None, t=0.0):
    """duality_pairing for every run of a DualBatch."""
    spatial = _check_spec(u0, spec)
    R, n = db.labels.shape
    window = _window(rho, t)
    ip = integrand_pairs(spec, window)
    D0 = u0.distances()
    masses = np.asarray(u0.masses, dtype=float)
    leaf_sites = np.asarray(u0.marks, dtype=np.int64) if spatial else None
    key = db.labels if not spatial else np.concatenate([db.labels, db.sites], axis=1)
    patterns, inverse = np.unique(key, axis=0, return_inverse=True)
    inverse = inverse.reshape(-1)
    out = np.zeros(R)
    letters = string.ascii_letters
    for g, pat in enumerate(patterns):
        rows = np.flatnonzero(inverse == g)
        lab = pat[:n]
        blocks = sorted(set(lab.tolist()))
        var = np.array([blocks.index(x) for x in lab])
        ops, subs = [], []
        for v, rep in enumerate(blocks):
            w = masses if not spatial else masses * (leaf_sites == pat[n + rep])
            ops.append(w)
            subs.append(letters[v])
        const = np.full(len(rows), float(spec.scale))
        rp = db.rprime[rows]
        for (p, q), (h, _) in ip.items():
            if var[p] == var[q]:
                const = const * h(rp[:, p, q])
            else:
                ops.append(h(D0[None] + rp[:, p, q][:, None, None]))
                subs.append("z" + letters[var[p]] + letters[var[q]])
        if len(ops) == len(blocks):
            val = np.prod([np.sum(o) for o in ops]) * np.ones(len(rows))
        else:
            val = np.einsum(",".join(subs) + "->z", *ops, optimize="greedy")
        out[rows] = const * val
    return out


# the duality check ------------------------------------------------------------------------


@dataclass
class DualityConfig:
    """Matched forward/dual setting.

    u0 is a Ums (non-spatial) or a location-mode MarkedUms with a SiteSpace.
    The forward side samples n leaves per replicate from the time-t state of
    the particle system with N_forward particles per unit mass, which removes
    the O(1/N) same-particle bias of finite populations.
    """

    spec: PhiSpec
    t: float
    b: float = 1.0
    a: float = 0.0
    u0: Ums = field(default_factory=lambda: Ums.leaf(1.0))
    rho: SmoothTruncation | None = field(default_factory=SmoothTruncation)
    space: SiteSpace | None = None
    replicates: int = 100_000
    seed: int = 0
    N_forward: int = 1_000_000
    convention: str = "b"

    def __post_init__(self):
        if self.spec.n > MAX_N:
            raise ValueError(f"n is capped at {MAX_N}")
        if not self.t >= 0:
            raise ValueError("t must be >= 0")
        _pair_rate(self.b, self.convention)


def forward_values(cfg):
    """Per-replicate unbiased estimates of Phi^{n, phi window, chi}(U_t)."""
    spec = cfg.spec
    n = spec.n
    spatial = _check_spec(cfg.u0, spec)
    gw = GwConfig(N=cfg.N_forward, b=cfg.b, a=cfg.a, initial=Ums(cfg.u0.masses, cfg.u0.gaps, cfg.u0.ceiling),
                  horizon=cfg.t, seed=cfg.seed)
    if spatial:
        ts, sites = sample_marked_tuples(cfg.space, gw, cfg.u0.marks, n, 0, cfg.replicates)
    else:
        ts = sample_tuples(gw, n, 0, cfg.replicates)
    val = spec.scale * ts.mass**n
    for (p, q), (h, _) in integrand_pairs(spec, _window(cfg.rho, cfg.t)).items():
        val = val * h(ts.D[:, p, q])
    if spatial:
        for k, xi in enumerate(spec.chi_params["sites"]):
            val = val * (sites[:, k] == xi)
    return val


def dual_values(cfg, convention=None):
    """Per-replicate H(u0, C_t) exp(beta) for the configured (or given) convention."""
    db = _dual_runs(cfg)
    H = pairing_batch(cfg.u0, db, cfg.spec, cfg.rho, cfg.t)
    return H * np.exp(db.beta(cfg.b, cfg.a, convention or cfg.convention))


def _dual_runs(cfg):
    rng = seeding.stream(cfg.seed, 0, seeding.BATCH_MARKS + 1)
    n = cfg.spec.n
    if isinstance(cfg.u0, MarkedUms):
        return dual_batch(n, cfg.b, cfg.t, cfg.replicates, rng,
                          sites=cfg.spec.chi_params["sites"], kernel=cfg.space.kernel)
    return dual_batch(n, cfg.b, cfg.t, cfg.replicates, rng)


def _mean_se(x):
    return float(np.mean(x)), float(np.std(x, ddof=1) / np.sqrt(len(x))) if len(x) > 1 else 0.0


def _z(m1, s1, m2, s2):
    se = np.hypot(s1, s2)
    if se == 0:
        return 0.0 if m1 == m2 else float(np.sign(m1 - m2) * np.inf)
    return float((m1 - m2) / se)


def duality_check(cfg):
    """Both sides of the duality with standard errors, z-score and the FK effective sample size."""
    lhs = forward_values(cfg)
    db = _dual_runs(cfg)
    H = pairing_batch(cfg.u0, db, cfg.spec, cfg.rho, cfg.t)
    report = {"n_replicates": int(cfg.replicates), "convention": cfg.convention}
    lm, ls = _mean_se(lhs)
    report.update(lhs=lm, lhs_se=ls)
    for conv in CONVENTIONS:
        w = np.exp(db.beta(cfg.b, cfg.a, conv))
        rm, rs = _mean_se(H * w)
        ess = float(w.sum() ** 2 / np.sum(w * w))
        z = _z(lm, ls, rm, rs)
        if conv == cfg.convention:
            report.update(rhs=rm, rhs_se=rs, z=z, ess=ess)
        else:
            report["alternate"] = {"convention": conv, "rhs": rm, "rhs_se": rs, "z": z, "ess": ess}
    return report
