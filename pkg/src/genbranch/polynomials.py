"""Polynomial test functionals and the generator terms used by the branching criterion.

Phi^{n,phi,chi}(u) integrates phi over the distance matrix of n points drawn
from the mass measure of u (not normalized), times chi evaluated at their
marks.  Every catalog phi is a product of per-pair factors, so the integral
is a tensor contraction over one leaf index per sample.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field

import numpy as np

from .umspace import DistanceMatrix, DomainError, RangeMax, pair_index, total_mass

EXACT_THRESHOLD = 2_000_000
FD_STEP = 1e-6


# phi catalog -----------------------------------------------------------------
# Each entry maps a pair distance r to a factor and its derivative in r.


def _indicator(c):
    return (lambda r: (np.asarray(r) < c).astype(float), lambda r: np.zeros_like(np.asarray(r, dtype=float)))


def _exp(lam):
    return (lambda r: np.exp(-lam * np.asarray(r)), lambda r: -lam * np.exp(-lam * np.asarray(r)))


def _gauss(lam):
    return (
        lambda r: np.exp(-lam * np.asarray(r) ** 2),
        lambda r: -2 * lam * np.asarray(r) * np.exp(-lam * np.asarray(r) ** 2),
    )


def _bump(c):
    def f(r):
        x = np.asarray(r) / c
        return np.where(x < 1, (1 - x * x) ** 2, 0.0)

    def df(r):
        x = np.asarray(r) / c
        return np.where(x < 1, -4 * x * (1 - x * x) / c, 0.0)

    return f, df


def _one():
    return (lambda r: np.ones_like(np.asarray(r, dtype=float)), lambda r: np.zeros_like(np.asarray(r, dtype=float)))


PHI_CATALOG = {
    # id: (number of parameters, factory, pairs it acts on: None = all pairs)
    "const": (0, lambda: _one(), None),
    "indicator": (1, _indicator, None),
    "exp": (1, _exp, None),
    "gauss": (1, _gauss, None),
    "bump": (1, _bump, None),
    "exp12": (1, _exp, ((0, 1),)),
}

CHI_CATALOG = ("one", "site", "site_weight", "path_site", "path_weight", "path_average")


@dataclass(frozen=True)
class PhiSpec:
    """A catalog test function phi (times scale) with an optional mark functional chi.

    chi forms (params):
      site          {"sites": [xi_1..xi_n]}                 chi^k = 1(v = xi_k)
      site_weight   {"weights": n x |E|}                    chi^k = W[k][v]
      path_site     {"times": [...], "sites": n x m}        prod_j 1(v(tau_j) = S[k][j])
      path_weight   {"times": [...], "weights": n x m x |E|}
      path_average  as path_weight plus {"width": delta}; values averaged over [tau - delta, tau]
    """

    n: int
    phi: str = "const"
    params: tuple = ()
    scale: float = 1.0
    chi: str = "one"
    chi_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("n must be >= 1")
        if self.phi not in PHI_CATALOG:
            raise ValueError(f"unknown phi {self.phi!r}; catalog: {sorted(PHI_CATALOG)}")
        k = PHI_CATALOG[self.phi][0]
        object.__setattr__(self, "params", tuple(float(p) for p in self.params))
        if len(self.params) != k:
            raise ValueError(f"phi {self.phi!r} takes {k} parameter(s)")
        if self.chi not in CHI_CATALOG:
            raise ValueError(f"unknown chi {self.chi!r}; catalog: {CHI_CATALOG}")
        if self.phi == "exp12" and self.n < 2:
            raise ValueError("exp12 needs n >= 2")

    @property
    def marked(self):
        return self.chi != "one"

    @property
    def chi_mode(self):
        if self.chi.startswith("path"):
            return "path"
        if self.chi.startswith("site"):
            return "location"
        return None

    def factor(self):
        """(f, df) for the per-pair factor and the pairs it applies to."""
        _, make, pairs = PHI_CATALOG[self.phi]
        return make(*self.params), pairs

    def pair_functions(self):
        """dict (p, q) -> (f, df) over all pairs p < q of the n slots."""
        (f, df), pairs = self.factor()
        one = _one()
        out = {}
        for p in range(self.n):
            for q in range(p + 1, self.n):
                out[p, q] = (f, df) if pairs is None or (p, q) in pairs else one
        return out

    def phi_value(self, dm):
        """phi on a DistanceMatrix (condensed order)."""
        if dm.n != self.n:
            raise ValueError("distance matrix size does not match n")
        val = self.scale
        for (p, q), (f, _) in self.pair_functions().items():
            val = val * float(f(dm[p, q]))
        return float(val)

    def chi_weights(self, k, marks):
        """chi^k evaluated at every leaf mark."""
        if self.chi == "one" or marks is None:
            if self.chi != "one":
                raise DomainError(f"chi {self.chi!r} needs marks")
            return None
        cp = self.chi_params
        if self.chi == "site":
            return np.array([1.0 if m == cp["sites"][k] else 0.0 for m in marks])
        if self.chi == "site_weight":
            w = np.asarray(cp["weights"][k], dtype=float)
            return w[np.asarray(marks, dtype=int)]
        times = np.asarray(cp["times"], dtype=float)
        if self.chi == "path_site":
            target = np.asarray(cp["sites"][k])
            return np.array([float(np.all(m.at(times) == target)) for m in marks])
        w = np.asarray(cp["weights"][k], dtype=float)
        if self.chi == "path_weight":
            cols = np.arange(len(times))
            return np.array([np.prod(w[cols, m.at(times)]) for m in marks])
        width = float(cp["width"])
        return np.array([np.prod([m.average(w[j], tau - width, tau) for j, tau in enumerate(times)]) for m in marks])

    def to_json(self):
        d = {"n": self.n, "phi": self.phi, "params": list(self.params), "scale": self.scale}
        if self.chi != "one":
            d["chi"] = self.chi
            d["chi_params"] = self.chi_params
        return d

    @classmethod
    def from_json(cls, d):
        return cls(
            n=int(d["n"]),
            phi=d.get("phi", "const"),
            params=tuple(d.get("params", ())),
            scale=float(d.get("scale", 1.0)),
            chi=d.get("chi", "one"),
            chi_params=d.get("chi_params", {}),
        )


@dataclass(frozen=True)
class SmoothTruncation:
    """Sliding window rho(t, r) = prod_{i<j} hat_rho(r_ij - 2t), hat_rho(x) = g_N(-x).

    g_N vanishes on (-inf, 0] and increases to 1 as N grows.  "gauss" is
    g_N(y) = 1 - exp(-(N y)^2); "smoothstep" is 3s^2 - 2s^3 with s = clip(N y, 0, 1),
    which is identically 1 on [1/N, inf).
    """

    N: float = 1.0
    family: str = "gauss"

    def __post_init__(self):
        if self.family not in ("gauss", "smoothstep"):
            raise ValueError(f"unknown smoothing family {self.family!r}")
        if not self.N > 0:
            raise ValueError("sharpness N must be > 0")

    def g(self, y):
        y = np.asarray(y, dtype=float)
        if self.family == "gauss":
            return np.where(y > 0, -np.expm1(-((self.N * y) ** 2)), 0.0)
        s = np.clip(self.N * y, 0.0, 1.0)
        return s * s * (3 - 2 * s)

    def dg(self, y):
        y = np.asarray(y, dtype=float)
        if self.family == "gauss":
            return np.where(y > 0, 2 * self.N**2 * y * np.exp(-((self.N * y) ** 2)), 0.0)
        s = np.clip(self.N * y, 0.0, 1.0)
        return 6 * self.N * s * (1 - s)

    def hat_rho(self, x):
        return self.g(-np.asarray(x, dtype=float))

    def rho(self, t, dm):
        """rho^{(n)}(t, r) for a DistanceMatrix."""
        return float(np.prod(self.hat_rho(np.asarray(dm.entries) - 2 * t)))

    def to_json(self):
        return {"N": self.N, "family": self.family}


# integrands ---------------------------------------------------------------------


class Window:
    """Per-pair multiplier attached to phi: none, sharp 1(r < 2t) or smooth g_N(2t - r)."""

    def __init__(self, kind="none", t=0.0, rho=None):
        if kind not in ("none", "sharp", "smooth"):
            raise ValueError(kind)
        if kind != "none" and not t >= 0:
            raise DomainError("t must be >= 0")
        self.kind, self.t, self.rho = kind, float(t), rho

    def f(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "none":
            return np.ones_like(r)
        if self.kind == "sharp":
            return (r < 2 * self.t).astype(float)
        return self.rho.g(2 * self.t - r)

    def df(self, r):
        r = np.asarray(r, dtype=float)
        if self.kind == "smooth":
            return -self.rho.dg(2 * self.t - r)
        return np.zeros_like(r)


NO_WINDOW = Window()


def integrand_pairs(spec, window=NO_WINDOW, offsets=None):
    """dict (p, q) -> (h, dh), h = phi factor times window factor at r + offset."""
    out = {}
    for (p, q), (f, df) in spec.pair_functions().items():
        c = 0.0 if offsets is None else float(offsets[p, q])

        def h(r, f=f, c=c):
            r = np.asarray(r) + c
            return f(r) * window.f(r)

        def dh(r, f=f, df=df, c=c):
            r = np.asarray(r) + c
            return df(r) * window.f(r) + f(r) * window.df(r)

        out[p, q] = (h, dh)
    return out


# contraction engine -----------------------------------------------------------------


@dataclass
class Estimate:
    value: float
    se: float = 0.0
    exact: bool = True


def contract(u, weights, pairs, scale=1.0, *, rng=None, exact_threshold=EXACT_THRESHOLD, n_mc=200_000):
    """Sum over leaf indices i_0..i_{V-1} of prod_a weights[a][i_a] prod_pairs fn(r(i_a, i_b)).

    weights: list of V per-leaf arrays; pairs: list of (a, b, fn).  Pairs with
    a == b contribute fn(0).  Exact when (#leaves)^V <= exact_threshold,
    otherwise an importance-sampled Monte Carlo estimate with its standard error.
    """
    V = len(weights)
    L = len(u.masses)
    if L == 0 or scale == 0:
        return Estimate(0.0)
    const, merged = _merge_pairs(pairs, scale)
    if const == 0:
        return Estimate(0.0)
    if float(L) ** V <= exact_threshold or V == 1:
        return Estimate(const * _contract_exact(u, weights, merged))
    return _contract_mc(u, weights, merged, const, rng, n_mc)


def _merge_pairs(pairs, scale):
    """Fold same-variable pairs into a constant and group the rest by variable pair."""
    const = float(scale)
    merged = {}
    for a, b, fn in pairs:
        if a == b:
            const *= float(fn(np.zeros(1))[0])
            continue
        merged.setdefault((min(a, b), max(a, b)), []).append(fn)
    return const, merged


def _einsum_expr(V, merged, batch=""):
    letters = string.ascii_letters[:V]
    subs = [batch + letters[a] for a in range(V)]
    subs += [batch + letters[a] + letters[b] for a, b in merged]
    return ",".join(subs) + "->" + batch


def _contract_exact(u, weights, merged):
    V = len(weights)
    if not merged:
        return float(np.prod([np.sum(w) for w in weights]))
    D = u.distances()
    ops = [np.asarray(w, dtype=float) for w in weights]
    for fns in merged.values():
        M = fns[0](D)
        for fn in fns[1:]:
            M = M * fn(D)
        ops.append(M)
    return float(np.einsum(_einsum_expr(V, merged), *ops, optimize="greedy"))


def batch_distances(G):
    """Distance arrays (B, L, L) from per-state gap rows G of shape (B, L - 1)."""
    B, L = G.shape[0], G.shape[1] + 1
    H = np.zeros((B, L, L))
    for i in range(L - 1):
        H[:, i, i + 1:] = np.maximum.accumulate(G[:, i:], axis=1)
    return 2.0 * (H + H.transpose(0, 2, 1))


def contract_batch(offsets, gaps, weights, pairs, scale=1.0):
    """contract() for many states at once, exactly.

    State r owns entries offsets[r]:offsets[r+1] of the flat arrays; gaps[k]
    is the merge height between entries k-1 and k (ignored at the first entry
    of a state) and weights is a list of V flat per-leaf arrays.  States are
    grouped by leaf count and contracted with one einsum per group.
    """
    offsets = np.asarray(offsets)
    sizes = np.diff(offsets)
    out = np.zeros(len(sizes))
    const, merged = _merge_pairs(pairs, scale)
    if const == 0 or len(sizes) == 0:
        return out
    V = len(weights)
    weights = [np.asarray(w, dtype=float) for w in weights]
    for L in np.unique(sizes):
        if L == 0:
            continue
        reps = np.flatnonzero(sizes == L)
        idx = offsets[reps][:, None] + np.arange(L)
        ops = [w[idx] for w in weights]
        if merged and L > 1:
            D = batch_distances(gaps[idx[:, 1:]])
        else:
            D = np.zeros((len(reps), L, L))
        for fns in merged.values():
            M = fns[0](D)
            for fn in fns[1:]:
                M = M * fn(D)
            ops.append(M)
        out[reps] = np.einsum(_einsum_expr(V, merged, "z"), *ops, optimize="greedy")
    return const * out


def eval_batch(offsets, gaps, masses, spec, *, window=NO_WINDOW, chi=None):
    """eval_polynomial for every state of a flat batch.

    chi, when given, is a list of n flat arrays with chi^k at every leaf.
    """
    weights = [masses if chi is None else masses * c for c in (chi or [None] * spec.n)]
    return contract_batch(offsets, gaps, weights, _plain_pairs(spec, window), spec.scale)


def _contract_mc(u, weights, merged, const, rng, n_mc):
    if rng is None:
        raise ValueError("Monte Carlo evaluation needs an rng")
    totals = [float(np.sum(w)) for w in weights]
    if any(t <= 0 for t in totals):
        return Estimate(0.0, 0.0, False)
    rm = RangeMax(u.gaps)
    chunk = 50_000
    s1 = s2 = 0.0
    done = 0
    while done < n_mc:
        k = min(chunk, n_mc - done)
        idx = [rng.choice(len(w), size=k, p=np.asarray(w) / t) for w, t in zip(weights, totals)]
        val = np.ones(k)
        for (a, b), fns in merged.items():
            r = 2.0 * rm.query(idx[a], idx[b])
            for fn in fns:
                val = val * fn(r)
        s1 += val.sum()
        s2 += (val * val).sum()
        done += k
    mean = s1 / n_mc
    var = max(s2 / n_mc - mean * mean, 0.0) * n_mc / max(n_mc - 1, 1)
    scale = const * float(np.prod(totals))
    return Estimate(scale * mean, abs(scale) * np.sqrt(var / n_mc), False)


def slot_weights(u, spec):
    """Per-slot leaf weights mass * chi^k(mark)."""
    out = []
    for k in range(spec.n):
        c = spec.chi_weights(k, u.marks) if spec.chi != "one" else None
        out.append(u.masses if c is None else u.masses * c)
    return out


def _plain_pairs(spec, window, offsets=None, derivative_of=None):
    pairs = []
    for (p, q), (h, dh) in integrand_pairs(spec, window, offsets).items():
        pairs.append((p, q, dh if (p, q) == derivative_of else h))
    return pairs


def _finish(est, return_se):
    return (est.value, est.se) if return_se else est.value


# public evaluation API -----------------------------------------------------------------


def eval_polynomial(u, spec, *, window=NO_WINDOW, rng=None, exact_threshold=EXACT_THRESHOLD, n_mc=200_000, return_se=False):
    """Phi^{n,phi,chi}(u); exact for small spaces, Monte Carlo (with SE) beyond the threshold."""
    if u.is_zero:
        return _finish(Estimate(0.0), return_se)
    est = contract(u, slot_weights(u, spec), _plain_pairs(spec, window), spec.scale,
                   rng=rng, exact_threshold=exact_threshold, n_mc=n_mc)
    return _finish(est, return_se)


def eval_truncated_polynomial(u, spec, t, **kw):
    """Phi^{n, phi c_t} with c_t = prod 1(r_ij < 2t)."""
    return eval_polynomial(u, spec, window=Window("sharp", t), **kw)


def eval_smooth_truncated(u, spec, rho, t, **kw):
    """Phi^{n, phi rho_t} with the smooth window of rho."""
    return eval_polynomial(u, spec, window=Window("smooth", t, rho), **kw)


def ball_power_sum(u, n, t):
    """Closed form of Phi^{n, c_t} for phi = 1: sum over open 2t-balls of mass^n."""
    if u.is_zero:
        return 0.0
    if n == 1:
        return total_mass(u)
    cuts = np.flatnonzero(u.gaps >= t)
    balls = np.add.reduceat(u.masses, np.r_[0, cuts + 1])
    return float(np.sum(balls**n))


def theta_kl(m, k, l):
    """Replace sample l by a copy of sample k (1-based, k < l)."""
    n = m.n
    if not (1 <= k < l <= n):
        raise IndexError(f"need 1 <= k < l <= n, got k={k}, l={l}, n={n}")
    k0, l0 = k - 1, l - 1
    r = m.square()
    r[l0, :] = r[k0, :]
    r[:, l0] = r[:, k0]
    r[k0, l0] = r[l0, k0] = 0.0
    r[l0, l0] = 0.0
    return DistanceMatrix.from_square(r)


def _theta_terms(u, spec, window):
    """sum_{k<l} of the theta_{k,l} contractions, already divided by the total mass."""
    ip = integrand_pairs(spec, window)
    w = slot_weights(u, spec)
    total = 0.0
    n = spec.n
    for k in range(n):
        for l in range(k + 1, n):
            var = [i if i < l else i - 1 for i in range(n)]
            var[l] = var[k]
            # variable k carries chi^k and chi^l; slot l's mass integrates out
            weights = []
            for v in range(n - 1):
                wt = np.array(u.masses, dtype=float)
                for s in range(n):
                    if var[s] == v:
                        wt = wt * (w[s] / u.masses)
                weights.append(wt)
            pairs = [(var[p], var[q], h) for (p, q), (h, _) in ip.items()]
            total += contract(u, weights, pairs, spec.scale, exact_threshold=np.inf).value
    return total


def growth_term(u, spec, window=NO_WINDOW, grad="analytic", step=FD_STEP):
    """Phi^{n, 2 nabla(phi window)}, nabla = sum of partial derivatives over all pairs."""
    if u.is_zero or spec.n < 2:
        return 0.0
    w = slot_weights(u, spec)
    if grad == "analytic":
        total = 0.0
        for pq in spec.pair_functions():
            total += contract(u, w, _plain_pairs(spec, window, derivative_of=pq), spec.scale, exact_threshold=np.inf).value
        return 2.0 * total
    n = spec.n
    plus = np.full((n, n), step)
    minus = np.full((n, n), -step)
    hi = contract(u, w, _plain_pairs(spec, window, plus), spec.scale, exact_threshold=np.inf).value
    lo = contract(u, w, _plain_pairs(spec, window, minus), spec.scale, exact_threshold=np.inf).value
    return 2.0 * (hi - lo) / (2 * step)


def generator_action(u, spec, a, b, *, window=NO_WINDOW, grad="analytic"):
    """Growth plus branching part of the generator applied to Phi^{n,phi}.

    2 Phi^{n, nabla phi} + a n Phi^{n,phi} + (b / mass) sum_{k<l} Phi^{n, phi o theta_{k,l}};
    zero at the zero tree.
    """
    if u.is_zero or total_mass(u) <= 0:
        return 0.0
    grow = growth_term(u, spec, window, grad)
    drift = a * spec.n * eval_polynomial(u, spec, window=window, exact_threshold=np.inf)
    bran = b * _theta_terms(u, spec, window)
    return grow + drift + bran


def g_additive(u, spec, rho, t, b, grad="analytic"):
    """The t-additive function g of the branching criterion.

    g = 2 Phi^{n, nabla(phi rho_t)} + (b n / (2 mass)) Phi^{2n, (phi rho_t) x (phi rho_t) o theta_{1,n+1}}.
    """
    if u.is_zero or total_mass(u) <= 0:
        raise DomainError("g is defined for nonzero states only")
    window = Window("smooth", t, rho)
    grow = growth_term(u, spec, window, grad)
    n = spec.n
    ip = integrand_pairs(spec, window)
    w = slot_weights(u, spec)
    # first copy: variables 0..n-1; second copy: slot 0 -> variable 0, slot j -> n + j - 1
    second = [0] + [n + j - 1 for j in range(1, n)]
    weights = list(w)
    if spec.chi != "one":
        chi0 = w[0] / u.masses
        weights[0] = w[0] * chi0
    for j in range(1, n):
        weights.append(w[j])
    pairs = [(p, q, h) for (p, q), (h, _) in ip.items()]
    pairs += [(second[p], second[q], h) for (p, q), (h, _) in ip.items()]
    joined = contract(u, weights, pairs, spec.scale**2, exact_threshold=np.inf).value
    return grow + b * n / 2.0 * joined
