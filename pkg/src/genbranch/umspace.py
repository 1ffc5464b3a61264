"""Finite ultrametric measure spaces and the truncation/concatenation algebra.

A space is stored as its leaves in a depth-first order of the dendrogram
together with the merge height ("gap") between each pair of neighbouring
leaves.  For leaves i < j the merge height is max(gaps[i:j]) and the distance
is twice that.  Any dendrogram forest can be written this way, and the
representation is ultrametric by construction.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np


class DomainError(ValueError):
    """Raised when an argument lies outside the domain of an operation."""


def _frozen(a, dtype=np.float64):
    a = np.array(a, dtype=dtype)
    a.setflags(write=False)
    return a


class Ums:
    """A finite ultrametric measure space (dendrogram forest with masses).

    masses[i] is the mass of leaf i, gaps[i] the merge height between leaf i
    and leaf i+1, and ceiling the merge height between different trees of the
    forest.  Optional marks (one per leaf) are carried along by every
    operation.  Instances are immutable.
    """

    __slots__ = ("masses", "gaps", "ceiling", "marks")

    def __init__(self, masses=(), gaps=(), ceiling=None, marks=None):
        m = np.asarray(masses, dtype=np.float64).reshape(-1)
        g = np.asarray(gaps, dtype=np.float64).reshape(-1)
        if len(m) and len(g) != len(m) - 1:
            raise ValueError(f"need {len(m) - 1} gaps for {len(m)} leaves, got {len(g)}")
        if not len(m) and len(g):
            raise ValueError("gaps given without leaves")
        if not (np.all(np.isfinite(m)) and np.all(np.isfinite(g))):
            raise ValueError("masses and gaps must be finite")
        if np.any(m < 0):
            raise ValueError("masses must be nonnegative")
        if np.any(g < 0):
            raise ValueError("merge heights must be nonnegative")
        if marks is not None:
            marks = tuple(marks)
            if len(marks) != len(m):
                raise ValueError("one mark per leaf required")
        keep = m > 0
        if not np.all(keep):
            # a pruned leaf's neighbours merge at the larger of the two gaps
            idx = np.flatnonzero(keep)
            g = np.maximum.reduceat(g[:idx[-1]], idx[:-1]) if len(idx) > 1 else np.empty(0)
            m = m[idx]
            if marks is not None:
                marks = tuple(marks[i] for i in idx)
        top = float(g.max()) if len(g) else 0.0
        if ceiling is None:
            ceiling = top
        ceiling = float(ceiling)
        if not np.isfinite(ceiling) or ceiling < top:
            raise ValueError(f"ceiling {ceiling} below a merge height {top}")
        self.masses = _frozen(m)
        self.gaps = _frozen(g)
        self.ceiling = ceiling
        self.marks = marks

    # construction helpers -------------------------------------------------

    @classmethod
    def zero(cls):
        return cls()

    @classmethod
    def leaf(cls, mass, mark=None):
        return cls([mass], [], 0.0, None if mark is None else [mark])

    def _like(self, masses, gaps, ceiling, marks):
        """Build a value of the same kind (subclasses carry extra fields)."""
        return type(self)(masses, gaps, ceiling, marks)

    def __setattr__(self, name, value):
        if hasattr(self, name):
            raise AttributeError("Ums is immutable")
        object.__setattr__(self, name, value)

    def __len__(self):
        return len(self.masses)

    def __eq__(self, other):
        if not isinstance(other, Ums):
            return NotImplemented
        return (
            type(self) is type(other)
            and np.array_equal(self.masses, other.masses)
            and np.array_equal(self.gaps, other.gaps)
            and self.ceiling == other.ceiling
            and self.marks == other.marks
        )

    __hash__ = None

    def __repr__(self):
        return f"{type(self).__name__}(leaves={len(self)}, mass={total_mass(self):.6g}, diameter={diameter(self):.6g})"

    @property
    def is_zero(self):
        return len(self.masses) == 0

    @property
    def trees(self):
        """The forest as nested dicts {h, children} | {mass}."""
        return _forest(self)

    def distances(self):
        """Full matrix of pairwise distances r = 2 * merge height."""
        return 2.0 * half_distance_matrix(self.gaps)


def half_distance_matrix(gaps):
    """Matrix of merge heights max(gaps[i:j]) for a gap sequence."""
    n = len(gaps) + 1
    out = np.zeros((n, n))
    for i in range(n - 1):
        row = np.maximum.accumulate(gaps[i:])
        out[i, i + 1:] = row
        out[i + 1:, i] = row
    return out


class RangeMax:
    """Sparse table answering max(gaps[i:j]) for many (i, j) at once."""

    def __init__(self, gaps):
        gaps = np.asarray(gaps, dtype=np.float64)
        self.table = [gaps]
        k = 1
        while 2 * k <= len(gaps):
            prev = self.table[-1]
            self.table.append(np.maximum(prev[:-k], prev[k:]))
            k *= 2

    def query(self, i, j):
        """max(gaps[i:j]) elementwise for i < j; 0 where i >= j."""
        i = np.asarray(i)
        j = np.asarray(j)
        lo = np.minimum(i, j)
        hi = np.maximum(i, j)
        width = hi - lo
        out = np.zeros(np.broadcast(lo, hi).shape)
        pos = width > 0
        if not np.any(pos):
            return out
        w = width[pos]
        level = np.floor(np.log2(w)).astype(int)
        a = lo[pos]
        b = hi[pos]
        res = np.empty(len(w))
        for k in np.unique(level):
            sel = level == k
            t = self.table[k]
            span = 1 << k
            res[sel] = np.maximum(t[a[sel]], t[b[sel] - span])
        out[pos] = res
        return out


# basic queries --------------------------------------------------------------


def total_mass(u):
    return float(np.sum(u.masses))


def diameter(u):
    return 2.0 * float(u.gaps.max()) if len(u.gaps) else 0.0


def in_s(u, h):
    """True when u lies in S_h, i.e. all distances are at most 2h."""
    return diameter(u) <= 2.0 * h


# the semigroup algebra -------------------------------------------------------


def truncate(u, h):
    """Cap every distance at 2h (forget ancestry older than depth h)."""
    if not h >= 0:
        raise DomainError(f"truncation level must be >= 0, got {h}")
    return u._like(u.masses, np.minimum(u.gaps, h), min(u.ceiling, h), u.marks)


def concat(u, v, h):
    """Disjoint union of truncate(u, h) and truncate(v, h) at mutual distance 2h."""
    return concat_all([u, v], h)


def concat_all(spaces, h):
    if not h >= 0:
        raise DomainError(f"concatenation level must be >= 0, got {h}")
    parts = [truncate(u, h) for u in spaces if not u.is_zero]
    if not parts:
        return spaces[0]._like([], [], h, None if spaces[0].marks is None else [])
    masses = np.concatenate([p.masses for p in parts])
    gaps = []
    for k, p in enumerate(parts):
        if k:
            gaps.append([h])
        gaps.append(p.gaps)
    marks = None
    if parts[0].marks is not None:
        marks = [m for p in parts for m in p.marks]
    return parts[0]._like(masses, np.concatenate(gaps), h, marks)


def decompose(u, h):
    """Split u in S_h into its open balls of radius 2h (internal distances < 2h)."""
    if not h > 0:
        raise DomainError(f"decomposition level must be > 0, got {h}")
    if not in_s(u, h):
        raise DomainError(f"space has diameter {diameter(u)} > 2h = {2 * h}")
    return [u._like(*piece) for piece in _blocks(u, h)]


def _blocks(u, h):
    """(masses, gaps, ceiling, marks) of the maximal runs separated by gaps >= h."""
    if u.is_zero:
        return []
    cuts = np.flatnonzero(u.gaps >= h)
    starts = np.r_[0, cuts + 1]
    ends = np.r_[cuts + 1, len(u.masses)]
    out = []
    for a, b in zip(starts, ends):
        g = u.gaps[a:b - 1]
        marks = None if u.marks is None else u.marks[a:b]
        out.append((u.masses[a:b], g, float(g.max()) if len(g) else 0.0, marks))
    return out


def trunk(u, depth, t=None):
    """Collapse each open ball of radius 2*depth to one leaf carrying its mass.

    Distances between balls are reduced by 2*depth.  When t is given the
    precondition u in S_t and depth <= t is checked.
    """
    if not depth > 0:
        raise DomainError(f"trunk depth must be > 0, got {depth}")
    if t is not None:
        if depth > t:
            raise DomainError(f"trunk depth {depth} exceeds t = {t}")
        if not in_s(u, t):
            raise DomainError(f"space not in S_t for t = {t}")
    if u.is_zero:
        return u
    cuts = np.flatnonzero(u.gaps >= depth)
    starts = np.r_[0, cuts + 1]
    masses = np.add.reduceat(u.masses, starts)
    gaps = u.gaps[cuts] - depth
    marks = None
    if u.marks is not None:
        # a collapsed ball keeps the mark of its first leaf
        marks = [u.marks[a] for a in starts]
    return u._like(masses, gaps, max(u.ceiling - depth, float(gaps.max()) if len(gaps) else 0.0), marks)


# sampling ---------------------------------------------------------------------


@dataclass(frozen=True)
class DistanceMatrix:
    """Distances r_ij (i < j) among n sampled points, in the order (1,2),(1,3),...,(n-1,n)."""

    n: int
    entries: tuple

    def square(self):
        out = np.zeros((self.n, self.n))
        iu = np.triu_indices(self.n, 1)
        out[iu] = self.entries
        return out + out.T

    def __getitem__(self, ij):
        i, j = ij
        if i == j:
            return 0.0
        if i > j:
            i, j = j, i
        return self.entries[pair_index(self.n, i, j)]

    @classmethod
    def from_square(cls, r):
        r = np.asarray(r, dtype=np.float64)
        return cls(len(r), tuple(float(x) for x in r[np.triu_indices(len(r), 1)]))


def pair_index(n, i, j):
    """Position of pair (i, j), 0-based i < j, in the condensed order."""
    return i * n - i * (i + 1) // 2 + (j - i - 1)


def is_ultrametric(dm, tol=0.0):
    r = dm.square() if isinstance(dm, DistanceMatrix) else np.asarray(dm)
    n = len(r)
    for k in range(n):
        if np.any(r > np.maximum(r[:, k][:, None], r[k, :][None, :]) + tol):
            return False
    return True


def sample_leaves(u, n, rng):
    if total_mass(u) <= 0:
        raise DomainError("cannot sample from the zero tree")
    p = u.masses / u.masses.sum()
    return rng.choice(len(p), size=n, p=p)


def sample_distance_matrix(u, n, rng):
    """Distances among n points drawn i.i.d. from the normalized measure of u."""
    if n < 1:
        raise DomainError("sample size must be >= 1")
    idx = sample_leaves(u, n, rng)
    i, j = np.triu_indices(n, 1)
    half = RangeMax(u.gaps).query(idx[i], idx[j]) if len(u.gaps) else np.zeros(len(i))
    return DistanceMatrix(n, tuple(float(x) for x in 2.0 * half))


# building from other descriptions -------------------------------------------------


def from_distance_matrix(masses, r, ceiling=None, marks=None, tol=0.0):
    """Build a space from masses and an ultrametric distance matrix."""
    r = np.asarray(r, dtype=np.float64)
    n = len(masses)
    if r.shape != (n, n):
        raise ValueError("distance matrix shape does not match masses")
    if not is_ultrametric(r, tol):
        raise DomainError("distance matrix is not ultrametric")
    order = []
    gaps = []
    stack = [(np.arange(n), None)]
    while stack:
        idx, sep = stack.pop()
        if sep is not None and order:
            gaps.append(sep)
        if len(idx) == 1:
            order.append(int(idx[0]))
            continue
        sub = r[np.ix_(idx, idx)]
        top = sub.max()
        # blocks: points closer than the top distance to the first member
        blocks = []
        rest = idx
        while len(rest):
            d = r[rest[0], rest]
            blocks.append(rest[d < top] if top > 0 else rest)
            rest = rest[d >= top] if top > 0 else rest[:0]
        if len(blocks) == 1:
            order.extend(int(k) for k in blocks[0])
            gaps.extend([0.0] * (len(blocks[0]) - 1))
            continue
        pending = [(blk, top / 2) for blk in blocks]
        pending[0] = (blocks[0], None)
        stack.extend(reversed(pending))
    m = np.asarray(masses, dtype=np.float64)[order]
    mk = None if marks is None else [marks[k] for k in order]
    return Ums(m, gaps, ceiling, mk)


def _forest(u, mark_encoder=None):
    if u.is_zero:
        return []
    enc = mark_encoder or (lambda m: m)

    def leaf(i):
        d = {"mass": float(u.masses[i])}
        if u.marks is not None:
            d["mark"] = enc(u.marks[i])
        return d

    def build(a, b):
        # explicit stack: nodes covering leaves [a, b)
        root = {}
        stack = [(a, b, root)]
        while stack:
            lo, hi, slot = stack.pop()
            if hi - lo == 1:
                slot.update(leaf(lo))
                continue
            g = u.gaps[lo:hi - 1]
            h = float(g.max())
            cuts = lo + np.flatnonzero(g == h) + 1
            bounds = np.r_[lo, cuts, hi]
            slot["h"] = h
            slot["children"] = [{} for _ in range(len(bounds) - 1)]
            for k in range(len(bounds) - 1):
                stack.append((int(bounds[k]), int(bounds[k + 1]), slot["children"][k]))
        return root

    n = len(u.masses)
    if n > 1 and u.gaps.max() == u.ceiling:
        cuts = np.flatnonzero(u.gaps == u.ceiling) + 1
    else:
        cuts = np.empty(0, dtype=int)
    bounds = np.r_[0, cuts, n]
    return [build(int(bounds[k]), int(bounds[k + 1])) for k in range(len(bounds) - 1)]


def _flatten(trees, ceiling, mark_decoder=None):
    dec = mark_decoder or (lambda m: m)
    masses, gaps, marks = [], [], []
    has_marks = None
    pending = None
    # walk: each stack item is a node plus the height that separates it from
    # the previously emitted leaf
    stack = []
    for k in reversed(range(len(trees))):
        stack.append((trees[k], ceiling if k else None, ceiling))
    while stack:
        node, sep, parent_h = stack.pop()
        if sep is not None:
            pending = sep if pending is None else max(pending, sep)
        if "children" in node:
            h = float(node["h"])
            if h > parent_h:
                raise DomainError(f"merge height {h} above parent height {parent_h}")
            if h < 0:
                raise DomainError("negative merge height")
            kids = node["children"]
            if not kids:
                raise ValueError("internal node without children")
            for k in reversed(range(len(kids))):
                stack.append((kids[k], h if k else None, h))
            continue
        mk = "mark" in node
        if has_marks is None:
            has_marks = mk
        elif has_marks != mk:
            raise ValueError("either all leaves carry marks or none")
        if masses:
            gaps.append(pending)
        pending = None
        masses.append(float(node["mass"]))
        if mk:
            marks.append(dec(node["mark"]))
    return masses, gaps, (marks if has_marks else None)


def to_json(u, mark_encoder=None):
    return {"ceiling": float(u.ceiling), "trees": _forest(u, mark_encoder)}


def from_json(doc, mark_decoder=None, cls=Ums):
    ceiling = float(doc["ceiling"])
    masses, gaps, marks = _flatten(doc["trees"], ceiling, mark_decoder)
    return cls(masses, gaps, ceiling, marks)


def dumps(u, mark_encoder=None):
    return json.dumps(to_json(u, mark_encoder), sort_keys=True)


def loads(text, mark_decoder=None, cls=Ums):
    return from_json(json.loads(text), mark_decoder, cls)


# canonical form ---------------------------------------------------------------


def _mark_key(mark):
    if mark is None:
        return ""
    key = getattr(mark, "key", None)
    return repr(key() if callable(key) else mark)


def canonical_form(u, tol=1e-9):
    """Deterministic byte encoding invariant under leaf relabelling.

    Heights and masses are quantized to multiples of tol.  Points at distance
    zero with equal marks are merged, since they are the same atom.
    """
    if u.is_zero:
        return b"0"
    if not tol > 0:
        raise ValueError("canonical form needs a tolerance > 0")
    scaled = np.rint(u.gaps / tol)
    if len(scaled) and not scaled.max() < 2.0**62:
        raise ValueError(f"tolerance {tol} too fine for merge heights up to {u.gaps.max()}")
    q = lambda x: int(round(float(x) / tol))
    gq = scaled.astype(np.int64)
    keys = [_mark_key(m) for m in u.marks] if u.marks is not None else [""] * len(u.masses)
    # post-order over intervals; results: (mass, encoding, list of atoms if height 0)
    results = {}
    masses = u.masses.tolist()
    stack = [(0, len(masses), None, 0)]
    while stack:
        lo, hi, kids, h = stack.pop()
        if hi - lo == 1:
            results[(lo, hi)] = (masses[lo], None, {keys[lo]: masses[lo]})
            continue
        if kids is None:
            g = gq[lo:hi - 1]
            h = int(g.max())
            bounds = [lo] + (lo + 1 + np.flatnonzero(g == h)).tolist() + [hi]
            kids = list(zip(bounds[:-1], bounds[1:]))
            stack.append((lo, hi, kids, h))
            stack.extend((a, b, None, 0) for a, b in kids)
            continue
        if h == 0:
            atoms = {}
            for kid in kids:
                for key, m in results.pop(kid)[2].items():
                    atoms[key] = atoms.get(key, 0.0) + m
            results[(lo, hi)] = (sum(atoms.values()), None, atoms)
            continue
        parts = []
        mass = 0.0
        for kid in kids:
            m, enc, atoms = results.pop(kid)
            mass += m
            parts.append((q(m), enc if enc is not None else _atoms_encoding(atoms, q)))
        parts.sort()
        enc = b"N%d(" % h + b",".join(p[1] for p in parts) + b")"
        results[(lo, hi)] = (mass, enc, None)
    m, enc, atoms = results[(0, len(u.masses))]
    return enc if enc is not None else _atoms_encoding(atoms, q)


def _atoms_encoding(atoms, q):
    items = sorted((q(m), k.encode()) for k, m in atoms.items())
    if len(items) == 1:
        return b"L%d[%s]" % items[0]
    return b"N0(" + b",".join(b"L%d[%s]" % it for it in items) + b")"


def is_isomorphic(u, v, tol=1e-9):
    return canonical_form(u, tol) == canonical_form(v, tol)
