"""Feasible sets with linear minimization oracles and vertex bookkeeping.

Every domain here is a polytope.  Vertices are identified by hashable,
orderable keys (``VertexId``): plain indices for explicitly listed vertices
and the unit simplex, bit masks for boxes, index tuples for capped simplices,
and tuples of block ids for products.  Vertices of implicitly described
polytopes are never materialized as a full list; only vertices discovered by
the oracle are ever reconstructed.

Tie-breaking is deterministic everywhere: among minimizers (maximizers for
the away oracle) the lowest VertexId wins.
"""

from __future__ import annotations

import csv
import json
import math

import numpy as np
from scipy.optimize import nnls

from .errors import DimensionMismatch, EmptySupport, NonFiniteInput

# A VertexId is an int or a (nested) tuple of ints; ids within one domain are
# homogeneous and therefore orderable.
VertexId = "int | tuple"

DEFAULT_MEMBERSHIP_TOL = 1e-10


def _check_vector(domain, u):
    u = np.asarray(u, dtype=float)
    if u.shape != (domain.dimension,):
        raise DimensionMismatch(
            f"expected vector of length {domain.dimension}, got shape {u.shape}"
        )
    return u


class Domain:
    """Base class: a compact polytope exposing an LMO and a diameter."""

    dimension: int

    def lmo(self, u):
        """Return (vertex, id) minimizing u^T x over the domain."""
        raise NotImplementedError

    def vertex(self, vid):
        """Reconstruct the vertex vector for a VertexId."""
        raise NotImplementedError

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        raise NotImplementedError

    @property
    def diameter(self):
        raise NotImplementedError

    def sample(self, rng):
        """Random feasible point (used for Lipschitz sampling and tests)."""
        raise NotImplementedError

    def nearest_vertex(self, x):
        """Vertex closest to x in Euclidean norm (used to seed active-set methods)."""
        raise NotImplementedError

    def to_config(self):
        raise NotImplementedError


class UnitSimplex(Domain):
    def __init__(self, d):
        if d < 1:
            raise ValueError("simplex dimension must be >= 1")
        self.dimension = int(d)

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        j = int(np.argmin(u))  # first occurrence = lowest id
        return self.vertex(j), j

    def vertex(self, vid):
        v = np.zeros(self.dimension)
        v[vid] = 1.0
        return v

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        return bool(np.all(x >= -tol) and abs(x.sum() - 1.0) <= tol)

    @property
    def diameter(self):
        return math.sqrt(2.0) if self.dimension >= 2 else 0.0

    def sample(self, rng):
        return rng.dirichlet(np.ones(self.dimension))

    def nearest_vertex(self, x):
        j = int(np.argmax(x))
        return self.vertex(j), j

    def to_config(self):
        return {"kind": "unit_simplex", "d": self.dimension}


class Interval(Domain):
    def __init__(self, lo, hi):
        if not (hi > lo):
            raise ValueError("interval requires hi > lo")
        self.lo = float(lo)
        self.hi = float(hi)
        self.dimension = 1

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        vid = 1 if u[0] < 0 else 0  # tie at 0 -> lower endpoint (lowest id)
        return self.vertex(vid), vid

    def vertex(self, vid):
        return np.array([self.hi if vid else self.lo])

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        return bool(self.lo - tol <= x[0] <= self.hi + tol)

    @property
    def diameter(self):
        return self.hi - self.lo

    def sample(self, rng):
        return np.array([rng.uniform(self.lo, self.hi)])

    def nearest_vertex(self, x):
        vid = 1 if abs(x[0] - self.hi) < abs(x[0] - self.lo) else 0
        return self.vertex(vid), vid

    def to_config(self):
        return {"kind": "interval", "lo": self.lo, "hi": self.hi}


class Box(Domain):
    def __init__(self, lower, upper):
        self.lower = np.asarray(lower, dtype=float)
        self.upper = np.asarray(upper, dtype=float)
        if self.lower.shape != self.upper.shape or self.lower.ndim != 1:
            raise ValueError("lower/upper must be 1-D arrays of equal length")
        if not np.all(self.upper > self.lower):
            raise ValueError("box requires upper > lower componentwise")
        self.dimension = self.lower.size

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        bits = u < 0  # tie at 0 -> lower corner, keeping the id minimal
        vid = int(sum(1 << i for i in range(self.dimension) if bits[i]))
        return np.where(bits, self.upper, self.lower), vid

    def vertex(self, vid):
        bits = np.array([(vid >> i) & 1 for i in range(self.dimension)], dtype=bool)
        return np.where(bits, self.upper, self.lower)

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    @property
    def diameter(self):
        return float(np.linalg.norm(self.upper - self.lower))

    def sample(self, rng):
        return rng.uniform(self.lower, self.upper)

    def nearest_vertex(self, x):
        bits = (x - self.lower) > (self.upper - x)
        vid = int(sum(1 << i for i in range(self.dimension) if bits[i]))
        return np.where(bits, self.upper, self.lower), vid

    def to_config(self):
        return {"kind": "box", "lower": self.lower.tolist(), "upper": self.upper.tolist()}


class CappedSimplex(Domain):
    """{v in [0, cap]^m : sum(v) = B}, the budget polytope.

    Extreme points put ``cap`` on floor(B/cap) coordinates and the leftover
    mass on at most one further coordinate, so a fractional budget is allowed.
    A VertexId is ``(sorted tuple of capped indices, fractional index or -1)``.
    """

    def __init__(self, m, budget, cap=1.0):
        if m < 1:
            raise ValueError("m must be >= 1")
        if not (0 < budget <= cap * m):
            raise ValueError("budget must satisfy 0 < B <= cap * m")
        if cap <= 0:
            raise ValueError("cap must be positive")
        self.dimension = int(m)
        self.budget = float(budget)
        self.cap = float(cap)
        k = int(math.floor(self.budget / self.cap + 1e-12))
        r = self.budget - k * self.cap
        if r < 1e-12 * max(1.0, self.budget):
            r = 0.0
        if k > m:  # only possible through rounding at B == cap*m
            k, r = m, 0.0
        self._n_capped = k
        self._frac = r

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        order = np.argsort(u, kind="stable")
        k, r = self._n_capped, self._frac
        capped = tuple(sorted(int(i) for i in order[:k]))
        frac_idx = int(order[k]) if r > 0 else -1
        vid = (capped, frac_idx)
        return self.vertex(vid), vid

    def vertex(self, vid):
        capped, frac_idx = vid
        v = np.zeros(self.dimension)
        v[list(capped)] = self.cap
        if frac_idx >= 0:
            v[frac_idx] = self._frac
        return v

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        return bool(
            np.all(x >= -tol)
            and np.all(x <= self.cap + tol)
            and abs(x.sum() - self.budget) <= tol
        )

    @property
    def diameter(self):
        k, r, c, m = self._n_capped, self._frac, self.cap, self.dimension
        s = k + (1 if r > 0 else 0)
        sq_norm = k * c * c + r * r
        if 2 * s <= m:
            return math.sqrt(2.0 * sq_norm)
        # Supports of two extreme points must share t coordinates; the
        # cheapest overlap pairs the fractional entries with capped ones.
        t = 2 * s - m
        if r > 0:
            overlap = r * r if t == 1 else 2 * r * c + (t - 2) * c * c
        else:
            overlap = t * c * c
        return math.sqrt(max(0.0, 2.0 * (sq_norm - overlap)))

    def sample(self, rng):
        # Convex combination of a few random extreme points.
        n_mix = min(self.dimension, 8)
        verts = []
        for _ in range(n_mix):
            perm = rng.permutation(self.dimension)
            v = np.zeros(self.dimension)
            v[perm[: self._n_capped]] = self.cap
            if self._frac > 0:
                v[perm[self._n_capped]] = self._frac
            verts.append(v)
        w = rng.dirichlet(np.ones(n_mix))
        return np.einsum("i,ij->j", w, np.array(verts))

    def nearest_vertex(self, x):
        # Greedy: cap the largest coordinates, fractional mass on the next.
        order = np.argsort(-np.asarray(x, dtype=float), kind="stable")
        k, r = self._n_capped, self._frac
        capped = tuple(sorted(int(i) for i in order[:k]))
        frac_idx = int(order[k]) if r > 0 else -1
        vid = (capped, frac_idx)
        return self.vertex(vid), vid

    def to_config(self):
        return {
            "kind": "capped_simplex",
            "m": self.dimension,
            "budget": self.budget,
            "cap": self.cap,
        }


class ExplicitPolytope(Domain):
    def __init__(self, vertices):
        V = np.asarray(vertices, dtype=float)
        if V.ndim != 2 or V.shape[0] < 1:
            raise ValueError("vertices must be a nonempty 2-D array")
        for i in range(V.shape[0]):
            for j in range(i + 1, V.shape[0]):
                if np.array_equal(V[i], V[j]):
                    raise ValueError(f"duplicate vertex rows {i} and {j}")
        self.vertices = V
        self.dimension = V.shape[1]

    @classmethod
    def from_csv(cls, path):
        rows = []
        with open(path, newline="") as fh:
            for row in csv.reader(fh):
                if row:
                    rows.append([float(c) for c in row])
        return cls(np.array(rows))

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        j = int(np.argmin(self.vertices @ u))
        return self.vertices[j].copy(), j

    def vertex(self, vid):
        return self.vertices[vid].copy()

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        # x in conv(V) iff the NNLS residual of [V^T; 1] w = [x; 1] vanishes.
        A = np.vstack([self.vertices.T, np.ones(self.vertices.shape[0])])
        b = np.concatenate([x, [1.0]])
        scale = max(1.0, float(np.abs(self.vertices).max()))
        _, resid = nnls(A / scale, b / scale)
        return bool(resid <= max(tol * 100, 1e-8))

    @property
    def diameter(self):
        V = self.vertices
        sq = np.sum(V * V, axis=1)
        d2 = sq[:, None] + sq[None, :] - 2.0 * (V @ V.T)
        return math.sqrt(max(0.0, float(d2.max())))

    def sample(self, rng):
        w = rng.dirichlet(np.ones(self.vertices.shape[0]))
        return w @ self.vertices

    def nearest_vertex(self, x):
        j = int(np.argmin(np.linalg.norm(self.vertices - x, axis=1)))
        return self.vertices[j].copy(), j

    def to_config(self):
        return {"kind": "explicit_polytope", "vertices": self.vertices.tolist()}


class Product(Domain):
    """Cartesian product of domains; the LMO decomposes blockwise."""

    def __init__(self, components):
        if not components:
            raise ValueError("product needs at least one component")
        self.components = list(components)
        self.dimension = sum(c.dimension for c in self.components)
        self._offsets = np.cumsum([0] + [c.dimension for c in self.components])

    def _split(self, x):
        return [
            x[self._offsets[i] : self._offsets[i + 1]]
            for i in range(len(self.components))
        ]

    def lmo(self, u):
        u = _check_vector(self, u)
        if not np.all(np.isfinite(u)):
            raise NonFiniteInput("cost vector contains NaN/Inf")
        parts, ids = [], []
        for comp, block in zip(self.components, self._split(u)):
            v, vid = comp.lmo(block)
            parts.append(v)
            ids.append(vid)
        return np.concatenate(parts), tuple(ids)

    def vertex(self, vid):
        return np.concatenate(
            [comp.vertex(b) for comp, b in zip(self.components, vid)]
        )

    def membership(self, x, tol=DEFAULT_MEMBERSHIP_TOL):
        x = _check_vector(self, x)
        return all(
            comp.membership(block, tol)
            for comp, block in zip(self.components, self._split(x))
        )

    @property
    def diameter(self):
        return math.sqrt(sum(c.diameter**2 for c in self.components))

    def sample(self, rng):
        return np.concatenate([c.sample(rng) for c in self.components])

    def nearest_vertex(self, x):
        parts, ids = [], []
        for comp, block in zip(self.components, self._split(x)):
            v, vid = comp.nearest_vertex(block)
            parts.append(v)
            ids.append(vid)
        return np.concatenate(parts), tuple(ids)

    def to_config(self):
        return {"kind": "product", "components": [c.to_config() for c in self.components]}


# -- spec-level operations ---------------------------------------------------


def lmo(domain, u):
    return domain.lmo(u)


def membership(domain, x, tol=DEFAULT_MEMBERSHIP_TOL):
    return domain.membership(x, tol)


def diameter(domain):
    return domain.diameter


def away_vertex(domain, u, support):
    """Support vertex maximizing u^T a_j; lowest VertexId wins ties.

    ``support`` maps VertexId -> positive weight (weights are only validated,
    the maximization ignores them).
    """
    if not support:
        raise EmptySupport("away step needs a nonempty support")
    best_id, best_vec, best_val = None, None, -math.inf
    for vid in sorted(support):
        if support[vid] <= 0:
            raise EmptySupport(f"support weight for {vid} must be positive")
        vec = domain.vertex(vid)
        val = float(np.dot(u, vec))
        if val > best_val:
            best_id, best_vec, best_val = vid, vec, val
    return best_vec, best_id


def domain_from_config(cfg, base_dir=None):
    """Build a Domain from a JSON-style dict (kind tag + parameters)."""
    kind = cfg.get("kind")
    if kind == "unit_simplex":
        return UnitSimplex(cfg["d"])
    if kind == "interval":
        return Interval(cfg["lo"], cfg["hi"])
    if kind == "box":
        return Box(cfg["lower"], cfg["upper"])
    if kind == "capped_simplex":
        return CappedSimplex(cfg["m"], cfg["budget"], cfg.get("cap", 1.0))
    if kind == "explicit_polytope":
        if "vertices_csv" in cfg:
            path = cfg["vertices_csv"]
            if base_dir is not None:
                import os

                path = os.path.join(base_dir, path)
            return ExplicitPolytope.from_csv(path)
        return ExplicitPolytope(cfg["vertices"])
    if kind == "product":
        return Product([domain_from_config(c, base_dir) for c in cfg["components"]])
    raise ValueError(f"unknown domain kind {kind!r}")


def domain_from_json(text):
    return domain_from_config(json.loads(text))
