"""Data-distillation bilevel instance on the capped-simplex budget polytope.

Upper variables are per-sample weights v on {v in [0,1]^m : sum v = B}; the
lower level trains a linear softmax classifier on the v-weighted mean
cross-entropy plus a ridge term, by gradient descent.  The ridge modulus s
makes the GD map a contraction with factor about 1 - step*s.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from ..domains import CappedSimplex
from ..errors import NonContractiveStep, SingularSystem
from ..hypergrad import FixedPointProblem


@dataclass
class DistillationInstance:
    X_train: np.ndarray
    y_train: np.ndarray
    X_val: np.ndarray
    y_val: np.ndarray
    budget: float
    reg: float = 2e3

    def __post_init__(self):
        self.X_train = np.asarray(self.X_train, dtype=float)
        self.y_train = np.asarray(self.y_train, dtype=int)
        self.X_val = np.asarray(self.X_val, dtype=float)
        self.y_val = np.asarray(self.y_val, dtype=int)
        if self.budget > self.n_train:
            raise ValueError("budget cannot exceed the number of training samples")
        n_classes = self.n_classes
        if self.y_train.min() < 0 or self.y_train.max() >= n_classes:
            raise ValueError("labels out of range")

    @property
    def n_train(self):
        return self.X_train.shape[0]

    @property
    def n_features(self):
        return self.X_train.shape[1]

    @property
    def n_classes(self):
        return int(max(self.y_train.max(), self.y_val.max())) + 1

    @property
    def domain(self):
        return CappedSimplex(self.n_train, self.budget, cap=1.0)

    def uniform_init(self):
        return np.full(self.n_train, self.budget / self.n_train)


def _softmax(Z):
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    return P


def _cross_entropy(Z, y):
    Z = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    return lse - Z[np.arange(len(y)), y]


class _DistillBilevel:
    """Closure state for the distillation FixedPointProblem callables."""

    def __init__(self, instance, inner_step, init_seed=0):
        self.inst = instance
        self.m, self.d = instance.X_train.shape
        self.e = instance.n_classes
        self.s = instance.reg
        self.step = inner_step
        self.Xt = instance.X_train
        self.Xv = instance.X_val
        self.onehot_t = np.zeros((self.m, self.e))
        self.onehot_t[np.arange(self.m), instance.y_train] = 1.0
        # Smoothness of the weighted CE term: softmax Hessian in logits is at
        # most I/2 and sum(v) = B with v <= 1.
        row_sq = np.sum(self.Xt**2, axis=1) + 1.0
        ce_smooth = 0.5 * min(instance.budget, self.m) * float(row_sq.max()) / self.m
        self.L_low = self.s + ce_smooth
        if inner_step * self.L_low >= 2.0:
            raise NonContractiveStep(
                f"inner stepsize {inner_step} is too large for smoothness {self.L_low:.3e}"
            )
        self.q = max(abs(1.0 - inner_step * self.s), abs(1.0 - inner_step * self.L_low))
        rng = np.random.default_rng(init_seed)
        W0 = rng.normal(0.0, 0.01, size=(self.e, self.d))
        self.w0 = np.concatenate([W0.ravel(), np.zeros(self.e)])

    @property
    def dim(self):
        return self.e * self.d + self.e

    def unpack(self, zeta):
        W = zeta[: self.e * self.d].reshape(self.e, self.d)
        b = zeta[self.e * self.d :]
        return W, b

    def pack(self, W, b):
        return np.concatenate([W.ravel(), b])

    def train_residual(self, zeta):
        W, b = self.unpack(zeta)
        P = _softmax(self.Xt @ W.T + b)
        return P - self.onehot_t

    def lower_grad(self, zeta, v):
        A = self.train_residual(zeta)
        vA = v[:, None] * A
        gW = vA.T @ self.Xt / self.m
        gb = vA.sum(axis=0) / self.m
        return self.pack(gW, gb) + self.s * zeta

    def phi(self, zeta, v):
        return zeta - self.step * self.lower_grad(zeta, v)

    def hessian_vec(self, zeta, v, vec):
        W, b = self.unpack(zeta)
        Vw, Vb = self.unpack(vec)
        P = _softmax(self.Xt @ W.T + b)
        dZ = self.Xt @ Vw.T + Vb
        dP = P * (dZ - np.sum(P * dZ, axis=1, keepdims=True))
        vdP = v[:, None] * dP
        hW = vdP.T @ self.Xt / self.m
        hb = vdP.sum(axis=0) / self.m
        return self.pack(hW, hb) + self.s * vec

    def vjp1(self, zeta, v, u):
        # The lower-level Hessian is symmetric, so vjp1 == jvp1.
        return u - self.step * self.hessian_vec(zeta, v, u)

    def vjp2(self, zeta, v, u):
        A = self.train_residual(zeta)
        Uw, Ub = self.unpack(u)
        M = self.Xt @ Uw.T + Ub
        return -(self.step / self.m) * np.sum(A * M, axis=1)

    def jvp2(self, zeta, v, vec):
        A = self.train_residual(zeta)
        vA = vec[:, None] * A
        gW = vA.T @ self.Xt / self.m
        gb = vA.sum(axis=0) / self.m
        return -self.step * self.pack(gW, gb)

    def val_logits(self, zeta):
        W, b = self.unpack(zeta)
        return self.Xv @ W.T + b

    def grad1_E(self, zeta, v):
        P = _softmax(self.val_logits(zeta))
        P[np.arange(len(self.inst.y_val)), self.inst.y_val] -= 1.0
        P /= len(self.inst.y_val)
        return self.pack(P.T @ self.Xv, P.sum(axis=0))

    def grad2_E(self, zeta, v):
        return np.zeros(self.m)

    def value_E(self, zeta, v):
        return float(np.mean(_cross_entropy(self.val_logits(zeta), self.inst.y_val)))

    # -- near-exact channel for tests ------------------------------------

    def full_hessian(self, zeta, v):
        W, b = self.unpack(zeta)
        P = _softmax(self.Xt @ W.T + b)
        Xa = np.hstack([self.Xt, np.ones((self.m, 1))])  # augmented features
        S = np.einsum("ic,cd->icd", P, np.eye(self.e)) - np.einsum("ic,id->icd", P, P)
        H = np.einsum("i,icd,ij,ik->cjdk", v, S, Xa, Xa) / self.m
        dim_a = self.e * (self.d + 1)
        H = H.reshape(dim_a, dim_a)
        return H + self.s * np.eye(dim_a)

    def _zeta_to_aug(self, zeta):
        W, b = self.unpack(zeta)
        return np.hstack([W, b[:, None]]).ravel()

    def _aug_to_zeta(self, aug):
        Wb = aug.reshape(self.e, self.d + 1)
        return self.pack(Wb[:, : self.d], Wb[:, self.d])

    def solve_lower_newton(self, v, tol=1e-12, max_iters=60, zeta0=None):
        zeta = self.w0.copy() if zeta0 is None else zeta0.copy()
        for _ in range(max_iters):
            g = self.lower_grad(zeta, v)
            if np.linalg.norm(g) <= tol * max(1.0, self.s):
                return zeta
            H = self.full_hessian(zeta, v)
            try:
                step_aug = np.linalg.solve(H, self._zeta_to_aug(g))
            except np.linalg.LinAlgError as exc:
                raise SingularSystem("lower-level Hessian is singular") from exc
            zeta = zeta - self._aug_to_zeta(step_aug)
        return zeta

    def exact_hypergradient(self, v, zeta_star=None):
        zeta = self.solve_lower_newton(v) if zeta_star is None else zeta_star
        H = self.full_hessian(zeta, v)
        g1 = self.grad1_E(zeta, v)
        # (I - d1_phi)^T u = g1 with I - d1_phi = step * H.
        u_aug = np.linalg.solve(self.step * H, self._zeta_to_aug(g1))
        return self.vjp2(zeta, v, self._aug_to_zeta(u_aug))

    def exact_upper_value(self, v, zeta0=None):
        return self.value_E(self.solve_lower_newton(v, zeta0=zeta0), v)


def distillation_problem(instance, inner_iters=50, inner_step=1e-7, init_seed=0,
                         with_exact_channel=False):
    """Package the distillation lower level as a FixedPointProblem.

    `inner_iters` is the production truncation level (recorded for harness
    use); the contraction factor with the paper-scale ridge is so close to 1
    that certified iteration counts are impractical, so no inexactness
    certificate is claimed at this t.
    """
    core = _DistillBilevel(instance, inner_step, init_seed)
    problem = FixedPointProblem(
        inner_dim=core.dim,
        outer_domain=instance.domain,
        phi=core.phi,
        phi_vjp1=core.vjp1,
        phi_vjp2=core.vjp2,
        phi_jvp1=core.vjp1,
        phi_jvp2=core.jvp2,
        grad1_E=core.grad1_E,
        grad2_E=core.grad2_E,
        value_E=core.value_E,
        q=core.q,
        w0=core.w0,
        exact_hypergradient=core.exact_hypergradient if with_exact_channel else None,
    )
    problem.inner_iters = inner_iters
    problem.core = core
    return problem


def top_b_selection(v, budget):
    """Indices of the ceil(B) largest weights; ties resolved by lowest index."""
    import math

    v = np.asarray(v, dtype=float)
    count = int(math.ceil(budget))
    order = np.lexsort((np.arange(v.size), -v))
    return np.sort(order[:count])


# -- datasets -------------------------------------------------------------------


def load_csv_dataset(path):
    """CSV with a header row, one sample per row, response in the last column."""
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        next(reader)  # header
        rows = [[float(c) for c in row] for row in reader if row]
    data = np.array(rows)
    return data[:, :-1], data[:, -1]


def synthetic_blobs(m=500, d=20, n_classes=3, n_val=200, seed=0, spread=2.0):
    """Gaussian blobs with one mean per class; returns a DistillationInstance-ready split."""
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((n_classes, d)) * spread
    y = rng.integers(0, n_classes, size=m + n_val)
    X = means[y] + rng.standard_normal((m + n_val, d))
    return X[:m], y[:m], X[m:], y[m:]


def blog_surrogate(m=500, d=20, n_classes=3, n_val=200, seed=0):
    """Synthetic stand-in for the blog-feedback regression data.

    Feature rows are Gaussian, the response is a noisy linear score, and
    classes come from response quantiles.  This keeps the shapes and loader
    path of the real CSV without redistributing it.
    """
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((m + n_val, d))
    coef = rng.standard_normal(d)
    response = X @ coef + 0.5 * rng.standard_normal(m + n_val)
    edges = np.quantile(response, np.linspace(0, 1, n_classes + 1)[1:-1])
    y = np.digitize(response, edges)
    return X[:m], y[:m], X[m:], y[m:]


def response_to_classes(response, n_classes):
    """Quantile-threshold a continuous response into class labels."""
    response = np.asarray(response, dtype=float)
    edges = np.quantile(response, np.linspace(0, 1, n_classes + 1)[1:-1])
    return np.digitize(response, edges)
