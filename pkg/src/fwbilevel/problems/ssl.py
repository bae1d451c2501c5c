"""Multilayer semi-supervised learning bilevel instance.

The upper variables are (alpha, beta, lambda): a generalized-mean exponent,
simplex weights over graph layers, and a Laplacian regularization strength.
The lower level is quadratic label propagation on the aggregated graph,
solved by gradient descent with a stepsize that contracts uniformly over the
whole hyperparameter box.
"""

from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sp

from ..domains import Interval, Product, UnitSimplex
from ..errors import ParameterOutOfRange, PowerIterationFailure
from ..hypergrad import FixedPointProblem

GEOMETRIC_SWITCH = 1e-8


# -- generalized-mean aggregation ---------------------------------------------


def _stack_layer_values(layers):
    """Union support (symmetric) and per-layer values on it."""
    union = None
    for W in layers:
        W = sp.csr_matrix(W)
        union = W.copy() if union is None else union + W
    union = sp.coo_matrix(union)
    mask = union.data != 0  # defensive; explicit zeros
    I, J = union.row[mask], union.col[mask]
    vals = np.zeros((len(layers), I.size))
    for k, W in enumerate(layers):
        vals[k] = np.asarray(sp.csr_matrix(W)[I, J]).ravel()
    return I, J, vals


def _power_mean_values(vals, alpha, beta, with_grads=False):
    """Entrywise weighted power mean of stacked layer values.

    Entries with a zero in any layer are zero for alpha < 0 and for the
    geometric branch; for alpha > 0 zero layers simply contribute nothing.
    Returns (w, dw_dalpha, dw_dbeta) when with_grads is set.
    """
    K, nnz = vals.shape
    beta = np.asarray(beta, dtype=float)
    w = np.zeros(nnz)
    d_alpha = np.zeros(nnz) if with_grads else None
    d_beta = np.zeros((nnz, K)) if with_grads else None

    if abs(alpha) <= GEOMETRIC_SWITCH:
        active = np.all(vals > 0, axis=0)
        if np.any(active):
            logs = np.log(vals[:, active])  # K x na
            mean_log = beta @ logs
            w_act = np.exp(mean_log)
            w[active] = w_act
            if with_grads:
                d_beta[active, :] = (w_act[None, :] * logs).T
                var_log = beta @ (logs**2) - mean_log**2
                d_alpha[active] = 0.5 * w_act * var_log
        return (w, d_alpha, d_beta) if with_grads else w

    if alpha < 0:
        active = np.all(vals > 0, axis=0)
    else:
        active = np.any(vals > 0, axis=0)
    if not np.any(active):
        return (w, d_alpha, d_beta) if with_grads else w

    v = vals[:, active]
    pos = v > 0
    v_pow = np.where(pos, v, 1.0) ** alpha * pos  # zero layers contribute 0
    S = beta @ v_pow
    ok = S > 0
    w_act = np.zeros(v.shape[1])
    w_act[ok] = S[ok] ** (1.0 / alpha)
    w[active] = w_act
    if with_grads:
        db = np.zeros_like(v_pow.T)
        da = np.zeros(v.shape[1])
        if np.any(ok):
            Sk = S[ok]
            wk = w_act[ok]
            db[ok, :] = ((1.0 / alpha) * wk / Sk)[:, None] * v_pow[:, ok].T
            log_v = np.where(pos, np.log(np.where(pos, v, 1.0)), 0.0)
            inner = beta @ (v_pow * log_v)
            da[ok] = wk * (-np.log(Sk) / alpha**2 + inner[ok] / (alpha * Sk))
        ix = np.where(active)[0]
        d_beta[ix, :] = db
        d_alpha[ix] = da
        return w, d_alpha, d_beta
    return w


def aggregate_layers(layers, alpha, beta):
    """Entrywise generalized mean of the layer matrices; symmetric sparse output."""
    I, J, vals = _stack_layer_values(layers)
    w = _power_mean_values(vals, alpha, beta)
    n = layers[0].shape[0]
    return sp.csr_matrix((w, (I, J)), shape=(n, n))


# -- power iteration -----------------------------------------------------------


def power_iteration_opnorm(matvec, dim, steps=50, rtol=1e-6, seed=0):
    """Largest-eigenvalue estimate for a PSD operator; raises if it fails to settle."""
    rng = np.random.default_rng(seed)
    v = rng.standard_normal(dim)
    v /= np.linalg.norm(v)
    lam_prev = None
    for _ in range(steps):
        w = matvec(v)
        lam = float(np.linalg.norm(w))
        if lam < 1e-300:
            return 1e-300
        v = w / lam
        if lam_prev is not None and abs(lam - lam_prev) <= rtol * lam:
            return lam
        lam_prev = lam
    raise PowerIterationFailure("power iteration did not stabilize")


# -- lower level at a fixed aggregated graph -----------------------------------


class LabelPropagationContext:
    """Gradient-descent map for ||X - Y||_F^2 + (lambda/2) Tr(X^T L X) at fixed W."""

    def __init__(self, W_agg, Y_train, lam, power_steps=50, power_seed=0):
        if not (0.0 <= lam):
            raise ParameterOutOfRange("lambda must be nonnegative")
        self.W = sp.csr_matrix(W_agg)
        self.Y = np.asarray(Y_train, dtype=float)
        self.lam = float(lam)
        n = self.W.shape[0]
        self.deg = np.asarray(self.W.sum(axis=1)).ravel()

        def hess_mv(v):
            return 2.0 * v + self.lam * (self.deg * v - self.W @ v)

        try:
            l_hat = power_iteration_opnorm(hess_mv, n, steps=power_steps, seed=power_seed)
        except PowerIterationFailure:
            # Gershgorin bound of 2I + lam*(D - W); row sums of |W| equal deg.
            l_hat = 2.0 + 2.0 * self.lam * float(self.deg.max(initial=0.0))
        self.L_hat = max(l_hat, 2.0) * 1.05  # never underestimate the curvature
        self.eta = 1.0 / self.L_hat
        self.q = 1.0 - 2.0 * self.eta

    def laplacian_apply(self, X):
        return self.deg[:, None] * X - self.W @ X

    def phi(self, X):
        grad = 2.0 * (X - self.Y) + self.lam * self.laplacian_apply(X)
        return X - self.eta * grad

    def fixed_point(self, max_iters=500):
        X = np.zeros_like(self.Y)
        for _ in range(max_iters):
            X = self.phi(X)
        return X

    def solve_direct(self):
        """Dense solve of (2I + lambda L) X = 2 Y."""
        n = self.W.shape[0]
        H = 2.0 * np.eye(n) + self.lam * (np.diag(self.deg) - self.W.toarray())
        return np.linalg.solve(H, 2.0 * self.Y)


def label_propagation_lower_level(W_agg, Y_train, lam, max_iters=500):
    return LabelPropagationContext(W_agg, Y_train, lam)


# -- upper loss ----------------------------------------------------------------


def ssl_upper_loss(X, val_indices, val_labels):
    """Mean multiclass cross-entropy of the propagated logits on validation nodes."""
    Z = np.asarray(X, dtype=float)[val_indices]
    Z = Z - Z.max(axis=1, keepdims=True)
    lse = np.log(np.exp(Z).sum(axis=1))
    picked = Z[np.arange(len(val_indices)), val_labels]
    return float(np.mean(lse - picked))


def _upper_loss_grad(X, val_indices, val_labels):
    G = np.zeros_like(X)
    Z = X[val_indices]
    Z = Z - Z.max(axis=1, keepdims=True)
    P = np.exp(Z)
    P /= P.sum(axis=1, keepdims=True)
    P[np.arange(len(val_indices)), val_labels] -= 1.0
    G[val_indices] = P / len(val_indices)
    return G


# -- instance + SBM generator ---------------------------------------------------


@dataclass
class MultilayerSSLInstance:
    layers: list
    Y_train: np.ndarray
    val_indices: np.ndarray
    val_labels: np.ndarray
    true_communities: np.ndarray
    params: dict = field(default_factory=dict)

    @property
    def n_nodes(self):
        return self.Y_train.shape[0]

    @property
    def n_classes(self):
        return self.Y_train.shape[1]

    @property
    def n_layers(self):
        return len(self.layers)

    @property
    def hyper_domain(self):
        return Product(
            [Interval(-2.0, 2.0), UnitSimplex(self.n_layers), Interval(0.01, 1.0)]
        )

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        with open(os.path.join(directory, "instance.json"), "w") as fh:
            json.dump(self.params, fh, indent=2, sort_keys=True)
        arrays = {
            "Y_train": self.Y_train,
            "val_indices": self.val_indices,
            "val_labels": self.val_labels,
            "true_communities": self.true_communities,
        }
        for k, W in enumerate(self.layers):
            arrays[f"layer_{k}"] = sp.csr_matrix(W).toarray()
        np.savez(os.path.join(directory, "instance.npz"), **arrays)

    @classmethod
    def load(cls, directory):
        with open(os.path.join(directory, "instance.json")) as fh:
            params = json.load(fh)
        data = np.load(os.path.join(directory, "instance.npz"))
        layers = []
        k = 0
        while f"layer_{k}" in data:
            layers.append(sp.csr_matrix(data[f"layer_{k}"]))
            k += 1
        return cls(
            layers=layers,
            Y_train=data["Y_train"],
            val_indices=data["val_indices"],
            val_labels=data["val_labels"],
            true_communities=data["true_communities"],
            params=params,
        )


def _sbm_layer(rng, communities, p_in, p_out, weight_range):
    n = communities.size
    same = communities[:, None] == communities[None, :]
    probs = np.where(same, p_in, p_out)
    iu, ju = np.triu_indices(n, k=1)
    present = rng.random(iu.size) < probs[iu, ju]
    weights = rng.uniform(weight_range[0], weight_range[1], size=iu.size)
    data = weights[present]
    rows, cols = iu[present], ju[present]
    W = sp.coo_matrix((data, (rows, cols)), shape=(n, n))
    return sp.csr_matrix(W + W.T)


def _noise_layer(rng, n, density, weight_range):
    iu, ju = np.triu_indices(n, k=1)
    present = rng.random(iu.size) < density
    weights = rng.uniform(weight_range[0], weight_range[1], size=iu.size)
    W = sp.coo_matrix((weights[present], (iu[present], ju[present])), shape=(n, n))
    return sp.csr_matrix(W + W.T)


def generate_sbm_multilayer(
    n=70,
    c=5,
    k_true=3,
    p_in=(0.35, 0.30, 0.25),
    p_out=(0.03, 0.04, 0.05),
    drift=0.10,
    noise_ratio=0.1,
    weight_range=(0.5, 1.5),
    seed=0,
    train_fraction=0.8,
    reveal_fraction=0.1,
):
    """Multilayer SBM with drifting communities plus density-matched noise layers.

    k_true structured layers are generated from a base community assignment;
    between consecutive layers a `drift` fraction of nodes moves to a
    uniformly chosen different community.  Noise layers are appended until
    k_true / K = noise_ratio.  Node labels are split train/validation, and
    only a fraction of the training labels is revealed in Y_train.
    """
    if len(p_in) != k_true or len(p_out) != k_true:
        raise ParameterOutOfRange("p_in/p_out must have length k_true")
    if not (0.0 <= drift < 1.0):
        raise ParameterOutOfRange("drift must lie in [0, 1)")
    if not (0.0 < noise_ratio <= 1.0):
        raise ParameterOutOfRange("noise_ratio must lie in (0, 1]")
    rng = np.random.default_rng(seed)

    base = rng.permutation(np.arange(n) % c)
    communities = base.copy()
    layers = []
    for k in range(k_true):
        if k > 0 and drift > 0:
            moved = rng.choice(n, size=int(round(drift * n)), replace=False)
            for node in moved:
                choices = [cc for cc in range(c) if cc != communities[node]]
                communities[node] = rng.choice(choices)
        layers.append(_sbm_layer(rng, communities, p_in[k], p_out[k], weight_range))

    n_pairs = n * (n - 1) / 2
    mean_density = float(np.mean([W.nnz / 2 / n_pairs for W in layers]))
    total_layers = math.ceil(k_true / noise_ratio)
    for _ in range(total_layers - k_true):
        layers.append(_noise_layer(rng, n, mean_density, weight_range))

    perm = rng.permutation(n)
    n_train = int(round(train_fraction * n))
    train_nodes, val_nodes = perm[:n_train], perm[n_train:]
    n_reveal = max(1, int(round(reveal_fraction * n_train)))
    revealed = np.sort(train_nodes[:n_reveal])

    Y = np.zeros((n, c))
    Y[revealed, base[revealed]] = 1.0
    val_indices = np.sort(val_nodes)

    params = {
        "n": n,
        "c": c,
        "k_true": k_true,
        "p_in": list(p_in),
        "p_out": list(p_out),
        "drift": drift,
        "noise_ratio": noise_ratio,
        "weight_range": list(weight_range),
        "seed": seed,
        "train_fraction": train_fraction,
        "reveal_fraction": reveal_fraction,
    }
    return MultilayerSSLInstance(
        layers=layers,
        Y_train=Y,
        val_indices=val_indices,
        val_labels=base[val_indices],
        true_communities=base,
        params=params,
    )


# -- the full bilevel fixed-point problem ---------------------------------------


class _SSLBilevel:
    """Closure state for the SSL FixedPointProblem callables."""

    def __init__(self, instance, power_seed=0):
        self.inst = instance
        self.N, self.C = instance.Y_train.shape
        self.K = instance.n_layers
        self.I, self.J, self.layer_vals = _stack_layer_values(instance.layers)
        self.Y = instance.Y_train
        self.domain = instance.hyper_domain

        # Uniform inner stepsize: the aggregated graph is entrywise dominated
        # by the layer maximum and lambda <= 1, so 2I + L(W_max) dominates
        # every 2I + lambda*L(alpha, beta) in the PSD order.
        w_max = self.layer_vals.max(axis=0)
        deg_max = np.bincount(self.I, weights=w_max, minlength=self.N)
        W_up = sp.csr_matrix((w_max, (self.I, self.J)), shape=(self.N, self.N))

        def hess_mv(v):
            return 2.0 * v + (deg_max * v - W_up @ v)

        try:
            l_hat = power_iteration_opnorm(hess_mv, self.N, steps=50, seed=power_seed)
        except PowerIterationFailure:
            l_hat = 2.0 + 2.0 * float(deg_max.max(initial=0.0))
        self.L_hat = max(l_hat, 2.0) * 1.05
        self.eta = 1.0 / self.L_hat
        self.q = 1.0 - 2.0 * self.eta
        self._cache_key = None
        self._cache = None

    def split(self, x):
        return float(x[0]), np.asarray(x[1 : 1 + self.K], dtype=float), float(x[1 + self.K])

    def _theta_data(self, x, grads=False):
        key = np.asarray(x, dtype=float).tobytes()
        if key != self._cache_key:
            alpha, beta, lam = self.split(x)
            w = _power_mean_values(self.layer_vals, alpha, beta)
            W = np.zeros((self.N, self.N))
            W[self.I, self.J] = w
            deg = np.bincount(self.I, weights=w, minlength=self.N)
            # One gradient-descent step is the affine map X -> A X + b.
            A = (self.eta * lam) * W
            idx = np.arange(self.N)
            A[idx, idx] += 1.0 - self.eta * (2.0 + lam * deg)
            self._cache_key = key
            self._cache = {
                "alpha": alpha,
                "beta": beta,
                "lam": lam,
                "W": W,
                "deg": deg,
                "A": A,
            }
        if grads and "d_alpha" not in self._cache:
            _, d_alpha, d_beta = _power_mean_values(
                self.layer_vals, self._cache["alpha"], self._cache["beta"], with_grads=True
            )
            self._cache["d_alpha"] = d_alpha
            self._cache["d_beta"] = d_beta
        return self._cache

    def _lap_apply(self, data, X):
        return data["deg"][:, None] * X - data["W"] @ X

    def phi(self, w, x):
        data = self._theta_data(x)
        X = w.reshape(self.N, self.C)
        return (data["A"] @ X + (2.0 * self.eta) * self.Y).ravel()

    def vjp1(self, w, x, u):
        data = self._theta_data(x)
        U = u.reshape(self.N, self.C)
        return (data["A"] @ U).ravel()

    def vjp2(self, w, x, u):
        data = self._theta_data(x, grads=True)
        X = w.reshape(self.N, self.C)
        U = u.reshape(self.N, self.C)
        LX = self._lap_apply(data, X)
        g_lam = -self.eta * float(np.sum(U * LX))
        r = np.sum(U * X, axis=1)
        cross = np.sum(U[self.I] * X[self.J], axis=1)
        P = r[self.I] - cross
        g_alpha = -self.eta * data["lam"] * float(data["d_alpha"] @ P)
        g_beta = -self.eta * data["lam"] * (P @ data["d_beta"])
        return np.concatenate([[g_alpha], g_beta, [g_lam]])

    def jvp2(self, w, x, v):
        data = self._theta_data(x, grads=True)
        X = w.reshape(self.N, self.C)
        v_alpha, v_beta, v_lam = float(v[0]), v[1 : 1 + self.K], float(v[1 + self.K])
        dw = v_alpha * data["d_alpha"] + data["d_beta"] @ v_beta
        ddeg = np.bincount(self.I, weights=dw, minlength=self.N)
        dWX = np.zeros_like(X)
        np.add.at(dWX, self.I, dw[:, None] * X[self.J])
        dLX = ddeg[:, None] * X - dWX
        LX = self._lap_apply(data, X)
        return (-self.eta * (v_lam * LX + data["lam"] * dLX)).ravel()

    def grad1_E(self, w, x):
        X = w.reshape(self.N, self.C)
        return _upper_loss_grad(X, self.inst.val_indices, self.inst.val_labels).ravel()

    def grad2_E(self, w, x):
        return np.zeros(2 + self.K)

    def value_E(self, w, x):
        X = w.reshape(self.N, self.C)
        return ssl_upper_loss(X, self.inst.val_indices, self.inst.val_labels)

    def _direct_solve(self, x):
        data = self._theta_data(x)
        H = 2.0 * np.eye(self.N) + data["lam"] * (np.diag(data["deg"]) - data["W"])
        return H, np.linalg.solve(H, 2.0 * self.Y)

    def exact_hypergradient(self, x):
        H, X_star = self._direct_solve(x)
        G1 = _upper_loss_grad(X_star, self.inst.val_indices, self.inst.val_labels)
        # (I - d1_phi)^T u = G1 with I - d1_phi = eta * H.
        U = np.linalg.solve(self.eta * H, G1)
        return self.vjp2(X_star.ravel(), x, U.ravel())

    def exact_value(self, x):
        _, X_star = self._direct_solve(x)
        return ssl_upper_loss(X_star, self.inst.val_indices, self.inst.val_labels)


def ssl_fixed_point_problem(instance, power_seed=0, estimate_bound=True):
    core = _SSLBilevel(instance, power_seed=power_seed)
    problem = FixedPointProblem(
        inner_dim=core.N * core.C,
        outer_domain=core.domain,
        phi=core.phi,
        phi_vjp1=core.vjp1,
        phi_vjp2=core.vjp2,
        phi_jvp1=core.vjp1,
        phi_jvp2=core.jvp2,
        grad1_E=core.grad1_E,
        grad2_E=core.grad2_E,
        value_E=core.value_E,
        q=core.q,
        exact_hypergradient=core.exact_hypergradient,
    )
    if estimate_bound:
        from ..hypergrad import estimate_uniform_bound

        problem.M = estimate_uniform_bound(problem, seed=power_seed)
    problem.core = core
    return problem
