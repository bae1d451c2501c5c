"""Bilevel hypergradient estimators over a contractive fixed-point map.

ITD runs t fixed-point iterations from w_0 and differentiates the truncated
recursion exactly by reverse accumulation through user-supplied
vector-Jacobian products.  AID runs the same inner solve and then k
fixed-point iterations on the adjoint linear system.  The required-iteration
calculators turn a target inexactness contract (sigma, tau) into t (and k).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import DivergenceDetected, InvariantViolation, ParameterOutOfRange
from .oracles import ErrorContract, GradientOracle

DIVERGENCE_NORM = 1e12


@dataclass
class FixedPointProblem:
    """Lower-level map w = phi(w, x) with upper loss E(w, x).

    Jacobian actions are the minimal differentiation contract: vjp1/vjp2 are
    required by the estimators; jvp1/jvp2 are optional and used only for
    finite-difference consistency checks.  q is the uniform contraction
    factor of phi in w, M a uniform bound on the error constants.
    """

    inner_dim: int
    outer_domain: object
    phi: callable
    phi_vjp1: callable
    phi_vjp2: callable
    grad1_E: callable
    grad2_E: callable
    value_E: callable
    q: float
    M: float = 1.0
    phi_jvp1: callable = None
    phi_jvp2: callable = None
    w0: np.ndarray = None
    exact_hypergradient: callable = None

    def __post_init__(self):
        if not (0 < self.q < 1):
            raise ParameterOutOfRange("contraction factor q must lie in (0, 1)")
        if self.M <= 0:
            raise ParameterOutOfRange("M must be positive")

    def initial_state(self):
        if self.w0 is not None:
            return np.array(self.w0, dtype=float)
        return np.zeros(self.inner_dim)


def validate_problem(problem, n_pairs=20, seed=0, contraction_slack=1e-9, fd_rel_tol=1e-5):
    """Spot-check the contraction factor and Jacobian actions.

    Raises InvariantViolation on failure.  Jacobian checks use central finite
    differences of phi along random directions and run only for the actions
    the problem supplies.
    """
    rng = np.random.default_rng(seed)
    n = problem.inner_dim
    for _ in range(n_pairs):
        x = problem.outer_domain.sample(rng)
        w1 = rng.standard_normal(n)
        w2 = rng.standard_normal(n)
        lhs = np.linalg.norm(problem.phi(w1, x) - problem.phi(w2, x))
        rhs = problem.q * np.linalg.norm(w1 - w2)
        if lhs > rhs * (1 + contraction_slack) + 1e-12:
            raise InvariantViolation(
                f"contraction check failed: {lhs:.6e} > q * {rhs / problem.q:.6e}"
            )
    if problem.phi_jvp1 is None and problem.phi_jvp2 is None:
        return
    for _ in range(5):
        x = problem.outer_domain.sample(rng)
        w = rng.standard_normal(n)
        phi_scale = max(1.0, float(np.linalg.norm(problem.phi(w, x))))
        if problem.phi_jvp1 is not None:
            v = rng.standard_normal(n)
            h = 1e-6 / max(1.0, np.linalg.norm(v))
            fd = (problem.phi(w + h * v, x) - problem.phi(w - h * v, x)) / (2 * h)
            an = problem.phi_jvp1(w, x, v)
            denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-8)
            # Cancellation noise of the central difference scales with
            # ||phi|| / h and can dwarf a tiny Jacobian action.
            slack = fd_rel_tol * denom + 1e-12 * phi_scale / h
            if np.linalg.norm(fd - an) > slack:
                raise InvariantViolation("jvp1 disagrees with finite differences")
        if problem.phi_jvp2 is not None:
            v = rng.standard_normal(x.shape[0])
            h = 1e-6 / max(1.0, np.linalg.norm(v))
            fd = (problem.phi(w, x + h * v) - problem.phi(w, x - h * v)) / (2 * h)
            an = problem.phi_jvp2(w, x, v)
            denom = max(np.linalg.norm(fd), np.linalg.norm(an), 1e-8)
            slack = fd_rel_tol * denom + 1e-12 * phi_scale / h
            if np.linalg.norm(fd - an) > slack:
                raise InvariantViolation("jvp2 disagrees with finite differences")


def solve_inner(problem, x, t):
    """Run t fixed-point iterations; returns (trajectory w_0..w_{t-1}, w_t)."""
    if t < 1:
        raise ValueError("t must be >= 1")
    w = problem.initial_state()
    trajectory = []
    for i in range(t):
        trajectory.append(w)
        w = np.asarray(problem.phi(w, x), dtype=float)
        if (i & 15) == 0 and float(np.max(np.abs(w), initial=0.0)) > DIVERGENCE_NORM:
            raise DivergenceDetected("inner iterates diverged; map is not a contraction")
    if float(np.max(np.abs(w), initial=0.0)) > DIVERGENCE_NORM:
        raise DivergenceDetected("inner iterates diverged; map is not a contraction")
    return trajectory, w


def _itd_backward(problem, x, trajectory, w_t):
    alpha = np.asarray(problem.grad1_E(w_t, x), dtype=float)
    g = np.asarray(problem.grad2_E(w_t, x), dtype=float).copy()
    for w_prev in reversed(trajectory):
        g = g + np.asarray(problem.phi_vjp2(w_prev, x, alpha), dtype=float)
        alpha = np.asarray(problem.phi_vjp1(w_prev, x, alpha), dtype=float)
    return g


def itd_hypergradient(problem, x, t):
    """Exact gradient of the truncated objective E(w_t(x), x).

    Reverse accumulation through the recursion, equivalent to automatic
    differentiation of the unrolled inner solve.
    """
    trajectory, w_t = solve_inner(problem, x, t)
    return _itd_backward(problem, x, trajectory, w_t)


def _aid_adjoint(problem, x, w_t, k):
    b = np.asarray(problem.grad1_E(w_t, x), dtype=float)
    u = np.zeros_like(b)
    for _ in range(k):
        u = np.asarray(problem.phi_vjp1(w_t, x, u), dtype=float) + b
    g2 = np.asarray(problem.grad2_E(w_t, x), dtype=float)
    return g2 + np.asarray(problem.phi_vjp2(w_t, x, u), dtype=float)


def aid_hypergradient(problem, x, t, k):
    """Implicit estimate: t-step inner solve + k-step adjoint fixed point."""
    if k < 1:
        raise ValueError("k must be >= 1")
    _, w_t = solve_inner(problem, x, t)
    return _aid_adjoint(problem, x, w_t, k)


def _check_count_params(sigma, tau, delta, M, q):
    if not (0 < sigma < 1.0 / 3.0):
        raise ParameterOutOfRange("sigma must lie in (0, 1/3) for iteration counts")
    if not (0 < q < 1):
        raise ParameterOutOfRange("q must lie in (0, 1)")
    if tau <= 0 or delta <= 0 or M <= 0:
        raise ParameterOutOfRange("tau, delta, M must be positive")


def itd_required_iters(sigma, tau, delta, M, q, epsilon=0.5):
    """Smallest t certifying M (2 q^t + t q^(t-1)) delta <= sigma tau / (1+sigma)."""
    _check_count_params(sigma, tau, delta, M, q)
    if not (0 < epsilon < 1):
        raise ParameterOutOfRange("epsilon must lie in (0, 1)")
    log_inv_q = math.log(1.0 / q)
    target = (sigma * tau / ((1.0 + sigma) * delta * M)) * (
        epsilon * q * log_inv_q / (1.0 + 2.0 * epsilon * q * log_inv_q)
    )
    t = math.ceil(math.log(target) / math.log(q) / (1.0 - epsilon))
    return max(int(t), 1)


def aid_required_iters(sigma, tau, delta, M, q):
    """Smallest t = k certifying ((M + M/(1-q)) q^t + M q^k) delta <= sigma tau / (1+sigma)."""
    _check_count_params(sigma, tau, delta, M, q)
    target = (sigma * tau / ((1.0 + sigma) * delta * M)) * ((1.0 - q) / (3.0 - 2.0 * q))
    t = math.ceil(math.log(target) / math.log(q))
    return max(int(t), 1)


@dataclass
class HypergradConfig:
    method: str = "aid"  # "itd" | "aid"
    t: int = 100
    k: int | None = None  # defaults to t
    epsilon: float = 0.5
    auto_iters: bool = False

    def __post_init__(self):
        if self.method not in ("itd", "aid"):
            raise ValueError(f"unknown hypergradient method {self.method!r}")
        if not (0 < self.epsilon < 1):
            raise ParameterOutOfRange("epsilon must lie in (0, 1) strictly")
        if self.t < 1:
            raise ValueError("t must be >= 1")

    @property
    def resolved_k(self):
        return self.t if self.k is None else self.k


class HypergradientOracle(GradientOracle):
    """Gradient oracle backed by an ITD or AID estimator.

    In auto mode the inner iteration counts are derived from the contract via
    the required-iteration calculators, certifying the inexactness assumption;
    with fixed counts no certificate is claimed.
    """

    def __init__(self, problem, cfg, contract=None):
        super().__init__(problem.outer_domain)
        self.problem = problem
        self.contract = contract
        if cfg.auto_iters:
            if contract is None:
                raise ParameterOutOfRange("auto_iters needs an error contract")
            if contract.sigma == 0:
                raise ParameterOutOfRange(
                    "auto_iters needs sigma > 0 to bound the inner iterations"
                )
            delta = problem.outer_domain.diameter
            if cfg.method == "itd":
                t = itd_required_iters(
                    contract.sigma, contract.tau, delta, problem.M, problem.q, cfg.epsilon
                )
                k = 0
            else:
                t = aid_required_iters(
                    contract.sigma, contract.tau, delta, problem.M, problem.q
                )
                k = t
        else:
            t = cfg.t
            k = cfg.resolved_k if cfg.method == "aid" else 0
        self.method = cfg.method
        self.t = t
        self.k = k

    def evaluate_gradient(self, x):
        self._check_feasible(x)
        self.eval_count += 1
        if self.method == "itd":
            g = itd_hypergradient(self.problem, x, self.t)
            self.last_inner_iters = self.t
        else:
            g = aid_hypergradient(self.problem, x, self.t, self.k)
            self.last_inner_iters = self.t + self.k
        return g

    def grad_and_value(self, x):
        # One inner solve serves both the estimate and the objective value.
        self._check_feasible(x)
        self.eval_count += 1
        trajectory, w_t = solve_inner(self.problem, x, self.t)
        if self.method == "itd":
            g = _itd_backward(self.problem, x, trajectory, w_t)
            self.last_inner_iters = self.t
        else:
            g = _aid_adjoint(self.problem, x, w_t, self.k)
            self.last_inner_iters = self.t + self.k
        return g, float(self.problem.value_E(w_t, x))

    def value(self, x):
        _, w_t = solve_inner(self.problem, x, self.t)
        return float(self.problem.value_E(w_t, x))

    @property
    def has_exact_channel(self):
        return self.problem.exact_hypergradient is not None

    def exact_gradient(self, x):
        if self.problem.exact_hypergradient is None:
            from .errors import NoExactChannel

            raise NoExactChannel("problem provides no analytic hypergradient")
        return np.asarray(self.problem.exact_hypergradient(x), dtype=float)


def make_hypergradient_oracle(problem, cfg, contract=None):
    return HypergradientOracle(problem, cfg, contract)


def estimate_uniform_bound(problem, n_samples=50, seed=0, safety=2.0):
    """Sampled proxy for the uniform constant bounding the error terms.

    Takes the largest magnitude among the partial gradients of E and random
    probes of the Jacobian actions over feasible (w, x) pairs, then applies a
    safety factor.  Heuristic by nature: it only feeds the inner-iteration
    calculators, which depend on it logarithmically.
    """
    rng = np.random.default_rng(seed)
    best = 0.0
    for _ in range(n_samples):
        x = problem.outer_domain.sample(rng)
        w = rng.standard_normal(problem.inner_dim)
        u = rng.standard_normal(problem.inner_dim)
        u /= max(np.linalg.norm(u), 1e-12)
        best = max(
            best,
            float(np.linalg.norm(problem.grad1_E(w, x))),
            float(np.linalg.norm(problem.grad2_E(w, x))),
            float(np.linalg.norm(problem.phi_vjp1(w, x, u))),
            float(np.linalg.norm(problem.phi_vjp2(w, x, u))),
        )
    return max(safety * best, 1e-8)
