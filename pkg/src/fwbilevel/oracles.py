"""Gradient oracles: exact, synthetically perturbed, and bilevel estimators.

A perturbed oracle adds a perturbation e with ||e|| = bound / diameter, so
that |e^T (x - xbar)| <= bound for every feasible pair by Cauchy-Schwarz;
this realizes the certified inexactness contract regardless of where the
solver evaluates it.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateSamples,
    InfeasiblePoint,
    NoExactChannel,
    SigmaOutOfRange,
)

FEASIBILITY_TOL = 1e-8


@dataclass(frozen=True)
class ErrorContract:
    """Certified inexactness budget: |(grad - grad_tilde)^T (x - xbar)| <= bound."""

    sigma: float
    tau: float

    def __post_init__(self):
        if not (0.0 <= self.sigma < 1.0 / 3.0):
            raise SigmaOutOfRange("sigma must lie in [0, 1/3)")
        if self.tau <= 0:
            raise ValueError("tau must be positive")

    @property
    def bound(self):
        return self.sigma * self.tau / (1.0 + self.sigma)


@dataclass
class LipschitzEstimate:
    value: float
    samples: int = 0
    method: str = "UserSupplied"  # Sampling | PowerIteration | UserSupplied

    def __post_init__(self):
        if self.value <= 0:
            raise ValueError("Lipschitz estimate must be positive")


class GradientOracle:
    """Base oracle: counts evaluations, optionally exposes an exact channel."""

    def __init__(self, domain=None):
        self.domain = domain
        self.eval_count = 0
        self.last_inner_iters = 0  # hypergradient oracles fill this in

    def _check_feasible(self, x):
        if self.domain is not None and not self.domain.membership(x, FEASIBILITY_TOL):
            raise InfeasiblePoint(f"point is infeasible at tol {FEASIBILITY_TOL}")

    def evaluate_gradient(self, x):
        raise NotImplementedError

    def value(self, x):
        """Objective value (or its best available estimate) at x."""
        raise NotImplementedError

    def grad_and_value(self, x):
        """Gradient estimate and objective value together; estimators that
        share work between the two override this."""
        return self.evaluate_gradient(x), self.value(x)

    @property
    def has_exact_channel(self):
        return False

    def exact_gradient(self, x):
        raise NoExactChannel("oracle has no exact gradient channel")


class ExactOracle(GradientOracle):
    def __init__(self, f, grad, domain=None):
        super().__init__(domain)
        self._f = f
        self._grad = grad

    def evaluate_gradient(self, x):
        self._check_feasible(x)
        self.eval_count += 1
        return np.asarray(self._grad(x), dtype=float)

    def value(self, x):
        return float(self._f(x))

    @property
    def has_exact_channel(self):
        return True

    def exact_gradient(self, x):
        return np.asarray(self._grad(x), dtype=float)


class PerturbedOracle(GradientOracle):
    """Exact oracle plus a worst-case-scaled perturbation.

    direction="random" draws a uniform direction per evaluation;
    direction="adversarial" opposes the true FW direction at x, which is the
    most disruptive rotation consistent with the contract.
    """

    def __init__(self, inner, contract, domain, seed=0, direction="random", audit=False):
        super().__init__(domain)
        if domain is None:
            raise ValueError("perturbed oracle needs the domain for its diameter")
        self.inner = inner
        self.contract = contract
        self.direction = direction
        self._rng = np.random.default_rng(seed)
        self.audit = audit
        self.audit_rows = []  # (eval index, ||e||, bound, violated)

    def _noise(self, x):
        delta = self.domain.diameter
        if delta <= 0 or self.contract.bound == 0:
            return np.zeros_like(x)
        scale = self.contract.bound / delta
        if self.direction == "adversarial":
            g = self.inner.exact_gradient(x)
            v, _ = self.domain.lmo(g)
            d = v - x
            nrm = np.linalg.norm(d)
            if nrm > 1e-14:
                return -scale * d / nrm
        e = self._rng.standard_normal(x.shape)
        nrm = np.linalg.norm(e)
        if nrm < 1e-14:
            e = np.ones_like(x)
            nrm = np.linalg.norm(e)
        return scale * e / nrm

    def evaluate_gradient(self, x):
        self._check_feasible(x)
        self.eval_count += 1
        e = self._noise(np.asarray(x, dtype=float))
        if self.audit:
            norm_e = float(np.linalg.norm(e))
            bound = self.contract.bound
            violated = norm_e * self.domain.diameter > bound * (1 + 1e-9) + 1e-15
            self.audit_rows.append((self.eval_count, norm_e, bound, violated))
        return self.inner.evaluate_gradient(x) + e

    def value(self, x):
        return self.inner.value(x)

    @property
    def has_exact_channel(self):
        return self.inner.has_exact_channel

    def exact_gradient(self, x):
        return self.inner.exact_gradient(x)

    def write_audit_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["iteration", "noise_norm", "contract_bound", "violated"])
            for row in self.audit_rows:
                w.writerow([row[0], repr(row[1]), repr(row[2]), int(row[3])])


def estimate_lipschitz_sampling(oracle, domain, n_samples=10, seed=0):
    """Max pairwise ratio of gradient differences to point differences.

    Deterministic given the seed.  A zero ratio (constant gradient) is floored
    at 1e-12 so stepsize formulas never divide by zero.
    """
    if n_samples < 2:
        raise ValueError("need at least two sample points")
    rng = np.random.default_rng(seed)
    points = [domain.sample(rng) for _ in range(n_samples)]
    grads = [oracle.evaluate_gradient(p) for p in points]
    best = 0.0
    seen_pair = False
    for i in range(n_samples):
        for j in range(i + 1, n_samples):
            dx = np.linalg.norm(points[i] - points[j])
            if dx < 1e-14:
                continue
            seen_pair = True
            best = max(best, float(np.linalg.norm(grads[i] - grads[j]) / dx))
    if not seen_pair:
        raise DegenerateSamples("all sampled points coincide")
    return LipschitzEstimate(value=max(best, 1e-12), samples=n_samples, method="Sampling")


def exact_gap(oracle, domain, x):
    """True FW gap -grad(x)^T (lmo(grad(x)) - x); nonnegative up to 1e-12."""
    if not oracle.has_exact_channel:
        raise NoExactChannel("exact FW gap needs an exact gradient channel")
    g = oracle.exact_gradient(x)
    v, _ = domain.lmo(g)
    gap = float(-np.dot(g, v - x))
    if gap < -1e-12:
        raise InvariantError(gap)
    return max(gap, 0.0)


class InvariantError(AssertionError):
    def __init__(self, gap):
        super().__init__(f"exact FW gap is negative beyond slack: {gap}")
