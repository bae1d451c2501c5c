"""Analytically solvable quadratic bilevel instance.

Lower level: l(w, x) = (mu/2) ||w - A x||^2, solved by the gradient map
phi(w, x) = w - alpha * grad_w l = (1 - alpha*mu) w + alpha*mu * A x, a
contraction with factor q = |1 - alpha*mu|.  Upper loss E(w, x) =
0.5 ||w - target||^2, so f(x) = 0.5 ||A x - target||^2 has the closed-form
gradient A^T (A x - target); this instance is the ground truth for all
estimator tests.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..domains import UnitSimplex
from ..errors import ParameterOutOfRange, SingularSystem
from ..hypergrad import FixedPointProblem


@dataclass
class ToyQuadraticBilevel:
    A: np.ndarray
    target: np.ndarray
    mu: float = 1.0
    alpha: float = 0.5
    domain: object = None

    def __post_init__(self):
        self.A = np.atleast_2d(np.asarray(self.A, dtype=float))
        self.target = np.asarray(self.target, dtype=float)
        if self.mu <= 0 or self.alpha <= 0:
            raise ParameterOutOfRange("mu and alpha must be positive")
        if not (0 < self.alpha * self.mu < 2):
            raise ParameterOutOfRange("alpha*mu must lie in (0, 2) for contraction")
        if self.target.shape != (self.A.shape[0],):
            raise ValueError("target must have length inner_dim")
        if self.domain is None:
            self.domain = UnitSimplex(self.A.shape[1])

    @property
    def inner_dim(self):
        return self.A.shape[0]

    @property
    def outer_dim(self):
        return self.A.shape[1]

    @property
    def q(self):
        return abs(1.0 - self.alpha * self.mu)

    def lower_solution(self, x):
        return self.A @ x

    def upper_value(self, x):
        r = self.A @ x - self.target
        return 0.5 * float(r @ r)

    def analytic_hypergradient(self, x):
        """Exact grad f via implicit differentiation of the fixed point."""
        w = self.lower_solution(x)
        # (I - d1_phi)^T u = grad1_E, with d1_phi = (1 - alpha*mu) I.
        factor = self.alpha * self.mu
        if abs(factor) < 1e-300:
            raise SingularSystem("lower-level map has a singular linearization")
        u = (w - self.target) / factor
        return factor * (self.A.T @ u)

    def fixed_point_problem(self):
        am = self.alpha * self.mu
        A, c = self.A, self.target

        def phi(w, x):
            return (1.0 - am) * w + am * (A @ x)

        def vjp1(w, x, u):
            return (1.0 - am) * u

        def vjp2(w, x, u):
            return am * (A.T @ u)

        def jvp2(w, x, v):
            return am * (A @ v)

        return FixedPointProblem(
            inner_dim=self.inner_dim,
            outer_domain=self.domain,
            phi=phi,
            phi_vjp1=vjp1,
            phi_vjp2=vjp2,
            phi_jvp1=vjp1,
            phi_jvp2=jvp2,
            grad1_E=lambda w, x: w - c,
            grad2_E=lambda w, x: np.zeros(self.outer_dim),
            value_E=lambda w, x: 0.5 * float(np.sum((w - c) ** 2)),
            q=self.q,
            M=self._uniform_bound(),
            exact_hypergradient=self.analytic_hypergradient,
        )

    def _uniform_bound(self):
        # Crude but valid scale for the error constants on the compact domain.
        op = float(np.linalg.norm(self.A, 2)) if self.A.size else 0.0
        delta = self.domain.diameter
        w_scale = op * (delta + 1.0) + float(np.linalg.norm(self.target)) + 1.0
        return max(w_scale * max(op, 1.0), 1e-6)


def toy_analytic_hypergradient(instance, x):
    return instance.analytic_hypergradient(np.asarray(x, dtype=float))


def default_toy(outer_dim=5, inner_dim=4, q=0.5, seed=0, domain=None):
    """Standard toy used by tests and the CLI: mu=1, alpha=1-q."""
    rng = np.random.default_rng(seed)
    A = rng.standard_normal((inner_dim, outer_dim))
    target = rng.standard_normal(inner_dim)
    return ToyQuadraticBilevel(A=A, target=target, mu=1.0, alpha=1.0 - q, domain=domain)
