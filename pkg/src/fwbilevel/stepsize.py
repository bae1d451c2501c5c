"""Stepsize rules: the exact closed-form rule and Armijo backtracking.

Both rules return a stepsize eta that satisfies

    eta >= eta_bar = min(eta_max, g_tilde / (L ||d||^2))          (reference)
    f(x) - f(x + eta d) >= rho * eta_bar * g_tilde                (decrease)

provided L is not an underestimate; callers recover from underestimates by
doubling L and retrying.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import LineSearchFailure, NonPositiveGap, ZeroDirection


def descent_rho(sigma):
    """Decrease constant guaranteed by the exact rule under inexactness sigma."""
    return (1.0 - sigma) / (2.0 * (1.0 + sigma))


@dataclass
class StepsizeConfig:
    rule: str = "exact"  # "exact" | "armijo"
    rho: float | None = None  # default: descent_rho(sigma) for exact, 1e-4 for armijo
    armijo_shrink: float = 0.5
    armijo_init: float = 1.0
    max_backtracks: int = 50

    def __post_init__(self):
        if self.rule not in ("exact", "armijo"):
            raise ValueError(f"unknown stepsize rule {self.rule!r}")
        if self.rho is not None and not (0 < self.rho < 1):
            raise ValueError("rho must lie in (0, 1)")
        if not (0 < self.armijo_shrink < 1):
            raise ValueError("armijo_shrink must lie in (0, 1)")
        if not (0 < self.armijo_init <= 1):
            raise ValueError("armijo_init must lie in (0, 1]")

    def resolved_rho(self, sigma=0.0):
        if self.rho is not None:
            return self.rho
        return descent_rho(sigma) if self.rule == "exact" else 1e-4

    @classmethod
    def from_config(cls, cfg):
        return cls(
            rule=cfg.get("rule", "exact"),
            rho=cfg.get("rho"),
            armijo_shrink=cfg.get("shrink", 0.5),
            armijo_init=cfg.get("init", 1.0),
            max_backtracks=cfg.get("max_backtracks", 50),
        )


@dataclass
class StepResult:
    eta: float
    eta_bar: float
    f_new: float | None = None
    backtracks: int = 0


def reference_stepsize(g_tilde, d, L, eta_max):
    if g_tilde <= 0:
        raise NonPositiveGap("stepsize requested with nonpositive gap")
    d_sq = float(np.dot(d, d))
    if d_sq <= 0:
        raise ZeroDirection("stepsize requested with zero direction")
    if L <= 0:
        raise ValueError("L must be positive")
    return min(eta_max, g_tilde / (L * d_sq))


def exact_stepsize(g_tilde, d, L, eta_max=1.0):
    """eta = eta_bar = min(eta_max, g_tilde / (L ||d||^2)); f_new filled by caller."""
    eta = reference_stepsize(g_tilde, d, L, eta_max)
    return StepResult(eta=eta, eta_bar=eta)


def armijo_search(f, x, d, g_tilde, L_est, eta_max, cfg, rho=None, f0=None, probe_cache=None):
    """Backtrack from eta_max until the decrease condition holds.

    Candidates never drop below the reference stepsize eta_bar; if even
    eta_bar fails the decrease test, L_est was too small and
    LineSearchFailure is raised so the caller can double it.  A caller
    retrying with doubled L can pass `probe_cache` so already-probed
    candidates are not re-evaluated.
    """
    if rho is None:
        rho = cfg.resolved_rho()
    eta_bar = reference_stepsize(g_tilde, d, L_est, eta_max)
    if f0 is None:
        f0 = float(f(x))
    required = rho * eta_bar * g_tilde
    slack = 1e-12 * max(1.0, abs(f0))

    def probe(eta_try):
        if probe_cache is not None and eta_try in probe_cache:
            return probe_cache[eta_try]
        val = float(f(x + eta_try * d))
        if probe_cache is not None:
            probe_cache[eta_try] = val
        return val

    eta = cfg.armijo_init * eta_max
    backtracks = 0
    while backtracks <= cfg.max_backtracks:
        eta_try = max(eta, eta_bar)
        f_new = probe(eta_try)
        if f0 - f_new >= required - slack:
            return StepResult(eta=eta_try, eta_bar=eta_bar, f_new=f_new, backtracks=backtracks)
        if eta_try <= eta_bar:
            break
        eta *= cfg.armijo_shrink
        backtracks += 1
    raise LineSearchFailure(
        "no admissible stepsize found; Lipschitz estimate is likely too small"
    )
