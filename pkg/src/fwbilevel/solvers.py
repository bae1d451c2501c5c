"""Inexact Frank-Wolfe solvers: vanilla, away-step, and pairwise with capped swaps.

All three stop on the inexact gap of the previous iteration falling below
tau, record a full per-iteration trace, and (for the active-set variants)
maintain an explicit vertex-weight decomposition of every iterate.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .domains import ExplicitPolytope, away_vertex
from .errors import InvariantViolation, LineSearchFailure, SigmaOutOfRange
from .oracles import LipschitzEstimate, estimate_lipschitz_sampling
from .stepsize import StepsizeConfig, armijo_search, descent_rho, exact_stepsize

WEIGHT_DROP_TOL = 1e-12
WEIGHT_SUM_TOL = 1e-12
RECONSTRUCTION_TOL = 1e-8
MAX_L_DOUBLINGS = 30


@dataclass
class Iterate:
    """Feasible point with an optional convex decomposition over vertices."""

    x: np.ndarray
    weights: dict | None = None

    @classmethod
    def from_vertex(cls, domain, vid):
        return cls(domain.vertex(vid), {vid: 1.0})

    @classmethod
    def from_point(cls, x, weights=None):
        return cls(np.asarray(x, dtype=float).copy(), weights)

    @property
    def support_size(self):
        return len(self.weights) if self.weights is not None else 0


@dataclass
class SolverConfig:
    tau: float
    sigma: float = 0.0
    max_iters: int | None = None
    swap_cap: int = 1
    stepsize: StepsizeConfig = field(default_factory=StepsizeConfig)
    lipschitz: object = "auto-sample"  # float | LipschitzEstimate | "auto-sample"
    lipschitz_seed: int = 0
    fstar: float | None = None
    fstar_certified: bool = False

    def __post_init__(self):
        if self.tau <= 0:
            raise ValueError("tau must be positive")
        if not (0.0 <= self.sigma < 1.0 / 3.0):
            raise SigmaOutOfRange("sigma must lie in [0, 1/3)")
        if self.swap_cap < 1:
            raise ValueError("swap_cap must be >= 1")


@dataclass
class TraceRecord:
    iter: int
    step_type: str  # FW | Away | Drop | Swap | Pairwise
    g_tilde: float
    g_tilde_h: float
    g_exact: float | None
    eta: float
    eta_max: float
    f_value: float
    support_size: int
    inner_iters: int
    consecutive_swaps: int


@dataclass
class SolverReport:
    final_iterate: Iterate
    n_iters: int
    trace: list
    termination: str  # GapBelowTau | MaxIters
    theoretical_bound: int | None
    bound_certified: bool
    best_gap: float | None

    def to_dict(self):
        return {
            "n_iters": self.n_iters,
            "termination": self.termination,
            "theoretical_bound": self.theoretical_bound,
            "bound_certified": self.bound_certified,
            "best_gap": self.best_gap,
            "final_f": self.trace[-1].f_value if self.trace else None,
            "final_support_size": self.final_iterate.support_size,
        }


def theoretical_iteration_bound(variant, f0_minus_fstar, L, delta, sigma, tau, rho, R=1):
    """Worst-case iteration count before the stopping rule must fire."""
    if not (0.0 <= sigma < 1.0 / 3.0):
        raise SigmaOutOfRange("sigma must lie in [0, 1/3)")
    if min(L, delta, tau, rho) <= 0:
        raise ValueError("L, delta, tau, rho must be positive")
    if f0_minus_fstar <= 0:
        return 0
    alpha1 = (delta**2 * L * f0_minus_fstar * (1 + sigma) ** 2) / (
        tau**2 * rho * (1 - sigma) ** 2
    )
    alpha2 = 2 * f0_minus_fstar * (1 + sigma) / (tau * (1 - 3 * sigma))
    m = max(alpha1, alpha2)
    if variant == "fw":
        return max(int(math.ceil(m)) - 1, 0)
    if variant == "asfw":
        return max(int(math.ceil(2 * m)) - 1, 0)
    if variant == "pwfw":
        if R < 1:
            raise ValueError("R must be >= 1")
        return max(int(math.ceil(2 * (R + 1) * m)) - 1, 0)
    raise ValueError(f"unknown variant {variant!r}")


# -- shared machinery ---------------------------------------------------------


def _resolve_lipschitz(oracle, domain, cfg):
    lip = cfg.lipschitz
    if isinstance(lip, LipschitzEstimate):
        return lip.value
    if isinstance(lip, (int, float)):
        return float(lip)
    if lip == "auto-sample":
        est = estimate_lipschitz_sampling(oracle, domain, 10, cfg.lipschitz_seed)
        return est.value
    raise ValueError(f"unsupported lipschitz spec {lip!r}")


def _take_step(oracle, x, d, g_tilde, L, eta_max, sscfg, rho, f_old):
    """Stepsize meeting the reference condition; Armijo doubles L on failure.

    The exact rule takes eta = eta_bar directly: the decrease condition is
    guaranteed for it on smooth objectives with L not underestimated, and
    verifying it would cost one objective evaluation per iteration.
    """
    if sscfg.rule == "exact":
        return exact_stepsize(g_tilde, d, L, eta_max), L
    probes = {}
    for _ in range(MAX_L_DOUBLINGS + 1):
        try:
            res = armijo_search(
                oracle.value, x, d, g_tilde, L, eta_max, sscfg, rho=rho, f0=f_old,
                probe_cache=probes,
            )
            return res, L
        except LineSearchFailure:
            L *= 2.0
    # No candidate down to the (now microscopic) reference stepsize decreases
    # the objective: the smoothness premise fails here, e.g. at a kink of the
    # model.  Take the conservative reference step anyway, as the exact rule
    # would; any ascent is visible in the f_value trace column.
    return exact_stepsize(g_tilde, d, L, eta_max), L


def _compute_bound(variant, oracle, domain, cfg, f0, rho, R=1):
    fstar = cfg.fstar
    certified = cfg.fstar_certified
    if fstar is None and isinstance(domain, ExplicitPolytope):
        fstar = min(oracle.value(v) for v in domain.vertices)
        certified = False
    if fstar is None:
        return None, False
    L = None
    if isinstance(cfg.lipschitz, LipschitzEstimate):
        L = cfg.lipschitz.value
    elif isinstance(cfg.lipschitz, (int, float)):
        L = float(cfg.lipschitz)
    if L is None:
        return None, False
    bound = theoretical_iteration_bound(
        variant, f0 - fstar, L, domain.diameter, cfg.sigma, cfg.tau, rho, R
    )
    return bound, certified


def _resolve_max_iters(cfg, bound):
    if cfg.max_iters is not None:
        return cfg.max_iters
    if bound is not None and bound > 0:
        return 10 * bound
    return 100_000


def _maybe_exact_gap(oracle, domain, x):
    if not oracle.has_exact_channel:
        return None
    g = oracle.exact_gradient(x)
    v, _ = domain.lmo(g)
    return max(float(-np.dot(g, v - x)), 0.0)


def _finalize_weights(weights):
    for vid in [k for k, w in weights.items() if w <= WEIGHT_DROP_TOL]:
        del weights[vid]
    total = sum(weights.values())
    if not weights or total <= 0:
        raise InvariantViolation("weight decomposition collapsed to the empty set")
    if abs(total - 1.0) > WEIGHT_SUM_TOL:
        for vid in weights:
            weights[vid] /= total


def _check_reconstruction(x, weights, vertex_cache):
    rec = np.zeros_like(x)
    for vid, w in weights.items():
        rec += w * vertex_cache[vid]
    err = float(np.linalg.norm(rec - x))
    if err > RECONSTRUCTION_TOL:
        raise InvariantViolation(f"weight reconstruction drifted to {err:.3e}")


def _best_gap(trace):
    gaps = [r.g_exact for r in trace if r.g_exact is not None]
    return min(gaps) if gaps else None


def _require_feasible(domain, x):
    if not domain.membership(x, RECONSTRUCTION_TOL):
        raise InvariantViolation("iterate left the feasible set")


# -- Algorithm 1: vanilla inexact FW ------------------------------------------


def run_fw(oracle, domain, x0, cfg, callback=None):
    """Vanilla Frank-Wolfe with inexact gradients.

    Stops once the inexact gap -grad_tilde^T d falls to tau or below;
    eta_max is always 1.  The vertex-weight decomposition is maintained only
    when the initial iterate carries one.
    """
    it = x0 if isinstance(x0, Iterate) else Iterate.from_point(x0)
    x = it.x.copy()
    _require_feasible(domain, x)
    weights = dict(it.weights) if it.weights is not None else None
    vertex_cache = {vid: domain.vertex(vid) for vid in weights} if weights else {}

    L = _resolve_lipschitz(oracle, domain, cfg)
    rho = cfg.stepsize.resolved_rho(cfg.sigma)
    bound, certified, max_iters = None, False, None

    trace = []
    termination = "MaxIters"
    n = 0
    while True:
        grad, f_curr = oracle.grad_and_value(x)
        inner = oracle.last_inner_iters
        if n == 0:
            bound, certified = _compute_bound("fw", oracle, domain, cfg, f_curr, rho)
            max_iters = _resolve_max_iters(cfg, bound)
        v, vid = domain.lmo(grad)
        d = v - x
        g_tilde = float(-np.dot(grad, d))
        g_exact = _maybe_exact_gap(oracle, domain, x)
        support = len(weights) if weights is not None else 0

        if g_tilde <= cfg.tau:
            trace.append(
                TraceRecord(n, "FW", g_tilde, g_tilde, g_exact, 0.0, 1.0, f_curr, support, inner, 0)
            )
            termination = "GapBelowTau"
            break
        if n >= max_iters:
            break

        res, L = _take_step(oracle, x, d, g_tilde, L, 1.0, cfg.stepsize, rho, f_curr)
        x = x + res.eta * d
        if weights is not None:
            if res.eta == 1.0:
                weights = {vid: 1.0}
            else:
                for k in weights:
                    weights[k] *= 1.0 - res.eta
                weights[vid] = weights.get(vid, 0.0) + res.eta
            vertex_cache.setdefault(vid, v.copy())
            _finalize_weights(weights)
            _check_reconstruction(x, weights, vertex_cache)
        _require_feasible(domain, x)
        trace.append(
            TraceRecord(n, "FW", g_tilde, g_tilde, g_exact, res.eta, 1.0, f_curr, support, inner, 0)
        )
        if callback is not None:
            callback(n, Iterate(x.copy(), dict(weights) if weights else None), trace[-1])
        n += 1

    final = Iterate(x, weights)
    return SolverReport(final, n, trace, termination, bound, certified, _best_gap(trace))


# -- Algorithm 2: away-step FW -------------------------------------------------


def run_asfw(oracle, domain, x0, cfg, callback=None):
    """Away-step Frank-Wolfe with explicit weight bookkeeping.

    The initial iterate must be a single vertex.  Stops on the inexact FW
    gap -grad_tilde^T h falling to tau or below.
    """
    it = x0
    if it.weights is None or len(it.weights) != 1 or abs(sum(it.weights.values()) - 1.0) > 1e-12:
        raise ValueError("away-step FW must start from a single vertex (weight 1)")
    x = it.x.copy()
    _require_feasible(domain, x)
    weights = dict(it.weights)
    vertex_cache = {vid: domain.vertex(vid) for vid in weights}

    L = _resolve_lipschitz(oracle, domain, cfg)
    rho = cfg.stepsize.resolved_rho(cfg.sigma)
    bound, certified, max_iters = None, False, None

    trace = []
    termination = "MaxIters"
    n = 0
    while True:
        grad, f_curr = oracle.grad_and_value(x)
        inner = oracle.last_inner_iters
        if n == 0:
            bound, certified = _compute_bound("asfw", oracle, domain, cfg, f_curr, rho)
            max_iters = _resolve_max_iters(cfg, bound)
        v_fw, id_fw = domain.lmo(grad)
        h = v_fw - x
        g_h = float(-np.dot(grad, h))
        g_exact = _maybe_exact_gap(oracle, domain, x)

        if g_h <= cfg.tau:
            trace.append(
                TraceRecord(n, "FW", g_h, g_h, g_exact, 0.0, 1.0, f_curr, len(weights), inner, 0)
            )
            termination = "GapBelowTau"
            break
        if n >= max_iters:
            break

        v_aw, id_aw = away_vertex(domain, grad, weights)
        b = x - v_aw
        g_b = float(-np.dot(grad, b))

        if g_h >= g_b:
            d, eta_max, is_away = h, 1.0, False
            g_tilde = g_h
        else:
            w_aw = weights[id_aw]
            d, eta_max, is_away = b, w_aw / (1.0 - w_aw), True
            g_tilde = g_b

        res, L = _take_step(oracle, x, d, g_tilde, L, eta_max, cfg.stepsize, rho, f_curr)
        x = x + res.eta * d

        if not is_away:
            step_type = "FW"
            if res.eta == 1.0:
                weights = {id_fw: 1.0}
            else:
                for k in weights:
                    weights[k] *= 1.0 - res.eta
                weights[id_fw] = weights.get(id_fw, 0.0) + res.eta
            vertex_cache.setdefault(id_fw, v_fw.copy())
        else:
            drop = res.eta == eta_max
            step_type = "Drop" if drop else "Away"
            for k in weights:
                weights[k] *= 1.0 + res.eta
            if drop:
                del weights[id_aw]
            else:
                weights[id_aw] -= res.eta

        _finalize_weights(weights)
        _check_reconstruction(x, weights, vertex_cache)
        _require_feasible(domain, x)
        trace.append(
            TraceRecord(
                n, step_type, g_tilde, g_h, g_exact, res.eta, eta_max, f_curr,
                len(weights), inner, 0,
            )
        )
        if callback is not None:
            callback(n, Iterate(x.copy(), dict(weights)), trace[-1])
        n += 1

    final = Iterate(x, weights)
    return SolverReport(final, n, trace, termination, bound, certified, _best_gap(trace))


# -- Algorithm 3: pairwise FW with capped swaps --------------------------------


def run_pwfw(oracle, domain, x0, cfg, callback=None):
    """Pairwise Frank-Wolfe; after swap_cap swaps since the last away-branch
    execution, one away-step-FW iteration runs instead and the counter resets.

    Stops on the inexact pairwise gap -grad_tilde^T (a_i - a_j) falling to
    tau or below.
    """
    it = x0
    if it.weights is None or len(it.weights) != 1 or abs(sum(it.weights.values()) - 1.0) > 1e-12:
        raise ValueError("pairwise FW must start from a single vertex (weight 1)")
    x = it.x.copy()
    _require_feasible(domain, x)
    weights = dict(it.weights)
    vertex_cache = {vid: domain.vertex(vid) for vid in weights}
    R = cfg.swap_cap

    L = _resolve_lipschitz(oracle, domain, cfg)
    # A pairwise direction joins two vertices, so the gradient-error contract
    # only bounds its inexactness by twice the budget; away-branch iterations
    # only guarantee a gap above tau/2.  Both weaken the certifiable decrease
    # constant to (1-3*sigma)/(2*(1+sigma)).
    rho = min(
        cfg.stepsize.resolved_rho(cfg.sigma),
        (1.0 - 3.0 * cfg.sigma) / (2.0 * (1.0 + cfg.sigma)),
    )
    bound, certified, max_iters = None, False, None

    trace = []
    termination = "MaxIters"
    r = 0
    n = 0
    while True:
        grad, f_curr = oracle.grad_and_value(x)
        inner = oracle.last_inner_iters
        if n == 0:
            bound, certified = _compute_bound("pwfw", oracle, domain, cfg, f_curr, rho, R)
            max_iters = _resolve_max_iters(cfg, bound)
        v_fw, id_fw = domain.lmo(grad)
        v_aw, id_aw = away_vertex(domain, grad, weights)
        d = v_fw - v_aw
        h = v_fw - x
        g_h = float(-np.dot(grad, h))
        g_tilde = float(-np.dot(grad, d))
        g_exact = _maybe_exact_gap(oracle, domain, x)

        if g_tilde <= cfg.tau:
            trace.append(
                TraceRecord(
                    n, "Pairwise", g_tilde, g_h, g_exact, 0.0, weights[id_aw], f_curr,
                    len(weights), inner, r,
                )
            )
            termination = "GapBelowTau"
            break
        if n >= max_iters:
            break

        eta_max = weights[id_aw]
        res, L = _take_step(oracle, x, d, g_tilde, L, eta_max, cfg.stepsize, rho, f_curr)
        if res.eta == eta_max and id_fw not in weights:
            r += 1

        if r <= R:
            hit_max = res.eta == eta_max
            if hit_max:
                step_type = "Drop" if id_fw in weights else "Swap"
            else:
                step_type = "Pairwise"
            x = x + res.eta * d
            weights[id_fw] = weights.get(id_fw, 0.0) + res.eta
            if hit_max:
                del weights[id_aw]
            else:
                weights[id_aw] -= res.eta
            vertex_cache.setdefault(id_fw, v_fw.copy())
            rec_g_tilde, rec_eta_max, rec_res = g_tilde, eta_max, res
        else:
            # Away-step FW iteration instead of the over-budget swap.
            b = x - v_aw
            g_b = float(-np.dot(grad, b))
            if g_h >= g_b:
                d2, eta_max2, is_away = h, 1.0, False
                g2 = g_h
            else:
                w_aw = weights[id_aw]
                d2, eta_max2, is_away = b, w_aw / (1.0 - w_aw), True
                g2 = g_b
            res2, L = _take_step(oracle, x, d2, g2, L, eta_max2, cfg.stepsize, rho, f_curr)
            x = x + res2.eta * d2
            if not is_away:
                step_type = "FW"
                if res2.eta == 1.0:
                    weights = {id_fw: 1.0}
                else:
                    for k in weights:
                        weights[k] *= 1.0 - res2.eta
                    weights[id_fw] = weights.get(id_fw, 0.0) + res2.eta
                vertex_cache.setdefault(id_fw, v_fw.copy())
            else:
                drop = res2.eta == eta_max2
                step_type = "Drop" if drop else "Away"
                for k in weights:
                    weights[k] *= 1.0 + res2.eta
                if drop:
                    del weights[id_aw]
                else:
                    weights[id_aw] -= res2.eta
            r = 0
            rec_g_tilde, rec_eta_max, rec_res = g2, eta_max2, res2

        _finalize_weights(weights)
        _check_reconstruction(x, weights, vertex_cache)
        _require_feasible(domain, x)
        trace.append(
            TraceRecord(
                n, step_type, rec_g_tilde, g_h, g_exact, rec_res.eta, rec_eta_max,
                f_curr, len(weights), inner, r,
            )
        )
        if callback is not None:
            callback(n, Iterate(x.copy(), dict(weights)), trace[-1])
        n += 1

    final = Iterate(x, weights)
    return SolverReport(final, n, trace, termination, bound, certified, _best_gap(trace))


# -- trace / report serialization ---------------------------------------------

TRACE_HEADER = [
    "iter",
    "step_type",
    "g_tilde",
    "g_tilde_h",
    "g_exact",
    "eta",
    "eta_max",
    "f_value",
    "support_size",
    "inner_iters",
    "consecutive_swaps",
]


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_trace_csv(trace, path):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(TRACE_HEADER)
        for rec in trace:
            writer.writerow(
                [
                    rec.iter,
                    rec.step_type,
                    _fmt(rec.g_tilde),
                    _fmt(rec.g_tilde_h),
                    _fmt(rec.g_exact),
                    _fmt(rec.eta),
                    _fmt(rec.eta_max),
                    _fmt(rec.f_value),
                    rec.support_size,
                    rec.inner_iters,
                    rec.consecutive_swaps,
                ]
            )


def write_report_json(report, path, extra=None):
    payload = report.to_dict()
    if extra:
        payload.update(extra)
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")
