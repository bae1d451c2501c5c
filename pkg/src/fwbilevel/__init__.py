"""Projection-free (Frank-Wolfe) solvers for bilevel optimization.

Three conditional-gradient variants with inexact gradients (vanilla,
away-step, pairwise with capped swaps), ITD/AID hypergradient estimators for
contractive lower levels, and a benchmark harness around them.
"""

from . import domains, errors, hypergrad, oracles, problems, solvers, stepsize
from .domains import (
    Box,
    CappedSimplex,
    Domain,
    ExplicitPolytope,
    Interval,
    Product,
    UnitSimplex,
    away_vertex,
    diameter,
    domain_from_config,
    lmo,
    membership,
)
from .hypergrad import (
    FixedPointProblem,
    HypergradConfig,
    aid_hypergradient,
    aid_required_iters,
    itd_hypergradient,
    itd_required_iters,
    make_hypergradient_oracle,
    solve_inner,
    validate_problem,
)
from .oracles import (
    ErrorContract,
    ExactOracle,
    GradientOracle,
    LipschitzEstimate,
    PerturbedOracle,
    estimate_lipschitz_sampling,
    exact_gap,
)
from .solvers import (
    Iterate,
    SolverConfig,
    SolverReport,
    TraceRecord,
    run_asfw,
    run_fw,
    run_pwfw,
    theoretical_iteration_bound,
    write_trace_csv,
)
from .stepsize import StepResult, StepsizeConfig, armijo_search, exact_stepsize

__version__ = "0.1.0"
