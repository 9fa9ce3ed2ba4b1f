"""Desk-scale lattice laboratory for constrained expectations and stopping.

Build a binary tree over a Brownian filtration, solve backward one-step
schemes for nonlinear expectations with a constraint on the z component
(either by penalization ladders or by the direct constrained minimizer),
take Snell envelopes of nonnegative rewards, study threshold stopping rules,
and cross-check everything against brute-force oracles on small trees.
"""

from .backend import JIT_ENABLED, backend_name
from .bsde import (
    BsdeSolution,
    DEFAULT_SETTINGS,
    ResidualReport,
    SolverSettings,
    solve_bsde,
    solve_to_stopping,
    supersolution_residual,
)
from .catalog import (CONSTRAINTS, GENERATORS, CatalogEntry, constraint,
                      generator, homogeneous_pairs, pairs,
                      probe_positive_homogeneity)
from .errors import (
    CapacityError,
    ConfigError,
    DomainError,
    EvalError,
    InfeasibleError,
    ParseError,
    SignatureError,
    SolverError,
    StabilityError,
    StoplabError,
)
from .expr import FunctionSpec, Signature, parse
from .lattice import (
    AdaptedProcess,
    Tree,
    TreeConfig,
    build_tree,
    conditional_expectation,
    realize_reward,
)
from .penalty import (
    ConstrainedSolution,
    LadderReport,
    PenaltySchedule,
    constrained_expectation,
    constrained_expectation_direct,
    constraint_zero_interval,
    direct_one_step,
    expected_violation_integral,
    penalized_generator,
    refinement_ladder,
    zero_feasibility_defect,
)
from .properties import IDENTITY_NAMES, IdentityResult, PropertyReport, property_suite
from .stopping import (
    BruteForceResult,
    DEFAULT_THRESHOLDS,
    GameValueReport,
    MartingaleReport,
    MinimalityReport,
    SnellReport,
    StoppingRule,
    ThresholdLimit,
    brute_force_optimum,
    enumerate_stopping_rules,
    exact_hit_rule,
    minimality_check,
    rule_count,
    rule_value,
    snell_envelope,
    stabilized_threshold_rule,
    stopped_process,
    stopped_value_probe,
    stopper_controller_value,
    supermartingale_check,
    threshold_rule,
    verify_value_identity,
)
from .structure import A3_TOL, StructureReport, check_structure

__version__ = "0.1.0"


def warmup() -> str:
    """Trigger kernel compilation on a tiny problem; returns the backend name.

    Worth calling once before timing anything: the first compiled call pays
    the jit cost, every later call is hot.
    """
    import numpy as np

    tree = build_tree(TreeConfig(steps=2, horizon=1.0, kind="path"))
    g = parse("0.1*y + 0.1*abs(z)", Signature.GENERATOR)
    phi = parse("abs(z)", Signature.GENERATOR, convex=True)
    terminal = np.asarray(tree.w[tree.leaf_start:] ** 2)
    constrained_expectation(g, phi, terminal, tree)
    constrained_expectation_direct(g, phi, terminal, tree)
    x = AdaptedProcess(tree, np.abs(tree.w))
    snell_envelope(g, phi, x, tree, brute=True)
    return backend_name()
