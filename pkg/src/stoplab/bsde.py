"""Backward solvers on the lattice.

The one-step scheme at an interior node with child values (y_up, y_dn) is

    z = (y_up - y_dn) / (2 sqrt(dt))
    y = (y_up + y_dn) / 2 + g(t, y, z) dt

with y obtained by Picard iteration (the step is a contraction whenever
dt times the y-slope of the driver stays below the configured limit; the
guard runs before any solve).  ``solve_bsde`` sweeps this from the leaves to
the root; ``solve_to_stopping`` freezes the sweep at the nodes flagged by a
stopping rule.  The residual helper re-checks any candidate supersolution
triple (y, z, dC) edge by edge.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .errors import ConfigError, DomainError, EvalError, InfeasibleError, SolverError, StabilityError
from .expr import FunctionSpec, Program, Signature, ensure_signature
from .lattice import AdaptedProcess, Tree

_NO_STOP = np.zeros(1, dtype=np.uint8)
_NO_STOP.flags.writeable = False


@dataclass(frozen=True)
class SolverSettings:
    picard_tol: float = 1e-12
    picard_max_iter: int = 100
    contraction_limit: float = 0.5
    z_tol: float = 1e-10
    tie_eps: float = 1e-12

    def validate(self) -> None:
        if not (0.0 < self.picard_tol < 1.0):
            raise ConfigError(f"picard_tol must be in (0, 1), got {self.picard_tol}")
        if self.picard_max_iter < 1:
            raise ConfigError("picard_max_iter must be positive")
        if not (0.0 < self.contraction_limit < 1.0):
            raise ConfigError("contraction_limit must be in (0, 1)")
        if self.z_tol <= 0.0 or self.tie_eps < 0.0:
            raise ConfigError("z_tol must be positive and tie_eps nonnegative")


DEFAULT_SETTINGS = SolverSettings()


def contraction_guard(g: FunctionSpec, tree: Tree, settings: SolverSettings) -> None:
    """Reject solves whose Picard step is not a contraction."""
    ly, _ = g.axis_lipschitz(tree.config.horizon)
    if tree.dt * ly > settings.contraction_limit + 1e-12:
        raise StabilityError(
            f"dt * y-slope = {tree.dt * ly:.6g} exceeds the contraction limit "
            f"{settings.contraction_limit}; refine the tree or soften the driver"
        )


def z_kappa(g: FunctionSpec, tree: Tree) -> float:
    """sqrt(dt) times the driver's probed z-slope, clipped to [0, 1]."""
    _, lz = g.axis_lipschitz(tree.config.horizon)
    k = tree.sqrt_dt * lz
    return float(min(max(k, 0.0), 1.0))


def monotone_guard(g: FunctionSpec, tree: Tree) -> None:
    """Reject solves whose one-step map is not monotone in the child values."""
    _, lz = g.axis_lipschitz(tree.config.horizon)
    if tree.sqrt_dt * lz > 1.0 + 1e-9:
        raise StabilityError(
            f"sqrt(dt) * z-slope = {tree.sqrt_dt * lz:.6g} exceeds 1; "
            f"the scheme would lose monotonicity"
        )


def _raise_status(status: int, node: int, what: str) -> None:
    if status == K.ERR_PICARD:
        raise SolverError(f"Picard iteration did not converge in {what}", node)
    if status == K.ERR_EVAL:
        raise EvalError(f"driver evaluation produced a non-finite value in {what} at node {node}")
    if status == K.ERR_INFEASIBLE:
        raise InfeasibleError(f"no feasible control inside the search bracket in {what}", node)
    raise SolverError(f"unknown solver status {status} in {what}", node)


def backward_pass(program: Program, tree: Tree, settings: SolverSettings, *,
                  top_values: np.ndarray, top_level: int | None = None,
                  mode: int = K.MODE_PLAIN, x: np.ndarray | None = None,
                  stop: np.ndarray | None = None, what: str = "backward solve"):
    """Run one kernel sweep; returns (values, z, cont, iters)."""
    hi = tree.steps if top_level is None else top_level
    top = tree.level_slice(hi)
    top_values = np.asarray(top_values, dtype=np.float64)
    if top_values.shape != (top.stop - top.start,):
        raise ConfigError(
            f"top level {hi} needs {top.stop - top.start} values, got {top_values.shape}"
        )
    if not np.all(np.isfinite(top_values)):
        raise ConfigError("terminal values must be finite")
    values = np.empty(tree.node_count, dtype=np.float64)
    values[top] = top_values
    interior = tree.leaf_start
    z = np.zeros(interior, dtype=np.float64)
    cont = np.zeros(interior, dtype=np.float64)
    iters = np.zeros(interior, dtype=np.int64)
    x_arr = values if x is None else np.asarray(x, dtype=np.float64)
    stop_arr = _NO_STOP if stop is None else np.ascontiguousarray(stop, dtype=np.uint8)
    status, node = K.backward_solve(
        tree.level_starts, tree.stride, hi, tree.times, tree.dt, tree.sqrt_dt,
        program.codes, program.consts, settings.picard_tol, settings.picard_max_iter,
        mode, x_arr, stop_arr, values, z, cont, iters,
    )
    if status != K.OK:
        _raise_status(status, node, what)
    return values, z, cont, iters


def backward_pass_direct(program: Program, tree: Tree, settings: SolverSettings,
                         zlo_levels: np.ndarray, zhi_levels: np.ndarray, *,
                         top_values: np.ndarray, top_level: int | None = None,
                         mode: int = K.MODE_PLAIN, x: np.ndarray | None = None,
                         stop: np.ndarray | None = None, kappa_g: float = 1.0,
                         what: str = "constrained backward solve"):
    """Backward sweep with the constrained one-step minimizer.

    ``kappa_g`` is sqrt(dt) times the driver's z-slope; values below 1 allow
    the exact clamp shortcut inside the kernel, 1.0 always falls back to the
    scan.  Returns (values, z, dc_up, dc_dn, cont, iters).
    """
    hi = tree.steps if top_level is None else top_level
    top = tree.level_slice(hi)
    top_values = np.asarray(top_values, dtype=np.float64)
    if top_values.shape != (top.stop - top.start,):
        raise ConfigError(
            f"top level {hi} needs {top.stop - top.start} values, got {top_values.shape}"
        )
    if not np.all(np.isfinite(top_values)):
        raise ConfigError("terminal values must be finite")
    values = np.empty(tree.node_count, dtype=np.float64)
    values[top] = top_values
    interior = tree.leaf_start
    z = np.zeros(interior, dtype=np.float64)
    dc_up = np.zeros(interior, dtype=np.float64)
    dc_dn = np.zeros(interior, dtype=np.float64)
    cont = np.zeros(interior, dtype=np.float64)
    iters = np.zeros(interior, dtype=np.int64)
    x_arr = values if x is None else np.asarray(x, dtype=np.float64)
    stop_arr = _NO_STOP if stop is None else np.ascontiguousarray(stop, dtype=np.uint8)
    status, node = K.backward_solve_direct(
        tree.level_starts, tree.stride, hi, tree.times, tree.dt, tree.sqrt_dt,
        program.codes, program.consts, settings.picard_tol, settings.picard_max_iter,
        settings.z_tol, settings.tie_eps, float(kappa_g), zlo_levels, zhi_levels,
        mode, x_arr, stop_arr, values, z, dc_up, dc_dn, cont, iters,
    )
    if status != K.OK:
        _raise_status(status, node, what)
    return values, z, dc_up, dc_dn, cont, iters


@dataclass(frozen=True)
class BsdeSolution:
    """Solution of the unconstrained scheme; dC is identically zero."""

    tree: Tree
    driver: FunctionSpec
    y: AdaptedProcess
    z: np.ndarray
    dc_up: np.ndarray
    dc_dn: np.ndarray
    iterations: np.ndarray
    settings: SolverSettings

    @property
    def root(self) -> float:
        return self.y.root

    def residual(self) -> "ResidualReport":
        return supersolution_residual(self.y, self.z, self.dc_up, self.dc_dn, self.driver)


def solve_bsde(g: FunctionSpec, terminal: np.ndarray, tree: Tree,
               settings: SolverSettings | None = None) -> BsdeSolution:
    """Solve the unconstrained backward equation for leaf values ``terminal``."""
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    contraction_guard(g, tree, settings)
    values, z, _, iters = backward_pass(
        g.program(), tree, settings, top_values=terminal, what="solve_bsde"
    )
    interior = tree.leaf_start
    zero = np.zeros(interior, dtype=np.float64)
    return BsdeSolution(
        tree=tree,
        driver=g,
        y=AdaptedProcess(tree, values),
        z=z,
        dc_up=zero,
        dc_dn=zero.copy(),
        iterations=iters,
        settings=settings,
    )


def rule_flags(rule, tree: Tree) -> np.ndarray:
    """Coerce a stopping rule (object with .flags, or array) to uint8 flags."""
    flags = rule if isinstance(rule, np.ndarray) else getattr(rule, "flags", rule)
    flags = np.ascontiguousarray(flags, dtype=np.uint8)
    if flags.shape != (tree.node_count,):
        raise ConfigError(
            f"stopping rule needs {tree.node_count} flags, got shape {flags.shape}"
        )
    return flags


def reachable_nodes(tree: Tree, flags: np.ndarray) -> np.ndarray:
    """Nodes visited before or at the rule's first hit (root always)."""
    cu, cd = tree.child_arrays()
    reached = np.zeros(tree.node_count, dtype=bool)
    reached[0] = True
    for i in range(tree.steps):
        sl = tree.level_slice(i)
        alive = reached[sl] & (flags[sl] == 0)
        reached[cu[sl][alive]] = True
        reached[cd[sl][alive]] = True
    return reached


def check_rule_covers(tree: Tree, flags: np.ndarray) -> None:
    """Every root-to-leaf path must hit a flagged node."""
    reached = reachable_nodes(tree, flags)
    leaves = tree.level_slice(tree.steps)
    uncovered = reached[leaves] & (flags[leaves] == 0)
    if np.any(uncovered):
        leaf = int(np.argmax(uncovered)) + tree.leaf_start
        raise DomainError(f"stopping rule never stops along the path through node {leaf}")


def solve_to_stopping(g: FunctionSpec, x: AdaptedProcess, rule, tree: Tree,
                      settings: SolverSettings | None = None) -> float:
    """Value at the root of the reward ``x`` frozen at the rule's nodes."""
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    contraction_guard(g, tree, settings)
    flags = rule_flags(rule, tree)
    check_rule_covers(tree, flags)
    values, _, _, _ = backward_pass(
        g.program(), tree, settings,
        top_values=x.leaf_values(), mode=K.MODE_FROZEN,
        x=x.values, stop=flags, what="solve_to_stopping",
    )
    return float(values[0])


@dataclass(frozen=True)
class ResidualReport:
    max_abs_residual: float
    min_dc: float


def supersolution_residual(y: AdaptedProcess, z: np.ndarray, dc_up: np.ndarray,
                           dc_dn: np.ndarray, g: FunctionSpec) -> ResidualReport:
    """Edgewise defect of the supersolution identity for the triple (y, z, dC).

    The residual on the edge to a child is
    y(node) - y(child) - g(t, y(node), z(node)) dt + z(node) dW(edge) - dC(edge)
    with dW = +-sqrt(dt).  A genuine supersolution has residual zero and
    nonnegative dC on every edge.
    """
    tree = y.tree
    interior = tree.leaf_start
    cu, cd = tree.child_arrays()
    t = tree.t_node[:interior]
    yv = y.values
    gv = g.eval_array(t=t, y=yv[:interior], z=z)
    base = yv[:interior] - gv * tree.dt
    r_up = base - yv[cu] + z * tree.sqrt_dt - dc_up
    r_dn = base - yv[cd] - z * tree.sqrt_dt - dc_dn
    max_res = float(max(np.max(np.abs(r_up)), np.max(np.abs(r_dn)))) if interior else 0.0
    min_dc = float(min(np.min(dc_up), np.min(dc_dn))) if interior else 0.0
    return ResidualReport(max_abs_residual=max_res, min_dc=min_dc)
