"""Constrained expectations, two ways.

The constrained expectation of a terminal payoff is the value of the minimal
supersolution whose control z stays in the zero set of the constraint
function phi at every node.  Two constructions are provided:

* ``constrained_expectation`` runs a ladder of unconstrained solves with the
  penalized driver g + n * phi and increasing n.  The values are nondecreasing
  in n and approach the constrained value from below; dC on each edge is
  n * phi(t, y, z) * dt.
* ``constrained_expectation_direct`` minimizes each one-step value over the
  zero set of phi directly (z-only constraints).  It is the exact discrete
  minimal supersolution and serves as the oracle for the penalized ladder.

Two stability caps bound the usable penalty level at a fixed step size:
(i) the Picard step must stay a contraction, dt * (y-slope of g + n * phi)
<= contraction limit; (ii) the one-step map must stay monotone in the child
values, sqrt(dt) * (z-slope of g + n * phi) <= 1.  Beyond (ii) the scheme
can overshoot and lose the monotonicity in n, so the cap is enforced, and
the large-n limit is only meaningful along a coupled refinement of (steps,
n_max), which ``refinement_ladder`` walks.

Existence gate: the zero control must be feasible (phi(t, y, 0) = 0 on the
probe grid) and phi must be nonnegative; both are checked, violations raise
DomainError.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .bsde import (DEFAULT_SETTINGS, SolverSettings, backward_pass, backward_pass_direct,
                   contraction_guard, monotone_guard, supersolution_residual, z_kappa,
                   _raise_status)
from .errors import ConfigError, DomainError, InfeasibleError, StabilityError
from .expr import FunctionSpec, Signature, combine_sum, ensure_signature
from .lattice import AdaptedProcess, Tree, TreeConfig, build_tree, realize_reward
from .structure import A3_TOL

_CAP_TINY = 1e-12
_BRACKET = 1.0e4


def zero_feasibility_defect(phi: FunctionSpec, horizon: float = 1.0) -> tuple:
    """(max |phi(t, y, 0)|, min phi) on the probe grid."""
    grid = np.linspace(-5.0, 5.0, 33)
    ts = np.array([0.0, 0.5 * horizon, horizon])
    worst = 0.0
    low = np.inf
    for t in ts:
        tv = np.full_like(grid, t)
        at_zero = phi.eval_array(t=tv, y=grid, z=np.zeros_like(grid))
        worst = max(worst, float(np.max(np.abs(at_zero))))
        for other in grid[::8]:
            vals = phi.eval_array(t=tv, y=np.full_like(grid, other), z=grid)
            low = min(low, float(np.min(vals)))
    return worst, low


def _gate_constraint(phi: FunctionSpec, horizon: float) -> None:
    ensure_signature(phi, Signature.GENERATOR, "constraint")
    defect, low = zero_feasibility_defect(phi, horizon)
    if defect > A3_TOL:
        raise DomainError(
            f"zero control is not feasible: max |phi(t, y, 0)| = {defect:.3g} "
            f"exceeds {A3_TOL:.0e}; the constrained value may not exist"
        )
    if low < -1e-9:
        raise DomainError(f"constraint function must be nonnegative; min probed value {low:.3g}")


@dataclass(frozen=True)
class PenaltySchedule:
    """Increasing penalty levels under the stability caps."""

    levels: tuple
    n_max: float
    cap_contraction: float
    cap_monotone: float
    tolerance: float = 1e-8

    def validate(self) -> None:
        if not self.levels:
            raise ConfigError("penalty schedule needs at least one level")
        prev = 0.0
        for n in self.levels:
            if n <= prev:
                raise ConfigError(f"penalty levels must be strictly increasing and positive, got {self.levels}")
            prev = n
        if self.levels[-1] > self.n_max * (1.0 + 1e-12) + _CAP_TINY:
            raise ConfigError(
                f"penalty level {self.levels[-1]} exceeds the stability cap n_max = {self.n_max:.6g}"
            )
        if not (0.0 < self.tolerance < 1.0):
            raise ConfigError("convergence tolerance must be in (0, 1)")

    @classmethod
    def from_caps(cls, g: FunctionSpec, phi: FunctionSpec, tree: Tree,
                  settings: SolverSettings | None = None, levels=None,
                  tolerance: float = 1e-8) -> "PenaltySchedule":
        """Compute n_max from probed slopes, then fill geometric levels 1, 2, 4, ...

        Cap (i): dt * (Ly(g) + n * Ly(phi)) <= contraction limit.
        Cap (ii): sqrt(dt) * (Lz(g) + n * Lz(phi)) <= 1.
        """
        settings = settings or DEFAULT_SETTINGS
        horizon = tree.config.horizon
        ly_g, lz_g = g.axis_lipschitz(horizon)
        ly_p, lz_p = phi.axis_lipschitz(horizon)
        head_i = settings.contraction_limit - tree.dt * ly_g
        if head_i < -_CAP_TINY:
            raise StabilityError(
                f"dt * y-slope of the driver alone is {tree.dt * ly_g:.6g}, already over the "
                f"contraction limit {settings.contraction_limit}; refine the tree"
            )
        head_ii = 1.0 - tree.sqrt_dt * lz_g
        if head_ii < -_CAP_TINY:
            raise StabilityError(
                f"sqrt(dt) * z-slope of the driver alone is {tree.sqrt_dt * lz_g:.6g}, already "
                f"over the monotonicity cap 1; refine the tree"
            )
        cap_i = np.inf if ly_p <= _CAP_TINY else max(head_i, 0.0) / (tree.dt * ly_p)
        cap_ii = np.inf if lz_p <= _CAP_TINY else max(head_ii, 0.0) / (tree.sqrt_dt * lz_p)
        n_max = float(min(cap_i, cap_ii))
        if n_max <= 0.0:
            raise StabilityError(
                "no positive penalty level fits under the stability caps at this step size"
            )
        if levels is None:
            if np.isinf(n_max):
                lv = (1.0,)
            else:
                out = []
                n = 1.0
                while n < n_max * (1.0 - 1e-12):
                    out.append(n)
                    n *= 2.0
                out.append(n_max)
                lv = tuple(out) if out[0] <= n_max else (n_max,)
        else:
            lv = tuple(float(n) for n in levels)
        sched = cls(levels=lv, n_max=n_max, cap_contraction=float(cap_i),
                    cap_monotone=float(cap_ii), tolerance=tolerance)
        sched.validate()
        return sched


def penalized_generator(g: FunctionSpec, phi: FunctionSpec, n: float) -> FunctionSpec:
    """The driver g + n * phi as a new expression."""
    ensure_signature(g, Signature.GENERATOR, "driver")
    ensure_signature(phi, Signature.GENERATOR, "constraint")
    if n < 0.0:
        raise ConfigError(f"penalty level must be nonnegative, got {n}")
    return combine_sum(g, float(n), phi)


@dataclass(frozen=True)
class ConstrainedSolution:
    """Output of either construction of the constrained expectation."""

    tree: Tree
    generator: FunctionSpec
    constraint: FunctionSpec
    method: str
    y: AdaptedProcess
    z: np.ndarray
    dc_up: np.ndarray
    dc_dn: np.ndarray
    levels: tuple
    snapshots: list = field(repr=False)
    violations: list
    gaps: list
    converged: bool
    monotone_defect: float
    schedule: PenaltySchedule | None = None

    @property
    def root(self) -> float:
        return self.y.root

    def residual(self):
        """Defect of the supersolution identity under the original driver."""
        return supersolution_residual(self.y, self.z, self.dc_up, self.dc_dn, self.generator)


def _violation(phi: FunctionSpec, tree: Tree, values: np.ndarray, z: np.ndarray) -> float:
    interior = tree.leaf_start
    if interior == 0:
        return 0.0
    v = phi.eval_array(t=tree.t_node[:interior], y=values[:interior], z=z)
    return float(np.max(v))


def expected_violation_integral(phi: FunctionSpec, tree: Tree, values: np.ndarray,
                                z: np.ndarray) -> float:
    """E[sum of phi(t, y, z) dt] over the tree's uniform path measure.

    This is the quantity that actually decays along the coupled refinement:
    n times it telescopes to the bounded total dC mass, so it shrinks like
    1/n_max.  The max-node violation does not decay (spreads are sparse but
    order one wherever the value process bends).
    """
    interior = tree.leaf_start
    if interior == 0:
        return 0.0
    v = phi.eval_array(t=tree.t_node[:interior], y=values[:interior], z=z)
    total = 0.0
    for i in range(tree.steps):
        sl = tree.level_slice(i)
        if tree.is_path:
            probs = np.full(sl.stop - sl.start, 0.5 ** i)
        else:
            j = np.arange(i + 1, dtype=np.float64)
            logc = _log_binom(i, j)
            probs = np.exp(logc - i * np.log(2.0)) if i else np.ones(1)
        total += tree.dt * float(np.dot(probs, v[sl]))
    return total


def _log_binom(n: int, j: np.ndarray) -> np.ndarray:
    from math import lgamma
    return np.array([lgamma(n + 1) - lgamma(k + 1) - lgamma(n - k + 1) for k in j])


def constrained_expectation(g: FunctionSpec, phi: FunctionSpec, terminal: np.ndarray,
                            tree: Tree, schedule: PenaltySchedule | None = None,
                            settings: SolverSettings | None = None,
                            keep_snapshots: bool = True) -> ConstrainedSolution:
    """Penalization ladder approximation of the constrained expectation.

    Solves the unconstrained scheme with driver g + n * phi for each scheduled
    level n, recording per-level snapshots, constraint violations and the
    sup-norm gaps between consecutive levels.  Stops early once the gap drops
    under the schedule tolerance.  ``converged`` is False when the schedule is
    exhausted first (the cap, not the limit, ended the ladder).
    """
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    horizon = tree.config.horizon
    _gate_constraint(phi, horizon)
    interior = tree.leaf_start

    if phi.is_zero_literal() or _grid_zero(phi, horizon):
        contraction_guard(g, tree, settings)
        values, z, _, _ = backward_pass(g.program(), tree, settings, top_values=terminal,
                                        what="constrained_expectation")
        y = AdaptedProcess(tree, values)
        zero = np.zeros(interior, dtype=np.float64)
        return ConstrainedSolution(
            tree=tree, generator=g, constraint=phi, method="penalized",
            y=y, z=z, dc_up=zero, dc_dn=zero.copy(),
            levels=(0.0,), snapshots=[y] if keep_snapshots else [],
            violations=[0.0], gaps=[], converged=True, monotone_defect=0.0,
            schedule=schedule,
        )

    if schedule is None:
        schedule = PenaltySchedule.from_caps(g, phi, tree, settings)
    schedule.validate()

    snapshots: list = []
    violations: list = []
    gaps: list = []
    used: list = []
    prev_values = None
    values = z = None
    monotone_defect = 0.0
    converged = False
    for n in schedule.levels:
        gn = penalized_generator(g, phi, n)
        contraction_guard(gn, tree, settings)
        monotone_guard(gn, tree)
        values, z, _, _ = backward_pass(gn.program(), tree, settings, top_values=terminal,
                                        what=f"constrained_expectation at level {n:g}")
        used.append(float(n))
        if keep_snapshots:
            snapshots.append(AdaptedProcess(tree, values))
        violations.append(_violation(phi, tree, values, z))
        if prev_values is not None:
            gaps.append(float(np.max(np.abs(values - prev_values))))
            monotone_defect = max(monotone_defect, float(np.max(prev_values - values)))
            if gaps[-1] < schedule.tolerance:
                converged = True
                break
        prev_values = values

    phi_vals = phi.eval_array(t=tree.t_node[:interior], y=values[:interior], z=z) \
        if interior else np.zeros(0)
    dc = used[-1] * phi_vals * tree.dt
    y = AdaptedProcess(tree, values)
    return ConstrainedSolution(
        tree=tree, generator=g, constraint=phi, method="penalized",
        y=y, z=z, dc_up=dc, dc_dn=dc.copy(),
        levels=tuple(used), snapshots=snapshots, violations=violations, gaps=gaps,
        converged=converged, monotone_defect=monotone_defect, schedule=schedule,
    )


def _grid_zero(phi: FunctionSpec, horizon: float) -> bool:
    """True when phi vanishes on the whole probe grid (treated as no constraint)."""
    grid = np.linspace(-5.0, 5.0, 17)
    for t in (0.0, 0.5 * horizon, horizon):
        tv = np.full_like(grid, t)
        for other in grid[::4]:
            vals = phi.eval_array(t=tv, y=np.full_like(grid, other), z=grid)
            if np.max(np.abs(vals)) != 0.0:
                return False
    return True


# ---------------------------------------------------------------------------
# Direct one-step minimization

def _feasible_anchor(phi: FunctionSpec, t: float):
    """A point of the zero set and the matching feasibility predicate."""
    def val(z: float) -> float:
        return phi.evaluate(t=t, y=0.0, z=z)

    if val(0.0) == 0.0:
        return 0.0, lambda z: val(z) == 0.0
    zs = np.linspace(-_BRACKET, _BRACKET, 4097)
    vals = phi.eval_array(t=np.full_like(zs, t), y=np.zeros_like(zs), z=zs)
    i = int(np.argmin(vals))
    a = zs[max(i - 1, 0)]
    c = zs[min(i + 1, len(zs) - 1)]
    golden = 0.6180339887498949
    p = c - golden * (c - a)
    q = a + golden * (c - a)
    fp, fq = val(p), val(q)
    while c - a > 1e-13 * (1.0 + abs(a) + abs(c)):
        if fp <= fq:
            c, q, fq = q, p, fp
            p = c - golden * (c - a)
            fp = val(p)
        else:
            a, p, fp = p, q, fq
            q = a + golden * (c - a)
            fq = val(q)
    zbest = 0.5 * (a + c)
    if val(zbest) > A3_TOL * (1.0 + abs(zbest)):
        raise InfeasibleError(
            f"constraint has no feasible control on [-{_BRACKET:g}, {_BRACKET:g}] at t = {t:g}"
        )
    return zbest, lambda z: val(z) <= A3_TOL * (1.0 + abs(z))


def _bisect_edge(feasible, good: float, bad: float) -> float:
    for _ in range(200):
        mid = 0.5 * (good + bad)
        if mid == good or mid == bad:
            break
        if feasible(mid):
            good = mid
        else:
            bad = mid
        if abs(bad - good) <= 1e-15 * max(1.0, abs(good)):
            break
    return good


def constraint_zero_interval(phi: FunctionSpec, t: float) -> tuple:
    """Certified subinterval of {z : phi(t, 0, z) = 0} containing an anchor.

    For a convex z-only constraint the zero set is an interval; bisection from
    a feasible anchor toward each bracket end finds its endpoints.  The probe
    fixes y = 0, which is exact for z-only constraints.
    """
    if phi.is_zero_literal():
        return -_BRACKET, _BRACKET
    anchor, feasible = _feasible_anchor(phi, t)
    hi = _BRACKET if feasible(_BRACKET) else _bisect_edge(feasible, anchor, _BRACKET)
    lo = -_BRACKET if feasible(-_BRACKET) else _bisect_edge(feasible, anchor, -_BRACKET)
    return lo, hi


def _require_z_only_convex(phi: FunctionSpec) -> None:
    if not phi.depends_only_on_z():
        raise DomainError(
            "the direct construction needs a z-only constraint; "
            "y-dependent constraints are served by penalization"
        )
    if phi.declared_convex is False:
        raise DomainError("the direct construction needs a convex constraint")
    if phi.declared_convex is None and not _probe_convex(phi):
        raise DomainError("constraint failed the convexity probe; use penalization")


def _probe_convex(phi: FunctionSpec) -> bool:
    cached = getattr(phi, "_convex_probe", None)
    if cached is not None:
        return cached
    zs = np.linspace(-6.0, 6.0, 49)
    ok = True
    for t in (0.0, 0.5, 1.0):
        tv = np.full_like(zs, t)
        v = phi.eval_array(t=tv, y=np.zeros_like(zs), z=zs)
        mid = 0.5 * (v[:-2] + v[2:])
        if np.any(v[1:-1] > mid + 1e-10):
            ok = False
            break
    phi._convex_probe = ok
    return ok


def zero_intervals(phi: FunctionSpec, tree: Tree) -> tuple:
    """Per-level feasible z intervals (two arrays indexed by level)."""
    n = tree.steps
    zlo = np.empty(n, dtype=np.float64)
    zhi = np.empty(n, dtype=np.float64)
    if "t" not in phi.variables():
        lo, hi = constraint_zero_interval(phi, 0.0)
        zlo[:] = lo
        zhi[:] = hi
        return zlo, zhi
    for i in range(n):
        t = float(tree.times[i])
        try:
            zlo[i], zhi[i] = constraint_zero_interval(phi, t)
        except InfeasibleError as exc:
            raise InfeasibleError(f"{exc} (level {i})") from None
    return zlo, zhi


def direct_one_step(g: FunctionSpec, phi: FunctionSpec, y_up: float, y_down: float,
                    t: float, dt: float, settings: SolverSettings | None = None) -> tuple:
    """One constrained one-step minimization; returns (y, z, dc_up, dc_down)."""
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    _require_z_only_convex(phi)
    if dt <= 0.0:
        raise ConfigError("dt must be positive")
    sqrt_dt = float(np.sqrt(dt))
    zlo, zhi = constraint_zero_interval(phi, t)
    prog = g.program()
    stack = np.empty(K.MAX_STACK, dtype=np.float64)
    _, lz = g.axis_lipschitz(t + dt)
    kappa = float(min(max(sqrt_dt * lz, 0.0), 1.0))
    y, z, _, status = K.one_step_direct(
        prog.codes, prog.consts, float(t), float(y_up), float(y_down), float(dt),
        sqrt_dt, zlo, zhi, kappa, settings.picard_tol, settings.picard_max_iter,
        settings.z_tol, settings.tie_eps, stack,
    )
    if status != K.OK:
        _raise_status(status, -1, "direct_one_step")
    gv = g.evaluate(t=float(t), y=float(y), z=float(z))
    dc_up = y - y_up - gv * dt + z * sqrt_dt
    dc_dn = y - y_down - gv * dt - z * sqrt_dt
    return float(y), float(z), float(dc_up), float(dc_dn)


def constrained_expectation_direct(g: FunctionSpec, phi: FunctionSpec, terminal: np.ndarray,
                                   tree: Tree, settings: SolverSettings | None = None) -> ConstrainedSolution:
    """Exact discrete minimal supersolution for a z-only convex constraint."""
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    _gate_constraint(phi, tree.config.horizon)
    _require_z_only_convex(phi)
    contraction_guard(g, tree, settings)
    zlo, zhi = zero_intervals(phi, tree)
    values, z, dc_up, dc_dn, _, _ = backward_pass_direct(
        g.program(), tree, settings, zlo, zhi, top_values=terminal,
        kappa_g=z_kappa(g, tree), what="constrained_expectation_direct",
    )
    y = AdaptedProcess(tree, values)
    return ConstrainedSolution(
        tree=tree, generator=g, constraint=phi, method="direct",
        y=y, z=z, dc_up=dc_up, dc_dn=dc_dn,
        levels=(), snapshots=[y], violations=[_violation(phi, tree, values, z)],
        gaps=[], converged=True, monotone_defect=0.0, schedule=None,
    )


@dataclass(frozen=True)
class LadderRow:
    steps: int
    n_max: float
    levels: tuple
    penalized_root: float
    direct_root: float | None
    gap: float | None
    violation: float
    violation_integral: float


@dataclass(frozen=True)
class LadderReport:
    rows: list
    sup_terminal: float

    @property
    def gaps(self) -> list:
        return [r.gap for r in self.rows if r.gap is not None]


def refinement_ladder(g: FunctionSpec, phi: FunctionSpec, reward: FunctionSpec,
                      steps_list, kind: str = "path", horizon: float = 1.0,
                      settings: SolverSettings | None = None,
                      tolerance: float = 1e-8) -> LadderReport:
    """Coupled (steps, n_max) refinement: finer trees admit larger penalties.

    The terminal is the reward expression evaluated at the leaves of each
    tree.  For z-only convex constraints each row also carries the direct
    value and the penalized-vs-direct root gap.
    """
    ensure_signature(reward, Signature.REWARD, "reward")
    rows = []
    sup_term = 0.0
    directable = phi.depends_only_on_z() and not phi.is_zero_literal()
    if directable:
        try:
            _require_z_only_convex(phi)
        except DomainError:
            directable = False
    for steps in steps_list:
        tree = build_tree(TreeConfig(steps=int(steps), horizon=horizon, kind=kind))
        x, _flags = realize_reward(reward, tree)
        terminal = x.leaf_values()
        sup_term = max(sup_term, float(np.max(np.abs(terminal))))
        schedule = PenaltySchedule.from_caps(g, phi, tree, settings, tolerance=tolerance)
        sol = constrained_expectation(g, phi, terminal, tree, schedule, settings,
                                      keep_snapshots=False)
        integral = expected_violation_integral(phi, tree, sol.y.values, sol.z)
        if directable:
            ref = constrained_expectation_direct(g, phi, terminal, tree, settings)
            gap = abs(sol.root - ref.root)
            rows.append(LadderRow(steps=int(steps), n_max=schedule.n_max,
                                  levels=sol.levels, penalized_root=sol.root,
                                  direct_root=ref.root, gap=gap,
                                  violation=sol.violations[-1],
                                  violation_integral=integral))
        else:
            rows.append(LadderRow(steps=int(steps), n_max=schedule.n_max,
                                  levels=sol.levels, penalized_root=sol.root,
                                  direct_root=None, gap=None,
                                  violation=sol.violations[-1],
                                  violation_integral=integral))
    return LadderReport(rows=rows, sup_terminal=sup_term)
