"""Empirical checks of the expectation-operator identities.

Six identities over seeded random bounded terminals on a path tree:

(a) comparison        xi <= eta leafwise implies values ordered at every node
(b) convexity         value of a convex mix <= mix of values, nodewise
(c) continuity from   xi_k = xi - 2^-k * tail increases to xi; values follow
    below             monotonically and close the gap
(d) self-preserving   a payoff measurable at time t is its own value at t
(e) time consistency  solving to t, then from t, reproduces the full solve
(f) 1-0 law           restricting the payoff to a union of time-t subtrees
                      multiplies the time-t value by the indicator

Identities (d) and (f) hold only under structural screens on the driver
(g(t, y, 0) = 0, resp. g(t, 0, 0) = 0); screened-out combinations are
reported as skipped with the reason, not as failures.  Convexity requires a
convex driver and constraint (declared or probed).

Each identity runs under the penalized operator at the largest stable
penalty level (tolerance 1e-7) and, for z-only convex constraints, under
the direct operator (tolerance 1e-9).  The same identities are also
re-measured at every rung of the penalty schedule with a reduced trial
count; those rows are recorded for reporting, never asserted, since below
the cap the operator is only an approximation of the constrained limit.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .bsde import DEFAULT_SETTINGS, SolverSettings, backward_pass, backward_pass_direct, \
    contraction_guard, monotone_guard, z_kappa
from .errors import DomainError
from .expr import FunctionSpec, Signature, ensure_signature
from .lattice import Tree
from .penalty import PenaltySchedule, _gate_constraint, _require_z_only_convex, \
    penalized_generator, zero_intervals
from .structure import check_structure

TOL_DIRECT = 1e-9
TOL_PENALIZED = 1e-7

IDENTITY_NAMES = (
    "comparison",
    "convexity",
    "continuity_from_below",
    "self_preserving",
    "time_consistency",
    "zero_one_law",
)


@dataclass(frozen=True)
class IdentityResult:
    name: str
    method: str
    trials: int
    failures: int
    worst_gap: float
    tolerance: float
    skipped: bool = False
    reason: str | None = None

    @property
    def passed(self) -> bool:
        return self.skipped or self.failures == 0


@dataclass(frozen=True)
class PropertyReport:
    generator: str
    constraint: str
    steps: int
    n_fixed: float
    results: list
    ladder: dict

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def worst(self) -> float:
        gaps = [r.worst_gap for r in self.results if not r.skipped]
        return max(gaps) if gaps else 0.0


class _Ctx:
    __slots__ = ("tree", "solve", "tol", "trials", "rng")

    def __init__(self, tree, solve, tol, trials, rng):
        self.tree = tree
        self.solve = solve
        self.tol = tol
        self.trials = trials
        self.rng = rng


def _lift(tree: Tree, level: int, level_values: np.ndarray) -> np.ndarray:
    """Spread time-``level`` node values onto the leaves below them."""
    return np.repeat(level_values, 2 ** (tree.steps - level))


def _run_comparison(ctx: _Ctx):
    worst, failures = 0.0, 0
    n_leaves = ctx.tree.n_leaves
    for _ in range(ctx.trials):
        xi = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        eta = xi + ctx.rng.uniform(0.0, 1.0, n_leaves)
        gap = float(np.max(ctx.solve(xi) - ctx.solve(eta)))
        worst = max(worst, gap)
        failures += gap > ctx.tol
    return worst, failures


def _run_convexity(ctx: _Ctx):
    worst, failures = 0.0, 0
    n_leaves = ctx.tree.n_leaves
    for _ in range(ctx.trials):
        xi = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        eta = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        ex = ctx.solve(xi)
        ee = ctx.solve(eta)
        bad = 0.0
        for a in (0.25, 0.5, 0.75):
            mix = ctx.solve(a * xi + (1.0 - a) * eta)
            bad = max(bad, float(np.max(mix - a * ex - (1.0 - a) * ee)))
        worst = max(worst, bad)
        failures += bad > ctx.tol
    return worst, failures


_CFB_STEPS = tuple(range(11)) + (20, 30, 40)


def _run_continuity_from_below(ctx: _Ctx):
    worst, failures = 0.0, 0
    n_leaves = ctx.tree.n_leaves
    for _ in range(ctx.trials):
        xi = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        tail = ctx.rng.uniform(0.0, 1.0, n_leaves)
        limit = ctx.solve(xi)
        bad = 0.0
        prev = None
        last = None
        for k in _CFB_STEPS:
            ek = ctx.solve(xi - tail * 2.0 ** (-k))
            if prev is not None:
                bad = max(bad, float(np.max(prev - ek)))
            prev = ek
            last = ek
        bad = max(bad, float(np.max(np.abs(limit - last))))
        worst = max(worst, bad)
        failures += bad > ctx.tol
    return worst, failures


def _run_self_preserving(ctx: _Ctx):
    worst, failures = 0.0, 0
    tree = ctx.tree
    for _ in range(ctx.trials):
        t = int(ctx.rng.integers(0, tree.steps + 1))
        sl = tree.level_slice(t)
        xi_t = ctx.rng.uniform(-1.0, 1.0, sl.stop - sl.start)
        values = ctx.solve(_lift(tree, t, xi_t))
        bad = float(np.max(np.abs(values[sl] - xi_t)))
        worst = max(worst, bad)
        failures += bad > ctx.tol
    return worst, failures


def _run_time_consistency(ctx: _Ctx):
    worst, failures = 0.0, 0
    tree = ctx.tree
    n_leaves = tree.n_leaves
    for _ in range(ctx.trials):
        t = int(ctx.rng.integers(1, tree.steps)) if tree.steps > 1 else 1
        xi = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        full = ctx.solve(xi)
        sl = tree.level_slice(t)
        partial = ctx.solve(full[sl], top_level=t)
        cut = tree.level_starts[t + 1]
        bad = float(np.max(np.abs(partial[:cut] - full[:cut])))
        worst = max(worst, bad)
        failures += bad > ctx.tol
    return worst, failures


def _run_zero_one_law(ctx: _Ctx):
    worst, failures = 0.0, 0
    tree = ctx.tree
    n_leaves = tree.n_leaves
    for _ in range(ctx.trials):
        t = int(ctx.rng.integers(0, tree.steps + 1))
        sl = tree.level_slice(t)
        ind = (ctx.rng.uniform(0.0, 1.0, sl.stop - sl.start) < 0.5).astype(np.float64)
        xi = ctx.rng.uniform(-1.0, 1.0, n_leaves)
        ev = ctx.solve(xi)
        restricted = ctx.solve(xi * _lift(tree, t, ind))
        bad = float(np.max(np.abs(restricted[sl] - ind * ev[sl])))
        worst = max(worst, bad)
        failures += bad > ctx.tol
    return worst, failures


_RUNNERS = {
    "comparison": _run_comparison,
    "convexity": _run_convexity,
    "continuity_from_below": _run_continuity_from_below,
    "self_preserving": _run_self_preserving,
    "time_consistency": _run_time_consistency,
    "zero_one_law": _run_zero_one_law,
}


def _probe_max(f: FunctionSpec, horizon: float, y_axis: bool) -> float:
    grid = np.linspace(-5.0, 5.0, 33)
    ts = np.array([0.0, 0.5 * horizon, horizon])
    worst = 0.0
    for t in ts:
        tv = np.full_like(grid, t)
        if y_axis:
            vals = f.eval_array(t=tv, y=grid, z=np.zeros_like(grid))
        else:
            vals = f.eval_array(t=tv, y=np.zeros_like(grid), z=np.zeros_like(grid))
        worst = max(worst, float(np.max(np.abs(vals))))
    return worst


def _is_convex(f: FunctionSpec, horizon: float) -> bool:
    if f.declared_convex is not None:
        return f.declared_convex
    return check_structure(f, horizon=horizon).convex_ok


def _screen(name: str, g: FunctionSpec, phi: FunctionSpec, horizon: float) -> str | None:
    """Reason to skip the identity, or None to run it."""
    if name == "convexity":
        if not _is_convex(g, horizon):
            return "driver is not convex on the probe grid"
        if not _is_convex(phi, horizon):
            return "constraint is not convex on the probe grid"
    elif name == "self_preserving":
        if _probe_max(g, horizon, y_axis=True) > 1e-12:
            return "driver does not vanish at z = 0; constants are not preserved"
    elif name == "zero_one_law":
        if _probe_max(g, horizon, y_axis=False) > 1e-12:
            return "driver does not vanish at the origin; zero is not preserved"
    return None


def _penalized_solver(g, phi, n, tree, settings):
    gn = penalized_generator(g, phi, n)
    contraction_guard(gn, tree, settings)
    monotone_guard(gn, tree)
    prog = gn.program()

    def solve(terminal, top_level=None):
        values, _, _, _ = backward_pass(prog, tree, settings, top_values=terminal,
                                        top_level=top_level, what="property trial")
        return values

    return solve


def _direct_solver(g, phi, tree, settings):
    contraction_guard(g, tree, settings)
    zlo, zhi = zero_intervals(phi, tree)
    prog = g.program()
    kappa = z_kappa(g, tree)

    def solve(terminal, top_level=None):
        values, _, _, _, _, _ = backward_pass_direct(
            prog, tree, settings, zlo, zhi, top_values=terminal,
            top_level=top_level, kappa_g=kappa, what="property trial")
        return values

    return solve


def property_suite(g: FunctionSpec, phi: FunctionSpec, tree: Tree,
                   trials: int = 200, seed: int = 0,
                   settings: SolverSettings | None = None,
                   ladder_trials: int = 10) -> PropertyReport:
    """Run all six identities for one driver/constraint pair."""
    settings = settings or DEFAULT_SETTINGS
    settings.validate()
    ensure_signature(g, Signature.GENERATOR, "driver")
    if not tree.is_path:
        raise DomainError("the property suite needs the exact filtration; use a path tree")
    horizon = tree.config.horizon
    _gate_constraint(phi, horizon)
    schedule = PenaltySchedule.from_caps(g, phi, tree, settings)
    n_fixed = schedule.levels[-1]

    methods = [("penalized", TOL_PENALIZED,
                _penalized_solver(g, phi, n_fixed, tree, settings))]
    try:
        _require_z_only_convex(phi)
        methods.append(("direct", TOL_DIRECT, _direct_solver(g, phi, tree, settings)))
    except DomainError:
        pass

    results = []
    for mi, (method, tol, solve) in enumerate(methods):
        for ii, name in enumerate(IDENTITY_NAMES):
            reason = _screen(name, g, phi, horizon)
            if reason is not None:
                results.append(IdentityResult(name=name, method=method, trials=0,
                                              failures=0, worst_gap=0.0, tolerance=tol,
                                              skipped=True, reason=reason))
                continue
            rng = np.random.default_rng([seed, mi, ii])
            ctx = _Ctx(tree, solve, tol, trials, rng)
            worst, failures = _RUNNERS[name](ctx)
            results.append(IdentityResult(name=name, method=method, trials=trials,
                                          failures=int(failures), worst_gap=worst,
                                          tolerance=tol))

    ladder: dict = {name: [] for name in IDENTITY_NAMES}
    if ladder_trials > 0 and len(schedule.levels) > 1:
        for ri, n in enumerate(schedule.levels):
            solve = _penalized_solver(g, phi, n, tree, settings)
            for ii, name in enumerate(IDENTITY_NAMES):
                if _screen(name, g, phi, horizon) is not None:
                    continue
                rng = np.random.default_rng([seed, 97, ri, ii])
                ctx = _Ctx(tree, solve, TOL_PENALIZED, ladder_trials, rng)
                worst, _failures = _RUNNERS[name](ctx)
                ladder[name].append((float(n), worst))

    return PropertyReport(generator=g.source, constraint=phi.source, steps=tree.steps,
                          n_fixed=float(n_fixed), results=results, ladder=ladder)
