"""Optimal stopping against the constrained nonlinear expectation.

The value process of a nonnegative reward is the smallest constrained
supersolution dominating it; on the lattice one backward sweep produces it
by taking, at every interior node, the larger of the one-step value and the
local reward.  Around that sweep this module provides stopping rules as
first-hit node sets, exhaustive enumeration of all rules on small exact
trees, threshold rules that stop once the reward reaches a fraction of the
value, and checkers for the supermartingale property, minimality and the
stopped-value identity.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import _kernels as K
from .bsde import (
    DEFAULT_SETTINGS,
    SolverSettings,
    _raise_status,
    backward_pass,
    backward_pass_direct,
    check_rule_covers,
    contraction_guard,
    monotone_guard,
    reachable_nodes,
    rule_flags,
    z_kappa,
)
from .errors import CapacityError, ConfigError, DomainError
from .expr import FunctionSpec, Signature, ensure_signature
from .lattice import AdaptedProcess, Tree
from .penalty import PenaltySchedule, _gate_constraint, _require_z_only_convex, \
    penalized_generator, zero_intervals

RULE_ENUM_CAP = 5

# 1 - 2^-k for k = 1..20; every term is exact in binary.
DEFAULT_THRESHOLDS = tuple(1.0 - 0.5 ** k for k in range(1, 21))


def rule_count(steps: int) -> int:
    """Number of stopping rules on the exact tree with ``steps`` steps."""
    if steps < 0:
        raise ConfigError("steps must be nonnegative")
    c = 1
    for _ in range(steps):
        c = 1 + c * c
    return c


@dataclass(frozen=True)
class StoppingRule:
    """First-hit stopping rule stored as canonical node flags.

    ``flags[k] == 1`` marks the nodes where the rule stops.  Canonical means
    a flag sits only on nodes some path reaches without stopping earlier, and
    every root-to-leaf path hits exactly one flagged node.
    """

    tree: Tree
    flags: np.ndarray

    def __post_init__(self):
        flags = np.array(rule_flags(self.flags, self.tree), dtype=np.uint8)
        reached = reachable_nodes(self.tree, flags)
        if np.any((flags == 1) & ~reached):
            raise DomainError("rule flags a node that no path reaches before stopping")
        check_rule_covers(self.tree, flags)
        flags.flags.writeable = False
        object.__setattr__(self, "flags", flags)

    @classmethod
    def from_region(cls, tree: Tree, mask: np.ndarray) -> "StoppingRule":
        """First hit of a node region; unreachable region nodes are dropped."""
        mask = np.asarray(mask)
        if mask.shape != (tree.node_count,):
            raise ConfigError(
                f"region needs {tree.node_count} entries, got shape {mask.shape}"
            )
        raw = (mask != 0).astype(np.uint8)
        reached = reachable_nodes(tree, raw)
        return cls(tree, np.where(reached, raw, 0).astype(np.uint8))

    @classmethod
    def at_level(cls, tree: Tree, level: int) -> "StoppingRule":
        """Stop at every node of one level (deterministic time)."""
        if not 0 <= level <= tree.steps:
            raise ConfigError(f"level {level} outside 0..{tree.steps}")
        flags = np.zeros(tree.node_count, dtype=np.uint8)
        flags[tree.level_slice(level)] = 1
        return cls(tree, flags)

    def same_as(self, other: "StoppingRule") -> bool:
        return self.tree is other.tree and np.array_equal(self.flags, other.flags)

    def stopped_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.flags)

    def stop_levels(self) -> np.ndarray:
        """Per-leaf level of the first flagged node (exact filtration only)."""
        if not self.tree.is_path:
            raise DomainError("per-path stop levels need the exact filtration")
        n = self.tree.steps
        leaves = np.arange(1 << n, dtype=np.int64)
        out = np.full(1 << n, -1, dtype=np.int64)
        for i in range(n + 1):
            nodes = int(self.tree.level_starts[i]) + (leaves >> (n - i))
            hit = (out < 0) & (self.flags[nodes] == 1)
            out[hit] = i
        return out


def _enumerate_masks(tree: Tree) -> list:
    if not tree.is_path:
        raise DomainError("exhaustive rule enumeration needs the exact filtration")
    if tree.steps > RULE_ENUM_CAP:
        raise CapacityError(
            f"rule enumeration is capped at {RULE_ENUM_CAP} steps; "
            f"a tree with {tree.steps} steps has {rule_count(tree.steps)} rules"
        )
    cu, cd = tree.child_arrays()
    leaf_s = tree.leaf_start

    def rules_at(node: int) -> list:
        if node >= leaf_s:
            return [1 << node]
        up = rules_at(int(cu[node]))
        dn = rules_at(int(cd[node]))
        out = [1 << node]
        for ru in up:
            for rd in dn:
                out.append(ru | rd)
        return out

    return rules_at(0)


def _rule_matrix(tree: Tree) -> np.ndarray:
    """All rules as a (count, node_count) uint8 matrix, stop-at-root first."""
    masks = _enumerate_masks(tree)
    nb = (tree.node_count + 7) // 8
    buf = b"".join(m.to_bytes(nb, "little") for m in masks)
    packed = np.frombuffer(buf, dtype=np.uint8).reshape(len(masks), nb)
    bits = np.unpackbits(packed, axis=1, bitorder="little")[:, : tree.node_count]
    return np.ascontiguousarray(bits)


def enumerate_stopping_rules(tree: Tree) -> list:
    """All stopping rules in a fixed order (stop-at-the-root first).

    The order matches ``rule_count``; four steps already give 677 rules and
    five give 458330, which is where the cap sits.
    """
    mat = _rule_matrix(tree)
    return [StoppingRule(tree, mat[r]) for r in range(mat.shape[0])]


def _same_tree(a: AdaptedProcess, b: AdaptedProcess) -> None:
    if not isinstance(a, AdaptedProcess) or not isinstance(b, AdaptedProcess):
        raise ConfigError("expected AdaptedProcess inputs")
    if a.tree is not b.tree:
        raise ConfigError("processes live on different trees")


def _check_process(p, tree: Tree, what: str) -> None:
    if not isinstance(p, AdaptedProcess) or p.tree is not tree:
        raise ConfigError(f"{what} must be an AdaptedProcess on the given tree")
    if not np.all(np.isfinite(p.values)):
        raise ConfigError(f"{what} must be finite everywhere")


class _Solver:
    """Backward-sweep closure for one (driver, constraint, tree) triple.

    Resolves ``method='auto'`` to the constrained one-step minimizer when the
    constraint is z-only and convex, else to penalization at the largest
    stable level.  A zero constraint short-circuits to the unconstrained
    kernel under either name.
    """

    def __init__(self, g: FunctionSpec, phi: FunctionSpec, tree: Tree,
                 settings: SolverSettings | None = None, method: str = "auto",
                 penalty_level: float | None = None):
        settings = settings or DEFAULT_SETTINGS
        settings.validate()
        ensure_signature(g, Signature.GENERATOR, "driver")
        ensure_signature(phi, Signature.GENERATOR, "constraint")
        self.tree = tree
        self.settings = settings
        self.plain = phi.is_zero_literal()
        if not self.plain:
            _gate_constraint(phi, tree.config.horizon)
        if method == "auto":
            if self.plain:
                method = "direct"
            else:
                try:
                    _require_z_only_convex(phi)
                    method = "direct"
                except DomainError:
                    method = "penalized"
        if method not in ("direct", "penalized"):
            raise ConfigError(f"unknown method {method!r}; use auto, direct or penalized")
        self.name = method
        self.level = None
        self.schedule = None
        if self.plain:
            contraction_guard(g, tree, settings)
            self.program = g.program()
        elif method == "direct":
            _require_z_only_convex(phi)
            contraction_guard(g, tree, settings)
            monotone_guard(g, tree)
            self.zlo, self.zhi = zero_intervals(phi, tree)
            self.kappa = z_kappa(g, tree)
            self.program = g.program()
        else:
            if penalty_level is None:
                self.schedule = PenaltySchedule.from_caps(g, phi, tree, settings)
                self.level = self.schedule.levels[-1]
            else:
                self.level = float(penalty_level)
                if self.level <= 0.0:
                    raise ConfigError("penalty level must be positive")
            gn = penalized_generator(g, phi, self.level)
            contraction_guard(gn, tree, settings)
            monotone_guard(gn, tree)
            self.program = gn.program()

    def sweep(self, top_values, *, top_level=None, mode=K.MODE_PLAIN, x=None,
              stop=None, what="backward sweep"):
        """One kernel sweep; returns (values, continuation)."""
        if self.name == "direct" and not self.plain:
            values, _z, _du, _dd, cont, _it = backward_pass_direct(
                self.program, self.tree, self.settings, self.zlo, self.zhi,
                top_values=top_values, top_level=top_level, mode=mode, x=x,
                stop=stop, kappa_g=self.kappa, what=what,
            )
        else:
            values, _z, cont, _it = backward_pass(
                self.program, self.tree, self.settings, top_values=top_values,
                top_level=top_level, mode=mode, x=x, stop=stop, what=what,
            )
        return values, cont

    def batch(self, x: np.ndarray, rules: np.ndarray, what="rule table") -> np.ndarray:
        """Root value of ``x`` frozen at each rule (one matrix row per rule)."""
        x = np.ascontiguousarray(x, dtype=np.float64)
        rules = np.ascontiguousarray(rules, dtype=np.uint8)
        out = np.empty(rules.shape[0], dtype=np.float64)
        t = self.tree
        s = self.settings
        if self.name == "direct" and not self.plain:
            st, node, r = K.rule_values_direct(
                t.level_starts, t.stride, t.times, t.dt, t.sqrt_dt,
                self.program.codes, self.program.consts, s.picard_tol,
                s.picard_max_iter, s.z_tol, s.tie_eps, self.kappa,
                self.zlo, self.zhi, x, rules, out,
            )
        else:
            st, node, r = K.rule_values(
                t.level_starts, t.stride, t.times, t.dt, t.sqrt_dt,
                self.program.codes, self.program.consts, s.picard_tol,
                s.picard_max_iter, x, rules, out,
            )
        if st != K.OK:
            _raise_status(st, node, f"{what} (rule {r})")
        return out


def rule_value(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess, rule,
               tree: Tree, *, method: str = "auto",
               settings: SolverSettings | None = None,
               penalty_level: float | None = None) -> float:
    """Root constrained expectation of the reward frozen at the rule."""
    _check_process(x, tree, "reward")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    flags = rule_flags(rule, tree)
    check_rule_covers(tree, flags)
    values, _ = solver.sweep(x.leaf_values(), mode=K.MODE_FROZEN, x=x.values,
                             stop=flags, what="stopped value sweep")
    return float(values[0])


@dataclass(frozen=True)
class BruteForceResult:
    value: float
    rule: StoppingRule
    index: int
    count: int
    values: np.ndarray | None
    method: str


def brute_force_optimum(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess,
                        tree: Tree, *, method: str = "auto",
                        settings: SolverSettings | None = None,
                        penalty_level: float | None = None,
                        keep_values: bool = False) -> BruteForceResult:
    """Best stopped value over every rule; exact trees up to five steps.

    Ties go to the earliest rule in enumeration order, so stop-at-the-root
    wins any all-equal tie.
    """
    _check_process(x, tree, "reward")
    lo = float(np.min(x.values))
    if lo < 0.0:
        raise DomainError(f"reward must be nonnegative; its minimum is {lo:.6g}")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    return _brute(solver, x, keep_values)


def _brute(solver: _Solver, x: AdaptedProcess, keep_values: bool) -> BruteForceResult:
    rules = _rule_matrix(solver.tree)
    out = solver.batch(x.values, rules, what="exhaustive rule table")
    idx = int(np.argmax(out))
    return BruteForceResult(
        value=float(out[idx]),
        rule=StoppingRule(solver.tree, rules[idx]),
        index=idx,
        count=rules.shape[0],
        values=out if keep_values else None,
        method=solver.name,
    )


def threshold_rule(x: AdaptedProcess, value: AdaptedProcess, threshold: float) -> StoppingRule:
    """Stop once the reward reaches ``threshold`` times the value process."""
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0, 1), got {threshold}")
    _same_tree(x, value)
    return StoppingRule.from_region(x.tree, x.values >= threshold * value.values)


def exact_hit_rule(x: AdaptedProcess, value: AdaptedProcess,
                   tol: float = 1e-9) -> StoppingRule:
    """Stop the first time the reward is within ``tol`` of the value."""
    _same_tree(x, value)
    gap = np.abs(x.values - value.values)
    return StoppingRule.from_region(x.tree, gap <= tol * (1.0 + np.abs(value.values)))


@dataclass(frozen=True)
class ThresholdLimit:
    """Outcome of pushing the stopping threshold toward one."""

    rule: StoppingRule
    index: int
    stabilized: bool
    monotone_ok: bool
    stops_no_later_than_exact_hit: bool
    thresholds: tuple


def stabilized_threshold_rule(x: AdaptedProcess, value: AdaptedProcess,
                              thresholds=None) -> ThresholdLimit:
    """Threshold rules along an increasing schedule and their common tail.

    ``index`` is the first position from which every later threshold yields
    the same rule; ``stabilized`` says the tail has length at least two.
    Monotonicity is checked through region nesting (larger thresholds stop
    later), and the tail rule is compared against the reward-hits-value rule.
    """
    _same_tree(x, value)
    lams = DEFAULT_THRESHOLDS if thresholds is None else tuple(float(l) for l in thresholds)
    if len(lams) < 2:
        raise ConfigError("threshold schedule needs at least two entries")
    if any(not 0.0 < l < 1.0 for l in lams) or any(
        b <= a for a, b in zip(lams, lams[1:])
    ):
        raise ConfigError("thresholds must increase strictly inside (0, 1)")
    masks = [x.values >= lam * value.values for lam in lams]
    rules = [StoppingRule.from_region(x.tree, m) for m in masks]
    last = rules[-1]
    index = len(rules) - 1
    while index > 0 and rules[index - 1].same_as(last):
        index -= 1
    monotone_ok = all(
        not np.any(masks[k + 1] & ~masks[k]) for k in range(len(masks) - 1)
    )
    # An exact-hit node satisfies x >= lam * value up to roundoff; allow it.
    slack = 1e-12 * (1.0 + np.abs(value.values))
    near = x.values >= lams[-1] * value.values - slack
    star = np.abs(x.values - value.values) <= 1e-9 * (1.0 + np.abs(value.values))
    return ThresholdLimit(
        rule=last,
        index=index,
        stabilized=index <= len(rules) - 2,
        monotone_ok=monotone_ok,
        stops_no_later_than_exact_hit=not np.any(star & ~near),
        thresholds=lams,
    )


def stopped_value_probe(g: FunctionSpec, phi: FunctionSpec, value: AdaptedProcess,
                        rule, tree: Tree, *, method: str = "auto",
                        settings: SolverSettings | None = None,
                        penalty_level: float | None = None) -> "MartingaleReport":
    """Martingale defects of ``value`` frozen at the rule, under stopping.

    One frozen sweep over the rule's region must reproduce the frozen
    process at every node when ``value`` really is the value process and the
    rule stops no later than the reward hits it.  Both one-sided defects are
    reported; callers record them rather than assert on them.
    """
    _check_process(value, tree, "value process")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    return _stopped_probe(solver, value, rule)


def _stopped_probe(solver: _Solver, value: AdaptedProcess, rule) -> "MartingaleReport":
    tree = solver.tree
    frozen = stopped_process(value, rule)
    flags = rule_flags(rule, tree)
    swept, _ = solver.sweep(frozen.leaf_values(), mode=K.MODE_FROZEN,
                            x=frozen.values, stop=flags,
                            what="stopped value probe")
    # The sweep's intermediate values below a stop node never propagate (the
    # freeze overrides them), so the claim only covers nodes up to the hit.
    live = np.flatnonzero(reachable_nodes(tree, flags))
    diff = swept[live] - frozen.values[live]
    hi = int(np.argmax(diff))
    lo = int(np.argmin(diff))
    return MartingaleReport(
        super_defect=max(float(diff[hi]), 0.0) + 0.0,
        sub_defect=max(float(-diff[lo]), 0.0) + 0.0,
        super_node=int(live[hi]),
        super_target=tree.steps,
        sub_node=int(live[lo]),
        sub_target=tree.steps,
        levels_checked=tree.steps,
    )


def stopped_process(p: AdaptedProcess, rule) -> AdaptedProcess:
    """Freeze ``p`` from the rule's first hit onward (exact filtration only)."""
    tree = p.tree
    if not tree.is_path:
        raise DomainError("freezing a process path by path needs the exact filtration")
    flags = rule_flags(rule, tree)
    check_rule_covers(tree, flags)
    vals = np.array(p.values, dtype=np.float64)
    frozen = flags.astype(bool)
    cu, cd = tree.child_arrays()
    for i in range(tree.steps):
        sl = tree.level_slice(i)
        f = frozen[sl]
        if not np.any(f):
            continue
        src = np.flatnonzero(f) + sl.start
        vals[cu[sl][f]] = vals[src]
        vals[cd[sl][f]] = vals[src]
        frozen[cu[sl][f]] = True
        frozen[cd[sl][f]] = True
    return AdaptedProcess(tree, vals)


@dataclass(frozen=True)
class MartingaleReport:
    """Worst one-sided defects of a process against the expectation.

    ``super_defect`` is the largest E_s(P_t) - P_s over node pairs s < t
    (positive means the supermartingale property fails somewhere);
    ``sub_defect`` is the mirror image.  Node and target-level indices point
    at the worst pair for each side.
    """

    super_defect: float
    sub_defect: float
    super_node: int
    super_target: int
    sub_node: int
    sub_target: int
    levels_checked: int

    def is_supermartingale(self, tol: float = 1e-9) -> bool:
        return self.super_defect <= tol

    def is_martingale(self, tol: float = 1e-9) -> bool:
        return self.super_defect <= tol and self.sub_defect <= tol


def _martingale_defects(solver: _Solver, p: AdaptedProcess,
                        what: str) -> MartingaleReport:
    tree = solver.tree
    sup_d = sub_d = 0.0
    sup_node = sub_node = -1
    sup_t = sub_t = -1
    for t in range(1, tree.steps + 1):
        top = p.values[tree.level_slice(t)]
        values, _ = solver.sweep(top, top_level=t, what=what)
        cut = int(tree.level_starts[t])
        diff = values[:cut] - p.values[:cut]
        hi = int(np.argmax(diff))
        if diff[hi] > sup_d:
            sup_d, sup_node, sup_t = float(diff[hi]), hi, t
        lo = int(np.argmin(diff))
        if -diff[lo] > sub_d:
            sub_d, sub_node, sub_t = float(-diff[lo]), lo, t
    return MartingaleReport(
        super_defect=sup_d,
        sub_defect=sub_d,
        super_node=sup_node,
        super_target=sup_t,
        sub_node=sub_node,
        sub_target=sub_t,
        levels_checked=tree.steps,
    )


def supermartingale_check(g: FunctionSpec, phi: FunctionSpec, p: AdaptedProcess,
                          tree: Tree, *, method: str = "auto",
                          settings: SolverSettings | None = None,
                          penalty_level: float | None = None) -> MartingaleReport:
    """Both one-sided defects of ``p`` under the constrained expectation.

    Every pair of levels s < t is checked by re-solving from level t down
    and comparing against ``p`` on the earlier levels.
    """
    _check_process(p, tree, "process")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    return _martingale_defects(solver, p, "supermartingale check")


@dataclass(frozen=True)
class ThresholdRow:
    threshold: float
    rule: StoppingRule
    value: float


@dataclass(frozen=True)
class SnellReport:
    """Value process of a stopped reward plus the rule diagnostics."""

    tree: Tree
    method: str
    penalty_level: float | None
    reward: AdaptedProcess
    value: AdaptedProcess
    continuation: np.ndarray
    dominance_defect: float
    threshold_table: tuple
    exact_hit: StoppingRule | None
    stabilized: ThresholdLimit | None
    stabilized_value: float | None
    stabilized_equals_exact_hit: bool | None
    stopped_value_probe: MartingaleReport | None
    brute_value: float | None
    brute_index: int | None
    brute_rule: StoppingRule | None

    @property
    def root(self) -> float:
        return self.value.root


def snell_envelope(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess,
                   tree: Tree, *, method: str = "auto",
                   settings: SolverSettings | None = None,
                   penalty_level: float | None = None, thresholds=None,
                   analyze_rules: bool = True, brute: bool = False) -> SnellReport:
    """Smallest constrained supersolution dominating a nonnegative reward.

    With ``analyze_rules`` the report carries the threshold-rule table, the
    reward-hits-value rule, the stabilized threshold rule with its stopped
    value, and (exact trees) a martingale probe of the value process frozen
    at that rule.  The probe results are recorded, never enforced.  ``brute``
    adds the exhaustive oracle, capped at five steps.
    """
    _check_process(x, tree, "reward")
    lo = float(np.min(x.values))
    if lo < 0.0:
        raise DomainError(f"reward must be nonnegative; its minimum is {lo:.6g}")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    values, cont = solver.sweep(x.leaf_values(), mode=K.MODE_SNELL, x=x.values,
                                what="value process sweep")
    value = AdaptedProcess(tree, values)
    dominance = float(np.max(x.values - values))

    table = ()
    hit = stab = stab_value = equal = probe = None
    if analyze_rules:
        lams = DEFAULT_THRESHOLDS if thresholds is None else tuple(float(l) for l in thresholds)
        hit = exact_hit_rule(x, value)
        rules = [threshold_rule(x, value, lam) for lam in lams]
        if len(lams) >= 2:
            stab = stabilized_threshold_rule(x, value, lams)
        stack = [r.flags for r in rules] + ([stab.rule.flags] if stab else [])
        if stack:
            vals = solver.batch(x.values, np.stack(stack), what="threshold rule table")
            table = tuple(
                ThresholdRow(lam, rule, float(v))
                for lam, rule, v in zip(lams, rules, vals)
            )
        if stab is not None:
            stab_value = float(vals[-1])
            equal = stab.rule.same_as(hit)
            if tree.is_path:
                probe = _stopped_probe(solver, value, stab.rule)

    bv = bi = br = None
    if brute:
        res = _brute(solver, x, keep_values=False)
        bv, bi, br = res.value, res.index, res.rule

    return SnellReport(
        tree=tree,
        method=solver.name,
        penalty_level=solver.level,
        reward=x,
        value=value,
        continuation=cont,
        dominance_defect=dominance,
        threshold_table=table,
        exact_hit=hit,
        stabilized=stab,
        stabilized_value=stab_value,
        stabilized_equals_exact_hit=equal,
        stopped_value_probe=probe,
        brute_value=bv,
        brute_index=bi,
        brute_rule=br,
    )


def verify_value_identity(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess,
                          value: AdaptedProcess, threshold: float, tree: Tree, *,
                          method: str = "auto",
                          settings: SolverSettings | None = None,
                          penalty_level: float | None = None) -> float:
    """Max gap between the value process and its own stopped expectation.

    From every node, stopping at the first later node (the node itself
    included) where the reward reaches ``threshold`` times the value must
    reproduce the value exactly; one frozen sweep over the raw region checks
    all starting nodes at once.
    """
    if not 0.0 < threshold < 1.0:
        raise DomainError(f"threshold must be in (0, 1), got {threshold}")
    _check_process(x, tree, "reward")
    _check_process(value, tree, "value process")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    region = (x.values >= threshold * value.values).astype(np.uint8)
    check_rule_covers(tree, region)
    swept, _ = solver.sweep(value.leaf_values(), mode=K.MODE_FROZEN,
                            x=value.values, stop=region,
                            what="value identity sweep")
    return float(np.max(np.abs(swept - value.values)))


@dataclass(frozen=True)
class CandidateCheck:
    index: int
    accepted: bool
    reason: str | None
    dominance_defect: float
    super_defect: float | None
    excess: float | None
    minimal_ok: bool | None


@dataclass(frozen=True)
class MinimalityReport:
    """Value process compared against candidate supersolutions."""

    rows: tuple
    value_root: float
    tol: float

    @property
    def accepted_count(self) -> int:
        return sum(1 for r in self.rows if r.accepted)

    @property
    def passed(self) -> bool:
        return all(r.minimal_ok for r in self.rows if r.accepted)


def minimality_check(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess,
                     candidates, tree: Tree, *, value: AdaptedProcess | None = None,
                     method: str = "auto", settings: SolverSettings | None = None,
                     penalty_level: float | None = None,
                     tol: float = 1e-9) -> MinimalityReport:
    """Check the value process sits below every admissible candidate.

    A candidate is admissible when it dominates the reward and passes the
    supermartingale check; admissible candidates must then dominate the value
    process within ``tol``.
    """
    _check_process(x, tree, "reward")
    solver = _Solver(g, phi, tree, settings, method, penalty_level)
    if value is None:
        vals, _ = solver.sweep(x.leaf_values(), mode=K.MODE_SNELL, x=x.values,
                               what="value process sweep")
        value = AdaptedProcess(tree, vals)
    else:
        _check_process(value, tree, "value process")
    rows = []
    for i, cand in enumerate(candidates):
        _check_process(cand, tree, f"candidate {i}")
        dom = float(np.max(x.values - cand.values))
        if dom > tol:
            rows.append(CandidateCheck(i, False, "does not dominate the reward",
                                       dom, None, None, None))
            continue
        mr = _martingale_defects(solver, cand, f"candidate {i} supermartingale check")
        if mr.super_defect > tol:
            rows.append(CandidateCheck(i, False, "supermartingale property fails",
                                       dom, mr.super_defect, None, None))
            continue
        excess = float(np.max(value.values - cand.values))
        rows.append(CandidateCheck(i, True, None, dom, mr.super_defect,
                                   excess, excess <= tol))
    return MinimalityReport(rows=tuple(rows), value_root=value.root, tol=tol)


@dataclass(frozen=True)
class GameValueReport:
    """Stopper-vs-penalty ladder against the constrained value."""

    levels: tuple
    roots: tuple
    monotone_defect: float
    sup_root: float
    value_root: float
    gap: float


def stopper_controller_value(g: FunctionSpec, phi: FunctionSpec, x: AdaptedProcess,
                             tree: Tree, *, levels=None,
                             settings: SolverSettings | None = None) -> GameValueReport:
    """Sup over penalty levels of the classical stopped value.

    The stopper maximizes at each fixed level; pushing the level up the
    stability ladder should raise every node value, and the sup approaches
    the constrained value process root from below as the tree refines.
    ``monotone_defect`` is the worst nodewise drop between consecutive
    levels (zero up to solver noise when the ladder behaves).
    """
    settings = settings or DEFAULT_SETTINGS
    _check_process(x, tree, "reward")
    if float(np.min(x.values)) < 0.0:
        raise DomainError("reward must be nonnegative")
    if levels is None:
        levels = PenaltySchedule.from_caps(g, phi, tree, settings).levels
    levels = tuple(float(n) for n in levels)
    if not levels:
        raise ConfigError("need at least one penalty level")
    prev = None
    roots = []
    defect = 0.0
    for n in levels:
        gn = penalized_generator(g, phi, n)
        contraction_guard(gn, tree, settings)
        monotone_guard(gn, tree)
        values, _, _, _ = backward_pass(gn.program(), tree, settings,
                                        top_values=x.leaf_values(), mode=K.MODE_SNELL,
                                        x=x.values, what=f"stopper value at level {n:g}")
        roots.append(float(values[0]))
        if prev is not None:
            defect = max(defect, float(np.max(prev - values)))
        prev = values
    report = snell_envelope(g, phi, x, tree, settings=settings, analyze_rules=False)
    sup_root = max(roots)
    return GameValueReport(
        levels=levels,
        roots=tuple(roots),
        monotone_defect=defect,
        sup_root=sup_root,
        value_root=report.root,
        gap=float(report.root - sup_root),
    )
