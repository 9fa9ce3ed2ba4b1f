import numpy as np
import pytest

from stoplab import (
    AdaptedProcess,
    ConfigError,
    DomainError,
    EvalError,
    Signature,
    SolverError,
    SolverSettings,
    StabilityError,
    TreeConfig,
    build_tree,
    parse,
    solve_bsde,
    solve_to_stopping,
    supersolution_residual,
)
from stoplab.bsde import backward_pass, check_rule_covers, reachable_nodes

ZERO = parse("0", Signature.GENERATOR, lipschitz=0.0, convex=True)


def path_tree(steps, horizon=1.0):
    return build_tree(TreeConfig(steps=steps, horizon=horizon, kind="path"))


def recombining_tree(steps, horizon=1.0):
    return build_tree(TreeConfig(steps=steps, horizon=horizon, kind="recombining"))


def test_driverless_quadratic_matches_horizon():
    # E[W_T^2] = T, and the pairwise-average scheme reproduces it.
    for tree in (recombining_tree(64), path_tree(10), recombining_tree(7, horizon=2.5)):
        sol = solve_bsde(ZERO, tree.w[tree.leaf_start:] ** 2, tree)
        assert sol.root == pytest.approx(tree.config.horizon, abs=1e-12)


def test_driverless_abs_matches_leaf_mean():
    tree = path_tree(9)
    leaves = np.abs(tree.w[tree.leaf_start:])
    sol = solve_bsde(ZERO, leaves, tree)
    assert sol.root == pytest.approx(float(np.mean(leaves)), abs=1e-12)


def test_identity_terminal_gives_unit_z():
    tree = path_tree(6)
    sol = solve_bsde(ZERO, tree.w[tree.leaf_start:], tree)
    assert np.allclose(sol.y.values, tree.w, atol=1e-14)
    assert np.allclose(sol.z, 1.0, atol=1e-14)


def test_linear_z_driver_one_step():
    # One step, terminal w: z = 1, so y = 0 + z * dt = 1 at the root.
    g = parse("z", Signature.GENERATOR, lipschitz=1.0, convex=True)
    sol = solve_bsde(g, np.array([1.0, -1.0]), path_tree(1))
    assert sol.root == pytest.approx(1.0, abs=1e-12)


def test_picard_iterations_recorded():
    tree = path_tree(4)
    terminal = tree.w[tree.leaf_start:] ** 2
    lazy = solve_bsde(ZERO, terminal, tree)
    busy = solve_bsde(parse("0.5*y", Signature.GENERATOR, lipschitz=0.5, convex=True),
                      terminal, tree)
    assert int(lazy.iterations.max()) >= 1
    assert int(busy.iterations.max()) > int(lazy.iterations.max())


def test_picard_budget_exhaustion():
    g = parse("0.5*y", Signature.GENERATOR, lipschitz=0.5, convex=True)
    tight = SolverSettings(picard_max_iter=2)
    tree = path_tree(1)
    with pytest.raises(SolverError):
        solve_bsde(g, np.array([4.0, 1.0]), tree, tight)


def test_residual_zero_on_solution_and_sensitive():
    tree = path_tree(5)
    g = parse("0.25*y + 0.5*z", Signature.GENERATOR, lipschitz=0.5, convex=True)
    sol = solve_bsde(g, np.abs(tree.w[tree.leaf_start:]), tree)
    rep = sol.residual()
    assert rep.max_abs_residual <= 1e-11
    assert rep.min_dc == 0.0

    bumped = sol.y.values.copy()
    bumped[0] += 1e-3
    rep2 = supersolution_residual(AdaptedProcess(tree, bumped), sol.z,
                                  sol.dc_up, sol.dc_dn, g)
    # The bump feeds back through the driver term: 1e-3 * (1 - 0.25 dt).
    assert rep2.max_abs_residual == pytest.approx(1e-3 * (1 - 0.25 * tree.dt), rel=1e-9)


def test_residual_flags_negative_dc():
    tree = path_tree(3)
    sol = solve_bsde(ZERO, tree.w[tree.leaf_start:] ** 2, tree)
    dc = sol.dc_up.copy()
    dc[0] = -1e-6
    rep = supersolution_residual(sol.y, sol.z, dc, sol.dc_dn, ZERO)
    assert rep.min_dc == pytest.approx(-1e-6)


def test_contraction_guard_rejects_stiff_driver():
    g = parse("5*y", Signature.GENERATOR, lipschitz=5.0, convex=True)
    with pytest.raises(StabilityError):
        solve_bsde(g, np.array([1.0, 1.0]), path_tree(1))
    # A fine grid restores the contraction.
    tree = path_tree(12, horizon=1.0)
    assert solve_bsde(g, np.ones(tree.n_leaves), tree).root > 1.0


def test_backward_pass_rejects_bad_terminal():
    tree = path_tree(2)
    prog = ZERO.program()
    with pytest.raises(ConfigError):
        backward_pass(prog, tree, SolverSettings(), top_values=np.zeros(3))
    with pytest.raises(ConfigError):
        backward_pass(prog, tree, SolverSettings(),
                      top_values=np.array([0.0, np.nan, 0.0, 0.0]))


def test_kernel_eval_error_surfaces():
    prog = parse("1/y", Signature.GENERATOR).program()
    with pytest.raises(EvalError):
        backward_pass(prog, path_tree(1), SolverSettings(),
                      top_values=np.array([1.0, -1.0]))


def test_reachability_and_coverage():
    tree = path_tree(2)
    flags = np.zeros(tree.node_count, dtype=np.uint8)
    with pytest.raises(DomainError):
        check_rule_covers(tree, flags)

    flags[1] = 1          # stop on the up branch at level 1
    flags[5] = flags[6] = 1  # and at the two leaves below the down branch
    check_rule_covers(tree, flags)
    reached = reachable_nodes(tree, flags)
    assert reached.tolist() == [True, True, True, False, False, True, True]


def test_stop_at_root_returns_reward_there():
    tree = path_tree(3)
    rng = np.random.default_rng(5)
    x = AdaptedProcess(tree, rng.uniform(0.0, 2.0, tree.node_count))
    flags = np.zeros(tree.node_count, dtype=np.uint8)
    flags[0] = 1
    g = parse("0.25*y + 0.5*z", Signature.GENERATOR, lipschitz=0.5, convex=True)
    assert solve_to_stopping(g, x, flags, tree) == x.root


def test_stop_at_leaves_matches_plain_solve():
    tree = path_tree(4)
    rng = np.random.default_rng(6)
    x = AdaptedProcess(tree, rng.uniform(0.0, 2.0, tree.node_count))
    flags = np.zeros(tree.node_count, dtype=np.uint8)
    flags[tree.leaf_start:] = 1
    g = parse("0.5*abs(z)", Signature.GENERATOR, lipschitz=0.5, convex=True)
    frozen = solve_to_stopping(g, x, flags, tree)
    plain = solve_bsde(g, x.leaf_values(), tree).root
    assert frozen == pytest.approx(plain, abs=1e-13)


def test_settings_validation():
    with pytest.raises(ConfigError):
        SolverSettings(picard_tol=0.0).validate()
    with pytest.raises(ConfigError):
        SolverSettings(picard_max_iter=0).validate()
    with pytest.raises(ConfigError):
        SolverSettings(contraction_limit=1.5).validate()
    with pytest.raises(ConfigError):
        SolverSettings(z_tol=0.0).validate()
