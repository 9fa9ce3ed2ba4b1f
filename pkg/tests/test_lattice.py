import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stoplab.errors import CapacityError, ConfigError, DomainError
from stoplab.expr import Signature, parse
from stoplab.lattice import (
    PATH_STEP_CAP,
    AdaptedProcess,
    TreeConfig,
    build_tree,
    conditional_expectation,
    realize_reward,
)


def path_tree(steps, horizon=1.0):
    return build_tree(TreeConfig(steps=steps, horizon=horizon, kind="path"))


def recomb_tree(steps, horizon=1.0):
    return build_tree(TreeConfig(steps=steps, horizon=horizon, kind="recombining"))


def test_path_tree_counts():
    tree = path_tree(3)
    assert tree.node_count == 15
    assert tree.leaf_start == 7
    assert tree.n_leaves == 8
    assert list(tree.level_starts) == [0, 1, 3, 7, 15]
    assert tree.stride == 2


def test_recombining_tree_counts():
    tree = recomb_tree(3)
    assert tree.node_count == 10
    assert tree.leaf_start == 6
    assert tree.n_leaves == 4
    assert list(tree.level_starts) == [0, 1, 3, 6, 10]
    assert tree.stride == 1


def test_increments_have_size_sqrt_dt():
    for tree in (path_tree(4, horizon=2.0), recomb_tree(4, horizon=2.0)):
        assert tree.dt == 0.5
        cu, cd = tree.child_arrays()
        for node in range(tree.leaf_start):
            up = tree.w[cu[node]] - tree.w[node]
            dn = tree.w[cd[node]] - tree.w[node]
            assert up == pytest.approx(tree.sqrt_dt, abs=1e-15)
            assert dn == pytest.approx(-tree.sqrt_dt, abs=1e-15)


def test_children_match_child_arrays():
    for tree in (path_tree(4), recomb_tree(4)):
        cu, cd = tree.child_arrays()
        for node in range(tree.leaf_start):
            assert tree.children(node) == (cu[node], cd[node])
        with pytest.raises(DomainError):
            tree.children(tree.leaf_start)


def test_path_parent_inverts_children():
    tree = path_tree(4)
    for node in range(1, tree.node_count):
        p = tree.parent(node)
        assert node in tree.children(p)
    with pytest.raises(DomainError):
        tree.parent(0)
    with pytest.raises(DomainError):
        recomb_tree(3).parent(2)


def test_level_bookkeeping():
    tree = path_tree(3)
    assert tree.level_of(0) == 0
    assert tree.level_of(6) == 2
    assert tree.level_of(14) == 3
    assert tree.level_slice(2) == slice(3, 7)
    with pytest.raises(DomainError):
        tree.level_slice(4)
    assert np.all(tree.t_node[tree.level_slice(2)] == tree.times[2])


def test_recombining_w_is_binomial():
    tree = recomb_tree(4)
    sl = tree.level_slice(4)
    expect = (4 - 2.0 * np.arange(5)) * tree.sqrt_dt
    assert np.allclose(tree.w[sl], expect, atol=0.0)


def test_path_capacity_cap():
    with pytest.raises(CapacityError):
        path_tree(PATH_STEP_CAP + 1)
    # recombining trees do not share the cap
    recomb_tree(PATH_STEP_CAP + 1)


def test_tree_config_validation():
    with pytest.raises(ConfigError):
        build_tree(TreeConfig(steps=0, horizon=1.0, kind="path"))
    with pytest.raises(ConfigError):
        build_tree(TreeConfig(steps=2, horizon=-1.0, kind="path"))
    with pytest.raises(ConfigError):
        build_tree(TreeConfig(steps=2, horizon=1.0, kind="trinomial"))


def test_tree_arrays_are_read_only():
    tree = path_tree(2)
    with pytest.raises(ValueError):
        tree.w[0] = 1.0
    with pytest.raises(ValueError):
        tree.level_starts[0] = 1


def test_adapted_process_copies_and_freezes():
    tree = path_tree(2)
    raw = np.zeros(tree.node_count)
    p = AdaptedProcess(tree, raw)
    raw[0] = 99.0
    assert p.root == 0.0
    with pytest.raises(ValueError):
        p.values[0] = 1.0
    with pytest.raises(ConfigError):
        AdaptedProcess(tree, np.zeros(3))


def test_leaf_and_level_views():
    tree = path_tree(2)
    p = AdaptedProcess(tree, np.arange(tree.node_count, dtype=float))
    assert list(p.leaf_values()) == [3.0, 4.0, 5.0, 6.0]
    assert list(p.level_values(1)) == [1.0, 2.0]
    assert p.at(3) == 3.0
    with pytest.raises(DomainError):
        p.at(99)


def test_conditional_expectation_is_child_mean():
    tree = path_tree(2)
    p = AdaptedProcess(tree, np.arange(tree.node_count, dtype=float))
    assert conditional_expectation(p, 1) == 3.5
    with pytest.raises(DomainError):
        conditional_expectation(p, tree.leaf_start)


def test_realize_reward_flags():
    tree = path_tree(3)
    x, flags = realize_reward(parse("abs(w)", Signature.REWARD), tree)
    assert not flags.has_negative
    assert flags.max_value == pytest.approx(3.0 * tree.sqrt_dt)
    assert np.allclose(x.values, np.abs(tree.w), atol=0.0)

    y, flags2 = realize_reward(parse("w", Signature.REWARD), tree, bound=1.0)
    assert flags2.has_negative
    assert flags2.exceeds_bound


@given(st.integers(min_value=1, max_value=8), st.sampled_from(["path", "recombining"]))
@settings(max_examples=40, deadline=None)
def test_every_interior_node_has_children_inside_next_level(steps, kind):
    tree = build_tree(TreeConfig(steps=steps, horizon=1.0, kind=kind))
    cu, cd = tree.child_arrays()
    for i in range(tree.steps):
        sl = tree.level_slice(i)
        nxt = tree.level_slice(i + 1)
        assert np.all(cu[sl] >= nxt.start) and np.all(cu[sl] < nxt.stop)
        assert np.all(cd[sl] >= nxt.start) and np.all(cd[sl] < nxt.stop)
        assert np.all(cd[sl] == cu[sl] + 1)
