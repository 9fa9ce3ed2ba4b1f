import pytest

from stoplab import (
    DomainError,
    Signature,
    TreeConfig,
    build_tree,
    constraint,
    generator,
    parse,
    property_suite,
)
from stoplab.properties import IDENTITY_NAMES, TOL_DIRECT, TOL_PENALIZED


def path_tree(steps):
    return build_tree(TreeConfig(steps=steps, horizon=1.0, kind="path"))


def test_suite_passes_with_both_methods():
    rep = property_suite(generator("zero"), constraint("z-zero"), path_tree(4),
                         trials=25, seed=7, ladder_trials=5)
    assert rep.passed
    methods = {r.method for r in rep.results}
    assert methods == {"penalized", "direct"}
    assert len(rep.results) == 2 * len(IDENTITY_NAMES)
    for r in rep.results:
        assert r.failures == 0
        assert r.tolerance == (TOL_DIRECT if r.method == "direct" else TOL_PENALIZED)
    # Schedule (1, 2) gives two recorded rungs per identity.
    assert all(len(rows) == 2 for name, rows in rep.ladder.items() if rows)
    assert rep.n_fixed == pytest.approx(2.0)
    assert rep.worst() >= 0.0


def test_self_preservation_screen():
    rep = property_suite(generator("linear-y"), constraint("z-zero"), path_tree(4),
                         trials=10, seed=1, ladder_trials=0)
    by_name = {(r.name, r.method): r for r in rep.results}
    skipped = by_name[("self_preserving", "penalized")]
    assert skipped.skipped and "constants" in skipped.reason
    # The origin is still preserved, so the 1-0 law runs and passes.
    law = by_name[("zero_one_law", "penalized")]
    assert not law.skipped and law.passed
    assert rep.passed


def test_convexity_screen():
    bent = parse("min(abs(z), 1)", Signature.GENERATOR, lipschitz=1.0)
    rep = property_suite(bent, constraint("none"), path_tree(4),
                         trials=10, seed=2, ladder_trials=0)
    conv = next(r for r in rep.results if r.name == "convexity")
    assert conv.skipped and "convex" in conv.reason
    assert rep.passed


def test_suite_is_deterministic():
    a = property_suite(generator("abs-z"), constraint("z-nonneg"), path_tree(4),
                       trials=15, seed=3)
    b = property_suite(generator("abs-z"), constraint("z-nonneg"), path_tree(4),
                       trials=15, seed=3)
    assert [(r.name, r.method, r.worst_gap, r.failures) for r in a.results] == \
           [(r.name, r.method, r.worst_gap, r.failures) for r in b.results]
    assert a.ladder == b.ladder


def test_suite_requires_path_tree():
    tree = build_tree(TreeConfig(steps=4, horizon=1.0, kind="recombining"))
    with pytest.raises(DomainError):
        property_suite(generator("zero"), constraint("z-zero"), tree, trials=5)


def test_y_dependent_constraint_runs_penalized_only():
    phi = parse("abs(z)*(1 + 0*y)", Signature.GENERATOR, lipschitz=1.0, convex=True)
    rep = property_suite(generator("zero"), phi, path_tree(3),
                         trials=10, seed=4, ladder_trials=0)
    assert {r.method for r in rep.results} == {"penalized"}
    assert rep.passed
