import pytest

from stoplab import (
    A3_TOL,
    CONSTRAINTS,
    GENERATORS,
    Signature,
    check_structure,
    constraint,
    generator,
    parse,
    probe_positive_homogeneity,
)


def test_constraints_vanish_at_zero_z():
    for name in CONSTRAINTS:
        rep = check_structure(constraint(name))
        assert rep.vanishes_at_zero_z, name
        assert rep.max_abs_at_zero_z <= A3_TOL


def test_offset_constraint_fails_rest_screen():
    bad = parse("abs(z) + 1", Signature.GENERATOR)
    rep = check_structure(bad)
    assert not rep.vanishes_at_zero_z
    assert rep.max_abs_at_zero_z == pytest.approx(1.0)


def test_lipschitz_estimates_match_declared():
    for table, make in ((GENERATORS, generator), (CONSTRAINTS, constraint)):
        for name, entry in table.items():
            rep = check_structure(make(name))
            assert rep.lipschitz_y == pytest.approx(entry.lipschitz_y, abs=1e-9)
            assert rep.lipschitz_z == pytest.approx(entry.lipschitz_z, abs=1e-9)
            assert rep.lipschitz == pytest.approx(entry.lipschitz, abs=1e-9)


def test_convexity_counter():
    assert check_structure(generator("abs-z")).convex_ok
    rep = check_structure(parse("neg(abs(z) - 1)", Signature.GENERATOR))
    assert not rep.convex_ok
    assert rep.convexity_violations > 0


def test_growth_constant_along_rest_axis():
    # f(t, y, 0) = 1 + 0.5|y| gives l0 = 1 once the 0.5 slope is subtracted.
    rep = check_structure(parse("1 + 0.5*abs(y) + abs(z)", Signature.GENERATOR))
    assert rep.growth_ok
    assert rep.growth_l0 == pytest.approx(1.0, abs=1e-9)
    assert check_structure(generator("zero")).growth_l0 == 0.0


def test_report_records_probe_box():
    rep = check_structure(generator("abs-z"), box=(-2.0, 2.0), points=17)
    assert rep.box == (-2.0, 2.0)
    assert rep.points_per_axis == 17
    assert rep.source == "0.5*abs(z)"


def test_homogeneity_probe_matches_catalog():
    for table, make in ((GENERATORS, generator), (CONSTRAINTS, constraint)):
        for name, entry in table.items():
            assert probe_positive_homogeneity(make(name)) == entry.positively_homogeneous, name


def test_homogeneity_probe_rejects_affine():
    assert not probe_positive_homogeneity(parse("abs(z) + 1", Signature.GENERATOR))


def test_terminal_signature_rejected():
    from stoplab import SignatureError

    with pytest.raises(SignatureError):
        check_structure(parse("w*w", Signature.REWARD))
