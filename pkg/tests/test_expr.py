import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from stoplab.errors import EvalError, ParseError, SignatureError
from stoplab.expr import FunctionSpec, Signature, combine_sum, ensure_signature, parse


def ev(text, **env):
    return parse(text, Signature.GENERATOR).evaluate(**env)


def test_numbers_and_precedence():
    assert ev("2 + 3 * 4") == 14.0
    assert ev("(2 + 3) * 4") == 20.0
    assert ev("2 - 3 - 4") == -5.0
    assert ev("12 / 4 / 3") == 1.0
    assert ev("-2 * 3") == -6.0
    assert ev("1e-3 + 1") == 1.001


def test_variables_by_signature():
    assert ev("t + 2*y - z", t=1.0, y=2.0, z=3.0) == 2.0
    f = parse("t * w", Signature.REWARD)
    assert f.evaluate(t=2.0, w=3.0) == 6.0


def test_functions():
    assert ev("abs(-3)") == 3.0
    assert ev("pos(-2)") == 0.0
    assert ev("pos(2)") == 2.0
    assert ev("neg(-2)") == 2.0
    assert ev("neg(2)") == 0.0
    assert ev("max(1, 2)") == 2.0
    assert ev("min(1, 2)") == 1.0
    assert ev("sqrt(9)") == 3.0
    assert ev("exp(0)") == 1.0
    assert ev("exp(1)") == pytest.approx(math.e)


def test_reward_signature_rejects_generator_vars():
    with pytest.raises(SignatureError):
        parse("y + z", Signature.REWARD)
    with pytest.raises(SignatureError):
        parse("w", Signature.GENERATOR)


def test_parse_errors_carry_position():
    with pytest.raises(ParseError) as err:
        parse("1 + * 2")
    assert "offset" in str(err.value)
    with pytest.raises(ParseError):
        parse("")
    with pytest.raises(ParseError):
        parse("abs(1, 2)")
    with pytest.raises(ParseError):
        parse("max(1)")
    with pytest.raises(ParseError):
        parse("spam(1)")
    with pytest.raises(ParseError):
        parse("(1 + 2")


def test_eval_array_matches_scalar():
    f = parse("0.5*abs(z) + pos(y - 1) + t")
    t = np.linspace(0.0, 1.0, 7)
    y = np.linspace(-2.0, 2.0, 7)
    z = np.linspace(-3.0, 3.0, 7)
    arr = f.eval_array(t=t, y=y, z=z)
    for i in range(7):
        assert arr[i] == f.evaluate(t=t[i], y=y[i], z=z[i])


def test_division_by_zero_is_eval_error():
    f = parse("1 / z")
    with pytest.raises(EvalError):
        f.evaluate(t=0.0, y=0.0, z=0.0)
    with pytest.raises(EvalError):
        f.eval_array(t=np.zeros(3), y=np.zeros(3), z=np.zeros(3))


def test_sqrt_of_negative_is_eval_error():
    f = parse("sqrt(z)")
    with pytest.raises(EvalError):
        f.evaluate(t=0.0, y=0.0, z=-1.0)


def test_zero_literal_and_variable_tracking():
    assert parse("0").is_zero_literal()
    assert not parse("0 + z").is_zero_literal()
    assert parse("abs(z)").depends_only_on_z()
    assert not parse("abs(z) + y").depends_only_on_z()
    assert parse("abs(z)").variables() == {"z"}
    assert parse("t + y*z").variables() == {"t", "y", "z"}


def test_canonical_round_trip_fixed_cases():
    for text in ("0.5*abs(z)+pos(y-1)", "t*(y+z)", "-(y - z) / 2", "min(abs(z), 1)"):
        f = parse(text)
        g = parse(f.canonical())
        assert g.canonical() == f.canonical()
        env = {"t": 0.3, "y": -1.2, "z": 0.7}
        assert g.evaluate(**env) == pytest.approx(f.evaluate(**env), abs=0.0)


def _expr_strings():
    leaf = st.sampled_from(["t", "y", "z", "1", "2", "0.5"])
    unary = st.sampled_from(["abs", "pos", "neg"])

    def extend(children):
        return st.one_of(
            st.tuples(children, st.sampled_from(["+", "-", "*"]), children).map(
                lambda p: f"({p[0]} {p[1]} {p[2]})"
            ),
            st.tuples(unary, children).map(lambda p: f"{p[0]}({p[1]})"),
            st.tuples(children, children).map(lambda p: f"max({p[0]}, {p[1]})"),
        )

    return st.recursive(leaf, extend, max_leaves=12)


@given(_expr_strings())
@settings(max_examples=150, deadline=None)
def test_canonical_round_trip_property(text):
    f = parse(text)
    g = parse(f.canonical())
    assert g.canonical() == f.canonical()
    env = {"t": 0.25, "y": -0.75, "z": 1.5}
    assert g.evaluate(**env) == f.evaluate(**env)


def test_axis_lipschitz_probes_per_horizon():
    f = parse("0.5*abs(z) + t*y")
    ly1, lz1 = f.axis_lipschitz(1.0)
    ly2, lz2 = f.axis_lipschitz(2.0)
    assert lz1 == pytest.approx(0.5, abs=1e-9)
    assert lz2 == pytest.approx(0.5, abs=1e-9)
    assert ly1 == pytest.approx(1.0, abs=1e-9)   # slope in y peaks at t = horizon
    assert ly2 == pytest.approx(2.0, abs=1e-9)


def test_combine_sum_builds_penalized_driver():
    g = parse("0.5*y")
    phi = parse("abs(z)")
    gn = combine_sum(g, 4.0, phi)
    assert gn.evaluate(t=0.0, y=2.0, z=-3.0) == 1.0 + 12.0
    # adding a zero constraint returns the driver untouched
    assert combine_sum(g, 4.0, parse("0")) is g


def test_ensure_signature_message_names_role():
    f = parse("abs(w)", Signature.REWARD)
    with pytest.raises(SignatureError) as err:
        ensure_signature(f, Signature.GENERATOR, "driver")
    assert "driver" in str(err.value)


def test_declared_metadata_round_trip():
    f = parse("abs(z)", lipschitz=1.0, convex=True)
    assert f.declared_lipschitz == 1.0
    assert f.declared_convex is True
    assert isinstance(f, FunctionSpec)
