import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from clrpool.errors import DomainError, ParseError, UnknownVariable
from clrpool.terms import (
    Log,
    Power,
    Product,
    Var,
    evaluate_columns,
    evaluate_term,
    max_power,
    parse_term_spec,
    parse_terms,
    variables,
)

names = st.from_regex(r"[a-z][a-z0-9_]{0,5}", fullmatch=True).filter(lambda s: s != "log")
factors = st.one_of(
    names.map(Var),
    names.map(Log),
    st.builds(Power, names, st.integers(2, 5)),
)
terms = st.one_of(factors, st.builds(Product, factors, factors))


@pytest.mark.parametrize("text, expected", [
    ("log(age)", Log("age")),
    ("log(age):marker", Product(Log("age"), Var("marker"))),
    ("age^3", Power("age", 3)),
    ("gender", Var("gender")),
    (" log ( age ) : age ^ 2 ", Product(Log("age"), Power("age", 2))),
])
def test_parse_examples(text, expected):
    assert parse_term_spec(text) == expected


def test_unclosed_log_reports_offset():
    with pytest.raises(ParseError) as exc:
        parse_term_spec("log(age")
    assert exc.value.position == 7
    assert "offset 7" in str(exc.value)


@pytest.mark.parametrize("text", ["", "age^1", "age^", "a:b:c", "1age", "log()", "a:"])
def test_malformed_terms_rejected(text):
    with pytest.raises(ParseError):
        parse_term_spec(text)


@given(terms)
def test_render_round_trip(t):
    assert parse_term_spec(t.render()) == t


@given(terms, st.dictionaries(names, st.floats(0.1, 50), min_size=1))
def test_evaluation_is_pure(t, values):
    values = {n: values.get(n, 1.5) for n in variables(t)}
    a = evaluate_term(values, t)
    b = evaluate_term(dict(values), t)
    assert a == b or (math.isnan(a) and math.isnan(b))


def test_evaluate_examples():
    assert evaluate_term({"age": math.e}, Log("age")) == 1.0
    assert evaluate_term({"gender": 0}, Var("gender")) == 0.0
    v = evaluate_term({"age": 56, "marker": 116}, parse_term_spec("log(age):marker"))
    assert v == pytest.approx(math.log(56) * 116)
    assert round(v, 2) == 466.94
    assert evaluate_term({"x": 3}, Power("x", 3)) == 27.0


def test_log_domain_and_unknown_variable():
    with pytest.raises(DomainError):
        evaluate_term({"age": 0}, Log("age"))
    with pytest.raises(DomainError):
        evaluate_term({"age": -2}, Log("age"))
    with pytest.raises(UnknownVariable):
        evaluate_term({"age": 2}, Var("weight"))


def test_product_uses_only_its_own_subject():
    t = parse_term_spec("log(age):marker")
    a = {"age": 40.0, "marker": 100.0}
    b = {"age": 30.0, "marker": 90.0}
    before = evaluate_term(a, t)
    b["age"], b["marker"] = 99.0, -5.0
    assert evaluate_term(a, t) == before


@given(terms, st.lists(st.floats(0.05, 40), min_size=1, max_size=6))
def test_vector_evaluation_bit_identical(t, xs):
    import numpy as np
    cols = {n: np.array(xs) * (i + 1) for i, n in enumerate(sorted(set(variables(t))))}
    vec = evaluate_columns(cols, t)
    for k in range(len(xs)):
        assert vec[k] == evaluate_term({n: c[k] for n, c in cols.items()}, t)


def test_max_power_and_variables():
    assert max_power(Var("a")) == 1
    assert max_power(Power("a", 3)) == 3
    assert max_power(parse_term_spec("a^2:a")) == 3
    assert max_power(parse_term_spec("a^2:b")) == 2
    assert variables(parse_term_spec("log(a):b")) == ("a", "b")
    assert parse_terms(["a", Var("b")]) == [Var("a"), Var("b")]
