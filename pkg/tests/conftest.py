import numpy as np
import pytest
from hypothesis import strategies as st

from daeident import expr as ex
from daeident.expr import Symbol

A, B, C = (Symbol(n, "state") for n in "abc")
VARS = (A, B, C)


def _leaf():
    return st.one_of(
        st.sampled_from([ex.sym(s) for s in VARS]),
        st.floats(-3, 3, allow_nan=False).map(lambda v: ex.const(round(v, 3))),
    )


def _grow(children):
    bin_ops = st.sampled_from([ex.Add.make, ex.Mul.make, lambda a, b: ex.Add.make(a, ex.Neg.make(b))])
    return st.one_of(
        st.tuples(bin_ops, children, children).map(lambda t: t[0](t[1], t[2])),
        # quotient with a denominator bounded away from zero
        st.tuples(children, children).map(
            lambda t: ex.Div.make(t[0], ex.Add.make(ex.const(1.5), ex.Func.make("sin", t[1])))
        ),
        st.tuples(st.sampled_from(["sin", "cos", "atan"]), children).map(lambda t: ex.Func.make(t[0], t[1])),
        children.map(lambda c: ex.Func.make("exp", ex.Func.make("sin", c))),
        children.map(lambda c: ex.Pow.make(c, ex.const(2.0))),
        children.map(ex.Neg.make),
    )


# smooth trees over a, b, c that evaluate finitely everywhere
smooth_exprs = st.recursive(_leaf(), _grow, max_leaves=12)

polynomial_exprs = st.recursive(
    st.one_of(st.sampled_from([ex.sym(s) for s in VARS]), st.integers(-3, 3).map(ex.const)),
    lambda ch: st.tuples(st.sampled_from([ex.Add.make, ex.Mul.make]), ch, ch).map(lambda t: t[0](t[1], t[2])),
    max_leaves=10,
)

bindings = st.tuples(*(st.floats(-2, 2, allow_nan=False) for _ in VARS)).map(lambda v: dict(zip(VARS, v)))


@pytest.fixture(scope="session")
def reactor():
    from daeident import scenarios

    return scenarios.load("reactor")


@pytest.fixture(scope="session")
def pendulum():
    from daeident import scenarios

    return scenarios.load("pendulum")


@pytest.fixture(scope="session")
def linear4():
    from daeident import scenarios

    return scenarios.load("linear4")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
