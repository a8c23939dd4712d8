import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from daeident import expr as ex
from daeident import scenarios
from daeident.linear import build_block_O
from daeident.model import augment, model_from_dict
from daeident.stack import build_stack, dump, identifiability_blocks, observability_blocks


def _rows(s):
    return s.Fbar + s.Hbar


def _binding(model, s, rng, scale=1.0):
    syms = set()
    for e in _rows(s):
        syms |= ex.free_symbols(e)
    vals = model.known_values()
    return {**{v: rng.uniform(0.5, 1.5) * scale for v in syms if v not in vals}, **vals}


def test_reactor_stack_sizes(reactor):
    m = reactor.model
    s = build_stack(m, 2, 2)
    assert len(s.Fbar) == 9 and len(s.Hbar) == 3 and s.sigma == 3
    assert [ex.to_string(h) for h in s.Hbar] == ["x1", "x1'", "x1''"]
    sa = build_stack(augment(m, ["T_c"]), 2, 2)
    assert len(sa.Fbar) == 12
    # theta rows are pinned: level 0 row is the literal zero rate, higher ones vanish too
    assert all(sa.level(k)[3] is ex.ZERO for k in range(3))


def test_zero_order_stack_is_the_model(reactor):
    m = reactor.model
    s = build_stack(m, 0, 0)
    assert s.Fbar == m.residuals() and s.Hbar == m.outputs and s.sigma == 1


def test_stack_is_cached_and_reused(reactor):
    m = reactor.model
    assert build_stack(m, 1, 1) is build_stack(m, 1, 1)
    s3 = build_stack(m, 3, 1)
    assert s3.Fbar[: 2 * m.n] == build_stack(m, 1, 1).Fbar


def test_negative_order_rejected(reactor):
    with pytest.raises(ValueError):
        build_stack(reactor.model, -1, 0)


def test_linear_levels_are_A_x_minus_E_xdot(linear4, rng):
    m = linear4.model
    d = linear4.linear
    s = build_stack(m, 3, 0)
    tab = m.table
    for _ in range(5):
        X = rng.normal(size=(5, 4))
        b = dict(m.known_values())
        for k in range(5):
            for i, x in enumerate(m.states):
                b[tab.derivative(x, k)] = X[k, i]
        for k in range(4):
            got = np.array([ex.evaluate(e, b) for e in s.level(k)])
            assert np.allclose(got, d.A @ X[k] - d.E @ X[k + 1], rtol=1e-14, atol=1e-14)


@settings(max_examples=20, deadline=None)
@given(st.sampled_from(["reactor", "pendulum"]), st.integers(0, 2), st.integers(0, 2**32 - 1))
def test_next_level_is_time_derivative_along_a_path(name, k, seed):
    """Level k+1 equals d/dt of level k along a polynomial path (finite-difference oracle)."""
    m = scenarios.load(name).model
    s = build_stack(m, k + 1, k + 1)
    rng = np.random.default_rng(seed)
    deg = k + 6
    coef = rng.normal(size=(m.n, deg + 1)) * 0.1
    coef[:, 0] = m.initial_condition if name == "reactor" else [1.0, -2.0, 0.3, 0.2, -0.5]
    tab = m.table
    top = k + 2

    def at(t):
        b = dict(m.known_values())
        for i, x in enumerate(m.states):
            p = np.polynomial.Polynomial(coef[i])
            for j in range(top + 1):
                b[tab.derivative(x, j)] = p.deriv(j)(t) if j else p(t)
        return b

    lo = [e for e in s.level(k)] + list(s.Hbar[k * m.q:(k + 1) * m.q])
    hi = [e for e in s.level(k + 1)] + list(s.Hbar[(k + 1) * m.q:(k + 2) * m.q])
    h = 1e-5
    fp = np.array([ex.evaluate(e, at(h)) for e in lo])
    fm = np.array([ex.evaluate(e, at(-h)) for e in lo])
    fd = (fp - fm) / (2 * h)
    exact = np.array([ex.evaluate(e, at(0.0)) for e in hi])
    assert np.allclose(exact, fd, rtol=1e-6, atol=1e-6 * max(1.0, np.abs(exact).max()))


def test_recurrence_identity_at_many_bindings(pendulum):
    m = pendulum.model
    s = build_stack(m, 2, 2)
    tab = m.table
    lv = build_stack(m, 2, 2).level
    again = [ex.diff_total(e, tab.next, frozenset(m.parameters)) for e in lv(1)]
    syms = set()
    for e in again + list(lv(2)):
        syms |= ex.free_symbols(e)
    fa = ex.compile_exprs(again, sorted(syms, key=lambda v: v.name))
    fb = ex.compile_exprs(list(lv(2)), sorted(syms, key=lambda v: v.name))
    rng = np.random.default_rng(3)
    for _ in range(1000):
        args = rng.uniform(-2, 2, size=len(syms))
        a, b = fa(args), fb(args)
        assert np.allclose(a, b, rtol=1e-12, atol=1e-12 * max(1.0, np.abs(b).max()))
    assert s.sigma == 3


@pytest.mark.parametrize("name,theta", [("reactor", None), ("pendulum", None), ("reactor", ["T_c"]), ("pendulum", ["g", "L"])])
def test_symbolic_jacobian_matches_finite_differences(name, theta):
    sc = scenarios.load(name)
    base = sc.model_for(next(iter(sc.sensor_options)))
    m = augment(base, theta) if theta else base
    s = build_stack(m, 2, 2)
    blocks = identifiability_blocks(s) if theta else observability_blocks(s)
    rng = np.random.default_rng(11)
    b = _binding(m, s, rng)
    if name == "reactor":
        for x, v in zip(m.states, (0.4, 360.0, 0.5)):
            b[x] = v
    if theta:
        for t_sym, v in zip(m.theta, m.nominal_theta()):
            b[t_sym] = v
    for c in blocks.columns:
        b.setdefault(c, rng.uniform(0.5, 1.5))
    J = blocks.evaluate(b)
    rows = _rows(s)
    for j, c in enumerate(blocks.columns):
        h = 1e-6 * max(1.0, abs(b[c]))
        fp = np.array([ex.evaluate(e, {**b, c: b[c] + h}) for e in rows])
        fm = np.array([ex.evaluate(e, {**b, c: b[c] - h}) for e in rows])
        fd = (fp - fm) / (2 * h)
        assert np.all(np.abs(J[:, j] - fd) <= 1e-6 * np.maximum(1.0, np.abs(J[:, j]))), c.name


def test_ode_right_block_is_lower_triangular_with_minus_identity():
    m = model_from_dict({
        "states_differential": ["x", "y"], "parameters": {"a": 0.3},
        "f1": ["y", "-a*x - y^3"], "outputs": ["x"],
    })
    s = build_stack(m, 2, 1)
    blk = observability_blocks(s)
    rng = np.random.default_rng(0)
    b = _binding(m, s, rng)
    for c in blk.columns:
        b.setdefault(c, 0.7)
    M = blk.evaluate(b)[: len(s.Fbar), m.n:]
    n = m.n
    for i in range(3):
        for j in range(3):
            B = M[i * n:(i + 1) * n, j * n:(j + 1) * n]
            if j == i:
                assert np.array_equal(B, -np.eye(n))
            elif j > i:
                assert not B.any()


def test_linear_blocks_reproduce_block_O(linear4):
    m = linear4.model
    d = linear4.linear
    L = 4
    s = build_stack(m, L - 1, L - 1)
    blk = observability_blocks(s)
    M = blk.evaluate({c: 0.0 for c in blk.columns})
    assert np.array_equal(M, build_block_O(d, L))


def test_linear_observability_blocks_do_not_depend_on_point(linear4, rng):
    m = linear4.model
    blk = observability_blocks(build_stack(m, 2, 2))
    ref = blk.evaluate({c: rng.normal() for c in blk.columns})
    for _ in range(10):
        assert np.array_equal(blk.evaluate({c: rng.normal() * 100 for c in blk.columns}), ref)


def test_single_output_zero_order_bottom_is_gradient(reactor):
    m = reactor.model_for("x3")
    blk = observability_blocks(build_stack(m, 0, 0))
    assert blk.dims["rows_bottom"] == 1
    M = blk.evaluate({c: 1.0 for c in blk.columns})
    assert M[-1].tolist() == [0.0, 0.0, 1.0, 0.0, 0.0, 0.0]


def test_block_dimensions(pendulum):
    m = pendulum.model
    s = build_stack(m, 2, 1)
    ob = observability_blocks(s)
    assert ob.dims["cols_left"] == m.n and ob.dims["cols_right"] == s.sigma * m.n
    am = augment(m, ["m", "g"])
    sa = build_stack(am, 2, 1)
    ib = identifiability_blocks(sa)
    assert ib.dims["cols_left"] == 2 and ib.dims["cols_right"] == (sa.sigma + 1) * m.n


def test_full_A_top_left_is_kronecker_of_derivatives(linear4, rng):
    d = linear4.linear.with_mask(np.ones((4, 4), bool))
    m = d.to_model()
    am = augment(m, d.param_names())
    mu = 2
    blk = identifiability_blocks(build_stack(am, mu, mu))
    X = rng.normal(size=(mu + 2, 4))
    b = {}
    for k in range(mu + 2):
        for i, x in enumerate(m.states):
            b[m.table.derivative(x, k)] = X[k, i]
    for t_sym, v in zip(am.theta, am.nominal_theta()):
        b[t_sym] = v
    J = blk.evaluate(b)
    # drop the theta-rate rows (identically zero) from each level
    n, p = 4, 16
    keep = [k * (n + p) + i for k in range(mu + 1) for i in range(n)]
    top_left = J[keep, :p]
    assert np.array_equal(top_left, np.kron(X[: mu + 1], np.eye(n)))


def test_reactor_parameter_column(reactor):
    am = augment(reactor.model, ["T_c"])
    blk = identifiability_blocks(build_stack(am, 1, 1))
    col = [ex.to_string(r[0]) for r in blk.entries]
    assert col[1] == "k3"
    assert all(c == "0" for i, c in enumerate(col) if i != 1)


def test_no_parameters_gives_empty_left_block(reactor):
    blk = identifiability_blocks(build_stack(reactor.model, 1, 1))
    assert blk.dims["cols_left"] == 0


def test_dump_lists_every_row(reactor):
    s = build_stack(augment(reactor.model, ["T_c"]), 1, 1)
    text = dump(s)
    assert text.count("\nF[") == len(s.Fbar) and text.count("\nH[") == len(s.Hbar)
    assert "F[1][0] = -(k1*x1') - x3' - x1''" in text
