"""Random test systems shared by the property and acceptance tests."""

import numpy as np

from daeident.linear import LinearDae
from daeident.model import model_from_dict


def _monomial(rng, names, max_deg):
    deg = int(rng.integers(0, max_deg + 1))
    picks = rng.choice(names, size=deg) if deg else []
    coef = round(float(rng.uniform(-2, 2)), 3)
    return "*".join([repr(coef)] + list(picks))


def random_poly_ode(rng, n=None, terms=3, max_deg=2):
    """Polynomial ODE with ``n <= 4`` states and one polynomial output."""
    n = int(rng.integers(1, 5)) if n is None else n
    names = [f"x{i + 1}" for i in range(n)]
    f1 = [" + ".join(_monomial(rng, names, max_deg) for _ in range(int(rng.integers(1, terms + 1)))) for _ in names]
    out = " + ".join(_monomial(rng, names, max_deg) for _ in range(int(rng.integers(1, 3))))
    return model_from_dict({
        "name": "random-ode", "states_differential": names, "parameters": {}, "f1": f1, "outputs": [out],
    })


def random_regular_pencil(rng, n, q, singular_E=False):
    """Random ``(E, A, C)``; with ``singular_E`` the system is semi-explicit index 1."""
    A = rng.normal(size=(n, n))
    C = rng.normal(size=(q, n))
    if singular_E:
        n1 = int(rng.integers(1, n))
        E = np.diag(np.r_[np.ones(n1), np.zeros(n - n1)])
        return LinearDae(E, A, C, (n1, n - n1))
    E = rng.normal(size=(n, n))
    return LinearDae(E, A, C)


def sparse_observability_case(rng, n, q):
    """Random system made unobservable by a shared invariant coordinate (decoupled state)."""
    A = rng.normal(size=(n, n))
    A[0, 1:] = 0.0
    A[1:, 0] = 0.0
    C = rng.normal(size=(q, n))
    C[:, 0] = 0.0
    return LinearDae(np.eye(n), A, C)


def random_descriptor(rng, n, q, singular_E, observable):
    """Random regular ``(E, A, C)`` with a planted unobservable finite mode when asked.

    Integer entries keep every product exact, so planted rank deficiencies
    survive in floating point.
    """
    def ints(shape, lo=-3, hi=4):
        return rng.integers(lo, hi, size=shape).astype(float)

    while True:
        if observable:
            E = ints((n, n))
            if singular_E:
                E[:, -1] = 0.0
            A, C = ints((n, n)), ints((q, n))
        else:
            k = int(rng.integers(1, n))  # hidden block size
            E = np.zeros((n, n))
            A = np.zeros((n, n))
            E[:n - k, :n - k] = ints((n - k, n - k))
            if singular_E and n - k > 1:
                E[:n - k, n - k - 1] = 0.0
            E[n - k:, n - k:] = np.eye(k)
            A[:n - k, :n - k] = ints((n - k, n - k))
            A[n - k:, n - k:] = ints((k, k))
            A[n - k:, :n - k] = ints((k, n - k))  # hidden block is driven but never seen
            C = np.zeros((q, n))
            C[:, :n - k] = ints((q, n - k))
            S, T = ints((n, n), -1, 2) + 2 * np.eye(n), ints((n, n), -1, 2) + 2 * np.eye(n)
            if abs(np.linalg.det(S)) < 0.5 or abs(np.linalg.det(T)) < 0.5:
                continue
            E, A, C = S @ E @ T, S @ A @ T, C @ T
        lam = complex(*rng.normal(size=2))
        if abs(np.linalg.det(lam * E - A)) < 1e-6:
            continue
        if not singular_E and abs(np.linalg.det(E)) < 0.5:
            continue
        return LinearDae(E, A, C)
