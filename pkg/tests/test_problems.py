import math

import numpy as np
import pytest
import sympy as sp

from imexnse.problems import (
    amplitude_problem,
    get_problem,
    taylor_green,
    transient_amplitude,
    transient_amplitude_prime,
    transient_problem,
    transition_g,
    transition_g_prime,
)

X, Y, T, NU = sp.symbols("x y t nu", real=True)


def _residual(u, p, f):
    """Momentum and continuity residuals of a symbolic velocity/pressure pair."""
    mom = [
        sp.diff(u[i], T)
        + u[0] * sp.diff(u[i], X)
        + u[1] * sp.diff(u[i], Y)
        - NU * (sp.diff(u[i], X, 2) + sp.diff(u[i], Y, 2))
        + sp.diff(p, (X, Y)[i])
        - f[i]
        for i in range(2)
    ]
    div = sp.diff(u[0], X) + sp.diff(u[1], Y)
    return [sp.simplify(m) for m in mom], sp.simplify(div)


def test_amplitude_family_solves_navier_stokes_symbolically():
    F = sp.Function("F")(T)
    mode = (sp.cos(X) * sp.sin(Y), -sp.sin(X) * sp.cos(Y))
    u = [F * m for m in mode]
    p = F**2 * sp.Rational(-1, 4) * (sp.cos(2 * X) + sp.cos(2 * Y))
    f = [(2 * NU * F + sp.diff(F, T)) * m for m in mode]
    mom, div = _residual(u, p, f)
    assert mom == [0, 0] and div == 0


def test_taylor_green_solves_unforced_navier_stokes_symbolically():
    a = sp.exp(-2 * NU * T)
    u = [a * sp.cos(X) * sp.sin(Y), -a * sp.sin(X) * sp.cos(Y)]
    p = -sp.Rational(1, 4) * sp.exp(-4 * NU * T) * (sp.cos(2 * X) + sp.cos(2 * Y))
    mom, div = _residual(u, p, [0, 0])
    assert mom == [0, 0] and div == 0


def test_taylor_green_point_values():
    prob = taylor_green()
    u1, u2 = prob.exact_velocity(np.pi / 2, 0.0, 0.0)
    assert abs(u1) < 1e-16 and u2 == pytest.approx(-1.0)
    assert prob.exact_pressure(0.0, 0.0, 0.0) == pytest.approx(-0.5)
    assert prob.forcing(np.zeros(3), np.zeros(3), 0.3)[0].shape == (3,)


def test_callables_match_closed_forms_at_random_points():
    rng = np.random.default_rng(3)
    nu = 0.37
    prob = taylor_green(nu)
    x, y = rng.uniform(0, 2 * np.pi, (2, 50))
    for t in (0.0, 0.3, 1.7):
        a = math.exp(-2 * nu * t)
        u1, u2 = prob.exact_velocity(x, y, t)
        assert np.allclose(u1, a * np.cos(x) * np.sin(y), rtol=0, atol=1e-15)
        assert np.allclose(u2, -a * np.sin(x) * np.cos(y), rtol=0, atol=1e-15)


def test_exponential_amplitude_reproduces_taylor_green():
    nu = 0.6
    prob = amplitude_problem("tg", nu, 1.0, lambda t: math.exp(-2 * nu * t), lambda t: -2 * nu * math.exp(-2 * nu * t))
    tg = taylor_green(nu)
    rng = np.random.default_rng(4)
    x, y = rng.uniform(0, 2 * np.pi, (2, 20))
    for t in (0.0, 0.25, 0.9):
        f1, f2 = prob.forcing(x, y, t)
        assert np.max(np.abs(f1)) < 1e-15 and np.max(np.abs(f2)) < 1e-15
        assert np.allclose(prob.exact_velocity(x, y, t), tg.exact_velocity(x, y, t), rtol=0, atol=1e-15)
        assert np.allclose(prob.exact_pressure(x, y, t), tg.exact_pressure(x, y, t), rtol=0, atol=1e-15)


def test_transition_values():
    assert transition_g(0.0) == 0.0
    assert transition_g(-0.4) == 0.0
    assert transition_g(0.1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert transition_g(0.2) == pytest.approx(math.exp(-(2.0**-10)), rel=1e-15)
    assert transition_g(0.2) == pytest.approx(0.99902391, abs=1e-8)
    assert transition_g(1e-4) == 0.0


def test_transition_derivative_matches_symbolic():
    s = sp.symbols("s", positive=True)
    g = sp.exp(-((10 * s) ** -10))
    dg = sp.lambdify(s, sp.diff(g, s))
    for t in (0.06, 0.08, 0.1, 0.13, 0.3):
        assert transition_g_prime(t) == pytest.approx(float(dg(t)), rel=1e-12)
    assert transition_g_prime(-0.2) == 0.0


def test_transient_amplitude_values():
    assert transient_amplitude(0.0) == 0.0
    assert transient_amplitude(0.1) == pytest.approx(math.exp(-1), rel=1e-15)
    assert transient_amplitude(0.35) == pytest.approx(1.0, abs=1e-5)
    assert transient_amplitude(0.6) == pytest.approx(math.exp(-(6.0**-10)) - math.exp(-1), rel=1e-14)
    assert transient_amplitude(0.95) == pytest.approx(0.0, abs=1e-2)
    assert transient_amplitude(1.1) == pytest.approx(transient_amplitude(0.1), rel=1e-12)


def test_transient_amplitude_derivative_by_differences():
    h = 1e-6
    for t in (0.08, 0.11, 0.58, 0.62, 1.1):
        fd = (transient_amplitude(t + h) - transient_amplitude(t - h)) / (2 * h)
        assert transient_amplitude_prime(t) == pytest.approx(fd, rel=1e-6)


def test_transient_forcing_matches_formula():
    prob = transient_problem()
    x, y = np.array([0.3, 1.2]), np.array([2.0, 0.7])
    t = 0.1
    coef = 2 * transient_amplitude(t) + transient_amplitude_prime(t)
    f1, f2 = prob.forcing(x, y, t)
    assert np.allclose(f1, coef * np.cos(x) * np.sin(y), rtol=1e-15)
    assert np.allclose(f2, -coef * np.sin(x) * np.cos(y), rtol=1e-15)
    assert (prob.nu, prob.T) == (1.0, 2.0)


def test_problem_validation():
    with pytest.raises(ValueError):
        taylor_green(nu=0.0)
    with pytest.raises(ValueError):
        taylor_green(T=-1.0)
    with pytest.raises(ValueError):
        get_problem("cavity")
    assert get_problem("transient", nu=0.5, T=3.0).nu == 0.5
