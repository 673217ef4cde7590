"""Benchmark problems with closed-form solutions on the periodic square."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

# below this, (10 t)^-10 overflows and exp(-(10 t)^-10) is exactly 0 anyway
_G_CUTOFF = 1e-3


@dataclass(frozen=True)
class ProblemSpec:
    """Viscosity, horizon and the space-time fields of one benchmark.

    Field callables take NumPy arrays ``x, y`` (and ``t`` where noted) and
    return a pair of component arrays, or one array for the pressure.
    """

    name: str
    nu: float
    T: float
    initial_velocity: Callable
    forcing: Callable
    exact_velocity: Optional[Callable] = None
    exact_pressure: Optional[Callable] = None

    def __post_init__(self):
        if not self.nu > 0:
            raise ValueError(f"nu must be positive, got {self.nu}")
        if not self.T > 0:
            raise ValueError(f"T must be positive, got {self.T}")

    @property
    def has_exact(self) -> bool:
        return self.exact_velocity is not None


def _tg_mode(x, y):
    return np.cos(x) * np.sin(y), -np.sin(x) * np.cos(y)


def _tg_pressure_mode(x, y):
    return -0.25 * (np.cos(2 * x) + np.cos(2 * y))


def amplitude_problem(name: str, nu: float, T: float, F: Callable, dF: Callable) -> ProblemSpec:
    """Taylor-Green cell scaled by ``F(t)`` with the forcing that makes it exact.

    ``u = F(t) (cos x sin y, -sin x cos y)``, ``p = F(t)^2 p_TG`` and
    ``f = (2 nu F + F') (cos x sin y, -sin x cos y)``.
    """

    def initial_velocity(x, y):
        a = F(0.0)
        u1, u2 = _tg_mode(x, y)
        return a * u1, a * u2

    def forcing(x, y, t):
        a = 2.0 * nu * F(t) + dF(t)
        u1, u2 = _tg_mode(x, y)
        return a * u1, a * u2

    def exact_velocity(x, y, t):
        a = F(t)
        u1, u2 = _tg_mode(x, y)
        return a * u1, a * u2

    def exact_pressure(x, y, t):
        return F(t) ** 2 * _tg_pressure_mode(x, y)

    return ProblemSpec(name, nu, T, initial_velocity, forcing, exact_velocity, exact_pressure)


def taylor_green(nu: float = 1.0, T: float = 1.0) -> ProblemSpec:
    """Decaying Taylor-Green vortex, unforced."""
    if not nu > 0:
        raise ValueError(f"nu must be positive, got {nu}")

    def initial_velocity(x, y):
        return _tg_mode(x, y)

    def forcing(x, y, t):
        z = np.zeros(np.broadcast(x, y).shape)
        return z, z

    def exact_velocity(x, y, t):
        a = math.exp(-2.0 * nu * t)
        u1, u2 = _tg_mode(x, y)
        return a * u1, a * u2

    def exact_pressure(x, y, t):
        return math.exp(-4.0 * nu * t) * _tg_pressure_mode(x, y)

    return ProblemSpec("taylor-green", nu, T, initial_velocity, forcing, exact_velocity, exact_pressure)


def transition_g(t: float) -> float:
    """Smooth step from 0 to 1: ``exp(-(10 t)^-10)`` for ``t > 0``, else 0."""
    if t <= _G_CUTOFF:
        return 0.0
    return math.exp(-((10.0 * t) ** -10))


def transition_g_prime(t: float) -> float:
    g = transition_g(t)
    if g == 0.0:
        return 0.0
    return g * 100.0 * (10.0 * t) ** -11


def transient_amplitude(t: float) -> float:
    """Period-1 pulse: rises near t = 0.1, falls near t = 0.6."""
    tau = t % 1.0
    return transition_g(tau) - transition_g(tau - 0.5)


def transient_amplitude_prime(t: float) -> float:
    tau = t % 1.0
    return transition_g_prime(tau) - transition_g_prime(tau - 0.5)


def transient_problem(nu: float = 1.0, T: float = 2.0) -> ProblemSpec:
    """Forced Taylor-Green cell whose amplitude switches rapidly on and off."""
    return amplitude_problem("transient", nu, T, transient_amplitude, transient_amplitude_prime)


PROBLEMS = {
    "taylor-green": taylor_green,
    "transient": transient_problem,
}


def get_problem(name: str, nu: Optional[float] = None, T: Optional[float] = None) -> ProblemSpec:
    try:
        factory = PROBLEMS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None
    kwargs = {}
    if nu is not None:
        kwargs["nu"] = nu
    if T is not None:
        kwargs["T"] = T
    return factory(**kwargs)
