"""IMEX time steppers, the embedded time filter and the adaptive order/step controller.

The algebra here never looks inside a state: states only need ``+``, ``-`` and
scalar ``*``.  Anything spatial goes through a backend object providing

* ``stokes_solve(rhs, dt, nu) -> (u, p)``
* ``nonlinear(u)``, ``stokes_operator(u, nu)``, ``leray_project(u)``
* ``l2(u)``, ``grad_l2(u)``, ``h_minus1(f)``
* ``sample_velocity(func, *args)``, ``sample_scalar(func, *args)``,
  ``forcing(func, t)``

:class:`imexnse.spectral.SpectralBackend` is the stock implementation.
"""

from __future__ import annotations

import enum
import logging
import math
from dataclasses import dataclass, field, replace
from typing import Any, Callable, Optional

import numpy as np

from imexnse.problems import ProblemSpec

logger = logging.getLogger(__name__)

State = Any


class StartupError(ValueError):
    """An estimator needs more back states than the history holds."""


class NumericalAbort(RuntimeError):
    """The adaptive controller collapsed (dt underflow or too many rejections)."""

    def __init__(self, message, records=None):
        super().__init__(message)
        self.records = records or []


class MethodId(str, enum.Enum):
    BE_FE = "be-fe"
    BE_AB2 = "be-ab2"
    BE_AB2_F = "be-ab2-f"
    VSS_BE_AB2 = "vss-be-ab2"
    VSS_BE_AB2_F = "vss-be-ab2-f"
    MOOSE_IMEX_12 = "moose12"

    @property
    def adaptive(self) -> bool:
        return self in (MethodId.VSS_BE_AB2, MethodId.VSS_BE_AB2_F, MethodId.MOOSE_IMEX_12)

    @classmethod
    def parse(cls, value) -> "MethodId":
        if isinstance(value, cls):
            return value
        key = str(value).strip().lower().replace("_", "-")
        for m in cls:
            if key in (m.value, m.name.lower().replace("_", "-")):
                return m
        raise ValueError(f"unknown method {value!r}; choose from {[m.value for m in cls]}")


class Decision(str, enum.Enum):
    ACCEPTED_ORDER1 = "accepted_order1"
    ACCEPTED_ORDER2 = "accepted_order2"
    REJECTED = "rejected"

    @property
    def order(self) -> Optional[int]:
        return {"accepted_order1": 1, "accepted_order2": 2}.get(self.value)


@dataclass(frozen=True)
class ControllerConfig:
    tol: float = 1e-3
    gamma: float = 0.9
    gamma_reject: float = 0.7
    ratio_min: float = 0.5
    ratio_max: float = 2.0
    dt_min: Optional[float] = None  # None means 1e-12 * T
    dt_max: Optional[float] = None
    max_consecutive_rejections: int = 20
    est2_mode: str = "difference"
    est_norm: str = "L2_absolute"
    # test hooks: treat an estimator as +inf (VSS BE-AB2 is force_est2_inf)
    force_est1_inf: bool = False
    force_est2_inf: bool = False

    def __post_init__(self):
        if not self.tol > 0:
            raise ValueError(f"tol must be positive, got {self.tol}")
        if not 0 < self.gamma_reject <= self.gamma < 1:
            raise ValueError("need 0 < gamma_reject <= gamma < 1")
        if not 0 < self.ratio_min <= 1 <= self.ratio_max:
            raise ValueError("need 0 < ratio_min <= 1 <= ratio_max")
        if self.est2_mode not in ("difference", "residual"):
            raise ValueError(f"est2_mode must be 'difference' or 'residual', got {self.est2_mode!r}")
        if self.est_norm not in ("L2_absolute", "L2_relative"):
            raise ValueError(f"est_norm must be 'L2_absolute' or 'L2_relative', got {self.est_norm!r}")
        if self.max_consecutive_rejections < 1:
            raise ValueError("max_consecutive_rejections must be >= 1")

    def resolved_dt_min(self, T: float) -> float:
        return 1e-12 * T if self.dt_min is None else self.dt_min


@dataclass(frozen=True)
class StepHistory:
    u_n: State
    u_nm1: State
    p_n: State
    t_n: float
    dt_prev: float
    u_nm2: State = None
    dt_prev2: Optional[float] = None
    step_index: int = 1

    def __post_init__(self):
        if not self.dt_prev > 0:
            raise ValueError(f"dt_prev must be positive, got {self.dt_prev}")
        if self.dt_prev2 is not None and not self.dt_prev2 > 0:
            raise ValueError(f"dt_prev2 must be positive, got {self.dt_prev2}")
        if (self.u_nm2 is not None) != (self.step_index >= 2):
            raise ValueError("u_nm2 must be present exactly when step_index >= 2")

    def advance(self, u_new, p_new, dt: float, t_new: Optional[float] = None) -> "StepHistory":
        return StepHistory(
            u_n=u_new,
            u_nm1=self.u_n,
            p_n=p_new,
            t_n=self.t_n + dt if t_new is None else t_new,
            dt_prev=dt,
            u_nm2=self.u_nm1,
            dt_prev2=self.dt_prev,
            step_index=self.step_index + 1,
        )


@dataclass(frozen=True)
class StepAttempt:
    dt_attempted: float
    omega: float
    u_order1: State
    u_order2: State
    p_new: State
    est1_norm: float
    est2_norm: float
    dt_proposed_1: float
    dt_proposed_2: float
    decision: Decision
    stokes_solves_used: int = 1

    @property
    def accepted(self) -> bool:
        return self.decision is not Decision.REJECTED

    @property
    def u_accepted(self):
        if self.decision is Decision.ACCEPTED_ORDER1:
            return self.u_order1
        if self.decision is Decision.ACCEPTED_ORDER2:
            return self.u_order2
        return None

    @property
    def dt_next(self) -> float:
        """Next step size, or the retry size after a rejection."""
        if self.decision is Decision.ACCEPTED_ORDER1:
            return self.dt_proposed_1
        if self.decision is Decision.ACCEPTED_ORDER2:
            return self.dt_proposed_2
        return max(self.dt_proposed_1, self.dt_proposed_2)


def _check_conformable(*states):
    shapes = {np.shape(s) for s in states}
    if len(shapes) > 1:
        raise ValueError(f"states are not conformable: shapes {sorted(shapes)}")


def step_ratio(dt_new: float, dt_old: float) -> float:
    if not (dt_new > 0 and dt_old > 0):
        raise ValueError(f"step sizes must be positive, got {dt_new}, {dt_old}")
    return dt_new / dt_old


def extrapolate(u_n, u_nm1, omega: float):
    """Linear extrapolant ``(1 + omega) u_n - omega u_nm1``.

    Written as ``u_n + omega (u_n - u_nm1)`` so that equal back states give
    ``u_n`` bit for bit.
    """
    _check_conformable(u_n, u_nm1)
    return u_n + omega * (u_n - u_nm1)


def _imex_step(u_n, u_conv, dt, nu, f_next, backend):
    rhs = u_n / dt + f_next - backend.nonlinear(u_conv)
    return backend.stokes_solve(rhs, dt, nu)


def be_ab2_step(history: StepHistory, dt: float, nu: float, f_next, backend):
    """Backward Euler for the linear part, extrapolated nonlinearity. One Stokes solve."""
    omega = step_ratio(dt, history.dt_prev)
    return _imex_step(history.u_n, extrapolate(history.u_n, history.u_nm1, omega), dt, nu, f_next, backend)


def be_fe_step(history: StepHistory, dt: float, nu: float, f_next, backend):
    """Backward Euler / forward Euler: nonlinearity lagged at ``u_n``."""
    step_ratio(dt, history.dt_prev)
    return _imex_step(history.u_n, history.u_n, dt, nu, f_next, backend)


def apply_filter(u_hat, u_n, u_nm1, omega: float):
    """Variable-step time filter lifting the BE-AB2 solution to second order."""
    _check_conformable(u_hat, u_n, u_nm1)
    if not omega > 0:
        raise ValueError(f"omega must be positive, got {omega}")
    return u_hat - (omega / (2.0 * omega + 1.0)) * (u_hat - extrapolate(u_n, u_nm1, omega))


def est1(u_order2, u_order1):
    _check_conformable(u_order2, u_order1)
    return u_order2 - u_order1


def est2_coefficients(omega_n: float, omega_nm1: float) -> tuple[float, float, float, float]:
    """``(prefactor, c_n, c_nm1, c_nm2)`` of the three-back-state estimator.

    The bracket is ``u2 - c_n u_n + c_nm1 u_nm1 - c_nm2 u_nm2``; it annihilates
    any quadratic in time sampled on the variable grid.
    """
    w, v = omega_n, omega_nm1
    pref = v * w * (1 + w) / (1 + 2 * w + v * (1 + 4 * w + 3 * w * w))
    c_n = (1 + w) * (1 + v * (1 + w)) / (1 + v)
    c_nm1 = w * (1 + v * (1 + w))
    c_nm2 = v * v * w * (1 + w) / (1 + v)
    return pref, c_n, c_nm1, c_nm2


def est2_difference(u_order2, u_n, u_nm1, u_nm2, omega_n: float, omega_nm1: float):
    """Second-order error estimate from a variable-step third difference."""
    if u_nm2 is None:
        raise StartupError("est2_difference needs u_nm2; fall back to EST1 during startup")
    _check_conformable(u_order2, u_n, u_nm1, u_nm2)
    if not (omega_n > 0 and omega_nm1 > 0):
        raise ValueError("step ratios must be positive")
    pref, c_n, c_nm1, c_nm2 = est2_coefficients(omega_n, omega_nm1)
    return pref * (u_order2 - c_n * u_n + c_nm1 * u_nm1 - c_nm2 * u_nm2)


def est2_residual(u_order2, u_n, u_nm1, omega_n: float, dt: float, nu: float, f_next, backend):
    """Residual of the filtered solution in the variable-step BDF2 equation.

    The spectral mass matrix is the identity, so the Riesz representative is
    just the divergence-free part of the strong residual.
    """
    _check_conformable(u_order2, u_n, u_nm1)
    w = omega_n
    bdf = ((1 + 2 * w) / (1 + w)) * u_order2 - (1 + w) * u_n + (w * w / (1 + w)) * u_nm1
    r = bdf / dt + backend.stokes_operator(u_order2, nu) + backend.nonlinear(u_order2) - f_next
    return backend.leray_project(r)


def propose_stepsize(
    dt: float,
    tol: float,
    est_norm: float,
    order: int,
    safety: float,
    *,
    ratio_min: float = 0.5,
    ratio_max: float = 2.0,
    dt_min: float = 0.0,
    dt_max: Optional[float] = None,
) -> float:
    """``safety * dt * (tol / est)^(1/(order+1))`` clamped by the ratio limiter."""
    if est_norm == 0.0:
        new = ratio_max * dt
    else:
        new = safety * dt * (tol / est_norm) ** (1.0 / (order + 1))
    new = min(max(new, ratio_min * dt), ratio_max * dt)
    if dt_max is not None:
        new = min(new, dt_max)
    return max(new, dt_min)


def _estimator_norm(est, candidate, config: ControllerConfig, backend) -> float:
    value = backend.l2(est)
    if config.est_norm == "L2_relative":
        scale = backend.l2(candidate)
        if scale > 0:
            value /= scale
    return value


def order_switches(method: MethodId, config: ControllerConfig) -> tuple[bool, bool]:
    use1 = method is not MethodId.VSS_BE_AB2_F and not config.force_est1_inf
    use2 = method is not MethodId.VSS_BE_AB2 and not config.force_est2_inf
    return use1, use2


def attempt_step(
    history: StepHistory,
    dt: float,
    nu: float,
    f_next,
    config: ControllerConfig,
    backend,
    method: MethodId = MethodId.MOOSE_IMEX_12,
    dt_min: float = 0.0,
) -> StepAttempt:
    """One embedded BE-AB2 / filtered attempt and the accept/reject decision."""
    omega = step_ratio(dt, history.dt_prev)
    u1, p_new = be_ab2_step(history, dt, nu, f_next, backend)
    u2 = apply_filter(u1, history.u_n, history.u_nm1, omega)

    e1 = _estimator_norm(est1(u2, u1), u1, config, backend)
    e2 = math.inf
    if config.est2_mode == "residual":
        r = est2_residual(u2, history.u_n, history.u_nm1, omega, dt, nu, f_next, backend)
        e2 = _estimator_norm(r, u2, config, backend)
    elif history.step_index >= 2:
        omega_prev = step_ratio(history.dt_prev, history.dt_prev2)
        d = est2_difference(u2, history.u_n, history.u_nm1, history.u_nm2, omega, omega_prev)
        e2 = _estimator_norm(d, u2, config, backend)

    use1, use2 = order_switches(method, config)
    if not use2:
        e2 = math.inf
    elif not use1 and math.isinf(e2):
        # startup with order 1 switched off: EST1 stands in for the order-2 error
        e2 = e1
    if not use1:
        e1 = math.inf

    tol = config.tol
    clamp = dict(ratio_min=config.ratio_min, ratio_max=config.ratio_max, dt_min=dt_min, dt_max=config.dt_max)
    passing = [i for i, e in ((1, e1), (2, e2)) if e < tol]
    safety = config.gamma if passing else config.gamma_reject
    dt1 = propose_stepsize(dt, tol, e1, 1, safety, **clamp)
    dt2 = propose_stepsize(dt, tol, e2, 2, safety, **clamp)

    if passing:
        props = {1: dt1, 2: dt2}
        order = max(passing, key=lambda i: (props[i], i))
        decision = Decision.ACCEPTED_ORDER1 if order == 1 else Decision.ACCEPTED_ORDER2
    else:
        decision = Decision.REJECTED

    return StepAttempt(
        dt_attempted=dt,
        omega=omega,
        u_order1=u1,
        u_order2=u2,
        p_new=p_new,
        est1_norm=e1,
        est2_norm=e2,
        dt_proposed_1=dt1,
        dt_proposed_2=dt2,
        decision=decision,
    )


def bootstrap(problem: ProblemSpec, dt0: float, backend, mode: str = "auto", substeps: int = 10) -> tuple[StepHistory, int]:
    """Initial history ``(u^0, u^1)`` at ``t = dt0`` and the Stokes solves it cost.

    ``mode='exact'`` samples the exact solution, ``'substep'`` takes
    ``substeps`` BE-FE steps of size ``dt0 / substeps``; ``'auto'`` prefers
    exact data when the problem has it.
    """
    if not dt0 > 0:
        raise ValueError(f"dt0 must be positive, got {dt0}")
    if mode == "auto":
        mode = "exact" if problem.has_exact else "substep"
    if mode == "exact":
        if not problem.has_exact:
            raise ValueError(f"problem {problem.name!r} has no exact solution to bootstrap from")
        u0 = backend.leray_project(backend.sample_velocity(problem.exact_velocity, 0.0))
        u1 = backend.leray_project(backend.sample_velocity(problem.exact_velocity, dt0))
        if problem.exact_pressure is not None:
            p1 = backend.sample_scalar(problem.exact_pressure, dt0)
        else:
            p1 = backend.zeros_pressure()
        return StepHistory(u_n=u1, u_nm1=u0, p_n=p1, t_n=dt0, dt_prev=dt0), 0
    if mode != "substep":
        raise ValueError(f"unknown bootstrap mode {mode!r}")

    u0 = backend.leray_project(backend.sample_velocity(problem.initial_velocity))
    h = dt0 / substeps
    u, p = u0, backend.zeros_pressure()
    for j in range(1, substeps + 1):
        f = backend.forcing(problem.forcing, j * h)
        u, p = _imex_step(u, u, h, problem.nu, f, backend)
    return StepHistory(u_n=u, u_nm1=u0, p_n=p, t_n=dt0, dt_prev=dt0), substeps


@dataclass
class RunRecord:
    t: float
    dt: float
    omega: float
    decision: str
    order_used: Optional[int]
    est1: float
    est2: float
    vel_err: float = math.nan
    pres_err: float = math.nan
    energy_lhs_inc: float = math.nan
    energy_rhs_inc: float = math.nan
    stability_monitor: float = math.nan
    solves_cumulative: int = 0
    # not part of the per-step CSV
    vel_exact: float = math.nan
    pres_exact: float = math.nan
    vel_norm: float = math.nan
    pres_norm: float = math.nan

    @property
    def accepted(self) -> bool:
        return self.decision != Decision.REJECTED.value


@dataclass
class RunResult:
    method: MethodId
    problem: ProblemSpec
    records: list[RunRecord]
    history: StepHistory
    u0: State
    u1: State
    stats: dict = field(default_factory=dict)

    @property
    def accepted_records(self) -> list[RunRecord]:
        return [r for r in self.records if r.accepted]


def _record_errors(rec: RunRecord, u, p, t, problem: ProblemSpec, backend):
    rec.vel_norm = backend.l2(u)
    rec.pres_norm = backend.l2(p)
    if problem.exact_velocity is not None:
        ue = backend.sample_velocity(problem.exact_velocity, t)
        rec.vel_err = backend.l2(u - ue)
        rec.vel_exact = backend.l2(ue)
    if problem.exact_pressure is not None:
        pe = backend.sample_scalar(problem.exact_pressure, t)
        rec.pres_err = backend.l2(p - pe)
        rec.pres_exact = backend.l2(pe)


def stability_monitor(history: StepHistory, dt: float, nu: float, h_equiv: float, backend) -> float:
    """Variable part of the step condition: ``dt (1 + w^2) |grad E|^2 / (nu h)``."""
    omega = step_ratio(dt, history.dt_prev)
    g = backend.grad_l2(extrapolate(history.u_n, history.u_nm1, omega))
    return dt * (1.0 + omega * omega) * g * g / (nu * h_equiv)


def energy_increments(history: StepHistory, u_new, dt: float, nu: float, f_next, backend) -> tuple[float, float]:
    """Per-step summands of the VSS BE-AB2 energy inequality (left, right)."""
    omega = step_ratio(dt, history.dt_prev)
    g = backend.grad_l2(u_new)
    jump = u_new - history.u_n + omega * (history.u_n - history.u_nm1)
    lhs = 0.25 * nu * dt * g * g + backend.l2(jump) ** 2 / (8.0 * (1.0 + omega * omega))
    rhs = dt / nu * backend.h_minus1(f_next) ** 2
    return lhs, rhs


def run(
    problem: ProblemSpec,
    method: MethodId | str,
    config: Optional[ControllerConfig] = None,
    dt0: float = 0.01,
    backend=None,
    bootstrap_mode: str = "auto",
    on_step: Optional[Callable[[RunRecord, StepHistory], None]] = None,
) -> RunResult:
    """Integrate ``problem`` from 0 to ``T``; the last step lands on ``T`` exactly."""
    method = MethodId.parse(method)
    config = config or ControllerConfig()
    if backend is None:
        from imexnse.spectral import SpectralBackend

        backend = SpectralBackend()
    T, nu = problem.T, problem.nu
    if not dt0 > 0:
        raise ValueError(f"dt0 must be positive, got {dt0}")
    if dt0 >= T:
        raise ValueError(f"dt0={dt0} must be smaller than T={T}")
    dt_min = config.resolved_dt_min(T)
    h_equiv = getattr(getattr(backend, "grid", None), "h_equiv", 1.0)

    history, boot_solves = bootstrap(problem, dt0, backend, bootstrap_mode)
    u0, u1 = history.u_nm1, history.u_n
    records: list[RunRecord] = []
    accepted = rejected = consecutive = max_consecutive = 0
    dt = dt0

    while history.t_n < T:
        remaining = T - history.t_n
        final = remaining <= dt * (1.0 + 1e-8)
        if final:
            dt = remaining
        elif method.adaptive and remaining < dt * (1.0 + config.ratio_min):
            # split what is left in two rather than leave a sliver
            dt = 0.5 * remaining
        t_next = T if final else history.t_n + dt
        f_next = backend.forcing(problem.forcing, t_next)
        monitor = stability_monitor(history, dt, nu, h_equiv, backend)

        if method.adaptive:
            att = attempt_step(history, dt, nu, f_next, config, backend, method, dt_min)
        else:
            att = _constant_step(history, dt, nu, f_next, backend, method)

        solves = accepted + rejected + 1
        rec = RunRecord(
            t=t_next,
            dt=dt,
            omega=att.omega,
            decision=att.decision.value,
            order_used=att.decision.order,
            est1=att.est1_norm,
            est2=att.est2_norm,
            stability_monitor=monitor,
            solves_cumulative=solves,
        )

        if not att.accepted:
            rejected += 1
            consecutive += 1
            max_consecutive = max(max_consecutive, consecutive)
            records.append(rec)
            if on_step is not None:
                on_step(rec, history)
            if consecutive > config.max_consecutive_rejections:
                raise NumericalAbort(
                    f"{consecutive} consecutive rejections at t={history.t_n:.6g} (dt={dt:.3g})", records
                )
            if dt <= dt_min * (1.0 + 1e-12):
                raise NumericalAbort(f"step size underflow at t={history.t_n:.6g}: dt={dt:.3g} <= dt_min={dt_min:.3g}", records)
            dt = att.dt_next
            continue

        u_new = att.u_accepted
        rec.energy_lhs_inc, rec.energy_rhs_inc = energy_increments(history, u_new, dt, nu, f_next, backend)
        _record_errors(rec, u_new, att.p_new, t_next, problem, backend)
        history = history.advance(u_new, att.p_new, dt, t_next)
        accepted += 1
        consecutive = 0
        records.append(rec)
        if on_step is not None:
            on_step(rec, history)
        if method.adaptive:
            dt = att.dt_next

    stats = {
        "accepted": accepted,
        "rejected": rejected,
        "stokes_solves": accepted + rejected,
        "bootstrap_solves": boot_solves,
        "max_consecutive_rejections": max_consecutive,
    }
    logger.debug("%s on %s finished: %s", method.value, problem.name, stats)
    return RunResult(method, problem, records, history, u0, u1, stats)


def _constant_step(history, dt, nu, f_next, backend, method: MethodId) -> StepAttempt:
    omega = step_ratio(dt, history.dt_prev)
    if method is MethodId.BE_FE:
        u, p = be_fe_step(history, dt, nu, f_next, backend)
        return StepAttempt(dt, omega, u, u, p, math.nan, math.nan, dt, dt, Decision.ACCEPTED_ORDER1)
    u1, p = be_ab2_step(history, dt, nu, f_next, backend)
    u2 = apply_filter(u1, history.u_n, history.u_nm1, omega)
    e1 = backend.l2(est1(u2, u1))
    e2 = math.inf
    if history.step_index >= 2:
        omega_prev = step_ratio(history.dt_prev, history.dt_prev2)
        e2 = backend.l2(est2_difference(u2, history.u_n, history.u_nm1, history.u_nm2, omega, omega_prev))
    decision = Decision.ACCEPTED_ORDER2 if method is MethodId.BE_AB2_F else Decision.ACCEPTED_ORDER1
    return StepAttempt(dt, omega, u1, u2, p, e1, e2, dt, dt, decision)


def with_overrides(config: ControllerConfig, **kwargs) -> ControllerConfig:
    return replace(config, **{k: v for k, v in kwargs.items() if v is not None})
