"""Error metrics, energy bookkeeping and convergence-rate fits over run results."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from imexnse.timestepper import MethodId, RunResult


def relative_l2_l2_error(dts, errors, exact_norms) -> float:
    """Relative discrete l2(0,T; L2) error from per-node step sizes and L2 norms."""
    dts = np.asarray(dts, dtype=float)
    errors = np.asarray(errors, dtype=float)
    exact_norms = np.asarray(exact_norms, dtype=float)
    if not (dts.shape == errors.shape == exact_norms.shape):
        raise ValueError("dts, errors and exact_norms must have the same length")
    den = float(np.sum(dts * exact_norms**2))
    if den == 0.0:
        raise ValueError("exact solution is identically zero; relative error undefined")
    return float(np.sqrt(np.sum(dts * errors**2) / den))


def velocity_error(result: RunResult) -> float:
    acc = result.accepted_records
    return relative_l2_l2_error([r.dt for r in acc], [r.vel_err for r in acc], [r.vel_exact for r in acc])


def pressure_error(result: RunResult) -> float:
    acc = result.accepted_records
    return relative_l2_l2_error([r.dt for r in acc], [r.pres_err for r in acc], [r.pres_exact for r in acc])


@dataclass
class EnergyBudget:
    lhs: float
    rhs: float
    lhs_terms: dict
    rhs_terms: dict
    lhs_increments: list = field(default_factory=list)
    rhs_increments: list = field(default_factory=list)

    @property
    def holds(self) -> bool:
        return self.lhs <= self.rhs


def energy_budget(result: RunResult, backend) -> EnergyBudget:
    """Both sides of the VSS BE-AB2 energy inequality for a finished run.

    Only a first-order trajectory is covered by the stability theorem; for
    other methods the numbers are informational.
    """
    acc = result.accepted_records
    h = result.history
    lhs_inc = [r.energy_lhs_inc for r in acc]
    rhs_inc = [r.energy_rhs_inc for r in acc]
    # with no accepted steps u^N = u^1 and the inequality is an identity
    lhs_terms = {
        "final_energy": 0.5 * backend.l2(h.u_n) ** 2,
        "final_jump": 0.25 * backend.l2(h.u_n - h.u_nm1) ** 2,
        "dissipation_and_jumps": float(np.sum(lhs_inc)),
    }
    rhs_terms = {
        "forcing": float(np.sum(rhs_inc)),
        "initial_energy": 0.5 * backend.l2(result.u1) ** 2,
        "initial_jump": 0.25 * backend.l2(result.u1 - result.u0) ** 2,
    }
    return EnergyBudget(
        lhs=sum(lhs_terms.values()),
        rhs=sum(rhs_terms.values()),
        lhs_terms=lhs_terms,
        rhs_terms=rhs_terms,
        lhs_increments=lhs_inc,
        rhs_increments=rhs_inc,
    )


def theorem_regime(method: MethodId) -> str:
    """Which stability result, if any, covers a method's energy numbers."""
    if method in (MethodId.BE_AB2, MethodId.VSS_BE_AB2):
        return "vss_be_ab2_energy"
    if method is MethodId.BE_AB2_F:
        return "constant_step_filtered"
    return "informational"


@dataclass
class ConvergenceTable:
    parameters: list = field(default_factory=list)
    errors: list = field(default_factory=list)

    def add(self, parameter: float, error: float) -> None:
        self.parameters.append(float(parameter))
        self.errors.append(float(error))

    @property
    def fitted_rate(self) -> float:
        return fit_rate(self)

    @property
    def fit_residual(self) -> float:
        return _fit(self)[1]


def _fit(table: ConvergenceTable) -> tuple[float, float]:
    x = np.asarray(table.parameters, dtype=float)
    y = np.asarray(table.errors, dtype=float)
    if x.size < 3 or x.size != y.size:
        raise ValueError("need at least 3 (parameter, error) pairs to fit a rate")
    if np.any(~(x > 0)) or np.any(~(y > 0)):
        raise ValueError("convergence data must be strictly positive")
    lx, ly = np.log(x), np.log(y)
    coef, res, *_ = np.polyfit(lx, ly, 1, full=True)
    resid = float(np.sqrt(res[0] / x.size)) if res.size else 0.0
    return float(coef[0]), resid


def fit_rate(table: ConvergenceTable) -> float:
    """Least-squares slope of log(error) against log(parameter)."""
    return _fit(table)[0]
