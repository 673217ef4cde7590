"""Variable step, variable order IMEX time stepping for 2D periodic Navier-Stokes."""

from imexnse.problems import ProblemSpec, taylor_green, transient_problem
from imexnse.spectral import Grid, SpectralBackend
from imexnse.timestepper import (
    ControllerConfig,
    Decision,
    MethodId,
    NumericalAbort,
    RunRecord,
    RunResult,
    StepAttempt,
    StepHistory,
    run,
)

__all__ = [
    "ControllerConfig",
    "Decision",
    "Grid",
    "MethodId",
    "NumericalAbort",
    "ProblemSpec",
    "RunRecord",
    "RunResult",
    "SpectralBackend",
    "StepAttempt",
    "StepHistory",
    "run",
    "taylor_green",
    "transient_problem",
]

__version__ = "0.1.0"
