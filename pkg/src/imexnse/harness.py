"""Experiment runner: constant-step convergence, tolerance sweeps and matched-cost comparisons."""

from __future__ import annotations

import argparse
import csv
import io
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from fractions import Fraction
from pathlib import Path
from typing import Optional, Sequence

from imexnse.diagnostics import ConvergenceTable, fit_rate, pressure_error, theorem_regime, velocity_error
from imexnse.problems import get_problem
from imexnse.spectral import SpectralBackend
from imexnse.timestepper import ControllerConfig, MethodId, NumericalAbort, RunResult, run

logger = logging.getLogger(__name__)

EXPERIMENTS = ("single_run", "convergence_sweep", "tolerance_sweep", "adaptive_vs_nonadaptive")
DEFAULT_DT_LIST = (1 / 10, 1 / 20, 1 / 40, 1 / 80, 1 / 160)
DEFAULT_TOL_LIST = (1e-2, 1e-3, 1e-4, 1e-5, 1e-6)
DEFAULT_ADAPTIVE_DT0 = 1e-3

STEP_COLUMNS = (
    "t",
    "dt",
    "omega",
    "decision",
    "order_used",
    "est1",
    "est2",
    "vel_err",
    "pres_err",
    "energy_lhs_inc",
    "energy_rhs_inc",
    "stability_monitor",
    "solves_cumulative",
)

EXIT_OK, EXIT_USAGE, EXIT_ABORT = 0, 1, 2


class UsageError(ValueError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    experiment: str = "single_run"
    problem: str = "taylor-green"
    methods: tuple = ()
    dt: Optional[float] = None
    dt_list: tuple = DEFAULT_DT_LIST
    tol: float = 1e-3
    tol_list: tuple = DEFAULT_TOL_LIST
    nu: Optional[float] = None
    T: Optional[float] = None
    n_modes: int = 32
    gamma: float = 0.9
    gamma_reject: float = 0.7
    est2_mode: str = "difference"
    out: Optional[str] = None
    seed: int = 0
    jobs: int = 1
    step_files: bool = True

    def __post_init__(self):
        if self.experiment not in EXPERIMENTS:
            raise UsageError(f"unknown experiment {self.experiment!r}; choose from {EXPERIMENTS}")
        methods = tuple(MethodId.parse(m) for m in self.methods) or _default_methods(self.experiment)
        object.__setattr__(self, "methods", methods)
        if not self.dt_list or not self.tol_list:
            raise UsageError("dt and tol lists must be nonempty")
        for name in ("dt", "nu", "T"):
            v = getattr(self, name)
            if v is not None and not v > 0:
                raise UsageError(f"{name} must be positive, got {v}")
        if any(not d > 0 for d in self.dt_list) or any(not t > 0 for t in self.tol_list) or not self.tol > 0:
            raise UsageError("step sizes and tolerances must be positive")
        if self.experiment == "convergence_sweep" and any(m.adaptive for m in methods):
            raise UsageError("convergence_sweep needs constant-step methods (be-fe, be-ab2, be-ab2-f)")
        if self.experiment in ("tolerance_sweep", "adaptive_vs_nonadaptive") and not all(m.adaptive for m in methods):
            raise UsageError(f"{self.experiment} needs adaptive methods (vss-be-ab2, vss-be-ab2-f, moose12)")
        if self.jobs < 1:
            raise UsageError("jobs must be >= 1")

    def problem_spec(self):
        return get_problem(self.problem, nu=self.nu, T=self.T)

    def controller(self, tol: Optional[float] = None) -> ControllerConfig:
        return ControllerConfig(
            tol=self.tol if tol is None else tol,
            gamma=self.gamma,
            gamma_reject=self.gamma_reject,
            est2_mode=self.est2_mode,
        )


def _default_methods(experiment: str) -> tuple:
    if experiment == "convergence_sweep":
        return (MethodId.BE_FE, MethodId.BE_AB2, MethodId.BE_AB2_F)
    if experiment == "tolerance_sweep":
        return (MethodId.MOOSE_IMEX_12, MethodId.VSS_BE_AB2)
    return (MethodId.MOOSE_IMEX_12,)


# -- CSV ------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return f"{value:.17g}"
    return str(value)


def _write_atomic(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.{os.getpid()}.tmp")
    tmp.write_text(text)
    tmp.replace(path)


def _csv_text(header: Sequence[str], rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for row in rows:
        w.writerow([_fmt(v) for v in row])
    return buf.getvalue()


def steps_csv(result: RunResult) -> str:
    """Per-attempt CSV text: one row per accepted or rejected attempt."""
    return _csv_text(STEP_COLUMNS, ([getattr(r, c) for c in STEP_COLUMNS] for r in result.records))


def write_table(path, header, rows) -> None:
    _write_atomic(Path(path), _csv_text(header, rows))


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


# -- single runs ----------------------------------------------------------


@dataclass(frozen=True)
class RunSpec:
    """Picklable description of one run, rebuilt inside worker processes."""

    problem: str
    nu: Optional[float]
    T: Optional[float]
    method: MethodId
    dt0: float
    n_modes: int
    controller: ControllerConfig = field(default_factory=ControllerConfig)


@dataclass
class RunOutcome:
    spec: RunSpec
    result: Optional[RunResult]
    status: str
    vel_err: float = math.nan
    pres_err: float = math.nan
    steps_text: str = ""

    @property
    def stats(self) -> dict:
        return self.result.stats if self.result is not None else {}


def execute(spec: RunSpec, keep_result: bool = True) -> RunOutcome:
    problem = get_problem(spec.problem, nu=spec.nu, T=spec.T)
    backend = SpectralBackend(spec.n_modes)
    try:
        res = run(problem, spec.method, spec.controller, spec.dt0, backend)
    except NumericalAbort as exc:
        logger.warning("%s aborted: %s", spec.method.value, exc)
        return RunOutcome(spec, None, f"abort: {exc}")
    out = RunOutcome(spec, res, "ok", steps_text=steps_csv(res))
    if problem.has_exact:
        out.vel_err = velocity_error(res)
        out.pres_err = pressure_error(res)
    if not keep_result:
        # state arrays stay in the worker; records and stats are plain data
        out.result = RunResult(res.method, None, res.records, None, None, None, res.stats)
    return out


def _map(specs: list[RunSpec], jobs: int) -> list[RunOutcome]:
    if jobs <= 1 or len(specs) <= 1:
        return [execute(s) for s in specs]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(execute, specs, [False] * len(specs)))


def _label(x: float) -> str:
    return f"{x:.6g}"


def _out_dir(config: ExperimentConfig) -> Optional[Path]:
    return Path(config.out) if config.out else None


def run_single(config: ExperimentConfig) -> list[RunOutcome]:
    problem = config.problem_spec()
    outcomes = []
    for m in config.methods:
        dt0 = config.dt if config.dt is not None else (DEFAULT_ADAPTIVE_DT0 if m.adaptive else 1 / 40)
        spec = RunSpec(config.problem, config.nu, config.T, m, dt0, config.n_modes, config.controller())
        outcome = execute(spec)
        outcomes.append(outcome)
        if outcome.status != "ok":
            raise NumericalAbort(outcome.status)
    out = _out_dir(config)
    if out is not None:
        rows = []
        for o in outcomes:
            _write_atomic(out / f"steps_{o.spec.method.value}.csv", o.steps_text)
            s = o.stats
            rows.append(
                [o.spec.method.value, problem.name, o.spec.dt0, s["accepted"], s["rejected"], s["stokes_solves"],
                 s["bootstrap_solves"], o.vel_err, o.pres_err, theorem_regime(o.spec.method)]
            )
        write_table(
            out / "summary.csv",
            ["method", "problem", "dt0", "accepted", "rejected", "stokes_solves", "bootstrap_solves",
             "vel_err", "pres_err", "energy_regime"],
            rows,
        )
    return outcomes


# -- sweeps ---------------------------------------------------------------


@dataclass
class ConvergenceSweep:
    rows: list = field(default_factory=list)
    velocity: dict = field(default_factory=dict)
    pressure: dict = field(default_factory=dict)

    def rate(self, method, quantity: str = "velocity") -> float:
        tables = self.velocity if quantity == "velocity" else self.pressure
        return fit_rate(tables[MethodId.parse(method)])


def run_convergence_sweep(config: ExperimentConfig) -> ConvergenceSweep:
    specs = [
        RunSpec(config.problem, config.nu, config.T, m, dt, config.n_modes, config.controller())
        for m in config.methods
        for dt in config.dt_list
    ]
    outcomes = _map(specs, config.jobs)
    sweep = ConvergenceSweep()
    for o in outcomes:
        m = o.spec.method
        sweep.velocity.setdefault(m, ConvergenceTable())
        sweep.pressure.setdefault(m, ConvergenceTable())
        if o.status == "ok":
            sweep.velocity[m].add(o.spec.dt0, o.vel_err)
            sweep.pressure[m].add(o.spec.dt0, o.pres_err)
        sweep.rows.append([m.value, o.spec.dt0, o.vel_err, o.pres_err, o.stats.get("stokes_solves"), o.status])
    out = _out_dir(config)
    if out is not None:
        write_table(out / "convergence.csv", ["method", "dt", "vel_err", "pres_err", "stokes_solves", "status"], sweep.rows)
        rate_rows = []
        for m in config.methods:
            for q, tables in (("velocity", sweep.velocity), ("pressure", sweep.pressure)):
                t = tables[m]
                try:
                    rate_rows.append([m.value, q, fit_rate(t), t.fit_residual])
                except ValueError as exc:
                    rate_rows.append([m.value, q, math.nan, str(exc)])
        write_table(out / "convergence_rates.csv", ["method", "quantity", "rate", "fit_residual"], rate_rows)
        if config.step_files:
            for o in outcomes:
                if o.status == "ok":
                    _write_atomic(out / f"steps_{o.spec.method.value}_dt{_label(o.spec.dt0)}.csv", o.steps_text)
    return sweep


TOLERANCE_HEADER = ["method", "tol", "stokes_solves", "accepted", "rejected", "vel_err", "pres_err", "status"]


def run_tolerance_sweep(config: ExperimentConfig) -> list[list]:
    dt0 = config.dt if config.dt is not None else DEFAULT_ADAPTIVE_DT0
    specs = [
        RunSpec(config.problem, config.nu, config.T, m, dt0, config.n_modes, config.controller(tol))
        for m in config.methods
        for tol in config.tol_list
    ]
    outcomes = _map(specs, config.jobs)
    rows = []
    for o in outcomes:
        s = o.stats
        rows.append(
            [o.spec.method.value, o.spec.controller.tol, s.get("stokes_solves"), s.get("accepted"),
             s.get("rejected"), o.vel_err, o.pres_err, o.status]
        )
    out = _out_dir(config)
    if out is not None:
        write_table(out / "tolerance.csv", TOLERANCE_HEADER, rows)
        if config.step_files:
            for o in outcomes:
                if o.status == "ok":
                    name = f"steps_{o.spec.method.value}_tol{_label(o.spec.controller.tol)}.csv"
                    _write_atomic(out / name, o.steps_text)
    return rows


PAIRED_HEADER = [
    "method",
    "tol",
    "stokes_solves",
    "dt_effective",
    "adaptive_vel_err",
    "nonadaptive_vel_err",
    "vel_err_ratio",
    "adaptive_pres_err",
    "nonadaptive_pres_err",
    "status",
]


def run_adaptive_vs_nonadaptive(config: ExperimentConfig) -> list[list]:
    """Constant-step BE-AB2+F at ``dt = T / (adaptive Stokes solves)`` for each tolerance."""
    problem = config.problem_spec()
    dt0 = config.dt if config.dt is not None else DEFAULT_ADAPTIVE_DT0
    adaptive_specs = [
        RunSpec(config.problem, config.nu, config.T, m, dt0, config.n_modes, config.controller(tol))
        for m in config.methods
        for tol in config.tol_list
    ]
    adaptive = _map(adaptive_specs, config.jobs)
    matched_specs = []
    for o in adaptive:
        solves = o.stats.get("stokes_solves")
        dt_eff = problem.T / solves if o.status == "ok" else problem.T / 2
        matched_specs.append(replace(o.spec, method=MethodId.BE_AB2_F, dt0=dt_eff, controller=ControllerConfig()))
    matched = _map(matched_specs, config.jobs)

    rows = []
    for a, c in zip(adaptive, matched):
        status = a.status if a.status != "ok" else c.status
        ratio = c.vel_err / a.vel_err if status == "ok" and a.vel_err > 0 else math.nan
        rows.append(
            [a.spec.method.value, a.spec.controller.tol, a.stats.get("stokes_solves"), c.spec.dt0,
             a.vel_err, c.vel_err, ratio, a.pres_err, c.pres_err, status]
        )
    out = _out_dir(config)
    if out is not None:
        write_table(out / "adaptive_vs_nonadaptive.csv", PAIRED_HEADER, rows)
        for a, c in zip(adaptive, matched):
            if a.result is None or c.result is None or not a.result.records:
                continue
            hist = []
            for label, o in (("adaptive", a), ("nonadaptive", c)):
                for r in o.result.accepted_records:
                    hist.append([label, r.t, r.vel_norm, r.pres_norm, r.vel_exact, r.pres_exact])
            name = f"norms_{a.spec.method.value}_tol{_label(a.spec.controller.tol)}.csv"
            write_table(out / name, ["run", "t", "vel_l2", "pres_l2", "vel_exact_l2", "pres_exact_l2"], hist)
    return rows


# -- command line ---------------------------------------------------------


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _number(text: str) -> float:
    try:
        return float(Fraction(text.strip()))
    except (ValueError, ZeroDivisionError):
        raise argparse.ArgumentTypeError(f"not a number: {text!r}") from None


def _number_list(text: str) -> tuple:
    items = [s for s in text.replace(";", ",").split(",") if s.strip()]
    if not items:
        raise argparse.ArgumentTypeError("empty list")
    return tuple(_number(s) for s in items)


def _method_list(text: str) -> tuple:
    try:
        return tuple(MethodId.parse(s) for s in text.split(",") if s.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(str(exc)) from None


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="imexnse", description=__doc__, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="key = value file; command-line flags take precedence")
    p.add_argument("--experiment", choices=EXPERIMENTS)
    p.add_argument("--problem", choices=("taylor-green", "transient"))
    p.add_argument("--method", dest="methods", type=_method_list,
                   help="one method or a comma-separated list: be-fe, be-ab2, be-ab2-f, vss-be-ab2, vss-be-ab2-f, moose12")
    p.add_argument("--dt", type=_number, help="constant step, or the initial step of adaptive runs")
    p.add_argument("--dt-list", dest="dt_list", type=_number_list)
    p.add_argument("--tol", type=_number)
    p.add_argument("--tol-list", dest="tol_list", type=_number_list)
    p.add_argument("--nu", type=_number)
    p.add_argument("--T", dest="T", type=_number)
    p.add_argument("--modes", dest="n_modes", type=int)
    p.add_argument("--gamma", type=_number)
    p.add_argument("--gamma-reject", dest="gamma_reject", type=_number)
    p.add_argument("--est2-mode", dest="est2_mode", choices=("difference", "residual"))
    p.add_argument("--out")
    p.add_argument("--seed", type=int)
    p.add_argument("--jobs", type=int)
    p.add_argument("--no-step-files", dest="step_files", action="store_false")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def load_config(path) -> dict:
    """Parse a ``key = value`` file into validated config fields."""
    argv = []
    with open(path) as fh:
        for lineno, raw in enumerate(fh, 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value'")
            key, value = (s.strip() for s in line.split("=", 1))
            flag = "--" + key.replace("_", "-")
            if key in ("T", "t"):
                flag = "--T"
            if key in ("step_files", "step-files"):
                if value.lower() in ("0", "false", "no"):
                    argv.append("--no-step-files")
                continue
            argv += [flag, value]
    ns = build_parser().parse_args(argv)
    fields = vars(ns)
    fields.pop("config", None)
    fields.pop("verbose", None)
    return fields


def parse_cli(args: Optional[Sequence[str]] = None) -> ExperimentConfig:
    ns = vars(build_parser().parse_args(args))
    merged = {}
    cfg_path = ns.pop("config", None)
    ns.pop("verbose", None)
    if cfg_path is not None:
        merged.update(load_config(cfg_path))
    merged.update(ns)
    try:
        return ExperimentConfig(**merged)
    except ValueError as exc:
        raise UsageError(str(exc)) from None


RUNNERS = {
    "single_run": run_single,
    "convergence_sweep": run_convergence_sweep,
    "tolerance_sweep": run_tolerance_sweep,
    "adaptive_vs_nonadaptive": run_adaptive_vs_nonadaptive,
}


def _report(config: ExperimentConfig, result) -> None:
    if config.experiment == "single_run":
        for o in result:
            s = o.stats
            print(f"{o.spec.method.value}: accepted={s['accepted']} rejected={s['rejected']} "
                  f"solves={s['stokes_solves']} vel_err={o.vel_err:.4e} pres_err={o.pres_err:.4e}")
    elif config.experiment == "convergence_sweep":
        for row in result.rows:
            print("{}  dt={:.6g}  vel={:.4e}  pres={:.4e}  {}".format(row[0], row[1], row[2], row[3], row[5]))
        for m in config.methods:
            try:
                print(f"{m.value}: velocity rate {result.rate(m):.3f}, pressure rate {result.rate(m, 'pressure'):.3f}")
            except ValueError as exc:
                print(f"{m.value}: no rate ({exc})")
    else:
        header = TOLERANCE_HEADER if config.experiment == "tolerance_sweep" else PAIRED_HEADER
        print(",".join(header))
        for row in result:
            print(",".join(_fmt(v) for v in row))


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    logging.basicConfig(level=logging.INFO if ("-v" in argv or "--verbose" in argv) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = parse_cli(argv)
    except UsageError as exc:
        print(f"imexnse: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except OSError as exc:
        print(f"imexnse: cannot read config: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        result = RUNNERS[config.experiment](config)
    except NumericalAbort as exc:
        print(f"imexnse: numerical abort: {exc}", file=sys.stderr)
        return EXIT_ABORT
    _report(config, result)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
