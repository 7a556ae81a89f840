from collections.abc import Sequence
from pathlib import Path

from loguru import logger
from pydantic import ValidationError

from .analysis import (
    ConcentrationEstimate,
    ConcentrationQuery,
    ScalingFit,
    ensemble_sup_deviations,
    estimate_from_deviations,
    interval_from_kappas,
    scaling_regression,
)
from .config import RunConfig, describe_validation_error
from .exception import ConfigException, InsufficientDataException
from .integrate import NoiseConfig, integrate_deterministic, integrate_sde_path
from .model import (
    SCALAR_FIELDS,
    EquilibriumReport,
    State,
    ValidationReport,
    check_hypothesis1,
    check_hypothesis2,
    check_hypothesis3,
    decay_rate_eta,
    equilibria,
)
from .trajectory import HistoryTrajectory
from .writer import (
    UNITS_LEGEND,
    Curve,
    Panel,
    WriterType,
    find_writer_class,
    format_short,
    trajectory_table,
)

ENSEMBLE_HEADER = ["eps", "rho", "t_a", "t_b", "n_paths", "exceed", "p_hat", "ci_lo", "ci_hi", "failures"]
SWEEP_HEADER = [
    "value",
    "e0_S",
    "e0_Q",
    "e0_class",
    "interior_S",
    "interior_Q",
    "interior_class",
    "lambda0",
    "lambda1",
    "gamma",
    "eta",
]


def _write(writer_type: WriterType, **kwargs) -> Path:
    writer_class = find_writer_class(writer_type)
    artifact = writer_class.to_artifact(**kwargs)
    return writer_class.initialize().write(artifact).path


def _eps_label(eps: float) -> str:
    return "deterministic" if eps == 0 else f"eps={format_short(eps)}"


def run_simulation(
    cfg: RunConfig, eps_values: Sequence[float] | None = None, plot: bool = False
) -> list[Path]:
    """
    Integrate one trajectory per noise level and write each as CSV.

    Without ``eps_values`` the noise section decides: none means a single
    deterministic run. Zero noise always goes through the RK4 integrator.
    """
    if eps_values is None:
        eps_values = [cfg.noise.eps] if cfg.noise is not None else [0.0]
    # deterministic curve first
    eps_values = sorted(dict.fromkeys(eps_values), key=lambda e: e != 0)
    noise = cfg.noise or NoiseConfig()
    runs: list[tuple[float, HistoryTrajectory]] = []
    for eps in eps_values:
        logger.info(f"[run_simulation] integrating {_eps_label(eps)}, delayed={cfg.delayed}")
        if eps == 0:
            traj = integrate_deterministic(cfg.model, cfg.init, cfg.grid, cfg.delayed)
        else:
            traj = integrate_sde_path(
                cfg.model, cfg.init, noise.model_copy(update={"eps": eps}), cfg.grid, cfg.delayed
            )
        runs.append((eps, traj))

    written = []
    for eps, traj in runs:
        name = cfg.output if len(runs) == 1 else f"{cfg.output}_eps{format_short(eps)}"
        table = trajectory_table(Path(name), traj, extra=[_eps_label(eps)])
        written.append(_write(WriterType.csv, **table.model_dump()))
    if plot:
        panels = [
            Panel(
                title=title,
                ylabel=f"{component} (tens of millions)",
                curves=[
                    Curve(label=_eps_label(eps), t=traj.times, y=getattr(traj, component))
                    for eps, traj in runs
                ],
            )
            for component, title in (("S", "bacteria"), ("Q", "phages"))
        ]
        written.append(_write(WriterType.svg, path=Path(cfg.output), panels=panels))
    return written


def _windows(cfg: RunConfig) -> dict[float, tuple[float, float]]:
    query = cfg.query
    if query.interval is not None and query.kappas is not None:
        raise ConfigException("give either query.interval or query.kappas, not both")
    if query.interval is not None:
        return {rho: query.interval for rho in query.rho}
    if query.kappas is None:
        raise ConfigException("ensemble needs query.interval or query.kappas")
    kappa1, kappa2, c = query.kappas
    eta = decay_rate_eta(cfg.model)
    return {rho: interval_from_kappas(kappa1, kappa2, c, rho, eta) for rho in query.rho}


def run_ensemble(
    cfg: RunConfig, threads: int = 1
) -> tuple[Path, list[ConcentrationEstimate], dict[float, ScalingFit | None]]:
    windows = _windows(cfg)
    noise = cfg.noise or NoiseConfig()
    horizon = max(t_b for _, t_b in windows.values())
    grid = cfg.grid
    if horizon > grid.t_end:
        logger.info(f"[run_ensemble] extending t_end from {grid.t_end!r} to {horizon!r}")
        grid = grid.model_copy(update={"t_end": horizon})

    def query(eps: float, rho: float) -> ConcentrationQuery:
        try:
            return ConcentrationQuery(
                rho=rho,
                interval=windows[rho],
                n_paths=cfg.query.n_paths,
                eps=eps,
                grid=grid,
                delayed=cfg.delayed,
                scheme=noise.scheme,
            )
        except ValidationError as e:
            raise ConfigException(describe_validation_error(e)) from e

    queries = {(eps, rho): query(eps, rho) for eps in cfg.query.eps_list for rho in cfg.query.rho}
    estimates: list[ConcentrationEstimate] = []
    for eps in cfg.query.eps_list:
        # one ensemble per distinct window, shared by every rho using it
        cache = {}
        for rho in cfg.query.rho:
            q = queries[(eps, rho)]
            if q.interval not in cache:
                cache[q.interval] = ensemble_sup_deviations(
                    q, cfg.model, cfg.init, noise.seed, threads
                )
            estimates.append(
                estimate_from_deviations(cache[q.interval], q, cfg.query.confidence)
            )

    rows = [
        [
            format_short(e.query.eps),
            format_short(e.query.rho),
            format_short(e.query.interval[0]),
            format_short(e.query.interval[1]),
            str(e.n_paths),
            str(e.exceed_count),
            format_short(e.p_hat),
            format_short(e.ci[0]),
            format_short(e.ci[1]),
            str(e.failures),
        ]
        for e in estimates
    ]
    fits: dict[float, ScalingFit | None] = {}
    comments = [f"seed={noise.seed} scheme={noise.scheme.name} confidence={cfg.query.confidence!r}"]
    for e in estimates:
        comments.append(
            f"positivity eps={format_short(e.query.eps)} rho={format_short(e.query.rho)}: "
            f"negative_paths={e.negative_paths}/{e.n_paths + e.failures}"
        )
        if e.negative_paths:
            logger.warning(
                f"[run_ensemble] eps={e.query.eps!r}: {e.negative_paths} path(s) dipped below zero"
            )
    for rho in cfg.query.rho:
        subset = [e for e in estimates if e.query.rho == rho]
        try:
            fit = scaling_regression(subset)
        except InsufficientDataException as e:
            fits[rho] = None
            comments.append(f"scaling rho={format_short(rho)}: not fitted ({e})")
            continue
        fits[rho] = fit
        comments.append(
            f"scaling rho={format_short(rho)}: slope={fit.slope!r} intercept={fit.intercept!r} "
            f"monotone_ok={fit.monotone_ok}"
        )
        for point in fit.excluded:
            comments.append(
                f"scaling rho={format_short(rho)}: eps={format_short(point.eps)} excluded, "
                f"p_hat=0 with upper bound {point.ci[1]!r}"
            )
    path = _write(
        WriterType.csv,
        path=Path(f"{cfg.output}_ensemble"),
        header=ENSEMBLE_HEADER,
        rows=rows,
        comments=comments,
        legend=UNITS_LEGEND,
    )
    return path, estimates, fits


def run_validation(cfg: RunConfig) -> tuple[Path, list[ValidationReport]]:
    p = cfg.model
    start = State.from_array(cfg.init.at_zero(p))
    history = cfg.init.history(p, cfg.grid)
    reports = [
        check_hypothesis1(p, start),
        check_hypothesis2(p, history),
        check_hypothesis3(p, history),
    ]
    for report in reports:
        for clause in report.failures:
            logger.warning(
                f"[run_validation] {clause.clause} fails: {clause.description} (margin {clause.margin!r})"
            )
    rows = [
        [report.hypothesis, c.clause, "PASS" if c.passed else "FAIL", repr(c.margin), c.description]
        for report in reports
        for c in report.clauses
    ]
    path = _write(
        WriterType.csv,
        path=Path(f"{cfg.output}_validation"),
        header=["hypothesis", "clause", "status", "margin", "description"],
        rows=rows,
    )
    return path, reports


def run_sweep(cfg: RunConfig, axis: str, values: Sequence[float]) -> Path:
    if axis not in SCALAR_FIELDS:
        raise ConfigException(f"unknown axis {axis!r}, expected one of {', '.join(SCALAR_FIELDS)}")
    rows = []
    for value in values:
        try:
            p = cfg.model.replace(**{axis: value})
        except ValidationError as e:
            raise ConfigException(describe_validation_error(e)) from e
        report = equilibria(p, delayed=cfg.delayed)
        e0, interior = report.e0, report.interior
        eta = decay_rate_eta(p) if p.gamma > 0 else None
        rows.append(
            [
                format_short(value),
                format_short(e0.state.S),
                format_short(e0.state.Q),
                e0.classification.value,
                format_short(interior.state.S) if interior else "",
                format_short(interior.state.Q) if interior else "",
                interior.classification.value if interior else ("non_admissible" if report.non_admissible else ""),
                format_short(report.eigenvalues[0]),
                format_short(report.eigenvalues[1]),
                format_short(p.gamma),
                format_short(eta),
            ]
        )
    return _write(
        WriterType.csv,
        path=Path(f"{cfg.output}_sweep_{axis}"),
        header=SWEEP_HEADER,
        rows=rows,
        comments=[f"axis={axis} delayed={cfg.delayed}"],
    )


def run_equilibria(cfg: RunConfig) -> EquilibriumReport:
    return equilibria(cfg.model, delayed=cfg.delayed)


__all__ = [
    "run_ensemble",
    "run_equilibria",
    "run_simulation",
    "run_sweep",
    "run_validation",
]
