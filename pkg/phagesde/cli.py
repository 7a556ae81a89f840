import enum
import json
import sys
from collections.abc import Iterator
from contextlib import contextmanager
from pathlib import Path
from typing import Annotated, Any

import typer
from loguru import logger
from pydantic import TypeAdapter, ValidationError

from phagesde import run_ensemble, run_equilibria, run_simulation, run_sweep, run_validation
from phagesde.config import (
    RunConfig,
    dump_config,
    get_runtime_config,
    load_config,
    read_config_file,
    reset_config,
)
from phagesde.exception import (
    ConcentrationException,
    ConfigException,
    InputException,
    IntegrationException,
    ModelException,
)
from phagesde.integrate import Scheme
from phagesde.writer.exception import WriterException

app = typer.Typer(no_args_is_help=True)

EXIT_VALIDATION = 1
EXIT_CONFIG = 2
EXIT_INTEGRATION = 3


class LogLevel(enum.StrEnum):
    DEBUG = "DEBUG"
    INFO = "INFO"
    WARNING = "WARNING"
    ERROR = "ERROR"
    CRITICAL = "CRITICAL"


ConfigOption = Annotated[
    Path | None, typer.Option("--config", "-c", help="TOML run configuration.")
]
DtOption = Annotated[float | None, typer.Option("--dt", help="Step size in days.")]
TEndOption = Annotated[float | None, typer.Option("--t-end", help="Horizon in days.")]
DelayedOption = Annotated[
    str | None, typer.Option("--delayed", help="Use the delayed model (true/false).")
]
SeedOption = Annotated[int | None, typer.Option("--seed", help="Master seed of the noise streams.")]
SchemeOption = Annotated[
    Scheme | None, typer.Option("--scheme", help="Stochastic scheme.", show_choices=True)
]
OutOption = Annotated[str | None, typer.Option("--out", "-o", help="Output path prefix.")]
DumpOption = Annotated[
    Path | None, typer.Option("--dump-config", help="Write the effective configuration here.")
]
LogLevelOption = Annotated[
    LogLevel | None,
    typer.Option(help="The log level to use; PHAGE_SDE_LOG_LEVEL otherwise.", show_choices=True),
]


@contextmanager
def exit_codes() -> Iterator[None]:
    """Map package errors onto the documented exit codes."""
    try:
        yield
    except (ConfigException, InputException, ModelException, WriterException) as e:
        logger.error(str(e))
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_CONFIG) from e
    except (IntegrationException, ConcentrationException) as e:
        logger.error(str(e))
        typer.echo(f"error: {e}", err=True)
        raise typer.Exit(EXIT_INTEGRATION) from e


def _split_floats(raw: str | None, count: int, name: str) -> tuple[float, ...] | None:
    if raw is None:
        return None
    try:
        values = tuple(float(part) for part in raw.split(","))
    except ValueError as e:
        raise ConfigException(f"{name} must be {count} comma-separated numbers, got {raw!r}") from e
    if len(values) != count:
        raise ConfigException(f"{name} must be {count} comma-separated numbers, got {raw!r}")
    return values


def _parse_bool(raw: str | None) -> bool | None:
    if raw is None:
        return None
    try:
        return TypeAdapter(bool).validate_python(raw)
    except ValidationError as e:
        raise ConfigException(f"--delayed expects a boolean, got {raw!r}") from e


def _prune(tree: dict[str, Any]) -> dict[str, Any]:
    pruned = {}
    for key, value in tree.items():
        if isinstance(value, dict):
            value = _prune(value)
            if value:
                pruned[key] = value
        elif value is not None:
            pruned[key] = value
    return pruned


def prepare(
    log_level: LogLevel | None,
    config_path: Path | None,
    dump_path: Path | None,
    overrides: dict[str, Any],
) -> RunConfig:
    """Set up logging, load the config file (or the reference scenario) and apply flags."""
    logger.remove()
    logger.add(sys.stderr, level=log_level or get_runtime_config().log_level)

    reset_config(read_config_file(config_path) if config_path is not None else None)
    cfg = load_config(_prune(overrides))
    if dump_path is not None:
        dump_config(cfg, dump_path)
        logger.info(f"Wrote effective configuration to {dump_path}")
    return cfg


def _common(
    dt: float | None,
    t_end: float | None,
    delayed: str | None,
    seed: int | None,
    scheme: Scheme | None,
    out: str | None,
) -> dict[str, Any]:
    return {
        "grid": {"dt": dt, "t_end": t_end},
        "noise": {"seed": seed, "scheme": scheme},
        "delayed": _parse_bool(delayed),
        "output": out,
    }


@app.command()
def simulate(
    eps: Annotated[
        list[float] | None, typer.Option("--eps", help="Noise intensity; repeat for overlays.")
    ] = None,
    plot: Annotated[bool, typer.Option("--plot", help="Also emit an SVG of S and Q.")] = False,
    config: ConfigOption = None,
    dt: DtOption = None,
    t_end: TEndOption = None,
    delayed: DelayedOption = None,
    seed: SeedOption = None,
    scheme: SchemeOption = None,
    out: OutOption = None,
    dump_config_path: DumpOption = None,
    log_level: LogLevelOption = None,
):
    """Integrate trajectories and write them as `t,S,Q` CSV files."""
    with exit_codes():
        cfg = prepare(
            log_level, config, dump_config_path, _common(dt, t_end, delayed, seed, scheme, out)
        )
        for path in run_simulation(cfg, eps_values=eps or None, plot=plot):
            typer.echo(str(path))


@app.command()
def ensemble(
    eps: Annotated[list[float] | None, typer.Option("--eps", help="Noise intensity; repeatable.")] = None,
    rho: Annotated[list[float] | None, typer.Option("--rho", help="Deviation radius; repeatable.")] = None,
    interval: Annotated[str | None, typer.Option("--interval", help="Window `t_a,t_b` in days.")] = None,
    kappas: Annotated[
        str | None, typer.Option("--kappas", help="`k1,k2,c` deriving the window from eta.")
    ] = None,
    paths: Annotated[int | None, typer.Option("--paths", help="Paths per noise level.")] = None,
    threads: Annotated[
        int | None, typer.Option("--threads", envvar="PHAGE_SDE_THREADS", help="Worker processes.")
    ] = None,
    config: ConfigOption = None,
    dt: DtOption = None,
    t_end: TEndOption = None,
    delayed: DelayedOption = None,
    seed: SeedOption = None,
    scheme: SchemeOption = None,
    out: OutOption = None,
    dump_config_path: DumpOption = None,
    log_level: LogLevelOption = None,
):
    """Estimate the probability of straying 2*rho from E0 over a time window."""
    with exit_codes():
        if interval is not None and kappas is not None:
            raise ConfigException("give either --interval or --kappas, not both")
        overrides = _common(dt, t_end, delayed, seed, scheme, out)
        window = _split_floats(interval, 2, "--interval")
        triple = _split_floats(kappas, 3, "--kappas")
        query: dict[str, Any] = {"eps_list": eps or None, "rho": rho or None, "n_paths": paths}
        if window is not None:
            query.update(interval=window, kappas=None)
        if triple is not None:
            query.update(kappas=triple, interval=None)
        overrides["query"] = query
        cfg = prepare(log_level, config, None, overrides)
        # a window flag replaces whichever window the file configured
        if window is not None:
            cfg.query = cfg.query.model_copy(update={"kappas": None})
        if triple is not None:
            cfg.query = cfg.query.model_copy(update={"interval": None})
        if dump_config_path is not None:
            dump_config(cfg, dump_config_path)
        workers = threads if threads is not None else get_runtime_config().threads
        path, estimates, _ = run_ensemble(cfg, threads=workers)
        for e in estimates:
            typer.echo(
                f"eps={e.query.eps:g} rho={e.query.rho:g} p_hat={e.p_hat:.4g} "
                f"ci=[{e.ci[0]:.4g}, {e.ci[1]:.4g}] exceed={e.exceed_count}/{e.n_paths}"
            )
        typer.echo(str(path))


@app.command()
def validate(
    config: ConfigOption = None,
    dt: DtOption = None,
    delayed: DelayedOption = None,
    out: OutOption = None,
    dump_config_path: DumpOption = None,
    log_level: LogLevelOption = None,
):
    """Check every hypothesis clause and report margins; exit 1 when any clause fails."""
    with exit_codes():
        cfg = prepare(
            log_level, config, dump_config_path, _common(dt, None, delayed, None, None, out)
        )
        path, reports = run_validation(cfg)
    for report in reports:
        for c in report.clauses:
            status = "PASS" if c.passed else "FAIL"
            typer.echo(f"{c.clause:<18} {status}  margin={c.margin:.6g}  {c.description}")
    typer.echo(json.dumps([report.model_dump(mode="json") for report in reports]))
    typer.echo(str(path))
    if not all(report.passed for report in reports):
        raise typer.Exit(EXIT_VALIDATION)


@app.command()
def sweep(
    axis: Annotated[str, typer.Option("--axis", help="Model parameter to vary.")],
    values: Annotated[str, typer.Option("--values", help="Comma-separated parameter values.")],
    config: ConfigOption = None,
    delayed: DelayedOption = None,
    out: OutOption = None,
    dump_config_path: DumpOption = None,
    log_level: LogLevelOption = None,
):
    """Tabulate equilibria, eigenvalues, gamma and eta along one parameter axis."""
    with exit_codes():
        cfg = prepare(
            log_level, config, dump_config_path, _common(None, None, delayed, None, None, out)
        )
        numbers = _split_floats(values, len(values.split(",")), "--values")
        typer.echo(str(run_sweep(cfg, axis, numbers)))


@app.command()
def equilibria(
    config: ConfigOption = None,
    delayed: DelayedOption = None,
    dump_config_path: DumpOption = None,
    log_level: LogLevelOption = None,
):
    """Print the equilibria with their classification and the spectrum at E0."""
    with exit_codes():
        cfg = prepare(
            log_level, config, dump_config_path, _common(None, None, delayed, None, None, None)
        )
        report = run_equilibria(cfg)
    for point in report.points:
        typer.echo(f"({point.state.S!r}, {point.state.Q!r})  {point.classification}")
    typer.echo(f"eigenvalues at E0: {report.eigenvalues[0]!r}, {report.eigenvalues[1]!r}")
    typer.echo(report.model_dump_json())


def run():
    app()
