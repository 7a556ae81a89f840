"""
Run configuration: TOML file, environment and CLI overrides merged into one RunConfig.

Environment variables use the ``PHAGE_SDE_`` prefix with ``__`` between
nesting levels, e.g. ``PHAGE_SDE_GRID__DT=0.001``.
"""

import tomllib
from pathlib import Path
from typing import Any, Self

import tomli_w
from deepmerge import Merger
from pydantic import BaseModel, Field, ValidationError, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict, TomlConfigSettingsSource

from phagesde.exception import ConfigException
from phagesde.integrate import GridConfig, InitialCondition, NoiseConfig
from phagesde.model import ModelParams

# lists (eps grids, radii) replace rather than concatenate
merger = Merger([(dict, ["merge"]), (list, ["override"])], ["override"], ["override"])


class QueryConfig(BaseModel):
    rho: list[float] = Field(default_factory=lambda: [0.1])
    interval: tuple[float, float] | None = None
    kappas: tuple[float, float, float] | None = None
    n_paths: int = Field(default=200, ge=1)
    eps_list: list[float] = Field(default_factory=lambda: [0.05, 0.1, 0.2, 0.4])
    confidence: float = Field(default=0.95, gt=0, lt=1)

    @model_validator(mode="after")
    def _positive_radii(self) -> Self:
        if any(r <= 0 for r in self.rho):
            raise ValueError(f"rho values must be positive, got {self.rho!r}")
        return self


class RunConfig(BaseSettings):
    model_config = SettingsConfigDict(
        extra="ignore", env_prefix="PHAGE_SDE_", env_nested_delimiter="__"
    )

    model: ModelParams
    init: InitialCondition = InitialCondition()
    grid: GridConfig = GridConfig()
    noise: NoiseConfig | None = None
    query: QueryConfig = QueryConfig()
    delayed: bool = True
    output: str = "phage"

    @classmethod
    def reference(cls) -> "RunConfig":
        return cls(
            model=ModelParams.reference(),
            init=InitialCondition.reference(),
            grid=GridConfig(dt=1e-4, t_end=1.0),
            query=QueryConfig(interval=(20.0, 40.0)),
        )

    def __lshift__(self, other: "RunConfig | dict[str, Any]") -> "RunConfig":
        base = self.model_dump(exclude_unset=True)
        if isinstance(other, RunConfig):
            nxt = other.model_dump(exclude_unset=True, exclude_none=True)
        else:
            nxt = other
        try:
            new = RunConfig(**merger.merge(base, nxt))
        except ValidationError as e:
            raise ConfigException(describe_validation_error(e)) from e
        for name in RunConfig.model_fields:
            setattr(self, name, getattr(new, name))
        return self


class RuntimeConfig(BaseSettings):
    model_config = SettingsConfigDict(extra="ignore", env_prefix="PHAGE_SDE_")

    threads: int = Field(default=1, ge=1)
    log_level: str = "WARNING"


config = RunConfig.reference()
runtime = RuntimeConfig()


def get_run_config() -> RunConfig:
    return config


def get_runtime_config() -> RuntimeConfig:
    return runtime


def load_config(new_config: "RunConfig | dict[str, Any]") -> RunConfig:
    return config << new_config


def reset_config(new_config: RunConfig | None = None) -> RunConfig:
    """Replace every field of the singleton, the reference scenario by default."""
    source = new_config or RunConfig.reference()
    for name in RunConfig.model_fields:
        setattr(config, name, getattr(source, name))
    return config


def describe_validation_error(error: ValidationError) -> str:
    lines = [
        f"field {'.'.join(str(part) for part in item['loc']) or '<root>'}: {item['msg']}"
        for item in error.errors()
    ]
    return "invalid configuration:\n  " + "\n  ".join(lines)


def read_config_file(path: Path) -> RunConfig:
    if not path.is_file():
        raise ConfigException(f"config file {path} not found")
    try:
        data = TomlConfigSettingsSource(RunConfig, toml_file=path)()
    except tomllib.TOMLDecodeError as e:
        raise ConfigException(f"{path}: {e}") from e
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigException(f"{path}: {describe_validation_error(e)}") from e


def dump_config(cfg: RunConfig, path: Path) -> Path:
    payload = cfg.model_dump(mode="json", exclude_none=True)
    try:
        path.write_text(tomli_w.dumps(payload), encoding="utf-8")
    except OSError as e:
        raise ConfigException(f"cannot write config to {path}: {e}") from e
    return path
