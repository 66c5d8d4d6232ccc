"""
Experiment configuration.

Config files are flat INI: a ``[common]`` section plus optional sections
named after experiments, whose keys override ``[common]`` when that
experiment runs. CLI flags override both.
"""

import configparser
import hashlib
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional

import platformdirs
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from opwalk.utils.defaults import Bounds, Window
from opwalk.utils.errors import ConfigurationError

COMMON_SECTION = "common"


def cache_directory() -> Path:
    """Cache root: ``$OPWALK_CACHE`` or the platform user cache dir."""
    override = os.environ.get("OPWALK_CACHE")
    return Path(override) if override else Path(platformdirs.user_cache_dir("opwalk"))


class ExperimentConfig(BaseModel):
    """All parameters of one experiment run."""

    model_config = ConfigDict(extra="forbid", frozen=True)

    experiment: str
    d: int = Field(1, ge=1, le=3)
    p: float = Field(0.8, ge=0.0, le=1.0)
    n: int = Field(20, ge=0)
    n_list: Optional[List[int]] = None
    seeds: int = Field(30, ge=1)
    seed_base: int = Field(0, ge=0)
    boundary: Literal["open", "periodic"] = "open"
    mode: Literal["exact", "mc"] = "mc"
    horizon_margin: Optional[int] = Field(None, ge=0)
    spatial_margin: int = Field(Window.SPATIAL_MARGIN, ge=0)
    reps: int = Field(2000, ge=1)
    threads: int = Field(1, ge=1)
    out_dir: Path = Path("runs")

    # diagnostic parameters
    M: int = Field(5, ge=1)
    theta: float = Field(0.4, gt=0.0, lt=0.5)
    eps: float = Field(0.24, gt=0.0, lt=0.25)
    delta: float = Field(0.1, gt=0.0)
    C: Optional[float] = Field(None, gt=0.0)
    c: float = Field(Bounds.GOOD_ESCAPE_c, gt=0.0)
    N_max: int = Field(32, ge=1)
    N: int = Field(256, ge=1)
    patch_radius: int = Field(1, ge=0)
    alpha: float = Field(Bounds.LADDER_ALPHA, gt=0.0)
    ladder_constant: float = Field(Bounds.LADDER_C, gt=0.0)
    hard_checks: bool = False

    @field_validator("n_list", mode="before")
    @classmethod
    def _split_list(cls, value: Any) -> Any:
        if isinstance(value, str):
            parts = [part.strip() for part in value.split(",") if part.strip()]
            return [int(part) for part in parts] or None
        return value

    @field_validator("n_list")
    @classmethod
    def _non_negative(cls, value: Optional[List[int]]) -> Optional[List[int]]:
        if value is not None and any(v < 0 for v in value):
            raise ValueError("n_list entries must be non-negative")
        return value

    @model_validator(mode="after")
    def _hybrid_exponents(self) -> "ExperimentConfig":
        if not 2 * self.delta < self.eps:
            raise ValueError(f"need 0 < 2*delta < eps < 1/4, got delta={self.delta}, eps={self.eps}")
        return self

    # ------------------------------------------------------------------

    @property
    def n_values(self) -> List[int]:
        return list(self.n_list) if self.n_list else [self.n]

    @property
    def run_id(self) -> str:
        """Short content hash of the configuration."""
        canonical = self.model_dump_json(exclude={"threads", "out_dir"})
        return hashlib.sha256(canonical.encode()).hexdigest()[:12]

    def with_overrides(self, overrides: Mapping[str, Any]) -> "ExperimentConfig":
        merged = self.model_dump()
        merged.update({k: v for k, v in overrides.items() if v is not None})
        return build_config(merged)

    def to_ini_dict(self) -> Dict[str, str]:
        out = {}
        for key, value in self.model_dump().items():
            if value is None:
                continue
            if isinstance(value, list):
                out[key] = ",".join(str(v) for v in value)
            elif isinstance(value, bool):
                out[key] = "true" if value else "false"
            elif isinstance(value, float):
                out[key] = repr(value)
            else:
                out[key] = str(value)
        return out


def build_config(values: Mapping[str, Any]) -> ExperimentConfig:
    """Validate raw values; pydantic errors become ConfigurationError."""
    try:
        return ExperimentConfig(**dict(values))
    except ValidationError as exc:
        raise ConfigurationError(f"invalid configuration: {exc}") from exc


def read_config(path: Path, experiment: Optional[str] = None,
                overrides: Optional[Mapping[str, Any]] = None) -> ExperimentConfig:
    """
    Load an INI config.

    Args:
        path: config file
        experiment: experiment to run; defaults to the ``experiment`` key of ``[common]``
        overrides: values taking precedence over the file (CLI flags)
    """
    path = Path(path)
    if not path.exists():
        raise ConfigurationError(f"config file {path} not found")
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser.read(path)
    values: Dict[str, Any] = dict(parser[COMMON_SECTION]) if parser.has_section(COMMON_SECTION) else {}
    name = experiment or values.get("experiment")
    if not name:
        raise ConfigurationError(f"{path}: no experiment named in [common] or on the command line")
    if parser.has_section(name):
        values.update(parser[name])
    values["experiment"] = name
    if overrides:
        values.update({k: v for k, v in overrides.items() if v is not None})
    return build_config(values)


def write_config(config: ExperimentConfig, path: Path) -> Path:
    """Write a config echo that :func:`read_config` reads back unchanged."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    parser[COMMON_SECTION] = config.to_ini_dict()
    with path.open("w") as handle:
        parser.write(handle)
    return path
