"""
Experiment Configuration

Pydantic models for a Monte Carlo experiment and the loader that
resolves them: defaults, then the JSON file, then the environment
(output directory only), then command-line overrides.
"""

import json
import logging
import os
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional

from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, model_validator

from geom_core import DieselError, space_dim
from problem import DEFAULT_MAX_ITERS, DEFAULT_REL_TOL
from scenario import FormationConfig, NoiseConfig, TrajectoryKind

logger = logging.getLogger(__name__)

ENV_FILE = "config/env.local"
OUTPUT_DIR_ENV = "DIESEL_OUTPUT_DIR"


class ConfigError(DieselError):
    """The experiment configuration or its file is invalid"""


class Method(str, Enum):
    DIESEL = "diesel"
    EKF = "ekf"
    STATIC = "static"


class SolverConfig(BaseModel):
    """Per-window projected-gradient budget"""
    max_iters: int = Field(default=DEFAULT_MAX_ITERS, ge=1)
    rel_tol: float = Field(default=DEFAULT_REL_TOL, gt=0.0)
    warm_start: bool = True


class EkfConfig(BaseModel):
    """EKF tuning scalars and the grid searched by tune-ekf"""
    q: float = Field(default=0.01, ge=0.0)
    r: float = Field(default=0.25, gt=0.0)
    # None means sigma_init^2
    initial_variance: Optional[float] = Field(default=None, gt=0.0)
    q_grid: List[float] = Field(default_factory=lambda: [1e-4, 1e-3, 1e-2, 1e-1])
    r_grid: List[float] = Field(default_factory=lambda: [0.0625, 0.25, 1.0])


class ExperimentConfig(BaseModel):
    """Everything needed to reproduce one Monte Carlo experiment"""
    trajectory: TrajectoryKind = Field(default_factory=TrajectoryKind)
    formation: FormationConfig = Field(default_factory=FormationConfig)
    noise: NoiseConfig = Field(default_factory=NoiseConfig)
    methods: List[Method] = Field(default_factory=lambda: [Method.DIESEL, Method.EKF, Method.STATIC])
    window_len: int = Field(default=5, ge=0)
    trials: int = Field(default=100, ge=1)
    duration_ticks: int = Field(default=300, ge=1)
    dt: float = Field(default=1.0, gt=0.0)
    solver: SolverConfig = Field(default_factory=SolverConfig)
    ekf: EkfConfig = Field(default_factory=EkfConfig)
    output_dir: str = "results"
    base_seed: int = Field(default=0, ge=0)
    workers: int = Field(default=1, ge=1)

    @model_validator(mode="after")
    def _consistent(self) -> "ExperimentConfig":
        if Method.DIESEL in self.methods and self.window_len < 1:
            raise ValueError(f"window_len (T0) must be at least 1 for diesel, got {self.window_len}")
        if len(set(self.methods)) != len(self.methods):
            raise ValueError(f"duplicate methods: {[m.value for m in self.methods]}")
        if len(self.noise.current) > self.trajectory.dim:
            raise ValueError(f"current has {len(self.noise.current)} components, "
                             f"trajectory is {self.trajectory.dim}-D")
        return self

    @property
    def dim(self) -> int:
        return space_dim(self.trajectory.dim)

    @property
    def initial_variance(self) -> float:
        if self.ekf.initial_variance is not None:
            return self.ekf.initial_variance
        return self.noise.sigma_init ** 2

    def echo(self) -> Dict[str, Any]:
        """JSON-ready resolved configuration"""
        return self.model_dump(mode="json")


def _merge(base: Dict[str, Any], overrides: Mapping[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in overrides.items():
        if value is None:
            continue
        if isinstance(value, Mapping):
            current = merged.get(key)
            nested = _merge(dict(current) if isinstance(current, Mapping) else {}, value)
            if nested or key in merged:
                merged[key] = nested
        else:
            merged[key] = value
    return merged


def load_config(path: Optional[Path] = None, overrides: Optional[Mapping[str, Any]] = None,
                env_file: Optional[str] = ENV_FILE) -> ExperimentConfig:
    """
    Resolve an experiment configuration

    Args:
        path: JSON config file (defaults only if None)
        overrides: Nested values from the command line; None entries are ignored
        env_file: dotenv file to load before reading the environment

    Returns:
        The validated configuration
    """
    data: Dict[str, Any] = {}
    if path is not None:
        path = Path(path)
        try:
            with open(path, "r") as f:
                data = json.load(f)
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"config file {path} must hold a JSON object")
        logger.info(f"Loaded experiment config from {path}")

    if env_file:
        load_dotenv(env_file)
    env_dir = os.getenv(OUTPUT_DIR_ENV)
    if env_dir:
        data["output_dir"] = env_dir

    data = _merge(data, overrides or {})
    try:
        return ExperimentConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {e}")
