"""
Experiment configuration and result manifest models.

Configs live in INI files (one section per concern); they are parsed with
configparser and validated here. `ExperimentConfig.to_ini()` writes a file
that loads back to an equal config.
"""
from __future__ import annotations

import configparser
import io
from pathlib import Path
from typing import Any, ClassVar, Dict, List, Literal, Optional, Sequence, Tuple

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, PrivateAttr, field_validator, model_validator

from .errors import ConfigError

SystemName = Literal["toy", "chain"]
InputKind = Literal["impulse", "noise"]
EtaDistribution = Literal["gaussian", "rademacher"]
KernelFamily = Literal["linear", "polynomial", "gaussian"]
OutputFormat = Literal["csv", "json"]


def _split_list(value):
    if isinstance(value, str):
        return [item.strip() for item in value.split(",") if item.strip()]
    return value


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SystemConfig(_Section):
    name: SystemName = "toy"
    dt: float = Field(0.5, gt=0)
    substeps: int = Field(50, ge=1)
    # chain parameters, ignored by the toy model
    n: int = Field(50, ge=2)
    alpha: float = 1.0
    beta: float = 1.15
    epsilon: float = Field(0.0, ge=0)


class SamplingConfig(_Section):
    L: int = Field(5, ge=0)
    samples_per_trajectory: int = Field(11, ge=1)
    s_g: int = Field(100, ge=1)
    eta_distribution: EtaDistribution = "gaussian"
    # impulse: x0 set by the amplitude, u = 0; noise: x0 = 0, u = amplitude * white noise
    training_input: InputKind = "impulse"
    training_amplitudes: Tuple[float, ...] = (0.5, 1.0)
    seed: int = Field(20240501, ge=0)
    # horizons visited by the `sweep` command
    sweep_L: Tuple[int, ...] = (4, 5, 6)

    @field_validator("training_amplitudes", "sweep_L", mode="before")
    @classmethod
    def split_lists(cls, value):
        return _split_list(value)

    @field_validator("training_amplitudes")
    @classmethod
    def amplitudes_present(cls, value):
        if not value:
            raise ValueError("at least one training amplitude is needed")
        return value


class ReductionConfig(_Section):
    r: Tuple[int, ...] = (2,)
    bpod_horizon: int = Field(40, ge=1)
    output_projection_rank: int = Field(10, ge=1)
    learned_r: int = Field(5, ge=1)
    learned_R: int = Field(20, ge=1)

    @field_validator("r", mode="before")
    @classmethod
    def split_dimensions(cls, value):
        return _split_list(value)

    @field_validator("r")
    @classmethod
    def dimensions_positive(cls, value):
        if not value or any(v < 1 for v in value):
            raise ValueError("reduced dimensions must be positive")
        return value


class KernelConfig(_Section):
    family: KernelFamily = "gaussian"
    alpha: float = 1.0
    degree: float = 2.0
    sigma: float = 8.0


class KrrConfig(_Section):
    alpha_grid: Tuple[float, ...] = (1e-8, 1e-6, 1e-4, 1e-2)
    gamma_grid: Tuple[float, ...] = (1e-3, 1e-2, 1e-1, 1.0)
    folds: int = Field(5, ge=2)
    seed: int = Field(0, ge=0)

    @field_validator("alpha_grid", "gamma_grid", mode="before")
    @classmethod
    def split_grids(cls, value):
        return _split_list(value)

    @field_validator("alpha_grid", "gamma_grid")
    @classmethod
    def grids_present(cls, value):
        if not value:
            raise ValueError("grids must be non-empty")
        return value


class TestSetConfig(_Section):
    count: int = Field(100, ge=1)
    amplitude_low: float = 0.0
    amplitude_high: float = 1.0
    steps: int = Field(20, ge=1)
    seed: int = Field(7, ge=0)
    input: InputKind = "impulse"
    sinusoid: bool = True
    sinusoid_steps: int = Field(40, ge=1)

    @model_validator(mode="after")
    def amplitudes_ordered(self):
        if self.amplitude_high < self.amplitude_low:
            raise ValueError("amplitude_high must be >= amplitude_low")
        return self


class OutputConfig(_Section):
    directory: str = ""
    format: OutputFormat = "csv"


class ExperimentConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    experiment: Literal["toy", "surrogate"] = "toy"
    system: SystemConfig = SystemConfig()
    sampling: SamplingConfig = SamplingConfig()
    reduction: ReductionConfig = ReductionConfig()
    kernel: KernelConfig = KernelConfig()
    krr: KrrConfig = KrrConfig()
    test: TestSetConfig = TestSetConfig()
    output: OutputConfig = OutputConfig()

    SECTIONS: ClassVar[Tuple[str, ...]] = ("system", "sampling", "reduction", "kernel", "krr", "test", "output")

    def to_ini(self) -> str:
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser["experiment"] = {"name": self.experiment}
        for section in self.SECTIONS:
            values = getattr(self, section).model_dump()
            parser[section] = {key: _format_value(value) for key, value in values.items()}
        buffer = io.StringIO()
        parser.write(buffer)
        return buffer.getvalue()

    def canonical_json(self) -> str:
        return self.model_dump_json()

    @classmethod
    def from_ini_text(cls, text: str, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        parser = configparser.ConfigParser(interpolation=None)
        parser.optionxform = str
        parser.read_string(text)
        apply_overrides(parser, overrides)
        data: Dict[str, Any] = {}
        for section in parser.sections():
            if section == "experiment":
                unknown = set(parser["experiment"]) - {"name"}
                if unknown:
                    raise ConfigError(f"unknown keys in [experiment]: {sorted(unknown)}")
                if "name" in parser["experiment"]:
                    data["experiment"] = parser["experiment"]["name"]
            elif section in cls.SECTIONS:
                data[section] = dict(parser[section])
            else:
                raise ConfigError(f"unknown config section [{section}]")
        return cls.model_validate(data)

    @classmethod
    def load(cls, path: Path, overrides: Sequence[str] = ()) -> "ExperimentConfig":
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}")
        return cls.from_ini_text(path.read_text(encoding="utf-8"), overrides)


def _format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (list, tuple)):
        return ", ".join(_format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def apply_overrides(parser: configparser.ConfigParser, overrides: Sequence[str]) -> None:
    """Apply `section.key=value` edits before validation."""
    for item in overrides:
        target, sep, value = item.partition("=")
        section, dot, key = target.strip().partition(".")
        if not sep or not dot or not key:
            raise ConfigError(f"override must look like section.key=value, got '{item}'")
        if not parser.has_section(section):
            parser.add_section(section)
        parser[section][key.strip()] = value.strip()


def default_config(experiment: str) -> ExperimentConfig:
    """Shipped defaults: the toy-model study or the non-normal chain surrogate."""
    if experiment == "toy":
        return ExperimentConfig()
    if experiment == "surrogate":
        return ExperimentConfig(
            experiment="surrogate",
            system=SystemConfig(name="chain", dt=0.5, substeps=5, n=50, alpha=1.0, beta=1.05, epsilon=0.0),
            sampling=SamplingConfig(L=10, samples_per_trajectory=31, s_g=200, training_input="noise",
                                    training_amplitudes=(0.25, 0.5, 0.75, 1.0, 1.25)),
            reduction=ReductionConfig(r=(5,), bpod_horizon=80, output_projection_rank=10, learned_r=5, learned_R=20),
            kernel=KernelConfig(family="gaussian", sigma=20.0),
            test=TestSetConfig(count=20, amplitude_low=0.25, amplitude_high=1.25, steps=30, input="noise",
                               sinusoid=False),
        )
    raise ConfigError(f"unknown experiment '{experiment}'")


class MethodSummary(BaseModel):
    method: str
    r: int
    seed: int
    mean_error: Optional[float] = None
    median_error: Optional[float] = None
    diverged: int = 0
    # step index at which each test trajectory left the bounded region, None if it never did
    blowup_steps: List[Optional[int]] = Field(default_factory=list)
    sinusoid_error: Optional[float] = None
    sinusoid_blowup_step: Optional[int] = None
    reconstruction_error: Optional[float] = None

    @property
    def first_divergence_step(self) -> Optional[int]:
        steps = [step for step in self.blowup_steps if step is not None]
        return min(steps) if steps else None

    @property
    def key(self) -> str:
        return f"{self.method}_{self.r}_{self.seed}"


class ResultManifest(BaseModel):
    """Everything a run reports. Holds no timestamps; those go to the run ledger."""
    experiment: str
    config_hash: str
    version: str
    methods: List[MethodSummary] = Field(default_factory=list)
    spectra: Dict[str, List[float]] = Field(default_factory=dict)
    files: List[str] = Field(default_factory=list)
    extras: Dict[str, Any] = Field(default_factory=dict)

    # error curves by file key: (times (T+1,), curves (count, T+1)); not serialized
    _curves: Dict[str, Tuple[np.ndarray, np.ndarray]] = PrivateAttr(default_factory=dict)

    def attach_curves(self, key: str, curves: np.ndarray, times: np.ndarray) -> None:
        self._curves[key] = (np.asarray(times, dtype=float), np.atleast_2d(np.asarray(curves, dtype=float)))

    @property
    def curves(self) -> Dict[str, Tuple[np.ndarray, np.ndarray]]:
        return self._curves

    def method(self, name: str, r: Optional[int] = None) -> MethodSummary:
        for summary in self.methods:
            if summary.method == name and (r is None or summary.r == r):
                return summary
        raise KeyError(name)
