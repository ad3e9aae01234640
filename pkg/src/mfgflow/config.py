"""Experiment configuration files and shipped presets.

A config is a JSON object (``schema_version`` 1)::

    {
      "schema_version": 1,
      "name": "quad-d3",
      "model": {"kind": "quadratic", "d": 3, ...}  or  "path/to/model.json",
      "grid": {"M": 100},                      # T defaults to the model horizon
      "solver": {"tol": 1e-9, "damping": 0.0},
      "sampling": {"n": 4000, "seed": 0, "mode": "pointwise"},
      "training": {"epochs": 2000, "width": 64, ...},
      "evaluation": {"pairs": 10, "seed": 1000},
      "sweep": {"widths": [32, 64, 128], "trials": 5},
      "out": "runs/quad-d3"
    }

Every section but ``model`` is optional. Relative model paths resolve
against the config file's directory.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from importlib import resources
from pathlib import Path

from .core import MfgModel, TimeGrid
from .models import ConfigError, load_model_config, model_from_dict
from .pipeline import MODES, TrainConfig
from .solver import PicardConfig

SCHEMA_VERSION = 1
SECTIONS = {"schema_version", "name", "model", "grid", "solver", "sampling", "training", "evaluation", "sweep", "out"}


@dataclass
class SamplingConfig:
    n: int = 4000
    seed: int = 0
    mode: str = "pointwise"

    def __post_init__(self):
        if self.n < 1:
            raise ConfigError("sampling.n must be positive")
        if self.mode not in MODES:
            raise ConfigError(f"sampling.mode must be one of {MODES}")


@dataclass
class EvaluationConfig:
    pairs: int = 10
    seed: int = 1000


@dataclass
class SweepConfig:
    widths: list[int] = field(default_factory=lambda: [32, 64, 128])
    trials: int = 5


@dataclass
class ExperimentConfig:
    model: MfgModel
    grid: TimeGrid
    solver: PicardConfig = PicardConfig()
    sampling: SamplingConfig = field(default_factory=SamplingConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = field(default_factory=EvaluationConfig)
    sweep: SweepConfig = field(default_factory=SweepConfig)
    name: str = "experiment"
    out: str | None = None

    def to_dict(self) -> dict:
        return {
            "schema_version": SCHEMA_VERSION,
            "name": self.name,
            "model": self.model.to_dict(),
            "grid": {"T": self.grid.T, "M": self.grid.M},
            "solver": self.solver.to_dict(),
            "sampling": asdict(self.sampling),
            "training": self.training.to_dict(),
            "evaluation": asdict(self.evaluation),
            "sweep": asdict(self.sweep),
            "out": self.out,
        }


def _section(cls, raw, name):
    raw = raw or {}
    if not isinstance(raw, dict):
        raise ConfigError(f"{name} must be an object")
    allowed = {f.name for f in fields(cls)}
    extra = set(raw) - allowed
    if extra:
        raise ConfigError(f"unknown keys in {name}: {sorted(extra)}")
    try:
        return cls(**raw)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{name}: {exc}") from None


def config_from_dict(raw: dict, base_dir: Path | None = None) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    extra = set(raw) - SECTIONS
    if extra:
        raise ConfigError(f"unknown config sections: {sorted(extra)}")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ConfigError(f"unsupported schema_version {raw.get('schema_version')}")
    if "model" not in raw:
        raise ConfigError("config needs a model")
    model_ref = raw["model"]
    try:
        if isinstance(model_ref, str):
            path = Path(model_ref)
            if not path.is_absolute() and base_dir is not None:
                path = base_dir / path
            if not path.exists():
                raise ConfigError(f"model file {path} does not exist")
            model = load_model_config(path)
        else:
            model = model_from_dict(model_ref)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None

    grid_raw = dict(raw.get("grid") or {})
    if set(grid_raw) - {"T", "M"}:
        raise ConfigError("grid accepts only T and M")
    T = float(grid_raw.get("T", model.T))
    if T != model.T:
        raise ConfigError(f"grid.T={T} differs from the model horizon {model.T}")
    try:
        grid = TimeGrid(T, int(grid_raw.get("M", 100)))
        solver = PicardConfig.from_dict(raw.get("solver") or {})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from None
    training = _section(TrainConfig, raw.get("training"), "training")
    sampling = _section(SamplingConfig, raw.get("sampling"), "sampling")
    if sampling.mode == "pointwise" and grid.M < 1:
        raise ConfigError("pointwise sampling needs M >= 1")
    return ExperimentConfig(
        model=model,
        grid=grid,
        solver=solver,
        sampling=sampling,
        training=training,
        evaluation=_section(EvaluationConfig, raw.get("evaluation"), "evaluation"),
        sweep=_section(SweepConfig, raw.get("sweep"), "sweep"),
        name=str(raw.get("name", "experiment")),
        out=raw.get("out"),
    )


def preset_names() -> list[str]:
    root = resources.files("mfgflow") / "presets"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".json"))


def load_config(ref: str | Path) -> ExperimentConfig:
    """Load a config file, or a shipped preset when ``ref`` names one."""
    path = Path(ref)
    if path.exists():
        text, base = path.read_text(), path.parent
    elif str(ref) in preset_names():
        text, base = (resources.files("mfgflow") / "presets" / f"{ref}.json").read_text(), None
    else:
        raise ConfigError(f"no config file or preset named {ref!r}")
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{ref}: {exc}") from None
    return config_from_dict(raw, base)
