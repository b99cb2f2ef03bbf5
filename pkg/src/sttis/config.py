"""Run configuration: one JSON document shared by every CLI command.

Every section is optional and every key has a default; unknown keys are
rejected so that typos fail loudly instead of silently using a default.
The effective configuration (defaults filled in, command-line overrides
applied) is written as ``config.json`` next to each command's outputs.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

from .errors import ConfigError
from .ingest import GridSpec
from .model import ModelConfig

CONFIG_ECHO = "config.json"

# model keys supplied by the data rather than by the user
_DERIVED_MODEL_KEYS = {"n", "o"}


@dataclass(frozen=True)
class GridOptions:
    rows: int | None = None
    cols: int | None = None
    bbox: tuple[float, float, float, float] | None = None  # lat_min, lat_max, lon_min, lon_max
    slot_minutes: int = 30
    origin: str | float | None = None  # first slot start; default midnight UTC before the first trip
    num_slots: int | None = None

    def spec(self) -> GridSpec:
        if self.rows is None or self.cols is None:
            raise ConfigError("grid.rows and grid.cols are required")
        try:
            return GridSpec(self.rows, self.cols, None if self.bbox is None else tuple(self.bbox), self.slot_minutes)
        except ValueError as exc:
            raise ConfigError(f"grid: {exc}") from None


@dataclass(frozen=True)
class SplitOptions:
    train_days: int = 40
    test_days: int = 20
    val_fraction: float = 0.2


@dataclass(frozen=True)
class TrainOptions:
    epochs: int = 50
    batch_size: int = 32
    lr: float = 1e-3
    seed: int = 0


@dataclass(frozen=True)
class GraphOptions:
    seed: int = 0


@dataclass(frozen=True)
class EvaluateOptions:
    threshold: float = 10.0
    range: str = "test"  # val | test


@dataclass(frozen=True)
class RunConfig:
    grid: GridOptions = field(default_factory=GridOptions)
    split: SplitOptions = field(default_factory=SplitOptions)
    model: dict = field(default_factory=dict)  # ModelConfig fields other than n and o
    train: TrainOptions = field(default_factory=TrainOptions)
    graph: GraphOptions = field(default_factory=GraphOptions)
    evaluate: EvaluateOptions = field(default_factory=EvaluateOptions)

    def __post_init__(self):
        allowed = {f.name for f in fields(ModelConfig)} - _DERIVED_MODEL_KEYS
        unknown = set(self.model) - allowed
        if unknown:
            raise ConfigError(f"unknown model keys {sorted(unknown)}; allowed: {sorted(allowed)}")
        if self.evaluate.range not in ("val", "test"):
            raise ConfigError(f"evaluate.range must be val or test, got {self.evaluate.range!r}")

    def model_config(self, n: int, o: int) -> ModelConfig:
        try:
            return ModelConfig(n=n, o=o, **self.model)
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"model: {exc}") from None

    def to_dict(self) -> dict:
        out = asdict(self)
        defaults = ModelConfig(n=4).to_dict()
        out["model"] = {k: v for k, v in defaults.items() if k not in _DERIVED_MODEL_KEYS}
        out["model"].update({k: list(v) if isinstance(v, tuple) else v for k, v in self.model.items()})
        if out["grid"]["bbox"] is not None:
            out["grid"]["bbox"] = list(out["grid"]["bbox"])
        return out

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def echo(self, out_dir) -> Path:
        path = Path(out_dir) / CONFIG_ECHO
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_json())
        return path

    def with_overrides(self, section: str, **values) -> "RunConfig":
        """Copy with non-None ``values`` replacing keys of ``section``."""
        values = {k: v for k, v in values.items() if v is not None}
        if not values:
            return self
        if section == "model":
            return replace(self, model={**self.model, **values})
        return replace(self, **{section: replace(getattr(self, section), **values)})

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("configuration must be a JSON object")
        sections = {"grid": GridOptions, "split": SplitOptions, "train": TrainOptions,
                    "graph": GraphOptions, "evaluate": EvaluateOptions}
        unknown = set(doc) - set(sections) - {"model"}
        if unknown:
            raise ConfigError(f"unknown configuration sections {sorted(unknown)}")
        built = {}
        for name, kind in sections.items():
            part = doc.get(name, {})
            if not isinstance(part, dict):
                raise ConfigError(f"section {name!r} must be an object")
            known = {f.name for f in fields(kind)}
            extra = set(part) - known
            if extra:
                raise ConfigError(f"unknown keys in {name!r}: {sorted(extra)}; allowed: {sorted(known)}")
            built[name] = kind(**part)
        model = doc.get("model", {})
        if not isinstance(model, dict):
            raise ConfigError("section 'model' must be an object")
        model = {k: tuple(v) if isinstance(v, list) else v for k, v in model.items()}
        return cls(model=model, **built)

    @classmethod
    def load(cls, path) -> "RunConfig":
        p = Path(path)
        try:
            doc = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{p}: invalid JSON ({exc})") from None
        return cls.from_dict(doc)
