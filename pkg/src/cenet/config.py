"""Run configuration stored as a small TOML file with three tables."""

from __future__ import annotations

from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib
import tomli_w

from .evaluation import VARIANTS, InferenceConfig
from .history import ConfigError
from .model import HyperParams


@dataclass
class RunSettings:
    data_dir: str = ""
    granularity: int = 0  # 0: infer from the dataset directory name
    out_dir: str = "runs"
    ablation: str = ""
    use_cache: bool = False
    select_best_on_valid: bool = True
    dump_scores: int = 0


@dataclass
class RunConfig:
    run: RunSettings = field(default_factory=RunSettings)
    model: HyperParams = field(default_factory=HyperParams)
    inference: InferenceConfig = field(default_factory=InferenceConfig)

    def validate(self) -> "RunConfig":
        self.model.validate()
        if self.model.alpha == 0.0:
            raise ConfigError("alpha = 0 leaves no entity distribution to rank with; use alpha > 0")
        self.inference.validate()
        if self.run.ablation and self.run.ablation not in VARIANTS:
            raise ConfigError(f"unknown ablation {self.run.ablation!r}; valid names: {', '.join(VARIANTS)}")
        return self

    def to_dict(self) -> dict:
        return {"run": asdict(self.run), "model": asdict(self.model), "inference": asdict(self.inference)}

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        sections = {"run": RunSettings, "model": HyperParams, "inference": InferenceConfig}
        unknown = set(data) - set(sections)
        if unknown:
            raise ConfigError(f"unknown config sections: {sorted(unknown)}")
        built = {}
        for name, kind in sections.items():
            values = dict(data.get(name, {}))
            allowed = {f.name: f for f in fields(kind)}
            bad = set(values) - set(allowed)
            if bad:
                raise ConfigError(f"unknown keys in [{name}]: {sorted(bad)}")
            for key, value in values.items():
                default = getattr(kind(), key)
                if isinstance(default, float) and isinstance(value, int) and not isinstance(value, bool):
                    values[key] = float(value)
                elif type(values[key]) is not type(default):
                    raise ConfigError(f"[{name}] {key}: expected {type(default).__name__}, got {value!r}")
            built[name] = kind(**values)
        return cls(**built)


def save_config(config: RunConfig, path) -> None:
    Path(path).write_text(tomli_w.dumps(config.to_dict()), encoding="utf-8")


def load_config(path) -> RunConfig:
    with Path(path).open("rb") as fh:
        return RunConfig.from_dict(tomllib.load(fh))
