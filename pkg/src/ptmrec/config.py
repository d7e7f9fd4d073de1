"""Run configuration: one JSON-serializable object covering data generation,
the encoder stack, and every training stage."""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field
from pathlib import Path

from .corpus import SyntheticConfig
from .encoder import EncoderConfig
from .errors import ConfigError
from .trainkit import ABLATION_MODES, TrainConfig

STRATEGY_NAMES = ("frozen", "prompt", "lora", "adapter")


@dataclass
class RunConfig:
    seed: int = 0
    seeds: tuple[int, ...] = (0, 1, 2, 3, 4)  # ablation / bench seed set
    mode: str = "ptmrec"
    strategy: str = "prompt"
    split_ratios: tuple[float, float, float] = (0.8, 0.1, 0.1)
    synth: SyntheticConfig = field(default_factory=SyntheticConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self):
        self.seeds = tuple(int(s) for s in self.seeds)
        self.split_ratios = tuple(float(r) for r in self.split_ratios)
        if self.mode not in ABLATION_MODES:
            raise ConfigError(
                f"mode must be one of {ABLATION_MODES}, got {self.mode!r}"
            )
        if self.strategy not in STRATEGY_NAMES:
            raise ConfigError(
                f"strategy must be one of {STRATEGY_NAMES}, got {self.strategy!r}"
            )
        if len(self.split_ratios) != 3 or abs(sum(self.split_ratios) - 1.0) > 1e-9:
            raise ConfigError("split_ratios must be three fractions summing to 1")


_SECTION_TYPES = {"synth": SyntheticConfig, "encoder": EncoderConfig, "train": TrainConfig}
_TUPLE_FIELDS = {"seeds", "split_ratios", "betas", "eval_ks"}


def _build(cls, data: dict, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'} must be a JSON object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - known)
    if unknown:
        where = f" in {path}" if path else ""
        raise ConfigError(f"unknown config keys{where}: {', '.join(unknown)}")
    kwargs = {}
    for key, value in data.items():
        sub = _SECTION_TYPES.get(key)
        if sub is not None and cls is RunConfig:
            kwargs[key] = _build(sub, value, f"{path}.{key}" if path else key)
        elif key in _TUPLE_FIELDS and isinstance(value, list):
            kwargs[key] = tuple(value)
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as err:
        if isinstance(err, ConfigError):
            raise
        raise ConfigError(str(err)) from err


def config_from_dict(data: dict) -> RunConfig:
    """Build a RunConfig, rejecting keys that match no known field."""
    return _build(RunConfig, data, "")


def config_to_dict(config: RunConfig) -> dict:
    return dataclasses.asdict(config)


def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except json.JSONDecodeError as err:
        raise ConfigError(f"config file {path} is not valid JSON: {err}") from None
    return config_from_dict(data)


def save_config(config: RunConfig, path: str | Path) -> None:
    Path(path).write_text(json.dumps(config_to_dict(config), indent=1) + "\n")
