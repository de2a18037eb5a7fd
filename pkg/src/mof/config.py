"""Run configuration: flat ``key = value`` files, named presets, CLI overrides.

Precedence, lowest first: built-in defaults, ``MOF_SEED`` from the
environment, the preset, the config file, explicit command-line flags.
Every run writes the fully resolved config into its output directory, and
loading that file back reproduces the run.
"""

from __future__ import annotations

import os
from dataclasses import dataclass, fields, replace
from pathlib import Path
from typing import Any, Mapping, get_type_hints

from .bop import PhaseConfig
from .encoders import EncoderDims
from .loss import DEFAULT_SIGMA
from .optim import FRAME_LR, FINETUNE_MODEL_LR, TOY_MODEL_LR

CONFIG_NAME = "config.txt"
SEED_ENV = "MOF_SEED"


class ConfigError(ValueError):
    pass


PRESETS: dict[str, dict[str, Any]] = {
    "paper-lr": {"alpha": FINETUNE_MODEL_LR, "beta": FRAME_LR, "sigma": DEFAULT_SIGMA, "batch_size": 16},
    "toy-lr": {"alpha": TOY_MODEL_LR, "beta": FRAME_LR, "sigma": DEFAULT_SIGMA, "batch_size": 16},
}


@dataclass
class RunConfig:
    # PhaseConfig fields
    U: int = 2
    R: int = 16
    t: int = 400
    alpha: float = TOY_MODEL_LR
    beta: float = FRAME_LR
    inner_steps: int = 1
    batch_size: int = 16
    eval_every: int | None = None
    first_order: bool = False
    seed: int = 0
    sigma: float = DEFAULT_SIGMA
    weight_decay: float = 0.01
    k_test: int | None = None
    precision: str = "f32"
    mof: bool = True
    # encoder dims; frame geometry and vocabulary come from the dataset
    patch: int = 4
    hidden: int = 32
    embed: int = 16
    max_frames: int = 32
    # plumbing
    data: str = ""
    out: str = ""
    preset: str = "toy-lr"
    workers: int = 1
    log_timing: bool = False

    def phase_config(self) -> PhaseConfig:
        names = {f.name for f in fields(PhaseConfig)}
        return PhaseConfig(**{k: v for k, v in self.to_dict().items() if k in names})

    def encoder_dims(self, height: int, width: int, channels: int, vocab: int) -> EncoderDims:
        return EncoderDims(patch=self.patch, height=height, width=width, channels=channels, hidden=self.hidden,
                           embed=self.embed, max_frames=self.max_frames, vocab=vocab)

    def to_dict(self) -> dict[str, Any]:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    def validate(self) -> None:
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r}; choose from {', '.join(PRESETS)}")
        if self.workers < 1:
            raise ConfigError("workers must be >= 1")
        for name in ("patch", "hidden", "embed", "max_frames"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        try:
            self.phase_config().validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None


_HINTS = get_type_hints(RunConfig)


def _parse_value(key: str, raw: str) -> Any:
    hint = _HINTS[key]
    raw = raw.strip()
    optional = "None" in str(hint)
    if optional and raw.lower() == "none":
        return None
    base = int if "int" in str(hint) else float if hint is float else bool if hint is bool else str
    try:
        if base is bool:
            low = raw.lower()
            if low not in ("true", "false"):
                raise ValueError(raw)
            return low == "true"
        return base(raw)
    except ValueError:
        raise ConfigError(f"{key}: cannot parse {raw!r} as {base.__name__}") from None


def _format_value(value: Any) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def parse_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Parse ``key = value`` lines; ``#`` starts a comment. Unknown keys are errors."""
    out: dict[str, Any] = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key = value, got {line!r}")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _HINTS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        out[key] = _parse_value(key, raw)
    return out


def load_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    return parse_text(path.read_text(encoding="utf-8"), str(path))


def dumps(cfg: RunConfig) -> str:
    lines = [f"{k} = {_format_value(v)}" for k, v in cfg.to_dict().items()]
    return "\n".join(lines) + "\n"


def write_resolved(cfg: RunConfig, directory: str | Path) -> Path:
    path = Path(directory) / CONFIG_NAME
    path.write_text(dumps(cfg), encoding="utf-8")
    return path


def resolve(file_values: Mapping[str, Any] | None = None, overrides: Mapping[str, Any] | None = None,
            env: Mapping[str, str] | None = None) -> RunConfig:
    """Apply the precedence chain and validate the result."""
    env = os.environ if env is None else env
    file_values = dict(file_values or {})
    overrides = dict(overrides or {})
    for key in list(file_values) + list(overrides):
        if key not in _HINTS:
            raise ConfigError(f"unknown key {key!r}")

    cfg = RunConfig()
    if SEED_ENV in env:
        cfg = replace(cfg, seed=_parse_value("seed", env[SEED_ENV]))
    preset = overrides.get("preset", file_values.get("preset", cfg.preset))
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r}; choose from {', '.join(PRESETS)}")
    cfg = replace(cfg, preset=preset, **PRESETS[preset])
    cfg = replace(cfg, **file_values)
    cfg = replace(cfg, **overrides)
    cfg.validate()
    return cfg
