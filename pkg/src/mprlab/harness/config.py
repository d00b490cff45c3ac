"""Run configuration: TOML sections with defaults, strict keys, dotted overrides."""
from __future__ import annotations

import sys
import zlib
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import tomli_w

from mprlab.errors import ConfigError

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib


@dataclass
class EnvSection:
    env_id: str = "hinged_door"
    horizon: int = 100


@dataclass
class CorpusSection:
    n_episodes: int = 200
    hesitation_prob: float = 0.05
    pause_min: int = 5
    pause_max: int = 20
    camera_jitter_std: float = 0.004
    expert_noise_std: float = 0.1


@dataclass
class PredictorSection:
    arch: str = "attention"
    d_model: int = 64
    n_heads: int = 2
    n_blocks: int = 2
    mlp_ratio: int = 2
    context_width: int = 128
    epochs: int = 40
    batch_size: int = 20
    lr: float = 1e-4
    val_ratio: float = 0.1
    patience: int = 0
    time_budget_s: float = 0.0


@dataclass
class RewardSection:
    provider: str = "mpr"
    use_masks: bool = True
    value_epochs: int = 60


@dataclass
class RLSection:
    n_demos: int = 20
    demo_noise_std: float = 1.5
    bc_epochs: int = 300
    hidden: list = field(default_factory=lambda: [64, 64, 64])
    gamma: float = 0.99
    polyak: float = 0.005
    lr: float = 1e-4
    batch_size: int = 64
    learning_starts: int = 1024
    utd: int = 4
    residual_scale: float = 0.2
    target_entropy: float = -3.0
    init_alpha: float = 0.1
    offline_ratio: float = 0.5
    pretrain_steps: int = 10000
    n_episodes: int = 300


@dataclass
class EvalSection:
    episodes: int = 20
    interval: int = 10
    seed: int = 10_000


SECTIONS = {
    "env": EnvSection, "corpus": CorpusSection, "predictor": PredictorSection,
    "reward": RewardSection, "rl": RLSection, "eval": EvalSection,
}
TOP_LEVEL = {"seed", "output_dir"}


@dataclass
class RunConfig:
    env: EnvSection = field(default_factory=EnvSection)
    corpus: CorpusSection = field(default_factory=CorpusSection)
    predictor: PredictorSection = field(default_factory=PredictorSection)
    reward: RewardSection = field(default_factory=RewardSection)
    rl: RLSection = field(default_factory=RLSection)
    eval: EvalSection = field(default_factory=EvalSection)
    seed: int = 0
    output_dir: str = "runs"

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        cfg = cls()
        for key, value in data.items():
            if key in TOP_LEVEL:
                setattr(cfg, key, _coerce(key, value, getattr(cfg, key)))
            elif key in SECTIONS:
                if not isinstance(value, dict):
                    raise ConfigError(f"[{key}] must be a table")
                section = getattr(cfg, key)
                for k, v in value.items():
                    _set_field(section, key, k, v)
            else:
                raise ConfigError(f"unknown config key '{key}'")
        return cfg

    def to_dict(self) -> dict:
        return asdict(self)

    def override(self, assignment: str) -> None:
        """Apply ``section.key=value``; the value is parsed as a TOML literal."""
        if "=" not in assignment:
            raise ConfigError(f"override '{assignment}' is not key=value")
        path, raw = (p.strip() for p in assignment.split("=", 1))
        value = _parse_literal(raw)
        parts = path.split(".")
        if len(parts) == 1 and parts[0] in TOP_LEVEL:
            setattr(self, parts[0], _coerce(parts[0], value, getattr(self, parts[0])))
        elif len(parts) == 2 and parts[0] in SECTIONS:
            _set_field(getattr(self, parts[0]), parts[0], parts[1], value)
        else:
            raise ConfigError(f"unknown config key '{path}'")

    def write(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(tomli_w.dumps(self.to_dict()), encoding="utf-8")
        return path


def _parse_literal(raw: str):
    try:
        return tomllib.loads(f"v = {raw}")["v"]
    except tomllib.TOMLDecodeError:
        return raw  # bare words are strings


def _coerce(name: str, value, current):
    if isinstance(current, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"{name} must be true or false")
        return value
    if isinstance(current, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"{name} must be an integer")
        return value
    if isinstance(current, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"{name} must be a number")
        return float(value)
    if isinstance(current, list):
        if not isinstance(value, list):
            raise ConfigError(f"{name} must be a list")
        return list(value)
    if not isinstance(value, str):
        raise ConfigError(f"{name} must be a string")
    return value


def _set_field(section, section_name: str, key: str, value) -> None:
    names = {f.name for f in fields(section)}
    if key not in names:
        raise ConfigError(f"unknown config key '{section_name}.{key}'")
    setattr(section, key, _coerce(f"{section_name}.{key}", value, getattr(section, key)))


def load_config(path=None, overrides=()) -> RunConfig:
    data = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise ConfigError(f"config file not found: {p}")
        try:
            data = tomllib.loads(p.read_text(encoding="utf-8"))
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{p}: {exc}") from exc
    cfg = RunConfig.from_dict(data)
    for o in overrides:
        cfg.override(o)
    return cfg


def component_seed(root: int, name: str, index: int = 0) -> int:
    """Independent seed for a named component: hash of (root, name, index)."""
    ss = np.random.SeedSequence([root, zlib.crc32(name.encode()), index])
    return int(ss.generate_state(1, dtype=np.uint32)[0])
