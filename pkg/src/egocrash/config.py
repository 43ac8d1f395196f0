"""Run configuration: nested dataclasses, JSON files and flag overrides."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from .backbone import BackboneConfig
from .causal_blocks import PRESETS, BlockConfig
from .diffusion import ScheduleConfig
from .encoders import EncoderConfig
from .errors import ConfigError
from .scenario import ScenarioConfig

OUT_ENV = "EGOCRASH_OUT"


@dataclass
class RunConfig:
    stage: int = 0
    steps: int = 2000
    lr: float = 1e-5
    betas: tuple = (0.9, 0.999)
    batch: int = 2
    lam: float = 0.2
    gamma: float = 0.3
    seed: int = 0
    hooks: str = "full"
    trainable: str = "default"  # "default" or "train_all"
    manifest: Optional[str] = None
    ckpt_in: Optional[str] = None
    ckpt_out: Optional[str] = None
    ckpt_every: int = 500
    out: Optional[str] = None
    schedule: ScheduleConfig = field(default_factory=ScheduleConfig)
    model: BackboneConfig = field(default_factory=BackboneConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    blocks: BlockConfig = field(default_factory=BlockConfig)
    scenario: ScenarioConfig = field(default_factory=ScenarioConfig)

    def validate(self) -> "RunConfig":
        if self.stage not in (0, 1, 2):
            raise ConfigError(f"stage must be 0, 1 or 2, got {self.stage}")
        if self.steps < 0 or self.batch < 1:
            raise ConfigError("steps must be >= 0 and batch >= 1")
        if self.lr <= 0:
            raise ConfigError("learning rate must be positive")
        if self.lam < 0 or self.gamma < 0:
            raise ConfigError("lambda and gamma must be nonnegative")
        if self.hooks not in PRESETS:
            raise ConfigError(f"unknown hooks preset {self.hooks!r}")
        if self.trainable not in ("default", "train_all"):
            raise ConfigError("trainable must be 'default' or 'train_all'")
        if self.model.text_dim != self.encoder.dim:
            raise ConfigError("model.text_dim must equal encoder.dim")
        if self.model.frames != self.scenario.frames or self.model.resolution != self.scenario.resolution:
            raise ConfigError("model and scenario frame count / resolution disagree")
        if self.blocks.token_dim != self.encoder.dim:
            raise ConfigError("blocks.token_dim must equal encoder.dim")
        n_patch = (self.scenario.resolution // self.encoder.patch) ** 2
        if n_patch != self.blocks.n_tokens:
            raise ConfigError(f"blocks.n_tokens={self.blocks.n_tokens} but the encoder yields {n_patch} patches")
        return self

    # ---- serialisation -------------------------------------------------------

    def to_dict(self) -> dict:
        d = _plain(self)
        d["lambda"] = d.pop("lam")
        return d

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def save(self, path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.dumps(), encoding="utf-8")
        return path

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        d = dict(d)
        if "lambda" in d:
            d["lam"] = d.pop("lambda")
        return _build(cls, d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {path}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc

    def override(self, **kw) -> "RunConfig":
        """Return a copy with non-None keyword overrides applied; dotted keys via ``set_path``."""
        cfg = RunConfig.from_dict(self.to_dict())
        for k, v in kw.items():
            if v is None:
                continue
            cfg = cfg.set_path(k, v)
        return cfg

    def set_path(self, dotted: str, value: Any) -> "RunConfig":
        d = self.to_dict()
        parts = dotted.replace("-", "_").split(".")
        cur = d
        for p in parts[:-1]:
            if p not in cur or not isinstance(cur[p], dict):
                raise ConfigError(f"unknown config key {dotted!r}")
            cur = cur[p]
        if parts[-1] not in cur:
            raise ConfigError(f"unknown config key {dotted!r}")
        cur[parts[-1]] = value
        return RunConfig.from_dict(d)

    def model_hash(self) -> str:
        """Identity of everything a checkpoint's parameters depend on."""
        payload = json.dumps(
            {"model": _plain(self.model), "encoder": _plain(self.encoder), "schedule": _plain(self.schedule)},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        return {f.name: _plain(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_plain(x) for x in obj]
    return obj


def _build(cls, d: dict):
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(d) - set(names)
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} keys: {', '.join(sorted(unknown))}")
    kwargs = {}
    hints = {f.name: f.type for f in dataclasses.fields(cls)}
    nested = {
        "schedule": ScheduleConfig,
        "model": BackboneConfig,
        "encoder": EncoderConfig,
        "blocks": BlockConfig,
        "scenario": ScenarioConfig,
    }
    for k, v in d.items():
        if cls is RunConfig and k in nested and isinstance(v, dict):
            kwargs[k] = _build(nested[k], v)
        elif isinstance(v, list):
            kwargs[k] = tuple(v)
        else:
            kwargs[k] = v
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc


def toy_config(**kw) -> RunConfig:
    """Desk-scale defaults used by the scripts and the acceptance suite."""
    cfg = RunConfig(
        lr=1e-3,
        steps=2000,
        batch=2,
        model=BackboneConfig(patch=4, widths=(64, 64)),
        schedule=ScheduleConfig(K=1000),
    )
    return cfg.override(**kw)


def default_out_root() -> Path:
    return Path(os.environ.get(OUT_ENV, "runs"))
