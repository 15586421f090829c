"""Run configuration: one JSON file with channel, model, encoder, train and eval sections."""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path

from latres.channel import ChannelConfig
from latres.errors import ConfigError
from latres.model import EncoderSpec, ModelConfig
from latres.train import TrainSchedule

SEED_ENV = "LATRES_SEED"

EVAL_DEFAULTS = {"lambda": None, "tune_lambda": "dev", "grid": 0.05, "oracle": None, "split": "test"}


@dataclass
class RunConfig:
    channel: ChannelConfig = field(default_factory=ChannelConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    encoder: EncoderSpec = field(default_factory=EncoderSpec)
    train: TrainSchedule = field(default_factory=TrainSchedule)
    eval: dict = field(default_factory=lambda: dict(EVAL_DEFAULTS))
    n_utts: int = 6250
    nbest: int = 5
    raw: dict = field(default_factory=dict, repr=False)

    SECTIONS = ("channel", "model", "encoder", "train", "eval", "n_utts", "nbest")

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        unknown = set(d) - set(cls.SECTIONS)
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        ev = dict(EVAL_DEFAULTS)
        extra = set(d.get("eval", {})) - set(EVAL_DEFAULTS)
        if extra:
            raise ConfigError(f"unknown eval config keys: {sorted(extra)}")
        ev.update(d.get("eval", {}))
        try:
            return cls(
                channel=ChannelConfig.from_dict(d.get("channel", {})),
                model=ModelConfig.from_dict(d.get("model", {})),
                encoder=EncoderSpec.from_dict(d.get("encoder", {})),
                train=TrainSchedule.from_dict(d.get("train", {})),
                eval=ev,
                n_utts=int(d.get("n_utts", 6250)),
                nbest=int(d.get("nbest", 5)),
                raw=d,
            )
        except (TypeError, ValueError) as exc:
            raise ConfigError(f"invalid config value: {exc}") from None

    def explicit_seed(self, section: str) -> int | None:
        value = self.raw.get(section, {}).get("seed")
        return None if value is None else int(value)

    def to_dict(self) -> dict:
        return {
            "channel": self.channel.to_dict(),
            "model": self.model.to_dict(),
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "eval": dict(self.eval),
            "n_utts": self.n_utts,
            "nbest": self.nbest,
        }


def load_run_config(path: str | Path | None) -> RunConfig:
    """Read a config file; ``None`` gives the defaults.

    Raises:
        ConfigError: missing file, bad JSON, or unknown keys.
    """
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.is_file():
        raise ConfigError(f"config file not found: {p}")
    try:
        data = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p}: invalid JSON ({exc})") from None
    return RunConfig.from_dict(data)


def resolve_seed(flag: int | None, configured: int | None) -> int:
    """Flag wins, then an explicit config value, then ``LATRES_SEED``, then 0."""
    if flag is not None:
        return flag
    if configured is not None:
        return configured
    env = os.environ.get(SEED_ENV)
    if env:
        try:
            return int(env)
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env!r}") from None
    return 0
