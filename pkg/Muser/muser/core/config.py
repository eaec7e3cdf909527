"""Experiment configuration for MUSER.

A configuration file is flat ``key = value`` text with dotted namespaces::

    # toy pre-training run
    train.lr = 3e-4
    train.batch_size = 16
    text.template = "a song of {genre}, belongs to {tag}"

Every key must appear in :attr:`Config.DEFAULTS` and every value must match
the type of its default. Command-line flags are applied afterwards as
``key=value`` overrides.
"""
from __future__ import annotations

import os
from dataclasses import fields
from pathlib import Path
from typing import Any, Dict, Iterable, List, Optional, Set, Tuple

from .encoders import ModelConfig
from .errors import ConfigError
from .text import DEFAULT_TEMPLATE
from .training import TrainConfig

SEED_ENV = "MUSER_SEED"


def parse_value(raw: str) -> Any:
    """``true``/``false`` -> bool, then int, then float, else the unquoted string."""
    text = raw.strip()
    if len(text) >= 2 and text[0] == text[-1] and text[0] in "\"'":
        return text[1:-1]
    lowered = text.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(text)
        except ValueError:
            pass
    return text


def _strip_comment(line: str) -> str:
    quote = None
    for i, ch in enumerate(line):
        if quote:
            if ch == quote:
                quote = None
        elif ch in "\"'":
            quote = ch
        elif ch == "#":
            return line[:i]
    return line


def _format_value(value: Any) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, str):
        return f'"{value}"'
    return repr(value)


class Config:
    """Experiment settings loaded from an optional file plus overrides."""

    DEFAULTS: Dict[str, Any] = {
        "signal.frame_len": 512,
        "signal.hop": 256,
        "signal.window": "hann",
        "signal.log_compress": True,
        "signal.eps": 1e-6,
        "text.template": DEFAULT_TEMPLATE,
        "text.max_len": 32,
        "text.min_count": 1,
        "model.embed_dim": 64,
        "model.text_dim": 64,
        "model.spec_dim": 64,
        "model.audio_dim": 64,
        "model.hidden": 128,
        "model.grid": 4,
        "model.patch": 4,
        "model.frame_feat": 256,
        "model.max_vocab": 2048,
        "model.logit_scale_clamp": 0.0,
        "train.batch_size": 16,
        "train.epochs": 50,
        "train.lr": 3e-4,
        "train.optimizer": "adam",
        "train.beta1": 0.9,
        "train.beta2": 0.999,
        "train.adam_eps": 1e-8,
        "train.seed": 0,
        "train.spectrum_enabled": True,
        "train.loss_aggregation": "mean",
        "train.checkpoint_every": 0,
        "train.workers": 0,
        "train.eval_every": 0,
        "data.classes": 4,
        "data.per_class": 32,
        "data.clip_seconds": 1.0,
        "data.rate": 8000,
        "data.test_fraction": 0.25,
        "eval.task": "genre",
    }

    def __init__(self, path: Optional[Path] = None, overrides: Iterable[str] = ()) -> None:
        self.path = Path(path) if path is not None else None
        self.data: Dict[str, Any] = {}
        self.explicit: Set[str] = set()
        self.load()
        self.apply_overrides(overrides)

    @classmethod
    def coerce(cls, key: str, value: Any, where: str = "") -> Any:
        if key not in cls.DEFAULTS:
            raise ConfigError(f"{where}unknown configuration key {key!r}")
        default = cls.DEFAULTS[key]
        if isinstance(default, bool):
            ok = isinstance(value, bool)
        elif isinstance(default, int):
            ok = isinstance(value, int) and not isinstance(value, bool)
        elif isinstance(default, float):
            ok = isinstance(value, (int, float)) and not isinstance(value, bool)
            value = float(value) if ok else value
        else:
            ok = True
            value = value if isinstance(value, str) else _format_value(value)
        if not ok:
            raise ConfigError(
                f"{where}{key} expects {type(default).__name__}, got {value!r}"
            )
        return value

    @staticmethod
    def parse_lines(lines: Iterable[str], source: str = "<config>") -> List[Tuple[str, Any]]:
        entries = []
        for lineno, line in enumerate(lines, 1):
            text = _strip_comment(line).strip()
            if not text:
                continue
            key, sep, raw = text.partition("=")
            if not sep or not key.strip():
                raise ConfigError(f"{source}:{lineno}: expected 'key = value', got {line.strip()!r}")
            entries.append((key.strip(), parse_value(raw)))
        return entries

    def load(self) -> None:
        """Read the file (if any) and fill in the remaining defaults."""
        self.data = {}
        self.explicit = set()
        if self.path is not None:
            if not self.path.is_file():
                raise ConfigError(f"config file not found: {self.path}")
            try:
                text = self.path.read_text(encoding="utf-8")
            except (OSError, UnicodeDecodeError) as e:
                raise ConfigError(f"cannot read config {self.path}: {e}") from None
            for key, value in self.parse_lines(text.splitlines(), str(self.path)):
                self.data[key] = self.coerce(key, value, f"{self.path}: ")
                self.explicit.add(key)

        env_seed = os.environ.get(SEED_ENV)
        if env_seed and "train.seed" not in self.data:
            try:
                self.data["train.seed"] = int(env_seed)
            except ValueError:
                raise ConfigError(f"{SEED_ENV} must be an integer, got {env_seed!r}") from None

        for key, default in self.DEFAULTS.items():
            self.data.setdefault(key, default)

    def apply_overrides(self, overrides: Iterable[str]) -> None:
        for key, value in self.parse_lines(overrides, "--set"):
            self.data[key] = self.coerce(key, value, "--set: ")
            self.explicit.add(key)

    def save(self, path: Optional[Path] = None) -> Path:
        """Write every key back as sorted ``key = value`` lines."""
        path = Path(path) if path is not None else self.path
        if path is None:
            raise ConfigError("no path to save the configuration to")
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp_path = path.with_suffix(".tmp")
        tmp_path.write_text(self.dumps(), encoding="utf-8")
        tmp_path.replace(path)
        return path

    def dumps(self) -> str:
        return "".join(f"{k} = {_format_value(v)}\n" for k, v in sorted(self.data.items()))

    def get(self, key: str) -> Any:
        if key not in self.DEFAULTS:
            raise ConfigError(f"unknown configuration key {key!r}")
        return self.data[key]

    def section(self, prefix: str) -> Dict[str, Any]:
        prefix = prefix.rstrip(".") + "."
        return {k[len(prefix):]: v for k, v in self.data.items() if k.startswith(prefix)}

    @property
    def seed(self) -> int:
        return int(self.data["train.seed"])

    @property
    def task(self) -> str:
        return str(self.data["eval.task"])

    @property
    def template(self) -> str:
        return str(self.data["text.template"])

    def model_config(self, vocab_size: int = 0) -> ModelConfig:
        names = {f.name for f in fields(ModelConfig)}
        values = {k: v for k, v in self.section("model").items() if k in names}
        return ModelConfig(vocab_size=vocab_size, **values)

    @staticmethod
    def train_field(key: str) -> Optional[str]:
        """The :class:`TrainConfig` field a dotted key feeds, if any."""
        section, _, name = key.partition(".")
        if section == "train":
            return name
        if section == "signal":
            return "spectrum_eps" if name == "eps" else name
        if section == "text":
            return name
        return None

    def train_config(self) -> TrainConfig:
        values = {}
        for key, value in self.data.items():
            name = self.train_field(key)
            if name is not None:
                values[name] = value
        return TrainConfig(model=self.model_config(), **values)

    def explicit_train_fields(self) -> List[str]:
        """TrainConfig fields set by the file, ``--set`` or :meth:`update`."""
        return sorted({self.train_field(k) for k in self.explicit} - {None})

    def update(self, **kwargs: Any) -> None:
        """Set values by dotted key (``update(**{"train.lr": 1e-3})``)."""
        for key, value in kwargs.items():
            self.data[key] = self.coerce(key, value)
            self.explicit.add(key)
