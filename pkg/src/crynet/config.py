"""Flat ``key = value`` run configuration shared by the CLI and checkpoints."""

from __future__ import annotations

import dataclasses
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigInvalidError
from .model import ModelConfig

# Literal "2^{-5}" from the training setup; the default below reads it as 2e-5.
LR_LITERAL = 2.0 ** -5
LR_DEFAULT = 2e-5


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 700
    batch_size: int = 64
    lr: float = LR_DEFAULT
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    record_wall_time: bool = True


@dataclass(frozen=True)
class FrontendConfig:
    sample_rate: int = 16000
    n_mfcc: int = 13
    n_mels: int = 26
    frame_s: float = 0.025
    hop_s: float = 0.010
    preemphasis: float = 0.97
    silence_threshold_db: float = -35.0
    silence_window_s: float = 0.050
    target_seconds: float = 3.0


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    frontend: FrontendConfig = field(default_factory=FrontendConfig)
    model_kind: str = "improved"
    dataset_root: str = ""
    cache_dir: str = ""
    seed: int = 0

    _SECTIONS = ("model", "train", "frontend")

    @classmethod
    def from_text(cls, text: str) -> "RunConfig":
        return cls.from_flat(parse_kv(text))

    @classmethod
    def from_file(cls, path: str | Path) -> "RunConfig":
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigInvalidError(f"cannot read config {path}: {exc}") from exc
        return cls.from_text(text)

    @classmethod
    def from_flat(cls, values: dict[str, str]) -> "RunConfig":
        owners = _key_owners()
        buckets: dict[str, dict] = {s: {} for s in cls._SECTIONS}
        top: dict = {}
        for key, raw in values.items():
            if key not in owners:
                raise ConfigInvalidError(f"unknown config key {key!r}")
            section, typ = owners[key]
            value = coerce(raw, typ, key)
            (buckets[section] if section else top)[key] = value
        cfg = cls(
            model=ModelConfig(**buckets["model"]),
            train=TrainConfig(**buckets["train"]),
            frontend=FrontendConfig(**buckets["frontend"]),
            **top,
        )
        cfg.validate()
        return cfg

    def validate(self) -> None:
        self.model.validate()
        if self.model_kind not in ("improved", "baseline"):
            raise ConfigInvalidError(f"model_kind must be improved or baseline, got {self.model_kind!r}")
        t = self.train
        if t.epochs < 0 or t.batch_size < 1 or t.lr < 0:
            raise ConfigInvalidError("epochs >= 0, batch_size >= 1 and lr >= 0 are required")
        if self.frontend.n_mfcc < 1 or self.frontend.n_mels < self.frontend.n_mfcc:
            raise ConfigInvalidError("n_mels must be >= n_mfcc >= 1")

    def flat(self) -> dict:
        out = {}
        for section in self._SECTIONS:
            out.update(dataclasses.asdict(getattr(self, section)))
        out.update(model_kind=self.model_kind, dataset_root=self.dataset_root,
                   cache_dir=self.cache_dir, seed=self.seed)
        return out

    def to_text(self) -> str:
        return format_kv(self.flat())

    def replace(self, **flat_overrides) -> "RunConfig":
        values = {k: format_value(v) for k, v in self.flat().items()}
        values.update({k: format_value(v) for k, v in flat_overrides.items()})
        return RunConfig.from_flat(values)


def _key_owners() -> dict[str, tuple[str | None, type]]:
    owners: dict[str, tuple[str | None, type]] = {}
    for section, cls in (("model", ModelConfig), ("train", TrainConfig), ("frontend", FrontendConfig)):
        for name, typ in typing.get_type_hints(cls).items():
            owners[name] = (section, typ)
    for name in ("model_kind", "dataset_root", "cache_dir"):
        owners[name] = (None, str)
    owners["seed"] = (None, int)
    return owners


def format_value(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, (tuple, list)):
        return ",".join(format_value(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def format_kv(values: dict) -> str:
    """Canonical text: one ``key = value`` per line, keys sorted."""
    return "".join(f"{k} = {format_value(values[k])}\n" for k in sorted(values))


def parse_kv(text: str) -> dict[str, str]:
    values: dict[str, str] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigInvalidError(f"line {lineno}: expected 'key = value'")
        key, _, value = line.partition("=")
        key = key.strip()
        if key in values:
            raise ConfigInvalidError(f"line {lineno}: duplicate key {key!r}")
        values[key] = value.strip()
    return values


def coerce(raw: str, typ, key: str = "?"):
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "1", "yes"):
                return True
            if low in ("false", "0", "no"):
                return False
            raise ValueError(raw)
        if typing.get_origin(typ) is tuple:
            (inner, *_) = typing.get_args(typ)
            return tuple(inner(part.strip()) for part in raw.split(",") if part.strip())
        return typ(raw)
    except (TypeError, ValueError) as exc:
        raise ConfigInvalidError(f"bad value for {key}: {raw!r}") from exc


def model_config_from_text(text: str) -> ModelConfig:
    hints = typing.get_type_hints(ModelConfig)
    values = parse_kv(text)
    unknown = set(values) - set(hints)
    if unknown:
        raise ConfigInvalidError(f"unknown model config keys: {sorted(unknown)}")
    return ModelConfig(**{k: coerce(v, hints[k], k) for k, v in values.items()}).validate()
