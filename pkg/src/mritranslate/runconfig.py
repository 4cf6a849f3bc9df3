"""Flat dotted-key run configuration.

One human-readable text file, ``key = value`` per line with ``#`` comments.
Precedence is CLI flag > config file > built-in default. Unknown keys are
rejected, except the ``data.pattern.<TAG>`` family, which defines the
modality-name -> filename-regex table. A frozen copy of the merged view is
written into every run directory.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

from .dataio import DEFAULT_MODALITY_PATTERNS
from .discriminator import DiscriminatorConfig
from .errors import ConfigError
from .generator import GeneratorConfig
from .objectives import LossWeights
from .training import TrainConfig

RUN_ROOT_ENV = "MRITRANSLATE_RUN_ROOT"

_NONE_WORDS = {"none", "-", ""}


def _parse_bool(raw: str) -> bool:
    lowered = raw.strip().lower()
    if lowered in {"true", "1", "yes", "on"}:
        return True
    if lowered in {"false", "0", "no", "off"}:
        return False
    raise ValueError(f"not a boolean: {raw!r}")


def _parse_opt_int(raw: str):
    if raw.strip().lower() in _NONE_WORDS:
        return None
    return int(raw)


# key -> (parser, default)
_SCHEMA: dict[str, tuple] = {
    "data.volume_root": (str, ""),
    "data.slab_root": (str, ""),
    "data.source_modality": (str, "T1"),
    "data.target_modality": (str, "T2"),
    "data.split_ratio": (float, 0.8),
    "data.seed": (int, 0),
    "data.few_shot_cap": (_parse_opt_int, None),
    "generator.encoder": (str, "se_residual"),
    "generator.decoder": (str, "unetpp"),
    "generator.depth": (int, 4),
    "generator.base_channels": (int, 64),
    "generator.se_reduction": (int, 16),
    "generator.skip_density": (str, "dense"),
    "generator.upsample": (str, "transposed"),
    "generator.channel_cap": (int, 512),
    "discriminator.n_down": (int, 3),
    "discriminator.base_channels": (int, 64),
    "loss.lambda1": (float, 100.0),
    "loss.lambda2": (float, 100.0),
    "loss.gan_mode": (str, "bce"),
    "train.lr_g": (float, 2e-4),
    "train.lr_d": (float, 2e-4),
    "train.beta1": (float, 0.5),
    "train.beta2": (float, 0.999),
    "train.batch_size": (int, 2),
    "train.epochs": (int, 200),
    "train.seed": (int, 0),
    "train.resolution": (int, 256),
    "train.checkpoint_every": (int, 50),
    "eval.resolution": (_parse_opt_int, None),
    "eval.save_images": (_parse_bool, False),
    "eval.lpips_backend": (str, ""),
}

_PATTERN_PREFIX = "data.pattern."


class RunConfig:
    """Merged view over defaults, an optional config file, and overrides."""

    def __init__(self):
        self.values = {key: default for key, (_, default) in _SCHEMA.items()}
        self.patterns = dict(DEFAULT_MODALITY_PATTERNS)
        self.sources: list[str] = ["defaults"]

    @classmethod
    def load(
        cls,
        config_path=None,
        overrides: Optional[dict[str, str]] = None,
    ) -> "RunConfig":
        cfg = cls()
        if config_path is not None:
            cfg.apply_file(config_path)
        for key, raw in (overrides or {}).items():
            cfg.set(key, raw)
            cfg.sources.append(f"override {key}")
        return cfg

    def apply_file(self, path) -> None:
        path = Path(path)
        if not path.is_file():
            raise ConfigError(f"config file {path} not found")
        for lineno, line in enumerate(path.read_text().splitlines(), start=1):
            stripped = line.strip()
            if not stripped or stripped.startswith("#"):
                continue
            if "=" not in stripped:
                raise ConfigError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = stripped.split("=", 1)
            self.set(key.strip(), raw.strip())
        self.sources.append(str(path))

    def set(self, key: str, raw) -> None:
        if key.startswith(_PATTERN_PREFIX):
            tag = key[len(_PATTERN_PREFIX) :]
            if not tag:
                raise ConfigError("empty modality tag in pattern key")
            self.patterns[tag] = str(raw)
            return
        if key not in _SCHEMA:
            raise ConfigError(f"unknown config key: {key}")
        parser, _ = _SCHEMA[key]
        if isinstance(raw, str):
            try:
                value = parser(raw)
            except ValueError as exc:
                raise ConfigError(f"bad value for {key}: {raw!r} ({exc})") from exc
        else:
            value = raw
        self.values[key] = value

    def get(self, key: str):
        if key not in self.values:
            raise ConfigError(f"unknown config key: {key}")
        return self.values[key]

    def to_text(self) -> str:
        lines = [f"{key} = {_render(self.values[key])}" for key in sorted(self.values)]
        lines += [
            f"{_PATTERN_PREFIX}{tag} = {pattern}"
            for tag, pattern in sorted(self.patterns.items())
        ]
        return "\n".join(lines) + "\n"

    def write(self, path) -> None:
        Path(path).write_text(self.to_text())

    # Typed views ----------------------------------------------------------

    def task(self) -> tuple[str, str]:
        return (self.get("data.source_modality"), self.get("data.target_modality"))

    def generator_config(self) -> GeneratorConfig:
        return GeneratorConfig(
            encoder=self.get("generator.encoder"),
            decoder=self.get("generator.decoder"),
            depth=self.get("generator.depth"),
            base_channels=self.get("generator.base_channels"),
            se_reduction=self.get("generator.se_reduction"),
            skip_density=self.get("generator.skip_density"),
            upsample=self.get("generator.upsample"),
            channel_cap=self.get("generator.channel_cap"),
        )

    def discriminator_config(self) -> DiscriminatorConfig:
        return DiscriminatorConfig(
            n_down=self.get("discriminator.n_down"),
            base_channels=self.get("discriminator.base_channels"),
        )

    def loss_weights(self) -> LossWeights:
        return LossWeights(
            lambda1=self.get("loss.lambda1"),
            lambda2=self.get("loss.lambda2"),
        )

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            lr_g=self.get("train.lr_g"),
            lr_d=self.get("train.lr_d"),
            beta1=self.get("train.beta1"),
            beta2=self.get("train.beta2"),
            batch_size=self.get("train.batch_size"),
            epochs=self.get("train.epochs"),
            seed=self.get("train.seed"),
            resolution=self.get("train.resolution"),
            checkpoint_every=self.get("train.checkpoint_every"),
            gan_mode=self.get("loss.gan_mode"),
            weights=self.loss_weights(),
        )


def _render(value) -> str:
    if value is None:
        return "none"
    if isinstance(value, bool):
        return "true" if value else "false"
    return str(value)
