"""Flat ``key = value`` run configuration shared by every CLI command.

Lines are ``key = value``; blank lines and ``#`` comments are ignored.
Unknown keys are rejected and ``seed`` is mandatory. Serialization writes
every key in a fixed order, so parse -> serialize -> parse is stable.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable

from .data import TARGET_COUNTS, SOURCE_COUNTS, TARGET_RECIPES
from .em import PAPER_DEFAULTS, VARIANTS, EMConfig
from .net import EncoderConfig
from .train import TrainConfig


class ConfigError(ValueError):
    """Invalid configuration; ``key`` names the offending entry."""

    def __init__(self, key: str, message: str):
        self.key = key
        super().__init__(f"{key}: {message}")


def _int(text: str) -> int:
    return int(text.strip())


def _float(text: str) -> float:
    v = float(text.strip())
    if not math.isfinite(v):
        raise ValueError("must be finite")
    return v


def _str(text: str) -> str:
    text = text.strip()
    if not text:
        raise ValueError("must not be empty")
    return text


def _ints(text: str) -> tuple[int, ...]:
    parts = [p.strip() for p in text.split(",") if p.strip()]
    if not parts:
        raise ValueError("expected a comma-separated list of integers")
    return tuple(int(p) for p in parts)


def _names(text: str) -> tuple[str, ...]:
    parts = tuple(p.strip() for p in text.split(",") if p.strip())
    if not parts:
        raise ValueError("expected a comma-separated list of names")
    return parts


def _fmt(value: Any) -> str:
    if isinstance(value, tuple):
        return ",".join(_fmt(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


# key -> (parser, default); None default means mandatory
_SCHEMA: dict[str, tuple[Callable[[str], Any], Any]] = {
    "seed": (_int, None),
    "em.variant": (_str, "EM1"),
    "em.alpha": (_float, PAPER_DEFAULTS["EM1"]["alpha"]),
    "em.p": (_float, PAPER_DEFAULTS["EM1"]["p"]),
    "em.beta_skew": (_float, 0.3),
    "em.beta_kurt": (_float, 0.1),
    "em.eps": (_float, 1e-6),
    "em.layers": (_ints, (2,)),
    "net.channels": (_ints, (8, 16, 32, 64)),
    "net.hidden": (_int, 32),
    "net.classes": (_int, 3),
    "net.bn_momentum": (_float, 0.1),
    "net.bn_update": (_str, "clean"),
    "data.seed": (_int, 0),
    "data.volume_size": (_int, 32),
    "data.source_counts": (_ints, SOURCE_COUNTS),
    "data.target_counts": (_ints, TARGET_COUNTS),
    "data.targets": (_names, tuple(TARGET_RECIPES)),
    "data.cache": (_str, "none"),
    "train.lr0": (_float, 0.01),
    "train.momentum": (_float, 0.9),
    "train.weight_decay": (_float, 0.0005),
    "train.lr_decay": (_float, 0.05),
    "train.epochs": (_int, 30),
    "train.physical_batch": (_int, 2),
    "train.effective_batch": (_int, 16),
    "train.val_fraction": (_float, 0.2),
    "train.class_weights": (_str, "inverse"),
    "eval.positive_class": (_int, 2),
    "eval.stats_layer": (_int, 2),
    "io.out": (_str, "runs"),
    "io.run_id": (_str, "run"),
}

KEYS = tuple(_SCHEMA)


@dataclass
class RunConfig:
    values: dict = field(default_factory=dict)

    def __getitem__(self, key: str):
        return self.values[key]

    def replace(self, **updates) -> "RunConfig":
        """Copy with dotted keys given as ``em__alpha=...``."""
        vals = dict(self.values)
        for k, v in updates.items():
            key = k.replace("__", ".")
            if key not in _SCHEMA:
                raise ConfigError(key, "unknown key")
            vals[key] = v
        cfg = RunConfig(vals)
        cfg.validate()
        return cfg

    # --- typed views -------------------------------------------------------

    def em_config(self) -> EMConfig:
        v = self.values
        return EMConfig(variant=v["em.variant"], alpha=v["em.alpha"], p=v["em.p"],
                        beta_skew=v["em.beta_skew"], beta_kurt=v["em.beta_kurt"],
                        eps=v["em.eps"], insertion_layers=v["em.layers"])

    def encoder_config(self) -> EncoderConfig:
        v = self.values
        return EncoderConfig(block_channels=v["net.channels"], hidden=v["net.hidden"],
                             num_classes=v["net.classes"], bn_momentum=v["net.bn_momentum"],
                             bn_update=v["net.bn_update"])

    def train_config(self) -> TrainConfig:
        v = self.values
        return TrainConfig(lr0=v["train.lr0"], momentum=v["train.momentum"],
                           weight_decay=v["train.weight_decay"], lr_decay=v["train.lr_decay"],
                           epochs=v["train.epochs"], physical_batch=v["train.physical_batch"],
                           effective_batch=v["train.effective_batch"],
                           val_fraction=v["train.val_fraction"],
                           class_weights=v["train.class_weights"], seed=v["seed"])

    @property
    def run_dir(self) -> Path:
        return Path(self.values["io.out"]) / self.values["io.run_id"]

    def validate(self) -> None:
        """Build every typed config once so errors surface with the key name."""
        v = self.values
        for key in _SCHEMA:
            if key not in v:
                raise ConfigError(key, "missing mandatory key")
        if v["em.variant"] not in VARIANTS:
            raise ConfigError("em.variant", f"must be one of {VARIANTS}")
        for builder in (self.em_config, self.encoder_config, self.train_config):
            try:
                builder()
            except ValueError as exc:
                msg = str(exc)
                key = _key_in_message(msg)
                raise ConfigError(key, msg) from None
        K = v["net.classes"]
        for key in ("data.source_counts", "data.target_counts"):
            if len(v[key]) != K or any(n < 1 for n in v[key]):
                raise ConfigError(key, f"need {K} positive per-class counts, got {v[key]}")
        if not 0 <= v["eval.positive_class"] < K:
            raise ConfigError("eval.positive_class", f"must lie in 0..{K - 1}")
        n_blocks = len(v["net.channels"])
        if not 0 <= v["eval.stats_layer"] <= n_blocks:
            raise ConfigError("eval.stats_layer",
                              f"must lie in 0..{n_blocks} (0 = input volume), got {v['eval.stats_layer']}")
        if max(v["em.layers"]) > n_blocks:
            raise ConfigError("em.layers", f"encoder has only {n_blocks} block(s)")
        size = v["data.volume_size"]
        # the last block must keep >= 2 positions per axis so batch norm works at B=1
        if size % (2 ** n_blocks) or size < 2 ** (n_blocks + 1):
            raise ConfigError("data.volume_size", f"must be a multiple of {2 ** n_blocks} and "
                              f">= {2 ** (n_blocks + 1)} for {n_blocks} block(s), got {size}")
        for name in v["data.targets"]:
            if name not in TARGET_RECIPES:
                raise ConfigError("data.targets", f"unknown cohort {name!r}; known: {sorted(TARGET_RECIPES)}")
        if len(set(v["data.targets"])) != len(v["data.targets"]):
            raise ConfigError("data.targets", "duplicate cohort names")
        if "/" in v["io.run_id"] or v["io.run_id"] in (".", ".."):
            raise ConfigError("io.run_id", "must be a plain directory name")


def _key_in_message(msg: str) -> str:
    for key in sorted(_SCHEMA, key=len, reverse=True):
        if key in msg:
            return key
    # field-level messages from the typed configs use their own prefixes
    for prefix in ("em.", "net.", "train."):
        if msg.startswith(prefix) or f" {prefix}" in msg:
            return prefix.rstrip(".")
    return "config"


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    values: dict = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}", f"expected 'key = value', got {raw!r}")
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in _SCHEMA:
            raise ConfigError(key, "unknown key")
        if key in values:
            raise ConfigError(key, "given more than once")
        parser, _ = _SCHEMA[key]
        try:
            values[key] = parser(value)
        except ValueError as exc:
            raise ConfigError(key, f"bad value {value.strip()!r} ({exc})") from None
    if "seed" not in values:
        raise ConfigError("seed", "missing mandatory key")
    for key, (_, default) in _SCHEMA.items():
        values.setdefault(key, default)
    cfg = RunConfig(values)
    cfg.validate()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError("--config", f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def serialize_config(cfg: RunConfig) -> str:
    return "".join(f"{key} = {_fmt(cfg.values[key])}\n" for key in KEYS)
