"""Training configuration, named profiles and override handling."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping, Optional, Sequence

import yaml

from ..encoders import IMAGE_LABEL, IMAGE_TEXT, SHARED, EncoderConfig
from ..objectives import DEFAULT_LAMBDA, KINDS


@dataclass(frozen=True)
class Augmentations:
    hflip: bool = False
    rotation: bool = False  # up to 5 degrees
    scale: bool = False  # [0.9, 1.1]
    brightness_contrast: bool = False  # [0.8, 1.2]

    @property
    def any(self) -> bool:
        return self.hflip or self.rotation or self.scale or self.brightness_contrast


@dataclass(frozen=True)
class TrainConfig:
    objective: str = "dlilp"
    batch_size: int = 128
    lr: float = 1e-4
    weight_decay: float = 1e-5
    max_epochs: int = 30
    warmup_epochs: int = 1
    val_fraction: float = 0.1
    early_stop_patience: int = 5
    lam: float = DEFAULT_LAMBDA
    augment: Augmentations = Augmentations(True, True, True, True)
    seed: int = 0
    precision: str = "float32"
    image_size: int = 224
    # None = objective default (dual heads for dlilp, shared otherwise)
    heads: Optional[tuple] = None
    profile: str = "paper"
    overrides: tuple = ()

    def validate(self) -> "TrainConfig":
        if self.objective not in KINDS:
            raise ValueError(f"unknown objective {self.objective!r}; expected one of {KINDS}")
        if self.batch_size < 1 or self.max_epochs < 1:
            raise ValueError("batch_size and max_epochs must be >= 1")
        if not 0.0 < self.val_fraction < 1.0:
            raise ValueError("val_fraction must lie in (0, 1)")
        if self.lam < 0:
            raise ValueError("lambda must be >= 0")
        if self.precision not in ("float32", "float64"):
            raise ValueError(f"precision must be float32 or float64, got {self.precision!r}")
        if self.warmup_epochs < 0 or self.warmup_epochs >= self.max_epochs + 1:
            raise ValueError("warmup_epochs must lie in [0, max_epochs]")
        self.encoder_config().validate()
        return self

    @property
    def resolved_heads(self) -> tuple:
        if self.heads is not None:
            return tuple(self.heads)
        return (IMAGE_LABEL, IMAGE_TEXT) if self.objective == "dlilp" else (SHARED,)

    def encoder_config(self) -> EncoderConfig:
        return EncoderConfig(image_size=self.image_size, heads=self.resolved_heads)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["heads"] = list(self.heads) if self.heads is not None else None
        d["overrides"] = [list(o) for o in self.overrides]
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "TrainConfig":
        d = dict(d)
        aug = d.get("augment", {})
        d["augment"] = aug if isinstance(aug, Augmentations) else Augmentations(**aug)
        if d.get("heads") is not None:
            d["heads"] = tuple(d["heads"])
        d["overrides"] = tuple(tuple(o) for o in d.get("overrides", ()))
        unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise ValueError(f"unknown config keys {sorted(unknown)}")
        return cls(**d).validate()

    def config_hash(self) -> str:
        """Hash of the effective settings (profile bookkeeping excluded)."""
        d = self.to_dict()
        d.pop("overrides")
        d.pop("profile")
        blob = json.dumps(d, sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


PAPER = TrainConfig()
# Desk profile: small images, short runs, no augmentation. lr is raised for
# from-scratch training of the small encoders.
DESK = dataclasses.replace(PAPER, batch_size=64, max_epochs=10, image_size=48, lr=1e-3,
                           augment=Augmentations(), profile="desk")
PROFILES = {"paper": PAPER, "desk": DESK}


def _coerce(value: str) -> Any:
    try:
        return yaml.safe_load(value)
    except yaml.YAMLError:
        return value


def _set_path(d: dict, key: str, value: Any) -> None:
    parts = key.split(".")
    cur = d
    for p in parts[:-1]:
        if not isinstance(cur.get(p), dict):
            raise ValueError(f"override key {key!r} does not name a nested field")
        cur = cur[p]
    if parts[-1] not in cur:
        raise ValueError(f"unknown config key {key!r}")
    cur[parts[-1]] = value


def make_config(profile: str = "desk", overrides: Optional[Mapping[str, Any]] = None,
                **kwargs) -> TrainConfig:
    """Profile defaults plus overrides; every override is recorded in the config."""
    if profile not in PROFILES:
        raise ValueError(f"unknown profile {profile!r}; expected one of {sorted(PROFILES)}")
    base = PROFILES[profile].to_dict()
    applied = []
    for key, value in {**dict(overrides or {}), **kwargs}.items():
        if key in ("profile", "overrides"):
            raise ValueError(f"{key!r} cannot be overridden")
        if isinstance(value, tuple):
            value = list(value)
        _set_path(base, key, value)
        applied.append((key, json.dumps(value, sort_keys=True)))
    base["overrides"] = sorted(applied)
    return TrainConfig.from_dict(base)


def parse_set(items: Sequence[str]) -> dict:
    """Parse ``key=value`` strings (values in YAML syntax)."""
    out = {}
    for item in items:
        if "=" not in item:
            raise ValueError(f"override {item!r} must look like key=value")
        key, value = item.split("=", 1)
        out[key.strip()] = _coerce(value)
    return out


def load_config_file(path) -> dict:
    """Read a YAML or JSON config file into a dict."""
    text = Path(path).read_text(encoding="utf-8")
    data = yaml.safe_load(text) or {}
    if not isinstance(data, dict):
        raise ValueError(f"{path}: config must be a mapping")
    return data


def train_config_from(section: Mapping, extra: Optional[Mapping] = None) -> TrainConfig:
    """Build a TrainConfig from a config-file section (``profile`` + fields)."""
    section = dict(section or {})
    profile = section.pop("profile", "desk")
    flat = _flatten(section)
    flat.update(extra or {})
    return make_config(profile, flat)


def _flatten(d: Mapping, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if k == "augment" and isinstance(v, Mapping):
            out.update(_flatten(v, key + "."))
        else:
            out[key] = v
    return out
