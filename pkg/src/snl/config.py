"""Flat, typed training configuration.

A config file is a flat YAML mapping of field names to values.  Any field can
be overridden from the environment as ``SNL_<FIELD>`` (upper case), e.g.
``SNL_LR=0.001`` or ``SNL_LOSS_INTER=false``.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
import os
from dataclasses import dataclass, fields
from pathlib import Path
from typing import Any, Mapping

import yaml

from snl.errors import ConfigError
from snl.losses import LOSS_TERMS
from snl.model import TOPOLOGIES

ENV_PREFIX = "SNL_"

# fields that do not change results and are left out of the config hash
_UNHASHED = {"output_dir", "num_workers"}


@dataclass
class TrainConfig:
    topology: str = "rd"
    backbone: str = "wideresnet50"
    pretrained: bool = True
    image_size: int = 256
    lambda1: float = 1.0
    lambda2: float = 1.0
    lambda3: float = 1.0
    num_centers: int = 50
    cram_enabled: bool = True
    loss_cd: bool = True
    loss_sd: bool = True
    loss_intra: bool = True
    loss_inter: bool = True
    affinity_mode: str = "abs"
    affinity_normalize: bool = False
    lr: float = 0.005
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    batch_size: int = 8
    epochs: int = 200
    seed: int = 0
    teacher_seed: int = 0
    smoothing_sigma: float = 4.0
    score_affinity: bool = True
    pixel_auroc: str = "binned"
    pixel_pool: str = "category"
    data_root: str = ""
    layout: str = "mvtec"
    on_corrupt: str = "raise"
    synth_classes: int = 4
    synth_per_class: int = 50
    synth_test_normal: int = 10
    synth_test_anomalous: int = 10
    synth_seed: int = 0
    output_dir: str = "runs/snl"
    num_workers: int = 0

    @classmethod
    def toy(cls, **overrides) -> "TrainConfig":
        """Desk-scale preset: toy backbone on the procedural dataset, 5 epochs."""
        base = dict(
            backbone="toy",
            pretrained=False,
            image_size=64,
            epochs=5,
            layout="synthetic",
            smoothing_sigma=1.0,  # 4 px at 256 px, scaled to the 64 px toy input
        )
        base.update(overrides)
        return cls(**base)

    @property
    def loss_terms(self) -> tuple[str, ...]:
        return tuple(t for t in LOSS_TERMS if getattr(self, f"loss_{t}"))

    def validate(self) -> "TrainConfig":
        if self.topology not in TOPOLOGIES:
            raise ConfigError(f"topology must be one of {TOPOLOGIES}")
        if self.backbone not in ("toy", "wideresnet50"):
            raise ConfigError("backbone must be 'toy' or 'wideresnet50'")
        if not self.loss_terms:
            raise ConfigError("all loss terms are disabled; the objective would be empty")
        if min(self.lambda1, self.lambda2, self.lambda3) < 0:
            raise ConfigError("loss weights must be non-negative")
        if self.loss_inter and self.batch_size < 2:
            raise ConfigError("inter-affinity loss needs batch_size >= 2")
        if self.batch_size < 1 or self.epochs < 1 or self.num_centers < 1:
            raise ConfigError("batch_size, epochs and num_centers must be positive")
        if self.lr <= 0:
            raise ConfigError("lr must be positive")
        if self.smoothing_sigma < 0:
            raise ConfigError("smoothing_sigma must be >= 0")
        if self.affinity_mode not in ("abs", "squared"):
            raise ConfigError("affinity_mode must be 'abs' or 'squared'")
        if self.pixel_auroc not in ("binned", "exact"):
            raise ConfigError("pixel_auroc must be 'binned' or 'exact'")
        if self.pixel_pool not in ("category", "global"):
            raise ConfigError("pixel_pool must be 'category' or 'global'")
        if self.layout not in ("mvtec", "visa", "synthetic"):
            raise ConfigError("layout must be 'mvtec', 'visa' or 'synthetic'")
        if self.on_corrupt not in ("raise", "skip"):
            raise ConfigError("on_corrupt must be 'raise' or 'skip'")
        if self.layout != "synthetic" and not self.data_root:
            raise ConfigError("data_root is required for real datasets")
        return self

    def to_dict(self) -> dict[str, Any]:
        return dataclasses.asdict(self)

    def hash(self) -> str:
        payload = {k: v for k, v in self.to_dict().items() if k not in _UNHASHED}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode()).hexdigest()[:16]

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


_FIELD_TYPES = {f.name: f.type for f in fields(TrainConfig)}


def _coerce(name: str, value: Any) -> Any:
    kind = _FIELD_TYPES[name]
    try:
        if kind == "bool":
            if isinstance(value, bool):
                return value
            text = str(value).strip().lower()
            if text in ("1", "true", "yes", "on"):
                return True
            if text in ("0", "false", "no", "off"):
                return False
            raise ValueError(value)
        if kind == "int":
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(value)
            return int(value)
        if kind == "float":
            return float(value)
        return "" if value is None else str(value)
    except (TypeError, ValueError):
        raise ConfigError(f"{name}: cannot interpret {value!r} as {kind}") from None


def config_from_mapping(values: Mapping[str, Any], base: TrainConfig | None = None) -> TrainConfig:
    unknown = set(values) - set(_FIELD_TYPES)
    if unknown:
        raise ConfigError(f"unknown config keys: {sorted(unknown)}")
    coerced = {k: _coerce(k, v) for k, v in values.items()}
    return dataclasses.replace(base or TrainConfig(), **coerced)


def env_overrides(environ: Mapping[str, str] | None = None) -> dict[str, str]:
    environ = os.environ if environ is None else environ
    out = {}
    for key, value in environ.items():
        if key.startswith(ENV_PREFIX):
            name = key[len(ENV_PREFIX) :].lower()
            if name in _FIELD_TYPES:
                out[name] = value
    return out


def load_config(path=None, environ: Mapping[str, str] | None = None, base: TrainConfig | None = None) -> TrainConfig:
    """File values on top of ``base`` (defaults), then ``SNL_*`` environment overrides."""
    cfg = base or TrainConfig()
    if path is not None:
        text = Path(path).read_text()
        data = yaml.safe_load(text) or {}
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: expected a flat key-value mapping")
        nested = [k for k, v in data.items() if isinstance(v, (dict, list))]
        if nested:
            raise ConfigError(f"{path}: nested values are not allowed ({nested})")
        cfg = config_from_mapping(data, cfg)
    return config_from_mapping(env_overrides(environ), cfg)


def dump_config(cfg: TrainConfig, path) -> None:
    Path(path).write_text(yaml.safe_dump(cfg.to_dict(), sort_keys=False))
