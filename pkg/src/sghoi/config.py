"""Run configuration: sections, documented defaults, strict key checking."""

from __future__ import annotations

import copy
import json
from typing import Any, Dict, Optional

from .datamodel import ConfigError, read_json, write_json
from .params import ModelDims, ModelSwitches

DEFAULTS: Dict[str, Dict[str, Any]] = {
    "data": {
        "relation_threshold": 0.2,
        "human_score_threshold": 0.6,
        "object_score_threshold": 0.3,
    },
    "model": {
        "d_s": 128,
        "d_h": 256,
        "d_g": 256,
        "d_f": 256,
        "word_dim": 300,
        "mask_size": 64,
        "encoder_cell": "gru",
    },
    "train": {
        "learning_rate": 0.01,
        "lr_decay": 0.9,
        "decay_every": 10,
        "epochs": 50,
        "batch_size": 8,
        "lambda_gamma": 1.0,
    },
    "passing": {
        "rounds": 2,
        "enabled": True,
        "relation_aware": True,
    },
    "ablation": {
        "sge": True,
        "cov": False,
    },
    "eval": {
        "iou_threshold": 0.5,
        "setting": "default",
        "min_score": 0.05,
    },
}

ABLATION_PRESETS = {
    "full": {"sge": True, "cov": False, "enabled": True, "relation_aware": True},
    "baseline": {"sge": False, "cov": False, "enabled": False, "relation_aware": True},
    "sge": {"sge": True, "cov": False, "enabled": False, "relation_aware": True},
    "rel": {"sge": False, "cov": False, "enabled": True, "relation_aware": True},
    "no-rel": {"sge": False, "cov": False, "enabled": True, "relation_aware": False},
    "cov": {"sge": False, "cov": True, "enabled": True, "relation_aware": True},
}


class RunConfig:
    """Resolved configuration: defaults, then file values, then overrides."""

    def __init__(self, sections: Dict[str, Dict[str, Any]], seed: int):
        self.sections = sections
        self.seed = int(seed)

    @classmethod
    def resolve(
        cls,
        file_payload: Optional[dict] = None,
        overrides: Optional[Dict[str, Any]] = None,
        seed: Optional[int] = None,
    ) -> "RunConfig":
        sections = copy.deepcopy(DEFAULTS)
        payload = dict(file_payload or {})
        file_seed = payload.pop("seed", None)
        for section, values in payload.items():
            if section not in sections:
                raise ConfigError(f"unknown config section {section!r}")
            if not isinstance(values, dict):
                raise ConfigError(f"config section {section!r} must be an object")
            for key, value in values.items():
                if key not in sections[section]:
                    raise ConfigError(f"unknown config key {section}.{key}")
                sections[section][key] = value
        for dotted, value in (overrides or {}).items():
            if dotted == "seed":
                file_seed = value
                continue
            if "." not in dotted:
                raise ConfigError(f"override {dotted!r} must be section.key or seed")
            section, key = dotted.split(".", 1)
            if section not in sections or key not in sections[section]:
                raise ConfigError(f"unknown config key {section}.{key}")
            sections[section][key] = _coerce(sections[section][key], value)
        if seed is not None:
            file_seed = seed
        if file_seed is None:
            raise ConfigError("seed is mandatory (config field 'seed' or --seed)")
        cfg = cls(sections, int(file_seed))
        cfg.validate()
        return cfg

    @classmethod
    def from_file(cls, path: str, overrides=None, seed=None) -> "RunConfig":
        return cls.resolve(read_json(path), overrides, seed)

    def __getitem__(self, section: str) -> Dict[str, Any]:
        return self.sections[section]

    def apply_ablation(self, name: str) -> None:
        if name not in ABLATION_PRESETS:
            raise ConfigError(
                f"unknown ablation {name!r}; choose from {sorted(ABLATION_PRESETS)}"
            )
        preset = ABLATION_PRESETS[name]
        self.sections["ablation"]["sge"] = preset["sge"]
        self.sections["ablation"]["cov"] = preset["cov"]
        self.sections["passing"]["enabled"] = preset["enabled"]
        self.sections["passing"]["relation_aware"] = preset["relation_aware"]

    def validate(self) -> None:
        train = self.sections["train"]
        if train["learning_rate"] <= 0:
            raise ConfigError("train.learning_rate must be > 0")
        if not 0 < train["lr_decay"] <= 1:
            raise ConfigError("train.lr_decay must lie in (0, 1]")
        if train["epochs"] < 0:
            raise ConfigError("train.epochs must be >= 0")
        if train["batch_size"] < 1:
            raise ConfigError("train.batch_size must be >= 1")
        if self.sections["passing"]["rounds"] < 1:
            raise ConfigError("passing.rounds must be >= 1")
        if self.sections["ablation"]["sge"] and self.sections["ablation"]["cov"]:
            raise ConfigError("ablation.sge and ablation.cov cannot both be on")
        if self.sections["eval"]["setting"] not in ("default", "known"):
            raise ConfigError("eval.setting must be 'default' or 'known'")

    def model_dims(self) -> ModelDims:
        m = self.sections["model"]
        return ModelDims(
            d_s=m["d_s"],
            d_h=m["d_h"],
            d_g=m["d_g"],
            d_f=m["d_f"],
            word_dim=m["word_dim"],
            mask_size=m["mask_size"],
            encoder_cell=m["encoder_cell"],
        )

    def switches(self) -> ModelSwitches:
        return ModelSwitches(
            sge=self.sections["ablation"]["sge"],
            passing=self.sections["passing"]["enabled"],
            relation_aware=self.sections["passing"]["relation_aware"],
            cov=self.sections["ablation"]["cov"],
        )

    def payload(self) -> dict:
        out: Dict[str, Any] = {"seed": self.seed}
        out.update(copy.deepcopy(self.sections))
        return out

    def save(self, path: str) -> None:
        write_json(self.payload(), path)


def _coerce(current, value):
    """Parse a string override to the type of the value it replaces."""
    if not isinstance(value, str):
        return value
    if isinstance(current, bool):
        lowered = value.lower()
        if lowered in ("true", "1", "yes", "on"):
            return True
        if lowered in ("false", "0", "no", "off"):
            return False
        raise ConfigError(f"expected a boolean, got {value!r}")
    if isinstance(current, int) and not isinstance(current, bool):
        return int(value)
    if isinstance(current, float):
        return float(value)
    return value
