"""INI run configuration: one section per module, typed keys, unknown keys rejected.

Training sections take their defaults from the chosen preset (``desk`` or
``paper``); any key written in the file overrides the preset value.
"""

from __future__ import annotations

import configparser
import hashlib
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Any

from . import detector as det
from .bev import BevConfig
from .toy_world import CorruptionModel, SceneSpec
from .training import PRESETS, TrainConfig, preset_config


class ConfigError(ValueError):
    pass


_TRAIN_KEYS = ("learning_rate", "batch_size", "epochs", "beta1", "beta2")
_DET_KEYS = tuple(f.name for f in fields(det.DetectorConfig))

# fixed defaults; training keys are filled from the preset at lookup time
SCHEMA: dict[str, dict[str, Any]] = {
    "run": {"seed": 0, "preset": "desk"},
    "bev": {f.name: f.default for f in fields(BevConfig)},
    "toyworld": {
        **{f.name: f.default for f in fields(SceneSpec)},
        **{f.name: f.default for f in fields(CorruptionModel)},
        "n_sim": 600, "n_real": 200, "n_test": 100, "frames_per_drive": 10,
    },
    "cyclegan": {**dict.fromkeys(_TRAIN_KEYS), "lambda_cycle": None, "lambda_identity": None,
                 "replay_buffer": None},
    "nst": {**dict.fromkeys(_TRAIN_KEYS), "lambda_s": None, "lambda_c": None, "n_styles": 2,
            "encoder_learning_rate": None, "encoder_batch_size": None, "encoder_epochs": None},
    "detector": {**dict.fromkeys(_TRAIN_KEYS), **dict.fromkeys(_DET_KEYS)},
    "eval": {"iou_threshold": 0.5, "conf_threshold": 0.05},
    "augmentation": {"ratios": (0.0, 1.0, 2.0), "mappings": ("identity", "cyclegan"), "table_ratio": 2.0,
                     "pure_sim_ratio": 1.0, "replacement": False, "allow_overlap": False, "nsm_sim_frames": 200},
}

# types for keys whose default is None (filled from presets)
_TYPES: dict[str, type] = {
    "learning_rate": float, "batch_size": int, "epochs": int, "beta1": float, "beta2": float,
    "lambda_cycle": float, "lambda_identity": float, "lambda_s": float, "lambda_c": float,
    "replay_buffer": int, "encoder_learning_rate": float, "encoder_batch_size": int, "encoder_epochs": int,
}
for _f in fields(det.DetectorConfig):
    _TYPES.setdefault(_f.name, {"int": int, "float": float, "bool": bool}.get(str(_f.type), str))


def _format(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, float):
        return repr(v)
    if isinstance(v, tuple):
        if v and isinstance(v[0], tuple):
            return ", ".join("x".join(_format(float(a)) for a in pair) for pair in v)
        return ", ".join(_format(a) for a in v)
    return str(v)


def _parse(raw: str, like: Any, key: str) -> Any:
    raw = raw.strip()
    try:
        if isinstance(like, bool) or (like is None and _TYPES.get(key) is bool):
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if key == "anchors":
            return tuple(tuple(float(a) for a in pair.split("x")) for pair in raw.split(","))
        if isinstance(like, tuple) or key in ("x_range", "y_range", "channels"):
            items = [p.strip() for p in raw.split(",") if p.strip()]
            if key in ("mappings",):
                return tuple(items)
            if key == "channels" or (like and isinstance(like[0], int) and not isinstance(like[0], bool)):
                return tuple(int(p) for p in items)
            return tuple(float(p) for p in items)
        kind = type(like) if like is not None else _TYPES.get(key, str)
        if kind is int:
            return int(raw, 0)
        if kind is float:
            return float(raw)
        return raw
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {raw!r}") from exc


@dataclass
class RunConfig:
    """Explicit values only; ``get`` falls back to preset and schema defaults."""

    values: dict[str, dict[str, Any]] = field(default_factory=dict)

    @classmethod
    def parse(cls, text: str, source: str = "<config>") -> "RunConfig":
        cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
        cp.optionxform = str
        try:
            cp.read_string(text, source)
        except configparser.Error as exc:
            raise ConfigError(f"{source}: {exc.message.splitlines()[0]}") from exc
        values: dict[str, dict[str, Any]] = {}
        for section in cp.sections():
            if section not in SCHEMA:
                raise ConfigError(f"{source}: unknown section [{section}]")
            for key, raw in cp.items(section):
                if key not in SCHEMA[section]:
                    raise ConfigError(f"{source}: unknown key {key!r} in [{section}]")
                values.setdefault(section, {})[key] = _parse(raw, SCHEMA[section][key], key)
        cfg = cls(values)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path: str | Path | None) -> "RunConfig":
        if path is None:
            return cls()
        return cls.parse(Path(path).read_text(), str(path))

    def set(self, section: str, key: str, value: Any) -> None:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        self.values.setdefault(section, {})[key] = value

    @property
    def seed(self) -> int:
        return int(self.get("run", "seed"))

    @property
    def preset(self) -> str:
        return self.get("run", "preset")

    def _preset_default(self, section: str, key: str) -> Any:
        task = {"cyclegan": "cyclegan", "nst": "nst", "detector": "detector"}[section]
        if key.startswith("encoder_"):
            task, key = "encoder", key[len("encoder_"):]
        if key in _DET_KEYS:
            base = det.DetectorConfig.desk() if self.preset == "desk" else det.DetectorConfig()
            return getattr(base, key)
        p = preset_config(task, self.preset)
        return getattr(p, key)

    def get(self, section: str, key: str) -> Any:
        if section not in SCHEMA or key not in SCHEMA[section]:
            raise ConfigError(f"unknown key {section}.{key}")
        if key in self.values.get(section, {}):
            return self.values[section][key]
        default = SCHEMA[section][key]
        return self._preset_default(section, key) if default is None else default

    def section(self, section: str) -> dict[str, Any]:
        return {k: self.get(section, k) for k in SCHEMA[section]}

    def canonical(self) -> str:
        """Every key, resolved and sorted; two equal configs echo the same text."""
        out = []
        for section in sorted(SCHEMA):
            out.append(f"[{section}]")
            out.extend(f"{k} = {_format(v)}" for k, v in sorted(self.section(section).items()))
            out.append("")
        return "\n".join(out)

    @property
    def hash(self) -> str:
        return hashlib.sha256(self.canonical().encode()).hexdigest()[:16]

    # -- builders ---------------------------------------------------------

    def train_config(self, task: str) -> TrainConfig:
        if (task, self.preset) not in PRESETS:
            raise ConfigError(f"no preset for {task}/{self.preset}")
        if task == "encoder":
            over = {k: self.get("nst", f"encoder_{k}") for k in ("learning_rate", "batch_size", "epochs")}
        else:
            over = {k: self.get(task, k) for k in _TRAIN_KEYS}
        if task == "cyclegan":
            over.update(lambda_cycle=self.get("cyclegan", "lambda_cycle"),
                        lambda_identity=self.get("cyclegan", "lambda_identity"),
                        replay_buffer=self.get("cyclegan", "replay_buffer"))
        if task == "nst":
            over.update(lambda_s=self.get("nst", "lambda_s"), lambda_c=self.get("nst", "lambda_c"))
        try:
            return preset_config(task, self.preset, seed=self.seed, **over)
        except ValueError as exc:
            raise ConfigError(str(exc)) from exc

    def detector_config(self) -> det.DetectorConfig:
        try:
            return det.DetectorConfig(**{k: self.get("detector", k) for k in _DET_KEYS})
        except ValueError as exc:
            raise ConfigError(f"[detector] {exc}") from exc

    def bev_config(self) -> BevConfig:
        try:
            return BevConfig(**self.section("bev"))
        except ValueError as exc:
            raise ConfigError(f"[bev] {exc}") from exc

    def scene_spec(self) -> SceneSpec:
        keys = {f.name for f in fields(SceneSpec)}
        try:
            return SceneSpec(**{k: v for k, v in self.section("toyworld").items() if k in keys})
        except ValueError as exc:
            raise ConfigError(f"[toyworld] {exc}") from exc

    def corruption(self) -> CorruptionModel:
        keys = {f.name for f in fields(CorruptionModel)}
        try:
            return CorruptionModel(**{k: v for k, v in self.section("toyworld").items() if k in keys})
        except ValueError as exc:
            raise ConfigError(f"[toyworld] {exc}") from exc

    def validate(self) -> None:
        if self.preset not in ("desk", "paper"):
            raise ConfigError(f"unknown preset {self.preset!r}")
        self.bev_config()
        self.scene_spec()
        self.corruption()
        self.detector_config()
        for task in ("cyclegan", "nst", "encoder", "detector"):
            self.train_config(task)
        if not 0.0 < self.get("eval", "iou_threshold") <= 1.0:
            raise ConfigError("[eval] iou_threshold must be in (0, 1]")
        if any(r < 0 for r in self.get("augmentation", "ratios")):
            raise ConfigError("[augmentation] ratios must be >= 0")
