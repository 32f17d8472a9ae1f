"""Run configuration: one JSON document for training, model, and scenes.

The document has four optional sections: "train" (optimization and input
flags), "model" (network sizes), "scene" (synthetic generator defaults),
and "paths".  Every key is checked against a whitelist before any work
happens; unknown keys are rejected rather than ignored so typos cannot
silently fall back to defaults.  A short hash of the semantic sections
(everything except paths) stamps reports so reruns can be compared.
"""

import dataclasses
import hashlib
import json

from .errors import ConfigError
from .model import ModelConfig
from .pointnet import SALevelConfig
from .training import TrainConfig


@dataclasses.dataclass
class SceneDefaults:
    """Generator settings used by dataset synthesis."""

    size: int = 64
    near: float = 2.0
    far: float = 20.0
    noise: float = 0.02
    max_occluders: int = 3

    def __post_init__(self):
        if self.size < 16:
            raise ConfigError(f"scene size {self.size} too small")
        if not 0.0 < self.near < self.far:
            raise ConfigError(f"need 0 < near < far, got {self.near}, {self.far}")
        if self.noise < 0 or self.max_occluders < 1:
            raise ConfigError("noise must be nonnegative and max_occluders positive")


@dataclasses.dataclass
class RunConfig:
    """Validated union of the config file sections."""

    train: TrainConfig
    model_sizes: dict
    scene: SceneDefaults
    paths: dict

    def model_size_fields(self):
        """Non-flag ModelConfig overrides, with sa_levels converted."""
        sizes = dict(self.model_sizes)
        levels = sizes.pop("sa_levels", None)
        if levels is not None:
            sizes["sa_levels"] = tuple(
                SALevelConfig(d["n_out"], d["k"], tuple(d["mlp"])) for d in levels)
        return sizes

    def model_config(self):
        """ModelConfig combining the size section with the train flags."""
        return self.train.model_config(self.model_size_fields())

    def to_dict(self):
        md = ModelConfig()
        model = {f.name: getattr(md, f.name) for f in dataclasses.fields(md)
                 if f.name not in ("rgb", "ig", "pcd")}
        model.update(self.model_sizes)
        levels = model.pop("sa_levels")
        if levels and isinstance(levels[0], SALevelConfig):
            levels = [dict(n_out=l.n_out, k=l.k, mlp=list(l.mlp_widths))
                      for l in levels]
        model["sa_levels"] = levels
        return {
            "train": dataclasses.asdict(self.train),
            "model": model,
            "scene": dataclasses.asdict(self.scene),
            "paths": dict(self.paths),
        }


_SECTIONS = ("train", "model", "scene", "paths")
_TRAIN_KEYS = {f.name for f in dataclasses.fields(TrainConfig)}
_MODEL_KEYS = {f.name for f in dataclasses.fields(ModelConfig)} - {"rgb", "ig", "pcd"}
_SCENE_KEYS = {f.name for f in dataclasses.fields(SceneDefaults)}
_PATH_KEYS = {"data", "out", "checkpoint"}
_LEVEL_KEYS = {"n_out", "k", "mlp"}


def _check_keys(section, given, allowed):
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in '{section}': {', '.join(unknown)}")


def parse_config(doc):
    """Validate a config document (dict) into a RunConfig."""
    if not isinstance(doc, dict):
        raise ConfigError(f"config root must be an object, got {type(doc).__name__}")
    _check_keys("config", doc, set(_SECTIONS))
    for name in _SECTIONS:
        if name in doc and not isinstance(doc[name], dict):
            raise ConfigError(f"section '{name}' must be an object")

    train_doc = doc.get("train", {})
    _check_keys("train", train_doc, _TRAIN_KEYS)
    model_doc = dict(doc.get("model", {}))
    _check_keys("model", model_doc, _MODEL_KEYS)
    levels = model_doc.get("sa_levels")
    if levels is not None:
        if not isinstance(levels, list) or not levels:
            raise ConfigError("model.sa_levels must be a non-empty list")
        for i, lvl in enumerate(levels):
            if not isinstance(lvl, dict):
                raise ConfigError(f"model.sa_levels[{i}] must be an object")
            _check_keys(f"model.sa_levels[{i}]", lvl, _LEVEL_KEYS)
            missing = sorted(_LEVEL_KEYS - set(lvl))
            if missing:
                raise ConfigError(
                    f"model.sa_levels[{i}] missing key(s): {', '.join(missing)}")
    scene_doc = doc.get("scene", {})
    _check_keys("scene", scene_doc, _SCENE_KEYS)
    paths = doc.get("paths", {})
    _check_keys("paths", paths, _PATH_KEYS)

    try:
        train = TrainConfig(**train_doc)
        scene = SceneDefaults(**scene_doc)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    cfg = RunConfig(train=train, model_sizes=model_doc, scene=scene,
                    paths=dict(paths))
    cfg.model_config()  # surface size errors at parse time, not mid-run
    return cfg


def load_config(path):
    """Read and validate a JSON config file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: invalid JSON: {exc}") from exc
    return parse_config(doc)


def config_hash(cfg):
    """12-hex-digit digest of the semantic config (paths excluded)."""
    doc = cfg.to_dict()
    doc.pop("paths")
    blob = json.dumps(doc, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:12]
