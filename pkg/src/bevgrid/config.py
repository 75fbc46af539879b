"""RunConfig: one JSON document holding every knob of a run."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .encoder import EncoderConfig
from .geometry import AnchorHeights, BevGridSpec, ring_rig
from .heads import LossWeights
from .learner import TrainConfig
from .scene import SceneSpec


class ConfigError(ValueError):
    """Invalid or unknown configuration content."""


def desk_encoder() -> EncoderConfig:
    """Defaults used throughout: anchors span the height of the synthetic world."""
    return EncoderConfig(
        grid=BevGridSpec(32, 32, 0.5),
        n_layers=1,
        anchors=AnchorHeights((0.0, 0.6, 1.2, 1.8)),
    )


@dataclass
class RigSpec:
    n_views: int = 4
    width: int = 128
    height: int = 96
    hfov_deg: float = 90.0
    # a raised, steeply pitched mast; a car-height rig cannot see how deep vehicles are
    mount_height: float = 5.0
    pitch_deg: float = 45.0

    def build(self):
        return ring_rig(self.n_views, self.width, self.height, self.hfov_deg, self.mount_height, self.pitch_deg)


@dataclass
class DataSpec:
    sequences: int = 20
    frames: int = 8
    seed: int = 0


@dataclass
class RunConfig:
    encoder: EncoderConfig = field(default_factory=desk_encoder)
    train: TrainConfig = field(default_factory=TrainConfig)
    scene: SceneSpec = field(default_factory=SceneSpec)
    rig: RigSpec = field(default_factory=RigSpec)
    data: DataSpec = field(default_factory=DataSpec)

    def __post_init__(self):
        if self.encoder.image_shape != (self.rig.height, self.rig.width):
            raise ConfigError(f"encoder image_shape {self.encoder.image_shape} does not match rig {self.rig.height}x{self.rig.width}")
        if self.encoder.n_views != self.rig.n_views:
            raise ConfigError("encoder n_views does not match rig")
        if len(self.train.loss.class_weights) != self.encoder.n_classes:
            raise ConfigError("class_weights length must equal n_classes")

    def to_dict(self) -> dict:
        scene = dataclasses.asdict(self.scene)
        for k in ("vehicle_speed", "ego_speed"):
            scene[k] = list(scene[k])
        return {
            "encoder": self.encoder.to_dict(),
            "train": self.train.to_dict(),
            "scene": scene,
            "rig": dataclasses.asdict(self.rig),
            "data": dataclasses.asdict(self.data),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def digest(self) -> str:
        return hashlib.sha256(json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":")).encode()).hexdigest()

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        _check_keys(d, {"encoder", "train", "scene", "rig", "data"}, "config")
        base = cls()
        try:
            enc = base.encoder.to_dict()
            if "encoder" in d:
                _check_keys(d["encoder"], set(enc), "encoder")
                if "grid" in d["encoder"]:
                    _check_keys(d["encoder"]["grid"], {"H", "W", "s", "origin_cell"}, "encoder.grid")
                    # a resized grid recentres unless the origin is given explicitly
                    given = d["encoder"]["grid"]
                    enc["grid"] = {**enc["grid"], **given}
                    if "origin_cell" not in given:
                        enc["grid"]["origin_cell"] = None
                enc.update({k: v for k, v in d["encoder"].items() if k != "grid"})
            train = base.train.to_dict()
            if "train" in d:
                _check_keys(d["train"], set(train), "train")
                if "loss" in d["train"]:
                    _check_keys(d["train"]["loss"], set(train["loss"]), "train.loss")
                    train["loss"] = {**train["loss"], **d["train"]["loss"]}
                train.update({k: v for k, v in d["train"].items() if k != "loss"})
            train["loss"] = LossWeights(**train["loss"])
            return cls(
                encoder=EncoderConfig.from_dict(enc),
                train=TrainConfig.from_dict(train),
                scene=_strict(SceneSpec, d.get("scene", {}), "scene", tuple_fields=("vehicle_speed", "ego_speed")),
                rig=_strict(RigSpec, d.get("rig", {}), "rig"),
                data=_strict(DataSpec, d.get("data", {}), "data"),
            )
        except ConfigError:
            raise
        except (TypeError, ValueError, KeyError) as e:
            raise ConfigError(str(e)) from e

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            d = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"invalid JSON: {e}") from e
        return cls.from_dict(d)

    @classmethod
    def load(cls, path) -> "RunConfig":
        try:
            text = Path(path).read_text()
        except OSError as e:
            raise ConfigError(f"cannot read config {path}: {e}") from e
        return cls.from_json(text)


def _check_keys(d, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigError(f"{where} must be an object")
    unknown = set(d) - set(allowed)
    if unknown:
        raise ConfigError(f"unknown keys in {where}: {sorted(unknown)}")


def _strict(cls, d: dict, where: str, tuple_fields=()):
    names = {f.name for f in dataclasses.fields(cls)}
    _check_keys(d, names, where)
    d = {k: (tuple(v) if k in tuple_fields else v) for k, v in d.items()}
    return cls(**d)
