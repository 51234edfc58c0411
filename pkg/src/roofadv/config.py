"""Run configuration: one YAML tree per experiment, validated with pydantic.

Every field has a default except ``seed``; the resolved tree is echoed to
the output directory so a run can be repeated from that file alone.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .attack import AttackConfig
from .data import SyntheticParams
from .defense_eval import AugmentConfig
from .detector import BEVGridConfig, TemplateDetector
from .mesh import DeformConfig
from .raycast import SensorConfig


class ConfigError(ValueError):
    """Invalid configuration; the message names the offending field path."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class SyntheticSpec(_Strict):
    n_frames: int = Field(40, ge=0)
    vehicles: tuple[int, int] = (1, 8)
    range_m: tuple[float, float] = (5.0, 45.0)
    azimuth_deg: float = 40.0
    y_limit: float = 26.0
    heading_weights: tuple[float, float, float, float] = (0.4, 0.3, 0.15, 0.15)
    heading_jitter_deg: float = 2.0
    distractors: tuple[int, int] = (1, 4)
    clutter_points: int = Field(1500, ge=0)
    mesh_spacing: float = Field(0.08, gt=0)

    def build(self) -> SyntheticParams:
        return SyntheticParams(**self.model_dump())


class DatasetSource(_Strict):
    """``kitti_dir`` reads ``path`` (velodyne/, label_2/, calib/); ``synthetic`` generates frames."""

    kind: Literal["synthetic", "kitti_dir"] = "synthetic"
    path: Optional[str] = None
    split_file: Optional[str] = None
    synthetic: SyntheticSpec = SyntheticSpec()
    seed_offset: int = 0

    @model_validator(mode="after")
    def _path_for_kitti(self):
        if self.kind == "kitti_dir" and not self.path:
            raise ValueError("kitti_dir datasets need a path")
        return self


class DatasetConfig(_Strict):
    train: DatasetSource = DatasetSource()
    val: DatasetSource = DatasetSource(seed_offset=1)
    min_points: int = Field(10, ge=1)


class SensorSpec(_Strict):
    n_beams: int = Field(64, ge=1)
    elevation_max_deg: float = 2.0
    elevation_min_deg: float = -24.8
    azimuth_step_deg: float = Field(0.09, gt=0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    azimuth_fov_deg: tuple[float, float] = (-180.0, 180.0)

    def build(self) -> SensorConfig:
        return SensorConfig.from_dict(self.model_dump())


class PriorSpec(_Strict):
    k: int = Field(16, ge=1)
    path: Optional[str] = None


class DetectorSpec(_Strict):
    representation: Literal["occupancy_grid", "density_grid", "point_features"] = "density_grid"
    checkpoint: Optional[str] = None
    cell: float = Field(0.2, gt=0)
    x_range: tuple[float, float] = (0.0, 52.0)
    y_range: tuple[float, float] = (-28.0, 28.0)
    z_range: tuple[float, float] = (-1.55, 1.05)
    z_bins: int = Field(13, ge=1)
    n_headings: int = Field(8, ge=1)
    l2: float = Field(1e-4, ge=0)
    max_iter: int = Field(150, ge=0)
    hard_negative_rounds: int = Field(2, ge=0)
    empty_weight: float = Field(0.25, ge=0, lt=0.5)
    max_bias: float = -6.0

    def build(self, seed: int) -> TemplateDetector:
        grid = BEVGridConfig(self.x_range, self.y_range, self.cell, self.z_range, self.z_bins)
        return TemplateDetector(self.representation, grid, n_headings=self.n_headings, l2=self.l2,
                                max_iter=self.max_iter, hard_negative_rounds=self.hard_negative_rounds,
                                empty_weight=self.empty_weight, max_bias=self.max_bias, random_state=seed)


class DeformSpec(_Strict):
    b: tuple[float, float, float] = (0.7, 0.7, 0.5)
    c: tuple[float, float, float] = (0.1, 0.1, 0.0)
    rotation_mode: Literal["fixed_identity", "planar_z"] = "fixed_identity"
    max_vertex_perturbation: Optional[float] = None

    def build(self) -> DeformConfig:
        return DeformConfig(**self.model_dump())


class AttackSpec(_Strict):
    optimizer: Literal["genetic", "whitebox"] = "genetic"
    template: Literal["icosphere"] = "icosphere"
    icosphere_subdivisions: int = Field(2, ge=0)
    lambda_lap: float = Field(0.001, ge=0)
    deform: DeformSpec = DeformSpec()
    learning_rate: float = Field(0.005, ge=0)
    iterations: int = Field(1000, ge=0)
    batch_size: int = Field(8, ge=1)
    eval_every: int = Field(10, ge=1)
    population: int = Field(16, ge=2)
    mutation_std: float = Field(0.05, ge=0)
    mutation_prob: float = Field(0.01, ge=0, le=1)
    fitness_batch: int = Field(100, ge=1)
    eval_batch: Optional[int] = Field(None, ge=1)
    patience: int = Field(100, ge=0)
    decay: float = Field(0.5, gt=0, le=1)
    generations: int = Field(500, ge=0)
    compose_mode: Literal["union", "occlude"] = "union"
    logit_floor: float = -9.0
    max_samples: Optional[int] = Field(None, ge=1)

    def build(self) -> AttackConfig:
        data = self.model_dump(exclude={"template", "icosphere_subdivisions", "deform", "max_samples"})
        return AttackConfig(deform=self.deform.build(), **data)


class AugmentSpec(_Strict):
    n_vertices: tuple[int, int] = (50, 200)
    n_remove: tuple[int, int] = (0, 300)
    sigma: float = Field(0.5, gt=0)
    min_points: int = Field(10, ge=1)
    rounds: int = Field(3, ge=1)

    @field_validator("n_vertices", "n_remove")
    @classmethod
    def _nonempty(cls, v):
        if v[0] > v[1]:
            raise ValueError("range is empty")
        return v

    def build(self) -> AugmentConfig:
        return AugmentConfig(**self.model_dump(exclude={"rounds"}))


class DefenseSpec(_Strict):
    k: int = Field(30, ge=1)
    epochs: int = Field(3, ge=0)
    frames_per_step: int = Field(8, ge=1)
    model_steps: int = Field(5, ge=1)
    attack_batch: Optional[int] = Field(8, ge=1)


class EvaluateSpec(_Strict):
    iou_threshold: float = Field(0.7, gt=0, lt=1)
    heatmap_cell: float = Field(4.0, gt=0)


class RunConfig(_Strict):
    seed: int
    output: str = "runs/default"
    jobs: int = 1
    dataset: DatasetConfig = DatasetConfig()
    sensor: SensorSpec = SensorSpec()
    prior: PriorSpec = PriorSpec()
    detector: DetectorSpec = DetectorSpec()
    attack: AttackSpec = AttackSpec()
    augment: AugmentSpec = AugmentSpec()
    defense: DefenseSpec = DefenseSpec()
    evaluate: EvaluateSpec = EvaluateSpec()

    def digest(self, *sections: str) -> str:
        """Stable hash of the named sections (plus the seed), used to key cached artifacts."""
        data = self.model_dump(mode="json")
        picked = {k: data[k] for k in sections} if sections else data
        picked["seed"] = self.seed
        return hashlib.sha256(json.dumps(picked, sort_keys=True).encode()).hexdigest()[:16]

    def to_yaml(self) -> str:
        return yaml.safe_dump(self.model_dump(mode="json"), sort_keys=True, default_flow_style=None)


def _format_errors(exc: ValidationError) -> str:
    parts = []
    for err in exc.errors():
        loc = ".".join(str(p) for p in err["loc"]) or "<root>"
        parts.append(f"{loc}: {err['msg']}")
    return "; ".join(parts)


def _set_path(tree: dict, dotted: str, value):
    keys = dotted.split(".")
    node = tree
    for key in keys[:-1]:
        child = node.get(key)
        if child is None:
            child = node[key] = {}
        elif not isinstance(child, dict):
            raise ConfigError(f"{dotted}: {key} is not a section")
        node = child
    node[keys[-1]] = value


def parse_override(text: str) -> tuple:
    """``"a.b=value"`` -> ``("a.b", parsed value)``; values are read as YAML scalars/lists."""
    if "=" not in text:
        raise ConfigError(f"override {text!r} must look like path=value")
    key, raw = text.split("=", 1)
    key = key.strip().lstrip("-")
    if not key:
        raise ConfigError(f"override {text!r} has an empty path")
    return key, yaml.safe_load(raw) if raw.strip() else None


def build_config(tree: dict | None, overrides=()) -> RunConfig:
    tree = json.loads(json.dumps(tree or {}))
    if not isinstance(tree, dict):
        raise ConfigError("config file must hold a mapping at the top level")
    for key, value in overrides:
        _set_path(tree, key, value)
    try:
        return RunConfig.model_validate(tree)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None


def load_config(path=None, overrides=()) -> RunConfig:
    tree = {}
    if path is not None:
        text = Path(path).read_text(encoding="utf-8")
        try:
            tree = yaml.safe_load(text) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{path}: not valid YAML ({exc})") from None
    return build_config(tree, overrides)
