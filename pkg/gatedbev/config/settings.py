import json
import math
from pathlib import Path
from typing import Dict, List, Literal, Optional, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from gatedbev.errors import ConfigError
from gatedbev.perception.geometry import BEVGridSpec

CONFIG_SCHEMA = "gatedbev-config/1"

Variant = Literal["constrained", "independent", "agnostic", "lidar_only", "camera_only"]


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ClassPrior(_Section):
    name: str
    extent: Tuple[float, float, float]  # mean length, width, height in meters
    weight: float = 1.0

    @field_validator('extent')
    def extent_positive(cls, v):
        if any(e <= 0 for e in v):
            raise ValueError('Class extent priors must be positive')
        return v

    @field_validator('weight')
    def weight_positive(cls, v):
        if v <= 0:
            raise ValueError('Class sampling weight must be positive')
        return v


DEFAULT_CLASSES = [
    ClassPrior(name="car", extent=(4.5, 1.9, 1.6), weight=0.5),
    ClassPrior(name="truck", extent=(8.0, 2.5, 3.2), weight=0.15),
    ClassPrior(name="bus", extent=(11.0, 2.9, 3.4), weight=0.1),
    ClassPrior(name="pedestrian", extent=(0.8, 0.8, 1.75), weight=0.25),
]


class SceneConfig(_Section):
    n_actors_range: Tuple[int, int] = (6, 14)
    placement_retries: int = 50
    ego_extent: Tuple[float, float] = (4.5, 1.9)
    edge_margin_m: float = 1.0
    extent_jitter: float = 0.1
    albedo_range: Tuple[float, float] = (0.4, 1.0)

    @field_validator('n_actors_range')
    def actors_range_ordered(cls, v):
        if v[0] < 0 or v[1] < v[0]:
            raise ValueError(f'n_actors_range must satisfy 0 <= min <= max, got {v}')
        return v


class LidarConfig(_Section):
    mount_height_m: float = 1.84
    azimuth_rays: int = Field(360, ge=1)
    elevation_deg: Tuple[float, float] = (-25.0, 3.0)
    rings: int = Field(8, ge=1)
    max_range_m: float = 70.0
    r0_clear_m: float = 60.0
    r0_rain_m: float = 40.0
    p_scatter: float = Field(0.08, ge=0.0, le=1.0)
    p_drop: float = Field(0.10, ge=0.0, le=1.0)
    scatter_range_m: Tuple[float, float] = (1.0, 15.0)
    ground_reflectivity: float = Field(0.5, ge=0.0, le=1.0)
    actor_reflectivity: float = Field(1.0, ge=0.0, le=1.0)


class CameraConfig(_Section):
    width: int = Field(96, ge=1)
    height: int = Field(32, ge=1)
    hfov: float = math.pi / 3.0
    mount_height_m: float = 1.6
    yaw_offsets: Tuple[float, ...] = (
        0.0, math.pi / 3.0, 2.0 * math.pi / 3.0, math.pi, -2.0 * math.pi / 3.0, -math.pi / 3.0,
    )
    far_m: float = 80.0
    sky_intensity: float = 0.7
    ground_intensity: float = 0.35
    kappa_night: float = Field(0.25, ge=0.0, le=1.0)
    glare_blobs: int = Field(3, ge=0)
    glare_sigma_px: float = 3.0
    glare_peak: float = 1.0
    sigma0_m: float = Field(0.5, ge=0.0)
    lambda_night: float = Field(4.0, ge=0.0)
    f_rain: float = Field(0.15, ge=0.0, le=1.0)
    streak_length_px: Tuple[int, int] = (4, 12)

    @field_validator('yaw_offsets')
    def six_cameras(cls, v):
        if len(v) != 6:
            raise ValueError(f'The rig has exactly six cameras, got {len(v)} yaw offsets')
        return v


class SynthConfig(_Section):
    classes: List[ClassPrior] = Field(default_factory=lambda: list(DEFAULT_CLASSES))
    scene: SceneConfig = SceneConfig()
    lidar: LidarConfig = LidarConfig()
    camera: CameraConfig = CameraConfig()


class DatasetConfig(_Section):
    samples: int = Field(500, ge=4)
    split_fractions: Dict[str, float] = Field(default_factory=lambda: {"train": 0.8, "val": 0.2})
    workers: int = Field(1, ge=1)

    @field_validator('split_fractions')
    def fractions_sum_to_one(cls, v):
        if not v or any(f < 0 for f in v.values()) or abs(sum(v.values()) - 1.0) > 1e-9:
            raise ValueError(f'split_fractions must be non-negative and sum to 1, got {v}')
        return v


class FeatureConfig(_Section):
    occupancy_cap: float = Field(8.0, gt=0)
    depth_bands: int = Field(10, ge=1)
    band_range_m: float = Field(50.0, gt=0)
    hit_cap: float = Field(32.0, gt=0)


class ModelConfig(_Section):
    c_out: int = Field(16, ge=1)
    variant: Variant = "independent"
    gate_bias_init: float = 2.0
    heatmap_bias_init: float = -2.19


class TrainConfig(_Section):
    learning_rate: float = Field(1e-2, ge=0.0)  # 0 is a dry run
    # update rule for gate.* parameters; everything else steps with plain SGD
    gate_optimizer: Literal["adam", "sgd"] = "adam"
    gate_learning_rate: float = Field(2e-2, ge=0.0)
    epochs: int = Field(30, ge=1)
    batch_size: int = Field(4, ge=1)
    seed: int = 7
    freeze: List[str] = Field(default_factory=list)  # parameter-name prefixes held fixed
    focal_alpha: float = 2.0
    focal_beta: float = 4.0
    reg_weight: float = Field(0.25, ge=0.0)


class EvalConfig(_Section):
    thresholds: Tuple[float, ...] = (0.5, 1.0, 2.0, 4.0)
    score_thresh: float = Field(0.3, ge=0.0, le=1.0)
    nms_radius_m: float = Field(2.0, ge=0.0)
    max_detections: int = Field(50, ge=1)
    split: str = "val"


class RunConfig(BaseSettings):
    """Fully resolved run configuration; mirrors every tunable constant."""
    model_config = SettingsConfigDict(
        env_prefix="GATEDBEV_",
        env_nested_delimiter="__",
        extra="forbid",
        frozen=True,
    )

    version: Literal["gatedbev-config/1"] = CONFIG_SCHEMA
    seed: int = 7
    grid: BEVGridSpec = BEVGridSpec()
    synth: SynthConfig = SynthConfig()
    dataset: DatasetConfig = DatasetConfig()
    features: FeatureConfig = FeatureConfig()
    model: ModelConfig = ModelConfig()
    train: TrainConfig = TrainConfig()
    eval: EvalConfig = EvalConfig()

    @model_validator(mode="after")
    def actors_fit_grid(self):
        span_x = self.grid.x_range[1] - self.grid.x_range[0]
        span_y = self.grid.y_range[1] - self.grid.y_range[0]
        if min(span_x, span_y) <= 2.0 * self.synth.scene.edge_margin_m:
            raise ValueError('Grid is too small for the configured actor edge margin')
        return self

    @property
    def class_names(self) -> List[str]:
        return [c.name for c in self.synth.classes]

    @property
    def lidar_channels(self) -> int:
        return self.grid.z_bins + 2

    @property
    def camera_channels(self) -> int:
        return self.features.depth_bands + 2

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2, sort_keys=True) + "\n"

    def dump_resolved(self, out_dir: Union[str, Path]) -> Path:
        """Echo the resolved config into an output directory."""
        path = Path(out_dir) / "config.json"
        path.write_text(self.to_json())
        return path


def load_config(path: Optional[Union[str, Path]] = None, **overrides) -> RunConfig:
    """Load a JSON config file; absent keys take defaults, unknown keys are rejected."""
    data: dict = {}
    if path is not None:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise ConfigError(f"Config file not found: {path}")
        except json.JSONDecodeError as e:
            raise ConfigError(f"Config file {path} is not valid JSON: {e}")
        if not isinstance(data, dict):
            raise ConfigError(f"Config file {path} must hold a JSON object")
    data.update(overrides)
    try:
        return RunConfig(**data)
    except ValidationError as e:
        raise ConfigError(f"Invalid configuration: {e}")
