"""
AdverseOp3D-mini Synthetic Dataset Generator

Procedurally builds context-balanced multimodal samples:
- Scenes of non-overlapping actors around the ego vehicle
- Ray-cast lidar with rain scattering, dropout and attenuation
- Six ray-cast cameras (intensity + depth) with night dimming, glare,
  depth noise and rain occlusion streaks
- Annotation filtering (at least one lidar point per kept box)
- NuScenes-inspired relational JSON + little-endian float32 payloads on disk

Every output is a pure function of (config, seed). Per-sample randomness is
derived from the dataset seed and the sample index with a splitmix64 mix, and
each sensor draws from its own stream so toggling one context flag never
perturbs the randomness of an unrelated sensor.
"""

import hashlib
import json
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError

from gatedbev.config.settings import (
    CameraConfig, ClassPrior, LidarConfig, RunConfig, SceneConfig, DEFAULT_CLASSES,
)
from gatedbev.errors import (
    ConfigError, DatasetCorruptError, DatasetWriteError, SchemaVersionError, TokenCollisionError,
)
from gatedbev.perception.geometry import (
    BEVGridSpec, Box3D, PointCloud, SensorPose, bev_iou, points_in_box,
)

logger = logging.getLogger(__name__)

DATASET_SCHEMA = "adverseop3d-mini/1"
NO_RETURN = -1.0
MIN_DEPTH_M = 0.1
MASK64 = (1 << 64) - 1


# ==================== CONTEXT ====================

class Context(BaseModel):
    """Operating context: the two binary environment flags."""
    model_config = ConfigDict(frozen=True)

    is_night: bool = False
    is_rain: bool = False

    @property
    def bucket(self) -> str:
        return f"{'night' if self.is_night else 'day'}_{'rain' if self.is_rain else 'clear'}"

    def as_vector(self) -> Tuple[float, float]:
        return float(self.is_night), float(self.is_rain)

    def to_flags(self) -> Dict[str, int]:
        return {"is_night": int(self.is_night), "is_rain": int(self.is_rain)}

    @classmethod
    def from_flags(cls, flags: Dict[str, int]) -> "Context":
        return cls(is_night=bool(flags["is_night"]), is_rain=bool(flags["is_rain"]))


ALL_CONTEXTS = (
    Context(is_night=False, is_rain=False),
    Context(is_night=True, is_rain=False),
    Context(is_night=False, is_rain=True),
    Context(is_night=True, is_rain=True),
)
CONTEXT_BUCKETS = tuple(c.bucket for c in ALL_CONTEXTS)


def balanced_contexts(n_total: int) -> List[Context]:
    """Exactly n_total/4 samples per context, interleaved in a fixed order."""
    if n_total < 0 or n_total % 4 != 0:
        raise ConfigError(
            f"Sample count {n_total} cannot be split evenly across the 4 context buckets; "
            f"use a multiple of 4"
        )
    return [ALL_CONTEXTS[i % 4] for i in range(n_total)]


# ==================== SEEDING ====================

def splitmix64(x: int) -> int:
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return z ^ (z >> 31)


def sample_seed(seed: int, index: int) -> int:
    return splitmix64((seed ^ index) & MASK64)


def stream_seed(base: int, stream: int) -> int:
    """Independent child seed for one generator stream of a sample."""
    return splitmix64((base ^ (stream * 0xD1B54A32D192ED03)) & MASK64)


SCENE_STREAM, LIDAR_STREAM, CAMERA_STREAM = 1, 2, 3


# ==================== SCENE ====================

class SceneSpec(BaseModel):
    model_config = ConfigDict(frozen=True, arbitrary_types_allowed=True)

    seed: int
    context: Context = Context()
    n_actors: Optional[int] = Field(None, ge=0)  # None: uniform over scene.n_actors_range
    grid: BEVGridSpec = BEVGridSpec()
    classes: List[ClassPrior] = Field(default_factory=lambda: list(DEFAULT_CLASSES))
    scene: SceneConfig = SceneConfig()


@dataclass(frozen=True, eq=False)
class Scene:
    ego_pose: SensorPose
    actors: List[Box3D]
    albedo: np.ndarray  # per-actor camera reflectance


def generate_scene(spec: SceneSpec) -> Scene:
    """Place actors without BEV overlap; retries are bounded per actor."""
    rng = np.random.default_rng(spec.seed)
    cfg = spec.scene
    if spec.n_actors is None:
        n_actors = int(rng.integers(cfg.n_actors_range[0], cfg.n_actors_range[1] + 1))
    else:
        n_actors = spec.n_actors

    weights = np.array([c.weight for c in spec.classes], dtype=np.float64)
    probs = weights / weights.sum()
    ego = Box3D(center=(0.0, 0.0, 0.75), extent=(*cfg.ego_extent, 1.5), yaw=0.0, class_id=0)
    (x_lo, x_hi), (y_lo, y_hi) = spec.grid.x_range, spec.grid.y_range

    actors: List[Box3D] = []
    albedo: List[float] = []
    for k in range(n_actors):
        placed = False
        for attempt in range(cfg.placement_retries):
            class_id = int(rng.choice(len(spec.classes), p=probs))
            mean = np.asarray(spec.classes[class_id].extent)
            scale = np.clip(1.0 + cfg.extent_jitter * rng.standard_normal(3), 0.5, 1.5)
            extent = mean * scale
            yaw = float(rng.uniform(-math.pi, math.pi))
            u = rng.random(2)
            reach = 0.5 * math.hypot(extent[0], extent[1]) + cfg.edge_margin_m
            if 2.0 * reach >= min(x_hi - x_lo, y_hi - y_lo):
                continue
            x = x_lo + reach + u[0] * (x_hi - x_lo - 2.0 * reach)
            y = y_lo + reach + u[1] * (y_hi - y_lo - 2.0 * reach)
            box = Box3D(
                center=(float(x), float(y), float(extent[2] / 2.0)),
                extent=(float(extent[0]), float(extent[1]), float(extent[2])),
                yaw=yaw,
                class_id=class_id,
            )
            if bev_iou(box, ego) > 0 or any(bev_iou(box, other) > 0 for other in actors):
                logger.debug(f"Actor {k}: placement attempt {attempt} overlaps, retrying")
                continue
            actors.append(box)
            albedo.append(float(rng.uniform(*cfg.albedo_range)))
            placed = True
            break
        if not placed:
            logger.warning(
                f"Scene seed {spec.seed}: could not place actor {k} after "
                f"{cfg.placement_retries} attempts; keeping {len(actors)} actors"
            )
            break

    return Scene(ego_pose=SensorPose(), actors=actors, albedo=np.asarray(albedo, dtype=np.float64))


# ==================== RAY CASTING ====================

def cast_boxes(origin: np.ndarray, dirs: np.ndarray, boxes: Sequence[Box3D]) -> Tuple[np.ndarray, np.ndarray]:
    """
    Nearest entry distance of each ray into any box.

    Args:
        origin: (3,) ray origin, outside every box
        dirs: (N, 3) unit directions

    Returns:
        (t, index): distance along the ray (inf on miss) and hit box index (-1 on miss)
    """
    n = dirs.shape[0]
    best_t = np.full(n, np.inf)
    best_idx = np.full(n, -1, dtype=np.int64)
    for b, box in enumerate(boxes):
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        rel = origin - np.asarray(box.center)
        o = np.array([c * rel[0] + s * rel[1], -s * rel[0] + c * rel[1], rel[2]])
        d = np.stack([
            c * dirs[:, 0] + s * dirs[:, 1],
            -s * dirs[:, 0] + c * dirs[:, 1],
            dirs[:, 2],
        ], axis=1)
        half = np.asarray(box.extent) / 2.0

        t_near = np.full(n, -np.inf)
        t_far = np.full(n, np.inf)
        for axis in range(3):
            da = d[:, axis]
            parallel = da == 0.0
            with np.errstate(divide="ignore", invalid="ignore"):
                t1 = (-half[axis] - o[axis]) / da
                t2 = (half[axis] - o[axis]) / da
            lo = np.where(parallel, -np.inf, np.minimum(t1, t2))
            hi = np.where(parallel, np.inf, np.maximum(t1, t2))
            if abs(o[axis]) > half[axis]:
                # parallel rays outside this slab never enter the box
                hi = np.where(parallel, -np.inf, hi)
            t_near = np.maximum(t_near, lo)
            t_far = np.minimum(t_far, hi)

        hit = (t_far >= t_near) & (t_near > 0.0)
        closer = hit & (t_near < best_t)
        best_t = np.where(closer, t_near, best_t)
        best_idx = np.where(closer, b, best_idx)
    return best_t, best_idx


def cast_ground(origin: np.ndarray, dirs: np.ndarray) -> np.ndarray:
    """Distance to the flat z = 0 ground plane (inf for rays that never descend)."""
    with np.errstate(divide="ignore"):
        t = np.where(dirs[:, 2] < 0.0, -origin[2] / dirs[:, 2], np.inf)
    return t


def lidar_ray_directions(cfg: LidarConfig) -> np.ndarray:
    """(rings * azimuth_rays, 3) unit directions, ring-major."""
    azimuth = np.arange(cfg.azimuth_rays) * (2.0 * math.pi / cfg.azimuth_rays)
    elevation = np.deg2rad(np.linspace(cfg.elevation_deg[0], cfg.elevation_deg[1], cfg.rings))
    el, az = np.meshgrid(elevation, azimuth, indexing="ij")
    dirs = np.stack([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)], axis=-1)
    return dirs.reshape(-1, 3)


def simulate_lidar(scene: Scene, context: Context, rng: np.random.Generator,
                   cfg: LidarConfig = LidarConfig()) -> PointCloud:
    """Ray-cast one sweep. Night has no effect; rain scatters, drops and attenuates."""
    origin = np.array([0.0, 0.0, cfg.mount_height_m])
    dirs = lidar_ray_directions(cfg)
    n = dirs.shape[0]

    t_box, _ = cast_boxes(origin, dirs, scene.actors)
    t_ground = cast_ground(origin, dirs)
    t = np.minimum(t_box, t_ground)
    reflectivity = np.where(t_box <= t_ground, cfg.actor_reflectivity, cfg.ground_reflectivity)
    returned = t <= cfg.max_range_m

    # always drawn so the stream layout is context independent
    u_drop = rng.random(n)
    u_scatter = rng.random(n)
    scatter_r = rng.uniform(cfg.scatter_range_m[0], cfg.scatter_range_m[1], n)

    if context.is_rain:
        r0 = cfg.r0_rain_m
        dropped = u_drop < cfg.p_drop
        scattered = ~dropped & (u_scatter < cfg.p_scatter)
    else:
        r0 = cfg.r0_clear_m
        dropped = np.zeros(n, dtype=bool)
        scattered = np.zeros(n, dtype=bool)

    true_hit = returned & ~dropped & ~scattered
    rng_out = np.where(scattered, scatter_r, t)
    keep = true_hit | scattered
    ranges = rng_out[keep]
    xyz = origin + dirs[keep] * ranges[:, None]
    intensity = np.where(scattered[keep], 1.0, reflectivity[keep]) * np.exp(-ranges / r0)
    points = np.concatenate([xyz, intensity[:, None]], axis=1).astype(np.float32)
    logger.debug(
        f"Lidar sweep: {n} rays, {int(true_hit.sum())} returns, "
        f"{int(scattered.sum())} scattered, {int(dropped.sum())} dropped"
    )
    return PointCloud(points)


@dataclass(frozen=True, eq=False)
class CameraImage:
    """Toy camera frame: per-pixel intensity and estimated depth (NO_RETURN when occluded)."""
    intensity: np.ndarray  # (H, W) float32 in [0, 1]
    depth: np.ndarray      # (H, W) float32, > 0 or NO_RETURN
    pose: SensorPose
    hfov: float

    @property
    def width(self) -> int:
        return self.intensity.shape[1]

    @property
    def height(self) -> int:
        return self.intensity.shape[0]

    @property
    def occluded(self) -> np.ndarray:
        return self.depth == NO_RETURN


def camera_poses(cfg: CameraConfig) -> List[SensorPose]:
    return [
        SensorPose(translation=(0.0, 0.0, cfg.mount_height_m), yaw_pitch_roll=(float(yaw), 0.0, 0.0))
        for yaw in cfg.yaw_offsets
    ]


def pixel_ray_directions(width: int, height: int, hfov: float) -> np.ndarray:
    """(H, W, 3) unit pinhole ray directions in the camera frame (x forward, y left, z up)."""
    focal = (width / 2.0) / math.tan(hfov / 2.0)
    u = np.arange(width) + 0.5 - width / 2.0
    v = np.arange(height) + 0.5 - height / 2.0
    vv, uu = np.meshgrid(v, u, indexing="ij")
    dirs = np.stack([np.full_like(uu, focal), -uu, -vv], axis=-1)
    return dirs / np.linalg.norm(dirs, axis=-1, keepdims=True)


def render_cameras(scene: Scene, cfg: CameraConfig = CameraConfig()) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Noise-free (intensity, range) per camera; misses return the far plane."""
    local_dirs = pixel_ray_directions(cfg.width, cfg.height, cfg.hfov).reshape(-1, 3)
    renders = []
    for pose in camera_poses(cfg):
        dirs = local_dirs @ pose.rotation_matrix().T
        origin = np.asarray(pose.translation)
        t_box, idx = cast_boxes(origin, dirs, scene.actors)
        t_ground = cast_ground(origin, dirs)
        on_box = np.isfinite(t_box) & (t_box <= t_ground) & (t_box <= cfg.far_m)
        on_ground = ~on_box & (t_ground <= cfg.far_m)

        intensity = np.full(dirs.shape[0], cfg.sky_intensity)
        depth = np.full(dirs.shape[0], cfg.far_m)
        if len(scene.actors):
            intensity[on_box] = scene.albedo[idx[on_box]]
        depth[on_box] = t_box[on_box]
        intensity[on_ground] = cfg.ground_intensity
        depth[on_ground] = t_ground[on_ground]
        renders.append((
            intensity.reshape(cfg.height, cfg.width),
            depth.reshape(cfg.height, cfg.width),
        ))
    return renders


def _glare_field(centers_x: np.ndarray, centers_y: np.ndarray, cfg: CameraConfig) -> np.ndarray:
    rows = np.arange(cfg.height)[:, None] + 0.5
    cols = np.arange(cfg.width)[None, :] + 0.5
    field = np.zeros((cfg.height, cfg.width))
    for cx, cy in zip(centers_x, centers_y):
        d2 = (cols - cx) ** 2 + (rows - cy) ** 2
        field += cfg.glare_peak * np.exp(-d2 / (2.0 * cfg.glare_sigma_px ** 2))
    return field


def _streak_mask(rng: np.random.Generator, cfg: CameraConfig) -> np.ndarray:
    """Vertical streaks covering exactly round(f_rain * H * W) pixels."""
    mask = np.zeros((cfg.height, cfg.width), dtype=bool)
    target = int(round(cfg.f_rain * cfg.height * cfg.width))
    count = 0
    lo, hi = cfg.streak_length_px
    while count < target:
        col = int(rng.integers(cfg.width))
        start = int(rng.integers(cfg.height))
        length = int(rng.integers(lo, hi + 1))
        rows = np.arange(start, min(start + length, cfg.height))
        fresh = rows[~mask[rows, col]][: target - count]
        mask[fresh, col] = True
        count += len(fresh)
    return mask


def simulate_cameras(scene: Scene, context: Context, rng: np.random.Generator,
                     cfg: CameraConfig = CameraConfig()) -> List[CameraImage]:
    """Six degraded camera frames; every random draw happens regardless of context."""
    sigma = cfg.sigma0_m * (1.0 + cfg.lambda_night * float(context.is_night))
    images = []
    for pose, (intensity, depth) in zip(camera_poses(cfg), render_cameras(scene, cfg)):
        noise = rng.standard_normal(depth.shape)
        glare_x = rng.uniform(0.0, cfg.width, cfg.glare_blobs)
        glare_y = rng.uniform(0.0, cfg.height, cfg.glare_blobs)
        streaks = _streak_mask(rng, cfg)

        depth_est = np.maximum(depth + sigma * noise, MIN_DEPTH_M)
        if context.is_night:
            intensity = np.clip(cfg.kappa_night * intensity + _glare_field(glare_x, glare_y, cfg), 0.0, 1.0)
        if context.is_rain:
            depth_est = np.where(streaks, NO_RETURN, depth_est)
        images.append(CameraImage(
            intensity=intensity.astype(np.float32),
            depth=depth_est.astype(np.float32),
            pose=pose,
            hfov=cfg.hfov,
        ))
    return images


def filter_annotations(boxes: Sequence[Box3D], cloud: PointCloud) -> List[Box3D]:
    """Keep boxes holding at least one lidar point, in their original order."""
    return [box for box in boxes if points_in_box(cloud, box)]


# ==================== SAMPLES ====================

@dataclass(frozen=True, eq=False)
class Sample:
    token: str
    cloud: PointCloud
    cameras: Tuple[CameraImage, ...]
    annotations: List[Box3D]
    context: Context

    def __post_init__(self):
        if len(self.cameras) != 6:
            raise ValueError(f"Sample {self.token} must carry exactly 6 cameras, got {len(self.cameras)}")


def sample_token(seed: int, index: int) -> str:
    return hashlib.md5(f"adverseop3d-mini:{seed}:{index}".encode()).hexdigest()


def generate_sample(index: int, context: Context, config: RunConfig) -> Sample:
    base = sample_seed(config.seed, index)
    spec = SceneSpec(
        seed=stream_seed(base, SCENE_STREAM),
        context=context,
        grid=config.grid,
        classes=config.synth.classes,
        scene=config.synth.scene,
    )
    scene = generate_scene(spec)
    cloud = simulate_lidar(scene, context, np.random.default_rng(stream_seed(base, LIDAR_STREAM)), config.synth.lidar)
    cameras = simulate_cameras(scene, context, np.random.default_rng(stream_seed(base, CAMERA_STREAM)), config.synth.camera)
    annotations = filter_annotations(scene.actors, cloud)
    token = sample_token(config.seed, index)
    logger.debug(
        f"Sample {index} ({token[:8]}, {context.bucket}): {len(scene.actors)} actors, "
        f"{len(annotations)} annotated, {len(cloud)} points"
    )
    return Sample(token=token, cloud=cloud, cameras=tuple(cameras), annotations=annotations, context=context)


def generate_dataset(config: RunConfig, n_samples: Optional[int] = None, workers: Optional[int] = None) -> List[Sample]:
    """Generate a context-balanced sample list; ordered and deterministic for any worker count."""
    n_samples = config.dataset.samples if n_samples is None else n_samples
    workers = config.dataset.workers if workers is None else workers
    contexts = balanced_contexts(n_samples)
    logger.info(f"Generating {n_samples} samples with seed {config.seed} ({workers} workers)")
    if workers <= 1:
        return [generate_sample(i, ctx, config) for i, ctx in enumerate(contexts)]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda args: generate_sample(args[0], args[1], config), enumerate(contexts)))


# ==================== ON-DISK FORMAT ====================

class ContextFlags(BaseModel):
    model_config = ConfigDict(extra="forbid")

    is_night: int = Field(ge=0, le=1)
    is_rain: int = Field(ge=0, le=1)


class CameraRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    index: int
    translation: Tuple[float, float, float]
    yaw_pitch_roll: Tuple[float, float, float]
    hfov: float
    width: int
    height: int


class ClassRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    class_id: int
    name: str


class SampleRecord(BaseModel):
    model_config = ConfigDict(extra="forbid")

    token: str
    split: str
    context: ContextFlags
    lidar: str
    cameras: List[str]
    annotations: str
    num_points: int


class DatasetManifest(BaseModel):
    model_config = ConfigDict(extra="forbid")

    version: str
    seed: int
    grid: BEVGridSpec
    class_table: List[ClassRecord]
    cameras: List[CameraRecord]
    samples: List[SampleRecord]
    splits: Dict[str, List[str]]
    context_counts: Dict[str, Dict[str, int]]

    @property
    def class_names(self) -> List[str]:
        return [c.name for c in sorted(self.class_table, key=lambda c: c.class_id)]

    def to_json(self) -> str:
        return json.dumps(self.model_dump(mode="json"), indent=2) + "\n"


def _context_counts(contexts: Sequence[Context]) -> Dict[str, int]:
    counts = {bucket: 0 for bucket in CONTEXT_BUCKETS}
    for ctx in contexts:
        counts[ctx.bucket] += 1
    return counts


def assign_splits(samples: Sequence[Sample], split_fractions: Dict[str, float], seed: int) -> Dict[str, str]:
    """Stratified token -> split map; each bucket is shuffled then cut at rounded cumulative fractions."""
    rng = np.random.default_rng(splitmix64(seed & MASK64))
    names = list(split_fractions)
    cumulative = np.cumsum([split_fractions[n] for n in names])
    assignment: Dict[str, str] = {}
    for bucket in CONTEXT_BUCKETS:
        tokens = [s.token for s in samples if s.context.bucket == bucket]
        order = rng.permutation(len(tokens))
        bounds = [0] + [int(round(c * len(tokens))) for c in cumulative]
        bounds[-1] = len(tokens)
        for split_idx, name in enumerate(names):
            for pos in order[bounds[split_idx]:bounds[split_idx + 1]]:
                assignment[tokens[pos]] = name
    return assignment


def _box_record(box: Box3D, class_names: Sequence[str]) -> dict:
    return {
        "center": list(box.center),
        "extent": list(box.extent),
        "yaw": box.yaw,
        "class_id": box.class_id,
        "class_name": class_names[box.class_id],
    }


def write_dataset(samples: Sequence[Sample], split_fractions: Dict[str, float], out_dir: Union[str, Path],
                  config: RunConfig = RunConfig()) -> DatasetManifest:
    """Serialize samples plus manifest.json under out_dir."""
    out_dir = Path(out_dir)
    tokens = [s.token for s in samples]
    if len(set(tokens)) != len(tokens):
        seen, dupes = set(), set()
        for t in tokens:
            (dupes if t in seen else seen).add(t)
        raise TokenCollisionError(f"Duplicate sample tokens: {sorted(dupes)[:5]}")

    class_names = config.class_names
    assignment = assign_splits(samples, split_fractions, config.seed)
    cam_cfg = config.synth.camera
    cameras = [
        CameraRecord(index=i, translation=p.translation, yaw_pitch_roll=p.yaw_pitch_roll,
                     hfov=cam_cfg.hfov, width=cam_cfg.width, height=cam_cfg.height)
        for i, p in enumerate(camera_poses(cam_cfg))
    ]

    records = []
    try:
        for sample in samples:
            rel = Path("samples") / sample.token
            (out_dir / rel).mkdir(parents=True, exist_ok=True)
            sample.cloud.points.astype("<f4").tofile(out_dir / rel / "lidar.bin")
            cam_paths = []
            for i, cam in enumerate(sample.cameras):
                pairs = np.stack([cam.intensity, cam.depth], axis=-1).astype("<f4")
                pairs.tofile(out_dir / rel / f"cam_{i}.bin")
                cam_paths.append((rel / f"cam_{i}.bin").as_posix())
            ann = {
                "token": sample.token,
                "context": sample.context.to_flags(),
                "boxes": [_box_record(b, class_names) for b in sample.annotations],
            }
            (out_dir / rel / "ann.json").write_text(json.dumps(ann, indent=2) + "\n")
            records.append(SampleRecord(
                token=sample.token,
                split=assignment[sample.token],
                context=ContextFlags(**sample.context.to_flags()),
                lidar=(rel / "lidar.bin").as_posix(),
                cameras=cam_paths,
                annotations=(rel / "ann.json").as_posix(),
                num_points=len(sample.cloud),
            ))

        splits = {name: [r.token for r in records if r.split == name] for name in split_fractions}
        by_token = {s.token: s.context for s in samples}
        counts = {"all": _context_counts([s.context for s in samples])}
        for name, split_tokens in splits.items():
            counts[name] = _context_counts([by_token[t] for t in split_tokens])

        manifest = DatasetManifest(
            version=DATASET_SCHEMA,
            seed=config.seed,
            grid=config.grid,
            class_table=[ClassRecord(class_id=i, name=n) for i, n in enumerate(class_names)],
            cameras=cameras,
            samples=records,
            splits=splits,
            context_counts=counts,
        )
        (out_dir / "manifest.json").write_text(manifest.to_json())
    except OSError as e:
        raise DatasetWriteError(f"Cannot write dataset to {out_dir}: {e}")

    logger.info(f"Wrote {len(samples)} samples to {out_dir} (splits: { {k: len(v) for k, v in splits.items()} })")
    return manifest


def _read_floats(path: Path, what: str) -> np.ndarray:
    if not path.is_file():
        raise DatasetCorruptError(f"Missing {what} file: {path}")
    raw = path.read_bytes()
    if len(raw) % 4:
        raise DatasetCorruptError(f"Truncated {what} file: {path}")
    return np.frombuffer(raw, dtype="<f4").astype(np.float32)


def read_manifest(directory: Union[str, Path]) -> DatasetManifest:
    path = Path(directory) / "manifest.json"
    if not path.is_file():
        raise DatasetCorruptError(f"No manifest.json in {directory}")
    try:
        raw = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise DatasetCorruptError(f"Corrupt manifest {path}: {e}")
    version = raw.get("version") if isinstance(raw, dict) else None
    if version != DATASET_SCHEMA:
        raise SchemaVersionError(f"Manifest schema {version!r} is not {DATASET_SCHEMA!r}")
    try:
        manifest = DatasetManifest.model_validate(raw)
    except ValidationError as e:
        raise DatasetCorruptError(f"Manifest {path} does not match the schema: {e}")

    if len(manifest.cameras) != 6:
        raise DatasetCorruptError(f"Manifest {path} lists {len(manifest.cameras)} cameras, expected 6")
    tokens = [r.token for r in manifest.samples]
    if len(set(tokens)) != len(tokens):
        raise TokenCollisionError(f"Manifest {path} lists duplicate tokens")
    actual = _context_counts([Context.from_flags(r.context.model_dump()) for r in manifest.samples])
    if manifest.context_counts.get("all") != actual:
        raise DatasetCorruptError(
            f"Declared context counts {manifest.context_counts.get('all')} do not match samples {actual}"
        )
    return manifest


def read_dataset(directory: Union[str, Path], split: Optional[str] = None) -> Tuple[List[Sample], DatasetManifest]:
    """Load samples (optionally a single split) and the manifest."""
    directory = Path(directory)
    manifest = read_manifest(directory)
    if split is not None and split not in manifest.splits:
        raise ConfigError(f"Split {split!r} not in dataset (have {sorted(manifest.splits)})")

    poses = [SensorPose(translation=c.translation, yaw_pitch_roll=c.yaw_pitch_roll) for c in manifest.cameras]
    samples = []
    for record in manifest.samples:
        if split is not None and record.split != split:
            continue
        points = _read_floats(directory / record.lidar, "lidar")
        if points.size % 4:
            raise DatasetCorruptError(f"Lidar payload {record.lidar} is not a whole number of points")
        try:
            cloud = PointCloud(points.reshape(-1, 4))
        except ValueError as e:
            raise DatasetCorruptError(f"Lidar payload {record.lidar} is invalid: {e}")
        if len(cloud) != record.num_points:
            raise DatasetCorruptError(f"Lidar payload {record.lidar} holds {len(cloud)} points, expected {record.num_points}")

        if len(record.cameras) != len(manifest.cameras):
            raise DatasetCorruptError(
                f"Sample {record.token} lists {len(record.cameras)} camera files, expected {len(manifest.cameras)}"
            )
        cameras = []
        for cam_rec, rel in zip(manifest.cameras, record.cameras):
            pairs = _read_floats(directory / rel, "camera")
            if pairs.size != cam_rec.width * cam_rec.height * 2:
                raise DatasetCorruptError(f"Camera payload {rel} has {pairs.size} values")
            pairs = pairs.reshape(cam_rec.height, cam_rec.width, 2)
            cameras.append(CameraImage(
                intensity=np.ascontiguousarray(pairs[..., 0]),
                depth=np.ascontiguousarray(pairs[..., 1]),
                pose=poses[cam_rec.index],
                hfov=cam_rec.hfov,
            ))

        ann_path = directory / record.annotations
        try:
            ann = json.loads(ann_path.read_text())
            boxes = [
                Box3D(center=b["center"], extent=b["extent"], yaw=b["yaw"], class_id=b["class_id"])
                for b in ann["boxes"]
            ]
        except FileNotFoundError:
            raise DatasetCorruptError(f"Missing annotation file: {ann_path}")
        except (json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
            raise DatasetCorruptError(f"Corrupt annotation file {ann_path}: {e}")

        try:
            samples.append(Sample(
                token=record.token,
                cloud=cloud,
                cameras=tuple(cameras),
                annotations=boxes,
                context=Context.from_flags(record.context.model_dump()),
            ))
        except ValueError as e:
            raise DatasetCorruptError(f"Sample {record.token} is invalid: {e}")
    logger.info(f"Read {len(samples)} samples from {directory}" + (f" (split {split})" if split else ""))
    return samples, manifest
