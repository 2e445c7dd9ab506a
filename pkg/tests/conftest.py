import pytest

from gatedbev.config.settings import (
    CameraConfig, DatasetConfig, LidarConfig, ModelConfig, RunConfig, SceneConfig, SynthConfig, TrainConfig,
)
from gatedbev.perception.adverseop_synth import generate_dataset, write_dataset
from gatedbev.perception.geometry import BEVGridSpec

SMALL_GRID = BEVGridSpec(x_range=(-16.0, 16.0), y_range=(-16.0, 16.0), cell_size=2.0, z_bins=4)


def small_config(**overrides) -> RunConfig:
    """16x16 grid with a light sensor rig; trains in seconds."""
    base = dict(
        seed=11,
        grid=SMALL_GRID,
        synth=SynthConfig(
            scene=SceneConfig(n_actors_range=(2, 5)),
            lidar=LidarConfig(azimuth_rays=180, rings=6),
            camera=CameraConfig(width=32, height=12),
        ),
        dataset=DatasetConfig(samples=8),
        model=ModelConfig(c_out=6),
        train=TrainConfig(epochs=2, batch_size=4),
    )
    base.update(overrides)
    return RunConfig(**base)


@pytest.fixture(scope="session")
def config() -> RunConfig:
    return small_config()


@pytest.fixture(scope="session")
def tiny_samples(config):
    return generate_dataset(config, n_samples=8)


@pytest.fixture(scope="session")
def tiny_dataset(tmp_path_factory, config, tiny_samples):
    out = tmp_path_factory.mktemp("tiny_dataset")
    write_dataset(tiny_samples, {"train": 0.5, "val": 0.5}, out, config)
    return out


@pytest.fixture(scope="session")
def config_file(tmp_path_factory, config):
    path = tmp_path_factory.mktemp("config") / "config.json"
    path.write_text(config.to_json())
    return path
