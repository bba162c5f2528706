import numpy as np
import pytest
import torch

from enjoint.aquasynth import DatasetSizes, SceneConfig, build_datasets
from enjoint.model import NetworkConfig
from enjoint.trainer import StageSchedule, TrainConfig

torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_net() -> NetworkConfig:
    """32px network for fast end-to-end trainer/CLI tests."""
    return NetworkConfig(
        input_size=32,
        stem_channels=4,
        stage_channels=(8, 16, 32),
        det_strides=(8, 16),
        anchors=(((6.0, 6.0), (10.0, 8.0), (8.0, 12.0)), ((16.0, 16.0), (22.0, 18.0), (18.0, 24.0))),
        class_count=4,
        uie_channels=(8, 8, 4, 4),
    )


@pytest.fixture(scope="session")
def tiny_scene_cfg() -> SceneConfig:
    return SceneConfig(image_size=32, object_count_range=(1, 2), min_object_size=8, seed=5)


@pytest.fixture(scope="session")
def tiny_bundle(tiny_scene_cfg):
    sizes = DatasetSizes(train_pairs=12, train_labeled=12, eval_pairs=4, eval_labeled=4)
    return build_datasets(tiny_scene_cfg, sizes=sizes, seed=99)


@pytest.fixture()
def tiny_train_cfg() -> TrainConfig:
    return TrainConfig(
        schedule=StageSchedule(3, 5, 7),
        det_batch=4,
        enh_batch=3,
        seed=21,
        checkpoint_every=0,
    )


@pytest.fixture()
def rng():
    return np.random.Generator(np.random.PCG64(1234))
