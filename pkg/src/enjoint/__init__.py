"""Joint underwater image enhancement + detection on synthetic scenes."""

__version__ = "0.1.0"

from .aquasynth import (  # noqa: F401
    DatasetBundle,
    DatasetSizes,
    DegradationParams,
    LabeledSample,
    PairedSample,
    SceneConfig,
    WaterType,
    build_datasets,
    degrade,
    invert_degrade,
    render_scene,
)
from .model import Mode, NetworkConfig, NetworkWeights, forward, init_weights  # noqa: F401
from .trainer import StageSchedule, TrainConfig, run_training  # noqa: F401
