from .run_config import (
    SUPPORTED_SCALES,
    LossWeights,
    EncoderSpec,
    NetworkConfig,
    SchedulerConfig,
    TrainConfig,
    AdaptConfig,
    DataConfig,
    RunConfig,
)

from .reports import (
    LossReport,
    TrainLogRow,
    EpisodeRecord,
    MetricReport,
    ImageScore,
    DomainGapReport,
    DatasetManifest,
    CheckpointMeta,
)

__all__ = [
    # Run configuration
    "SUPPORTED_SCALES",
    "LossWeights",
    "EncoderSpec",
    "NetworkConfig",
    "SchedulerConfig",
    "TrainConfig",
    "AdaptConfig",
    "DataConfig",
    "RunConfig",

    # Reports
    "LossReport",
    "TrainLogRow",
    "EpisodeRecord",
    "MetricReport",
    "ImageScore",
    "DomainGapReport",
    "DatasetManifest",
    "CheckpointMeta",
]
