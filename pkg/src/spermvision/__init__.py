"""Two-step sperm-video analysis: autoencoder feature-images plus CNN regression."""

from .core import (
    FeatureImage,
    FoldSplit,
    FrameStack,
    InputStackSpec,
    SemenLabels,
    TaskKind,
    load_folds,
    load_labels,
    select_target,
)
from .ingestion import SamplingMode, SamplingPlan, VideoSource, build_stack, decode_video, probe_video, sample_stacks
from .autoencoder import (
    AutoencoderConfig,
    TrainedAutoencoder,
    build_autoencoder,
    decode,
    encode,
    export_encoder,
    import_encoder,
    mse_loss,
    train_autoencoder,
)
from .regressor import (
    RegressorConfig,
    TrainedRegressor,
    build_regressor,
    forward,
    predict_video,
    train_regressor,
)
from .evaluation import ExperimentConfig, MetricsReport, average_folds, mae, render_report, run_cross_validation
from .synthgen import SynthParams, SynthVideo, generate_dataset, generate_video

__version__ = "0.1.0"
