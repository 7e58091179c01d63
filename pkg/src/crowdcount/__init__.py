"""Crowd counting via density-map regression with a small FCN.

The pipeline: dot annotations -> geometry-adaptive Gaussian density
maps -> a six-layer fully convolutional regressor trained with SGD ->
multi-scale averaged count estimates with MAE/MSE reporting.
"""

from .data import (
    DatasetManifest,
    DotAnnotatedImage,
    build_training_set,
    center_crop,
    horizontal_flip,
    load_annotations,
    load_manifest,
    quadrant_crops,
    save_annotations,
    synth_scene,
    train_val_split,
    write_manifest,
)
from .density import (
    DensityMap,
    HeadAnnotation,
    adaptive_sigma,
    adaptive_sigmas,
    block_sum_downsample,
    knn_mean_distances,
    load_dmap,
    render_adaptive,
    render_density_map,
    save_dmap,
)
from .errors import (
    AnnotationError,
    AugmentationError,
    CheckpointError,
    ConfigurationError,
    CrowdCountError,
    DivergenceError,
    InferenceError,
    ParseError,
)
from .evaluation import (
    CrossDomainReport,
    EvalReport,
    EvalRow,
    SweepPoint,
    cross_evaluate,
    evaluate,
    mae,
    mse,
    multiscale_count,
    read_eval_csv,
    resize_bilinear,
    speed_accuracy_sweep,
    write_eval_csv,
    write_sweep_csv,
)
from .model import (
    ArchitectureSpec,
    ConvSpec,
    FcnModel,
    PoolSpec,
    count_params,
    default_architecture,
    flops,
    forward,
    load_checkpoint,
    predict_count,
    save_checkpoint,
)
from .training import (
    LossReport,
    TrainConfig,
    TrainState,
    euclidean_loss,
    generate_targets,
    load_train_state,
    lr_at,
    read_loss_log,
    save_train_state,
    train,
)

__version__ = "0.1.0"
