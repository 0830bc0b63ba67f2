"""Desk-scale point-cloud classification with linear local attention,
parameter-free per-channel temperature adaptation, hybrid MLP/attention
blocks, and a shape-point-fusion head."""

from .autodiff import (
    DEFAULT_DTYPE,
    DomainError,
    GradCheckError,
    LinearLayer,
    Parameter,
    ShapeError,
    Tensor,
    grad_check,
    layer_normalize,
    linear_forward,
    pool,
    softmax,
)
from .geometry import (
    InternalError,
    NeighborhoodIndex,
    PointCloud,
    farthest_point_sample,
    gather_relative,
    knn,
    normalize_cloud,
    random_rotation,
)
from .attention import (
    AttentionParams,
    AttentionTrace,
    ChannelStats,
    FlopCount,
    channel_second_moment,
    flop_count,
    linear_local_attention,
    moment_decomposition,
    quadratic_local_attention,
    ta_attention,
    temperature,
)
from .model import (
    BatchOutput,
    ConfigError,
    GeometryPlan,
    ModelConfig,
    MtBlock,
    PointMTClassifier,
    SpfOutput,
    build_plan,
    count_parameters,
    encoder_forward,
    forward_batch,
    merge_plans,
    mt_block_forward,
    param_count,
    param_count_breakdown,
    spf_head_forward,
    traditional_head_forward,
)
from .training import (
    EpochRecord,
    TrainConfig,
    TrainingError,
    build_plans,
    cosine_annealing_lr,
    cross_entropy,
    cross_entropy_batch,
    evaluate,
    fit,
)
from .checkpoint import CHECKPOINT_VERSION, CheckpointError, load_checkpoint, load_into, save_checkpoint
from .dataio import (
    Dataset,
    ParseError,
    SHAPE_CLASSES,
    SynthConfig,
    generate_synthetic,
    import_off_directory,
    load_dataset,
    read_off,
    resample,
    sample_mesh_surface,
    save_dataset,
)
from .analysis import (
    SampleKlRecord,
    complexity_bench,
    convergence_compare,
    export_features,
    fit_scaling_exponent,
    kl_divergence,
    spf_statistics,
)

__version__ = "0.1.0"
