"""Pyramid hierarchical masked diffusion for paired image translation.

A desk-scale, dependency-light implementation: multi-resolution pyramid
decomposition, per-level masked token diffusion with a shared
transformer denoiser, cross-granularity distribution regularization,
and coarse-to-fine hierarchical sampling, on top of a small taped
autodiff engine.
"""

from .cgr import GranularityLossReport, KernelSpec, cgr_loss, mmd2, rbf_kernel_gram
from .data import (
    PairedSample,
    generate_dataset,
    generate_phantom,
    generate_phantom_pair,
    load_checkpoint,
    load_image_pgm,
    modality_map,
    read_dataset,
    save_checkpoint,
    save_image_pgm,
    write_dataset,
)
from .denoiser import DenoiserConfig, init_params, param_count, predict_noise
from .diffusion import (
    DiffusionStepInput,
    NoiseSchedule,
    loss_eps,
    make_schedule,
    p_sample,
    q_sample,
    q_step,
)
from .errors import (
    CheckpointCorruptionError,
    CheckpointVersionError,
    ConfigurationError,
    ContractError,
    DataIOError,
    DegenerateInputError,
    NumericFailure,
    PgmParseError,
    PyradiffError,
    ShapeError,
)
from .masking import (
    MaskPlan,
    TokenBatch,
    full_mask_plan,
    level_mask_ratio,
    patchify,
    sample_mask,
    scatter,
    split,
    unpatchify,
)
from .metrics import MetricReport, paired_t_test, psnr, ssim
from .pipeline import (
    EvalResult,
    SampleTrace,
    TrainConfig,
    Trainer,
    TrainStepResult,
    build_pyramid,
    config_hash,
    copy_source_report,
    evaluate,
    sample_hierarchical,
)
from .pyramid import (
    ConditioningImage,
    Pyramid,
    decompose,
    downsample,
    level_dims,
    merge,
    upsample,
)
from .tensor import AdamState, Tape, Tensor, adam_step, backward

__version__ = "0.1.0"
