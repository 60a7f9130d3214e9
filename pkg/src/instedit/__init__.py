"""Mask-disentangled multi-instance video editing at desk scale.

Deterministic DDIM inversion/denoising, cross-attention probability
redistribution for edit confinement, branch-then-harmonize multi-instance
sampling, and the instance-level evaluation metrics, all verifiable
end-to-end against closed-form toy noise predictors.
"""

from .dms import (
    InstanceEdit,
    InvertedTrajectory,
    SamplingPlan,
    background_mask,
    latent_fusion,
    pns_step,
    reinvert,
    run_edit,
    run_sns_phase,
    sns_step,
)
from .errors import ConfigError, DataError, InsteditError, NumericsError
from .ipr import (
    CrossAttentionMap,
    FeatureMask,
    IprConfig,
    TokenLayout,
    apply_ipr,
    compute_lambda_s,
    make_ipr_hook,
    redistribute_row_inside,
    redistribute_row_outside,
    warmup_value,
)
from .metrics import (
    FileEmbeddingProvider,
    InstanceCrop,
    SimilarityMatrix,
    ToyEmbeddingProvider,
    cia_score,
    crop_instance,
    evaluate_edit,
    global_scores,
    instance_accuracy,
    local_temporal_consistency,
    local_textual_faithfulness,
    similarity_matrix,
    ssim,
)
from .predictor import (
    Caption,
    ConstantPredictor,
    PredictorRequest,
    TinyAttentionPredictor,
    ToyGaussianPredictor,
    predict,
    with_attention_hook,
)
from .schedule import (
    LatentSequence,
    NoiseSchedule,
    cfg_combine,
    ddim_denoise_step,
    ddim_invert_step,
    denoise_sequence,
    invert_sequence,
)

__version__ = "0.1.0"

__all__ = [
    "Caption",
    "ConfigError",
    "ConstantPredictor",
    "CrossAttentionMap",
    "DataError",
    "FeatureMask",
    "FileEmbeddingProvider",
    "InstanceCrop",
    "InstanceEdit",
    "InsteditError",
    "InvertedTrajectory",
    "IprConfig",
    "LatentSequence",
    "NoiseSchedule",
    "NumericsError",
    "PredictorRequest",
    "SamplingPlan",
    "SimilarityMatrix",
    "TinyAttentionPredictor",
    "TokenLayout",
    "ToyEmbeddingProvider",
    "ToyGaussianPredictor",
    "apply_ipr",
    "background_mask",
    "cfg_combine",
    "cia_score",
    "compute_lambda_s",
    "crop_instance",
    "ddim_denoise_step",
    "ddim_invert_step",
    "denoise_sequence",
    "evaluate_edit",
    "global_scores",
    "instance_accuracy",
    "invert_sequence",
    "latent_fusion",
    "local_temporal_consistency",
    "local_textual_faithfulness",
    "make_ipr_hook",
    "pns_step",
    "predict",
    "redistribute_row_inside",
    "redistribute_row_outside",
    "reinvert",
    "run_edit",
    "run_sns_phase",
    "similarity_matrix",
    "sns_step",
    "ssim",
    "warmup_value",
    "with_attention_hook",
]
