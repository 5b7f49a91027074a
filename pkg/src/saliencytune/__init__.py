"""Turn a convolutional image classifier into a self-explainable model.

The toolkit embeds a differentiable class-activation-map branch in the
training loop so a model can be fine-tuned on simultaneous user feedback
about its predicted class and its visual explanation, via a composite
cross-entropy + soft-Jaccard loss.
"""

__version__ = "0.1.0"

from .backend import (
    ActivationBlock,
    ClassifierBackend,
    ModelSnapshot,
    build_reference_cnn,
    wrap_pretrained,
)
from .data import (
    ATTRIBUTE_NAMES,
    DEFAULT_CLASSES,
    FeedbackRecord,
    ImageSample,
    SliceSchedule,
    balance_by_upsampling,
    feedback_pairs,
    generate_synthetic_dataset,
    load_dataset,
    make_slices,
    prepare_pools,
    simulate_feedback,
    split,
    union_masks,
)
from .errors import (
    ConfigError,
    DataLoadError,
    InputError,
    NumericError,
    SaliencyTuneError,
)
from .estimator import SaliencyTunedClassifier
from .experiment import ExperimentConfig, emit_plots, run_experiment
from .explainer import (
    ChannelWeights,
    ExplanationMask,
    SaliencyMap,
    SoftMask,
    align_resolution,
    channel_weights,
    explain_image,
    hard_threshold,
    normalize,
    saliency,
    soft_threshold,
    upsample_saliency,
)
from .losses import (
    LossBreakdown,
    classification_loss,
    combined_loss,
    explanation_loss,
    jaccard_index,
    soft_jaccard,
)
from .metrics import MetricsReport, evaluate, report_from_counts
from .trainer import (
    ModelCheckpoint,
    SliceResult,
    StepLog,
    TrainingConfig,
    TrainingHistory,
    finetune,
    finetune_step,
    sliced_finetune,
)

__all__ = [
    "__version__",
    "ActivationBlock",
    "ClassifierBackend",
    "ModelSnapshot",
    "build_reference_cnn",
    "wrap_pretrained",
    "ATTRIBUTE_NAMES",
    "DEFAULT_CLASSES",
    "FeedbackRecord",
    "ImageSample",
    "SliceSchedule",
    "balance_by_upsampling",
    "feedback_pairs",
    "generate_synthetic_dataset",
    "load_dataset",
    "make_slices",
    "prepare_pools",
    "simulate_feedback",
    "split",
    "union_masks",
    "ConfigError",
    "DataLoadError",
    "InputError",
    "NumericError",
    "SaliencyTuneError",
    "SaliencyTunedClassifier",
    "ExperimentConfig",
    "emit_plots",
    "run_experiment",
    "ChannelWeights",
    "ExplanationMask",
    "SaliencyMap",
    "SoftMask",
    "align_resolution",
    "channel_weights",
    "explain_image",
    "hard_threshold",
    "normalize",
    "saliency",
    "soft_threshold",
    "upsample_saliency",
    "LossBreakdown",
    "classification_loss",
    "combined_loss",
    "explanation_loss",
    "jaccard_index",
    "soft_jaccard",
    "MetricsReport",
    "evaluate",
    "report_from_counts",
    "ModelCheckpoint",
    "SliceResult",
    "StepLog",
    "TrainingConfig",
    "TrainingHistory",
    "finetune",
    "finetune_step",
    "sliced_finetune",
]
