"""VOICE: uncertainty heatmaps for gradient-based visual explanations.

The package computes a per-pixel uncertainty map for any gradient-based
attribution method by inducing one contrastive explanation per plausible
alternative class and taking the pixelwise variance of the stack. It also
ships the quantitative metrics (overlap IoU, dispersion SNR), input
challenge generators, and an experiment harness with a CLI.
"""

__version__ = "0.1.0"

from voice.data import ImageTensor, ImageDataset, load_dataset, make_synthetic_dataset
from voice.engine import (
    BackpropTarget,
    GradientEngine,
    LayerActivations,
    PredictionRecord,
    backward_target,
    forward,
    mask_image,
)
from voice.models import ModelHandle, SmallConvNet, load_weights, save_weights
from voice.training import train_reference_model, evaluate_accuracy
from voice.explainers import (
    ExplanationMap,
    ExplainerSpec,
    METHODS,
    explain_batch,
    gradcam,
    gradcampp,
    guided_backprop,
    smoothgrad,
)
from voice.uncertainty import (
    ContrastSet,
    ContrastStack,
    VoiceMap,
    compute_voice,
    contrastive_map,
    select_contrast_classes,
    voice_map,
)
from voice.metrics import (
    AUCResult,
    ChallengeCurve,
    MetricRecord,
    auc_curve,
    iou,
    nll,
    percent_difference,
    snr,
    threshold_sweep,
)
from voice.perturb import ChallengeSpec, apply_challenge, awgn, contrast, gaussian_blur, ifgsm, jpeg

__all__ = [
    "__version__",
    "ImageTensor",
    "ImageDataset",
    "load_dataset",
    "make_synthetic_dataset",
    "BackpropTarget",
    "GradientEngine",
    "LayerActivations",
    "PredictionRecord",
    "forward",
    "backward_target",
    "mask_image",
    "ModelHandle",
    "SmallConvNet",
    "save_weights",
    "load_weights",
    "train_reference_model",
    "evaluate_accuracy",
    "ExplanationMap",
    "ExplainerSpec",
    "METHODS",
    "explain_batch",
    "gradcam",
    "gradcampp",
    "guided_backprop",
    "smoothgrad",
    "ContrastSet",
    "ContrastStack",
    "VoiceMap",
    "select_contrast_classes",
    "contrastive_map",
    "voice_map",
    "compute_voice",
    "MetricRecord",
    "ChallengeCurve",
    "AUCResult",
    "iou",
    "snr",
    "nll",
    "percent_difference",
    "auc_curve",
    "threshold_sweep",
    "ChallengeSpec",
    "awgn",
    "gaussian_blur",
    "contrast",
    "jpeg",
    "ifgsm",
    "apply_challenge",
]
