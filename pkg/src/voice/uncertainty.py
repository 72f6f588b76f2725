"""Contrast-class selection and the variance-of-contrasts uncertainty map.

The uncertainty of an explanation is read off the spread of the
explanations the model would give for its plausible alternatives: every
class whose softmax probability clears a threshold contributes one
contrastive map ("why the prediction, rather than this class?"), the maps
are stacked, and the per-pixel population variance of the stack, min-max
normalized, is the uncertainty heatmap.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from voice.data import ImageTensor
from voice.engine import BackpropTarget, GradientEngine, PredictionRecord
from voice.explainers import ExplainerSpec, ExplanationMap, explain_batch, normalize_map
from voice.models import ModelHandle


@dataclass
class ContrastSet:
    """Classes that compete with the prediction above a probability floor."""

    classes: list[int]
    p_t: float

    @property
    def R(self) -> int:
        return len(self.classes)


@dataclass
class ContrastStack:
    """Contrastive maps stacked along the first axis, one per contrast class."""

    maps: np.ndarray  # (R, H, W) float64
    contrast_classes: list[int]

    def __post_init__(self):
        self.maps = np.asarray(self.maps, dtype=np.float64)
        if self.maps.ndim != 3:
            raise ValueError(f"stack must be (R, H, W), got {self.maps.shape}")
        if self.maps.shape[0] != len(self.contrast_classes):
            raise ValueError("one contrast class per stacked map required")

    @property
    def R(self) -> int:
        return self.maps.shape[0]


@dataclass
class VoiceMap:
    """Normalized per-pixel variance of the contrastive stack."""

    values: np.ndarray  # (H, W) float64 in [0, 1]
    R_used: int
    method: str = ""
    p_t: float = 0.0
    parent: str = ""  # identity of the base explanation this quantifies
    raw_min: float = 0.0
    raw_max: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"map values must be 2-D, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite values in uncertainty map")


def select_contrast_classes(record: PredictionRecord, p_t: float) -> ContrastSet:
    """Classes with probability strictly above p_t, excluding the prediction.

    Ordered by descending probability, ties broken by ascending index; the
    result may be empty.
    """
    if not (0.0 < p_t < 1.0):
        raise ValueError(f"p_t must lie in (0, 1), got {p_t}")
    probs = np.asarray(record.probs, dtype=np.float64)
    candidates = [
        q for q in range(len(probs)) if q != record.predicted and probs[q] > p_t
    ]
    candidates.sort(key=lambda q: (-probs[q], q))
    return ContrastSet(classes=candidates, p_t=float(p_t))


def contrastive_map(
    handle: ModelHandle,
    x: ImageTensor,
    P: int,
    Q: int,
    spec: ExplainerSpec,
    engine: GradientEngine | None = None,
) -> ExplanationMap:
    """One induced contrastive explanation: the explainer run on loss(P, Q)."""
    target = BackpropTarget.loss(P, Q)
    return explain_batch(handle, [x], [target], spec, engine)[0]


def voice_map(stack: ContrastStack, method: str = "", p_t: float = 0.0,
              parent: str = "") -> VoiceMap:
    """Reduce a contrastive stack to its normalized per-pixel variance.

    Population variance (divide by R); stacks with fewer than two maps
    carry no spread and yield an all-zero map with R_used recorded.
    """
    meta = dict(method=method, p_t=p_t, parent=parent)
    if stack.R <= 1:
        return VoiceMap(values=np.zeros(stack.maps.shape[1:]), R_used=stack.R, **meta)
    variance = stack.maps.var(axis=0)  # ddof=0
    # identical values leave ~1e-32 rounding residue that min-max
    # normalization would blow up to order one; snap it to exact zero
    variance[variance < 1e-24] = 0.0
    values, lo, hi, _ = normalize_map(variance)
    return VoiceMap(values=values, R_used=stack.R, raw_min=lo, raw_max=hi, **meta)


def compute_voice(
    handle: ModelHandle,
    x: ImageTensor,
    spec: ExplainerSpec,
    p_t: float,
    label: int | None = None,
    engine: GradientEngine | None = None,
) -> tuple[PredictionRecord, ExplanationMap, VoiceMap]:
    """Predict, explain, and quantify the explanation's uncertainty.

    Runs the forward pass, the base explanation for the predicted class's
    logit, one contrastive explanation per contrast class above p_t, and
    the variance reduction. The base and contrastive maps share one
    batched gradient pass per chunk.
    """
    engine = engine or GradientEngine()
    record = engine.forward(handle, x, label=label)
    P = record.predicted
    contrast = select_contrast_classes(record, p_t)
    targets = [BackpropTarget.logit(P)]
    targets += [BackpropTarget.loss(P, q) for q in contrast.classes]
    maps = explain_batch(handle, [x] * len(targets), targets, spec, engine)
    base = maps[0]
    if contrast.R:
        stack = ContrastStack(
            maps=np.stack([m.values for m in maps[1:]]),
            contrast_classes=contrast.classes,
        )
    else:
        stack = ContrastStack(
            maps=np.zeros((0, x.height, x.width)), contrast_classes=[]
        )
    vm = voice_map(
        stack,
        method=spec.method,
        p_t=p_t,
        parent=f"{x.source_id}|{spec.method}|{base.target_desc}",
    )
    return record, base, vm
