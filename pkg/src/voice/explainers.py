"""Gradient-based attribution methods behind a single plug-in interface.

Every method accepts the same two backprop targets, the predicted class's
logit or a cross-entropy loss against a contrast class, so the scalar
being backpropagated is the only thing a target swap changes. Activation
methods weigh a convolution layer's feature maps by their gradients;
pixel methods shape the input-space gradient directly.

All maps are min-max normalized to [0, 1]; a constant raw map normalizes
to all zeros and is flagged degenerate instead of raising.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from voice.data import ImageTensor
from voice.engine import BackpropTarget, GradientEngine
from voice.models import ModelHandle

METHODS = ("gradcam", "gradcampp", "guided_backprop", "smoothgrad")

INPUT_LAYER = "input"

_ALPHA_EPS = 1e-8  # guard for the vanishing alpha denominator


@dataclass
class ExplanationMap:
    """A normalized saliency heatmap plus its provenance."""

    values: np.ndarray  # (H, W) float64 in [0, 1]
    method: str
    target_desc: str
    layer_name: str
    raw_min: float = 0.0
    raw_max: float = 0.0
    degenerate: bool = False  # raw map was constant

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError(f"map values must be 2-D, got {self.values.shape}")
        if not np.isfinite(self.values).all():
            raise ValueError("non-finite values in explanation map")


def normalize_map(raw: np.ndarray) -> tuple[np.ndarray, float, float, bool]:
    """Min-max normalize to [0, 1]; constant input maps to all zeros."""
    raw = np.asarray(raw, dtype=np.float64)
    lo = float(raw.min())
    hi = float(raw.max())
    if hi == lo:
        return np.zeros_like(raw), lo, hi, True
    return (raw - lo) / (hi - lo), lo, hi, False


def upsample_map(values: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize of a 2-D map."""
    if values.shape == (height, width):
        return values
    t = torch.from_numpy(np.asarray(values, dtype=np.float64))[None, None]
    return (
        F.interpolate(t, size=(height, width), mode="bilinear", align_corners=False)
        .squeeze()
        .numpy()
    )


# ---------------------------------------------------------------------------
# core map arithmetic (pure functions, one sample at a time)
# ---------------------------------------------------------------------------

def gradcam_raw(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Rectified gradient-weighted sum of feature maps.

    Channel weights are the spatial means of the gradients; the weighted
    activation sum is rectified so only positively contributing regions
    survive.
    """
    weights = grads.mean(axis=(1, 2))
    return np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)


def gradcampp_raw(acts: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """Rectified sum with alpha-weighted positive partial derivatives.

    alpha = g^2 / (2 g^2 + sum_spatial(A) * g^3 + eps) per channel and
    position; channel weights are the alpha-weighted sums of rectified
    gradients. Under uniform positive gradients this reduces to a positive
    multiple of the plain gradient-weighted map.
    """
    g2 = grads * grads
    g3 = g2 * grads
    denom = 2.0 * g2 + acts.sum(axis=(1, 2))[:, None, None] * g3
    alpha = g2 / (denom + _ALPHA_EPS)
    weights = (alpha * np.maximum(grads, 0.0)).sum(axis=(1, 2))
    return np.maximum((weights[:, None, None] * acts).sum(axis=0), 0.0)


def input_gradient_map(grad_hwc: np.ndarray, signed: bool = False) -> np.ndarray:
    """Collapse an input-space gradient to one plane.

    Takes the channelwise max, of the signed gradient for guided
    backprop, of the absolute gradient otherwise.
    """
    g = grad_hwc if signed else np.abs(grad_hwc)
    return g.max(axis=2)


# ---------------------------------------------------------------------------
# batched execution
# ---------------------------------------------------------------------------

@dataclass
class ExplainerSpec:
    """Method selection plus per-method parameters."""

    method: str
    layer: str | None = None  # convolution name; ignored by pixel methods
    smoothgrad_samples: int = 25
    smoothgrad_sigma: float | None = None  # None: 0.1 x image dynamic range
    seed: int = 0

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown explainer {self.method!r}; known: {METHODS}")
        if self.smoothgrad_samples < 1:
            raise ValueError("smoothgrad_samples must be >= 1")
        if self.smoothgrad_sigma is not None and self.smoothgrad_sigma < 0:
            raise ValueError("smoothgrad_sigma must be >= 0")

    @property
    def map_layer_name(self) -> str:
        if self.method in ("gradcam", "gradcampp"):
            if not self.layer:
                raise ValueError(f"{self.method} requires a convolution layer name")
            return self.layer
        return INPUT_LAYER


def _finish(raw: np.ndarray, height: int, width: int, method: str,
            target: BackpropTarget, layer_name: str) -> ExplanationMap:
    up = upsample_map(raw, height, width)
    values, lo, hi, degenerate = normalize_map(up)
    return ExplanationMap(
        values=values,
        method=method,
        target_desc=target.describe(),
        layer_name=layer_name,
        raw_min=lo,
        raw_max=hi,
        degenerate=degenerate,
    )


def _item_seed(base_seed: int, index: int, target: BackpropTarget) -> int:
    payload = f"{base_seed}:{index}:{target.describe()}".encode()
    return int.from_bytes(hashlib.sha256(payload).digest()[:8], "big")


def _smoothgrad_grad(
    handle: ModelHandle,
    x: ImageTensor,
    target: BackpropTarget,
    n_samples: int,
    sigma: float,
    seed: int,
    engine: GradientEngine,
) -> np.ndarray:
    """Mean input gradient over noisy resamples of one image."""
    if sigma == 0.0:
        # Zero noise degenerates to the single clean gradient; computing it
        # directly keeps the result bitwise equal to the vanilla map.
        return engine.input_grads_batch(handle, [x], [target])[0]
    rng = np.random.default_rng(seed)
    dtype = next(handle.module.parameters()).dtype
    base = torch.from_numpy(
        np.ascontiguousarray(x.pixels.transpose(2, 0, 1))
    ).to(dtype)
    if base.shape[1] != handle.input_size or base.shape[2] != handle.input_size:
        base = F.interpolate(
            base.unsqueeze(0),
            size=(handle.input_size, handle.input_size),
            mode="bilinear",
            align_corners=False,
        ).squeeze(0)
    total = np.zeros((handle.input_size, handle.input_size, x.channels), dtype=np.float64)
    chunk = 32
    done = 0
    while done < n_samples:
        k = min(chunk, n_samples - done)
        noise = rng.normal(0.0, sigma, size=(k,) + tuple(base.shape))
        noisy = base.unsqueeze(0) + torch.from_numpy(noise).to(dtype)
        grads = engine.input_grads_batch(
            handle, [x] * k, [target] * k, pixel_override=noisy
        )
        total += grads.sum(axis=0)
        done += k
    return total / n_samples


def explain_batch(
    handle: ModelHandle,
    images: list[ImageTensor],
    targets: list[BackpropTarget],
    spec: ExplainerSpec,
    engine: GradientEngine | None = None,
    batch_size: int = 64,
) -> list[ExplanationMap]:
    """Run one explainer over parallel lists of images and targets."""
    if len(images) != len(targets):
        raise ValueError("one target per image required")
    engine = engine or GradientEngine()
    out: list[ExplanationMap] = []

    if spec.method in ("gradcam", "gradcampp"):
        core = gradcam_raw if spec.method == "gradcam" else gradcampp_raw
        layer = spec.map_layer_name
        for start in range(0, len(images), batch_size):
            ims = images[start : start + batch_size]
            tgs = targets[start : start + batch_size]
            acts, grads = engine.layer_grads_batch(handle, ims, tgs, layer)
            if acts.shape[2] < 2 or acts.shape[3] < 2:
                raise ValueError(
                    f"layer {layer!r} has spatial extent {acts.shape[2]}x{acts.shape[3]}; "
                    "activation-map explainers need at least 2x2"
                )
            for i, (im, tg) in enumerate(zip(ims, tgs)):
                raw = core(acts[i], grads[i])
                out.append(_finish(raw, im.height, im.width, spec.method, tg, layer))
        return out

    if spec.method == "guided_backprop":
        for start in range(0, len(images), batch_size):
            ims = images[start : start + batch_size]
            tgs = targets[start : start + batch_size]
            grads = engine.input_grads_batch(handle, ims, tgs, guided=True)
            for i, (im, tg) in enumerate(zip(ims, tgs)):
                raw = input_gradient_map(grads[i], signed=True)
                raw = upsample_map(raw, im.height, im.width)
                out.append(_finish(raw, im.height, im.width, spec.method, tg, INPUT_LAYER))
        return out

    # smoothgrad: per-item noise loops, seeded independently of batch order
    for i, (im, tg) in enumerate(zip(images, targets)):
        sigma = spec.smoothgrad_sigma
        if sigma is None:
            sigma = 0.1 * float(im.pixels.max() - im.pixels.min())
        grad = _smoothgrad_grad(
            handle, im, tg, spec.smoothgrad_samples, sigma,
            _item_seed(spec.seed, i, tg), engine,
        )
        raw = input_gradient_map(grad, signed=False)
        raw = upsample_map(raw, im.height, im.width)
        out.append(_finish(raw, im.height, im.width, spec.method, tg, INPUT_LAYER))
    return out


# ---------------------------------------------------------------------------
# single-image entry points
# ---------------------------------------------------------------------------

def gradcam(handle: ModelHandle, x: ImageTensor, target: BackpropTarget,
            layer: str, engine: GradientEngine | None = None) -> ExplanationMap:
    """Gradient-weighted class activation map at a convolution layer."""
    spec = ExplainerSpec(method="gradcam", layer=layer)
    return explain_batch(handle, [x], [target], spec, engine)[0]


def gradcampp(handle: ModelHandle, x: ImageTensor, target: BackpropTarget,
              layer: str, engine: GradientEngine | None = None) -> ExplanationMap:
    """Alpha-weighted class activation map at a convolution layer."""
    spec = ExplainerSpec(method="gradcampp", layer=layer)
    return explain_batch(handle, [x], [target], spec, engine)[0]


def guided_backprop(handle: ModelHandle, x: ImageTensor, target: BackpropTarget,
                    engine: GradientEngine | None = None) -> ExplanationMap:
    """Input-space gradient with the guided ReLU backward rule."""
    spec = ExplainerSpec(method="guided_backprop")
    return explain_batch(handle, [x], [target], spec, engine)[0]


def smoothgrad(handle: ModelHandle, x: ImageTensor, target: BackpropTarget,
               n_samples: int = 25, noise_sigma: float | None = None,
               seed: int = 0, engine: GradientEngine | None = None) -> ExplanationMap:
    """Mean input gradient over Gaussian-noised copies of the image."""
    spec = ExplainerSpec(
        method="smoothgrad",
        smoothgrad_samples=n_samples,
        smoothgrad_sigma=noise_sigma,
        seed=seed,
    )
    return explain_batch(handle, [x], [target], spec, engine)[0]
