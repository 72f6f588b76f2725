"""Forward passes, backprop-target gradients, and explanation masking.

One engine serves every attribution method: callers name a scalar to
backpropagate, either the predicted class's logit or the cross-entropy
loss against a contrast class, and the engine returns gradients taken at
a named convolution layer or at the input pixels. Batches mix targets
freely; samples are independent in eval mode, so one backward pass over
the summed per-sample scalars yields each sample's own gradient.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from voice.data import ImageTensor
from voice.models import ModelHandle


@dataclass(frozen=True)
class BackpropTarget:
    """What to backpropagate: the logit of P, or the loss against Q.

    The loss kind is cross-entropy of the logits with Q as the label; it
    is minimal when the network already puts all its mass on Q.
    """

    kind: str  # "logit" | "loss"
    P: int
    Q: int | None = None

    def __post_init__(self):
        if self.kind not in ("logit", "loss"):
            raise ValueError(f"target kind must be 'logit' or 'loss', got {self.kind!r}")
        if self.kind == "loss":
            if self.Q is None:
                raise ValueError("loss target requires a contrast class Q")
            if self.Q == self.P:
                raise ValueError(f"contrast class Q must differ from P (both {self.P})")
        elif self.Q is not None:
            raise ValueError("logit target takes no contrast class")

    @classmethod
    def logit(cls, P: int) -> "BackpropTarget":
        return cls(kind="logit", P=int(P))

    @classmethod
    def loss(cls, P: int, Q: int) -> "BackpropTarget":
        return cls(kind="loss", P=int(P), Q=int(Q))

    def describe(self) -> str:
        return f"logit({self.P})" if self.kind == "logit" else f"loss({self.P},{self.Q})"


@dataclass
class PredictionRecord:
    """Logits and softmax probabilities for one image."""

    logits: np.ndarray
    probs: np.ndarray
    predicted: int
    label: int | None = None
    correct: bool | None = None

    @classmethod
    def from_logits(cls, logits: np.ndarray, label: int | None = None) -> "PredictionRecord":
        logits = np.asarray(logits, dtype=np.float64)
        shifted = logits - logits.max()
        e = np.exp(shifted)
        probs = e / e.sum()
        predicted = int(np.argmax(probs))
        return cls(
            logits=logits,
            probs=probs,
            predicted=predicted,
            label=None if label is None else int(label),
            correct=None if label is None else bool(predicted == int(label)),
        )


@dataclass
class LayerActivations:
    """Activations and same-shaped gradients captured at a named layer."""

    activations: np.ndarray  # (C, h, w)
    gradients: np.ndarray
    layer_name: str

    def __post_init__(self):
        if self.activations.shape != self.gradients.shape:
            raise ValueError("activations and gradients must be shape-identical")


def _guided_relu_hook(module, grad_input, grad_output):
    # Default ReLU backward already zeroes positions with negative forward
    # input; clamping the result additionally zeroes negative incoming
    # gradients, which is exactly the guided rule.
    return (grad_input[0].clamp(min=0),)


@contextlib.contextmanager
def guided_relu_scope(module: torch.nn.Module):
    """Temporarily rewrite every nn.ReLU backward to the guided rule."""
    handles = [
        m.register_full_backward_hook(_guided_relu_hook)
        for m in module.modules()
        if isinstance(m, torch.nn.ReLU)
    ]
    try:
        yield
    finally:
        for h in handles:
            h.remove()


class GradientEngine:
    """Stateful executor for forward/backward passes on one model at a time.

    Counts backward passes so callers can assert cache hits never touch
    autograd. Not safe for concurrent use on a single ModelHandle; give
    each worker its own replica.
    """

    def __init__(self):
        self.backward_count = 0

    # -- tensor plumbing ----------------------------------------------------

    def _to_input_tensor(self, handle: ModelHandle, images: list[ImageTensor]) -> torch.Tensor:
        """Stack images into a normalized (B, C, H, W) tensor in model dtype."""
        dtype = next(handle.module.parameters()).dtype
        mats, means, stds = [], [], []
        for img in images:
            px = img.pixels
            if not np.isfinite(px).all():
                raise ValueError(f"non-finite pixels in {img.source_id!r}")
            t = torch.from_numpy(np.ascontiguousarray(px.transpose(2, 0, 1))).to(dtype)
            if t.shape[1] != handle.input_size or t.shape[2] != handle.input_size:
                t = F.interpolate(
                    t.unsqueeze(0),
                    size=(handle.input_size, handle.input_size),
                    mode="bilinear",
                    align_corners=False,
                ).squeeze(0)
            mats.append(t)
            means.append(torch.tensor(img.norm_mean, dtype=dtype).view(-1, 1, 1))
            stds.append(torch.tensor(img.norm_std, dtype=dtype).view(-1, 1, 1))
        batch = torch.stack(mats)
        convs = [m for m in handle.module.modules() if isinstance(m, torch.nn.Conv2d)]
        if convs and batch.shape[1] != convs[0].in_channels:
            raise ValueError(
                f"channel mismatch: model expects {convs[0].in_channels}, "
                f"image has {batch.shape[1]}"
            )
        return batch, torch.stack(means), torch.stack(stds)

    def _target_scalar(self, handle: ModelHandle, logits: torch.Tensor,
                       targets: list[BackpropTarget]) -> torch.Tensor:
        n_classes = handle.num_classes
        for t in targets:
            if not (0 <= t.P < n_classes):
                raise ValueError(f"class P={t.P} out of range for {n_classes} classes")
            if t.kind == "loss" and not (0 <= t.Q < n_classes):
                raise ValueError(f"contrast class Q={t.Q} out of range for {n_classes} classes")
        scalar = logits.new_zeros(())
        logit_rows = [i for i, t in enumerate(targets) if t.kind == "logit"]
        if logit_rows:
            ps = torch.tensor([targets[i].P for i in logit_rows])
            scalar = scalar + logits[logit_rows, ps].sum()
        loss_rows = [i for i, t in enumerate(targets) if t.kind == "loss"]
        if loss_rows:
            qs = torch.tensor([targets[i].Q for i in loss_rows])
            scalar = scalar + F.cross_entropy(logits[loss_rows], qs, reduction="sum")
        return scalar

    def _resolve_layer(self, handle: ModelHandle, layer: str) -> torch.nn.Module:
        modules = dict(handle.module.named_modules())
        if layer not in modules:
            raise ValueError(
                f"unknown layer {layer!r}; explainable layers: {handle.explainable_layers}"
            )
        return modules[layer]

    # -- public passes ------------------------------------------------------

    def forward(self, handle: ModelHandle, x: ImageTensor,
                label: int | None = None) -> PredictionRecord:
        return self.forward_batch(handle, [x], [label])[0]

    def forward_batch(self, handle: ModelHandle, images: list[ImageTensor],
                      labels=None) -> list[PredictionRecord]:
        handle.module.eval()
        batch, mean, std = self._to_input_tensor(handle, images)
        with torch.inference_mode():
            logits = handle.module((batch - mean) / std)
        if labels is None:
            labels = [None] * len(images)
        return [
            PredictionRecord.from_logits(logits[i].numpy(), label=labels[i])
            for i in range(len(images))
        ]

    def layer_grads_batch(
        self,
        handle: ModelHandle,
        images: list[ImageTensor],
        targets: list[BackpropTarget],
        layer: str,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Per-sample activations and target gradients at a named layer.

        Returns float64 arrays of shape (B, C, h, w).
        """
        if len(images) != len(targets):
            raise ValueError("one target per image required")
        handle.module.eval()
        module = self._resolve_layer(handle, layer)
        batch, mean, std = self._to_input_tensor(handle, images)
        captured: list[torch.Tensor] = []
        hook = module.register_forward_hook(lambda m, inp, out: captured.append(out))
        try:
            with torch.enable_grad():
                logits = handle.module((batch - mean) / std)
                scalar = self._target_scalar(handle, logits, targets)
                acts = captured[0]
                (grads,) = torch.autograd.grad(scalar, acts)
                self.backward_count += 1
        finally:
            hook.remove()
        return (
            acts.detach().numpy().astype(np.float64),
            grads.detach().numpy().astype(np.float64),
        )

    def input_grads_batch(
        self,
        handle: ModelHandle,
        images: list[ImageTensor],
        targets: list[BackpropTarget] | None = None,
        guided: bool = False,
        scalar_fn=None,
        pixel_override: torch.Tensor | None = None,
    ) -> np.ndarray:
        """Per-sample gradients w.r.t. the raw [0,1] input pixels.

        Gradients are taken before normalization, i.e. in the same units
        as the pixels. Returns float64 (B, H, W, C). ``scalar_fn`` may
        replace the target list with an arbitrary scalar of the logits
        (used by the adversarial probe); ``pixel_override`` substitutes
        the pixel tensor (used for noisy resampling) and must already be
        shaped (B, C, H, W).
        """
        handle.module.eval()
        batch, mean, std = self._to_input_tensor(handle, images)
        if pixel_override is not None:
            batch = pixel_override.to(batch.dtype)
        batch = batch.clone().requires_grad_(True)
        scope = guided_relu_scope(handle.module) if guided else contextlib.nullcontext()
        with scope, torch.enable_grad():
            logits = handle.module((batch - mean) / std)
            if scalar_fn is not None:
                scalar = scalar_fn(logits)
            else:
                if targets is None or len(targets) != len(images):
                    raise ValueError("one target per image required")
                scalar = self._target_scalar(handle, logits, targets)
            (grads,) = torch.autograd.grad(scalar, batch)
            self.backward_count += 1
        return grads.detach().numpy().transpose(0, 2, 3, 1).astype(np.float64)


_DEFAULT_ENGINE = GradientEngine()


def forward(handle: ModelHandle, x: ImageTensor, label: int | None = None,
            engine: GradientEngine | None = None) -> PredictionRecord:
    """Run the model on one image and return its prediction record."""
    return (engine or _DEFAULT_ENGINE).forward(handle, x, label=label)


def backward_target(
    handle: ModelHandle,
    x: ImageTensor,
    target: BackpropTarget,
    layer: str | None = None,
    at_input: bool = False,
    engine: GradientEngine | None = None,
) -> dict:
    """Gradients of a backprop target at a named layer and/or the input.

    Returns a dict with a ``"layer"`` LayerActivations entry when a layer
    is named and an ``"input"`` (H, W, C) array when ``at_input`` is set.
    Never mutates the model weights.
    """
    if layer is None and not at_input:
        raise ValueError("request a layer, the input, or both")
    eng = engine or _DEFAULT_ENGINE
    out: dict = {}
    if layer is not None:
        acts, grads = eng.layer_grads_batch(handle, [x], [target], layer)
        out["layer"] = LayerActivations(acts[0], grads[0], layer_name=layer)
    if at_input:
        out["input"] = eng.input_grads_batch(handle, [x], [target])[0]
    return out


def mask_image(x: ImageTensor, m) -> ImageTensor:
    """Hadamard product of an explanation map with every image channel.

    The map is bilinearly upsampled to the image's spatial size first.
    Accepts an ExplanationMap-like object (anything with ``values``) or a
    bare (h, w) array.
    """
    values = np.asarray(getattr(m, "values", m), dtype=np.float64)
    if values.ndim != 2:
        raise ValueError(f"mask must be 2-D, got shape {values.shape}")
    h, w = x.pixels.shape[:2]
    if values.shape != (h, w):
        t = torch.from_numpy(values)[None, None]
        values = (
            F.interpolate(t, size=(h, w), mode="bilinear", align_corners=False)
            .squeeze()
            .numpy()
        )
    masked = np.clip(x.pixels.astype(np.float64) * values[:, :, None], 0.0, 1.0)
    return x.with_pixels(masked.astype(np.float32), source_id=f"{x.source_id}|masked")
