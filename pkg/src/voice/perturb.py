"""Leveled input challenges: noise, blur, contrast, JPEG, and an
iterative adversarial probe.

Level 0 is always the identity. Parameters grow strictly with level so
distortion is monotone, and every transform preserves shape and the
[0, 1] range. Noise power is expressed in squared 8-bit pixel units, the
convention under which the anchor powers 450/7000/11000 are meaningful on
0-255 images.
"""

from __future__ import annotations

import io
from dataclasses import dataclass, field

import numpy as np
import torch
from PIL import Image
from scipy.ndimage import gaussian_filter

from voice.data import ImageTensor
from voice.engine import GradientEngine
from voice.models import ModelHandle

CHALLENGE_KINDS = ("awgn", "gaussian_blur", "contrast", "jpeg", "ifgsm")

BLUR_SIGMAS = (0.0, 0.5, 1.0, 1.5, 2.0, 2.5)
CONTRAST_FACTORS = (1.0, 0.75, 0.6, 0.45, 0.3, 0.15)
JPEG_QUALITIES = (100, 80, 60, 40, 25, 15)

AWGN_MAX_LEVEL = 15


@dataclass
class ChallengeSpec:
    """One challenge kind at one severity level."""

    kind: str
    level: int
    seed: int = 0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in CHALLENGE_KINDS:
            raise ValueError(f"unknown challenge {self.kind!r}; known: {CHALLENGE_KINDS}")
        if self.level < 0:
            raise ValueError("level must be >= 0")
        max_level = AWGN_MAX_LEVEL if self.kind == "awgn" else 5
        if self.kind != "ifgsm" and self.level > max_level:
            raise ValueError(f"{self.kind} level must be <= {max_level}")


def awgn_power(level: int) -> float:
    """Noise power (squared 8-bit units) at a severity level.

    Two linear ramps anchored at 0 / 450 / 7000 / 11000: levels 1-7 run
    50..450, levels 8-15 run 7000..11000.
    """
    if not (0 <= level <= AWGN_MAX_LEVEL):
        raise ValueError(f"awgn level must lie in [0, {AWGN_MAX_LEVEL}], got {level}")
    if level == 0:
        return 0.0
    if level <= 7:
        return 50.0 + (450.0 - 50.0) * (level - 1) / 6.0
    return 7000.0 + (11000.0 - 7000.0) * (level - 8) / 7.0


def awgn(x: ImageTensor, level: int, seed: int = 0) -> ImageTensor:
    """Zero-mean white Gaussian noise at the level's power, then clip."""
    power = awgn_power(level)
    if power == 0.0:
        return x.with_pixels(x.pixels.copy())
    rng = np.random.default_rng(seed)
    sigma = np.sqrt(power) / 255.0
    noisy = x.pixels.astype(np.float64) + rng.normal(0.0, sigma, size=x.pixels.shape)
    return x.with_pixels(np.clip(noisy, 0.0, 1.0).astype(np.float32))


def gaussian_blur(x: ImageTensor, level: int) -> ImageTensor:
    """Per-channel Gaussian blur with the level's sigma."""
    sigma = BLUR_SIGMAS[_check_level(level)]
    if sigma == 0.0:
        return x.with_pixels(x.pixels.copy())
    blurred = gaussian_filter(
        x.pixels.astype(np.float64), sigma=(sigma, sigma, 0.0), mode="reflect"
    )
    return x.with_pixels(np.clip(blurred, 0.0, 1.0).astype(np.float32))


def contrast(x: ImageTensor, level: int) -> ImageTensor:
    """Blend toward the per-channel mean with the level's factor."""
    factor = CONTRAST_FACTORS[_check_level(level)]
    if factor == 1.0:
        return x.with_pixels(x.pixels.copy())
    px = x.pixels.astype(np.float64)
    mean = px.mean(axis=(0, 1), keepdims=True)
    out = mean + factor * (px - mean)
    return x.with_pixels(np.clip(out, 0.0, 1.0).astype(np.float32))


def jpeg_roundtrip(x: ImageTensor, quality: int) -> ImageTensor:
    """Encode to JPEG at the given quality and decode back."""
    arr = np.round(x.pixels * 255.0).astype(np.uint8)
    if arr.shape[2] == 1:
        im = Image.fromarray(arr[:, :, 0], mode="L")
    else:
        im = Image.fromarray(arr, mode="RGB")
    buf = io.BytesIO()
    im.save(buf, format="JPEG", quality=int(quality), subsampling=0)
    buf.seek(0)
    with Image.open(buf) as decoded:
        out = np.asarray(decoded, dtype=np.float32) / 255.0
    if out.ndim == 2:
        out = out[:, :, None]
    return x.with_pixels(out)


def jpeg(x: ImageTensor, level: int) -> ImageTensor:
    """JPEG encode/decode at the level's quality; level 0 is the identity."""
    q = JPEG_QUALITIES[_check_level(level)]
    if level == 0:
        return x.with_pixels(x.pixels.copy())
    return jpeg_roundtrip(x, q)


def _check_level(level: int) -> int:
    if not (0 <= level <= 5):
        raise ValueError(f"level must lie in [0, 5], got {level}")
    return level


def ifgsm(
    handle: ModelHandle,
    x: ImageTensor,
    eps: float,
    steps: int = 10,
    step_size: float | None = None,
    label: int | None = None,
    engine: GradientEngine | None = None,
) -> ImageTensor:
    """Iterative sign-gradient ascent on the cross-entropy of the label.

    Stays inside the L-infinity ball of radius eps around the input and
    inside [0, 1]. Uses the ground-truth label when given, otherwise the
    model's own prediction.
    """
    return _ifgsm_single(handle, x, eps, steps, step_size, label, engine)


def _ifgsm_single(handle, x, eps, steps, step_size, label, engine) -> ImageTensor:
    adv = ifgsm_batch(
        handle,
        x.pixels[None],
        None if label is None else np.asarray([label]),
        eps=eps,
        steps=steps,
        step_size=step_size,
        norm_mean=x.norm_mean,
        norm_std=x.norm_std,
        engine=engine,
    )[0]
    adv32 = _cast_into_ball(adv, x.pixels.astype(np.float64), eps)
    return x.with_pixels(adv32, source_id=f"{x.source_id}|ifgsm:{eps:.5f}")


def _cast_into_ball(adv: np.ndarray, center: np.ndarray, eps: float) -> np.ndarray:
    """float32 cast that cannot round past the L-infinity ball.

    Rounding to float32 can overshoot a float64 clip by half an ulp; one
    nextafter step back lands on the nearest representable value inside.
    """
    out = adv.astype(np.float32)
    hi = center + eps
    lo = center - eps
    over = out.astype(np.float64) > hi
    under = out.astype(np.float64) < lo
    out[over] = np.nextafter(out[over], np.float32(-np.inf))
    out[under] = np.nextafter(out[under], np.float32(np.inf))
    return np.clip(out, 0.0, 1.0)


def ifgsm_batch(
    handle: ModelHandle,
    pixels: np.ndarray,
    labels: np.ndarray | None,
    eps: float,
    steps: int = 10,
    step_size: float | None = None,
    norm_mean=(0.5, 0.5, 0.5),
    norm_std=(0.25, 0.25, 0.25),
    engine: GradientEngine | None = None,
) -> np.ndarray:
    """Vectorized attack over a (B, H, W, C) pixel batch."""
    if eps < 0:
        raise ValueError("eps must be >= 0")
    if steps < 1:
        raise ValueError("steps must be >= 1")
    pixels = np.asarray(pixels, dtype=np.float64)
    if eps == 0.0:
        return pixels.copy()
    engine = engine or GradientEngine()
    alpha = eps / steps if step_size is None else step_size
    images = [
        ImageTensor(pixels=pixels[i].astype(np.float32), norm_mean=norm_mean,
                    norm_std=norm_std, source_id=f"adv-{i}")
        for i in range(pixels.shape[0])
    ]
    if labels is None:
        labels = np.asarray(
            [r.predicted for r in engine.forward_batch(handle, images)], dtype=np.int64
        )
    else:
        labels = np.asarray(labels, dtype=np.int64)
    label_t = torch.from_numpy(labels)

    def attack_scalar(logits):
        return torch.nn.functional.cross_entropy(logits, label_t, reduction="sum")

    lo = np.clip(pixels - eps, 0.0, 1.0)
    hi = np.clip(pixels + eps, 0.0, 1.0)
    adv = pixels.copy()
    dtype = next(handle.module.parameters()).dtype
    for _ in range(steps):
        override = torch.from_numpy(
            np.ascontiguousarray(adv.transpose(0, 3, 1, 2))
        ).to(dtype)
        grads = engine.input_grads_batch(
            handle, images, scalar_fn=attack_scalar, pixel_override=override
        )
        if not np.isfinite(grads).all():
            raise ValueError("non-finite gradient during adversarial iteration")
        adv = np.clip(adv + alpha * np.sign(grads), lo, hi)
    return adv


def apply_challenge(
    x: ImageTensor,
    spec: ChallengeSpec,
    handle: ModelHandle | None = None,
    label: int | None = None,
    engine: GradientEngine | None = None,
) -> ImageTensor:
    """Dispatch one ChallengeSpec; the adversarial kind needs a model."""
    out_id = f"{x.source_id}|{spec.kind}:{spec.level}|seed{spec.seed}"
    if spec.kind == "awgn":
        out = awgn(x, spec.level, seed=spec.seed)
    elif spec.kind == "gaussian_blur":
        out = gaussian_blur(x, spec.level)
    elif spec.kind == "contrast":
        out = contrast(x, spec.level)
    elif spec.kind == "jpeg":
        out = jpeg(x, spec.level)
    else:
        if handle is None:
            raise ValueError("ifgsm challenge requires a model handle")
        eps = spec.params.get("eps", spec.level / 255.0)
        steps = spec.params.get("steps", 10)
        out = _ifgsm_single(handle, x, eps, steps, None, label, engine)
    return out.with_pixels(out.pixels, source_id=out_id)
