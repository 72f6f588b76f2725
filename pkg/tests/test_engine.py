"""Forward/backward engine: analytic and finite-difference gradient oracles."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from tests.conftest import make_image, make_toy_handle
from voice.data import ImageTensor
from voice.engine import (
    BackpropTarget,
    GradientEngine,
    backward_target,
    forward,
    mask_image,
)
from voice.models import ModelHandle


class TestBackpropTarget:
    def test_loss_requires_distinct_q(self):
        with pytest.raises(ValueError, match="differ"):
            BackpropTarget.loss(2, 2)

    def test_loss_requires_q(self):
        with pytest.raises(ValueError, match="contrast class"):
            BackpropTarget(kind="loss", P=1)

    def test_logit_takes_no_q(self):
        with pytest.raises(ValueError, match="no contrast"):
            BackpropTarget(kind="logit", P=1, Q=2)

    def test_describe(self):
        assert BackpropTarget.logit(3).describe() == "logit(3)"
        assert BackpropTarget.loss(3, 5).describe() == "loss(3,5)"


class TestForward:
    def test_probs_sum_to_one(self, toy_handle):
        eng = GradientEngine()
        for seed in range(5):
            rec = eng.forward(toy_handle, make_image(seed=seed))
            assert abs(rec.probs.sum() - 1.0) < 1e-6
            assert (rec.probs >= 0).all()
            assert rec.predicted == int(np.argmax(rec.probs))

    def test_zeroed_final_layer_gives_uniform_probs(self):
        handle = make_toy_handle(seed=0, num_classes=2)
        with torch.no_grad():
            handle.module.fc.weight.zero_()
            handle.module.fc.bias.zero_()
        rec = forward(handle, make_image(seed=0))
        assert np.allclose(rec.probs, [0.5, 0.5])

    def test_bitwise_deterministic(self, toy_handle, toy_image):
        eng = GradientEngine()
        a = eng.forward(toy_handle, toy_image)
        b = eng.forward(toy_handle, toy_image)
        assert np.array_equal(a.probs, b.probs)
        assert np.array_equal(a.logits, b.logits)

    def test_label_sets_correct_flag(self, toy_handle, toy_image):
        rec = forward(toy_handle, toy_image, label=0)
        assert rec.correct == (rec.predicted == 0)

    def test_spatial_resize_before_inference(self, toy_handle):
        big = make_image(seed=2, size=16)
        rec = forward(toy_handle, big)
        assert len(rec.probs) == toy_handle.num_classes

    def test_channel_mismatch_rejected(self, toy_handle):
        rng = np.random.default_rng(2)
        gray = ImageTensor(
            pixels=rng.uniform(0, 1, (8, 8, 1)).astype(np.float32),
            norm_mean=(0.5,),
            norm_std=(0.25,),
        )
        with pytest.raises(ValueError, match="channel mismatch"):
            forward(toy_handle, gray)

    def test_non_finite_pixels_rejected(self, toy_handle, toy_image):
        toy_image.pixels[0, 0, 0] = np.inf  # mutate after validation
        with pytest.raises(ValueError, match="non-finite"):
            forward(toy_handle, toy_image)


class LinearProbe(nn.Module):
    """One linear layer on flattened pixels; logit gradients are its rows."""

    def __init__(self, n_in, n_out):
        super().__init__()
        self.flatten = nn.Flatten()
        self.fc = nn.Linear(n_in, n_out, bias=True)

    def forward(self, x):
        return self.fc(self.flatten(x))


class TestAnalyticGradients:
    def test_logit_gradient_is_weight_row(self):
        torch.manual_seed(0)
        module = LinearProbe(3 * 8 * 8, 4).double()
        handle = ModelHandle.from_module(module, "linear-probe", 4, input_size=8)
        x = ImageTensor(
            pixels=np.random.default_rng(0).uniform(0, 1, (8, 8, 3)).astype(np.float32),
            norm_mean=(0.0, 0.0, 0.0),
            norm_std=(1.0, 1.0, 1.0),
        )
        out = backward_target(handle, x, BackpropTarget.logit(2), at_input=True)
        grad = out["input"]  # (H, W, C)
        weight_row = module.fc.weight[2].detach().numpy().reshape(3, 8, 8)
        assert np.allclose(grad.transpose(2, 0, 1), weight_row, atol=1e-12)

    def test_loss_at_minimum_has_vanishing_gradient(self):
        # A large bias toward Q puts all softmax mass on Q, the
        # cross-entropy minimum, so the loss gradient nearly vanishes.
        torch.manual_seed(0)
        module = LinearProbe(3 * 8 * 8, 4).double()
        with torch.no_grad():
            module.fc.weight.zero_()
            module.fc.bias.zero_()
            module.fc.bias[3] = 50.0
        handle = ModelHandle.from_module(module, "linear-probe", 4, input_size=8)
        x = make_image(seed=0)
        out = backward_target(handle, x, BackpropTarget.loss(0, 3), at_input=True)
        assert np.abs(out["input"]).max() < 1e-12


def _fd_model(seed=0):
    torch.manual_seed(seed)
    return nn.Sequential(
        nn.Conv2d(3, 4, 3, padding=1),
        nn.ReLU(),
        nn.Conv2d(4, 6, 3, padding=1),
        nn.ReLU(),
        nn.AdaptiveAvgPool2d(1),
        nn.Flatten(),
        nn.Linear(6, 4),
    ).double()


def _scalar_of_logits(logits: torch.Tensor, target: BackpropTarget) -> float:
    if target.kind == "logit":
        return float(logits[0, target.P])
    probs = torch.softmax(logits[0], dim=0)
    return float(-torch.log(probs[target.Q]))


class TestFiniteDifferenceOracle:
    """Central finite differences vs autograd, both target kinds."""

    H = 1e-4
    TOL = 1e-3

    @pytest.fixture(scope="class")
    def setup(self):
        module = _fd_model(seed=0)
        handle = ModelHandle.from_module(module, "fd-toy", 4, input_size=8)
        n_params = sum(p.numel() for p in module.parameters())
        assert n_params <= 10_000
        x = make_image(seed=5)
        # keep pre-activations away from the ReLU kink so FD stays valid
        with torch.no_grad():
            t = torch.from_numpy(x.pixels.transpose(2, 0, 1)).double()[None]
            t = (t - 0.5) / 0.25
            pre1 = module[0](t)
            pre2 = module[2](module[1](pre1))
        margin = min(pre1.abs().min().item(), pre2.abs().min().item())
        assert margin > 10 * self.H, "fixture seed puts an activation on a kink"
        return handle, module, x

    def _normalized(self, x: ImageTensor, pixels: np.ndarray) -> torch.Tensor:
        t = torch.from_numpy(pixels.transpose(2, 0, 1)).double()[None]
        mean = torch.tensor(x.norm_mean).view(1, -1, 1, 1)
        std = torch.tensor(x.norm_std).view(1, -1, 1, 1)
        return (t - mean) / std

    @pytest.mark.parametrize("target", [BackpropTarget.logit(1),
                                        BackpropTarget.loss(1, 3)])
    def test_input_gradients(self, setup, target):
        handle, module, x = setup
        grad = backward_target(handle, x, target, at_input=True)["input"]

        def f(pixels):
            with torch.no_grad():
                return _scalar_of_logits(module(self._normalized(x, pixels)), target)

        fd = np.zeros_like(grad)
        for i in range(8):
            for j in range(8):
                for c in range(3):
                    up = x.pixels.astype(np.float64).copy()
                    dn = up.copy()
                    up[i, j, c] += self.H
                    dn[i, j, c] -= self.H
                    fd[i, j, c] = (f(up) - f(dn)) / (2 * self.H)
        assert np.abs(grad - fd).max() < self.TOL

    @pytest.mark.parametrize("target", [BackpropTarget.logit(2),
                                        BackpropTarget.loss(2, 0)])
    def test_layer_gradients(self, setup, target):
        handle, module, x = setup
        out = backward_target(handle, x, target, layer="2")
        acts, grads = out["layer"].activations, out["layer"].gradients
        tail = module[3:]

        def f(a):
            with torch.no_grad():
                return _scalar_of_logits(tail(torch.from_numpy(a)[None]), target)

        fd = np.zeros_like(grads)
        it = np.nditer(acts, flags=["multi_index"])
        while not it.finished:
            idx = it.multi_index
            up = acts.copy()
            dn = acts.copy()
            up[idx] += self.H
            dn[idx] -= self.H
            fd[idx] = (f(up) - f(dn)) / (2 * self.H)
            it.iternext()
        assert np.abs(grads - fd).max() < self.TOL


class TestEngineContracts:
    def test_unknown_layer(self, toy_handle, toy_image):
        with pytest.raises(ValueError, match="unknown layer"):
            backward_target(toy_handle, toy_image, BackpropTarget.logit(0),
                            layer="conv99")

    def test_q_out_of_range(self, toy_handle, toy_image):
        with pytest.raises(ValueError, match="out of range"):
            backward_target(toy_handle, toy_image, BackpropTarget.loss(0, 99),
                            at_input=True)

    def test_backward_never_changes_weights(self, toy_handle, toy_image):
        before = toy_handle.weight_checksum
        backward_target(toy_handle, toy_image, BackpropTarget.logit(0),
                        layer="conv2", at_input=True)
        toy_handle.refresh_checksum()
        assert toy_handle.weight_checksum == before

    def test_backward_counter(self, toy_handle, toy_image):
        eng = GradientEngine()
        eng.layer_grads_batch(toy_handle, [toy_image], [BackpropTarget.logit(0)],
                              "conv2")
        eng.input_grads_batch(toy_handle, [toy_image], [BackpropTarget.logit(0)])
        assert eng.backward_count == 2

    def test_batched_grads_match_single(self, toy_handle):
        # eval-mode samples are independent; a summed-scalar batch pass
        # must reproduce per-image gradients
        eng = GradientEngine()
        images = [make_image(seed=s) for s in (1, 2, 3)]
        targets = [BackpropTarget.logit(0), BackpropTarget.loss(0, 2),
                   BackpropTarget.logit(1)]
        _, batch_grads = eng.layer_grads_batch(toy_handle, images, targets, "conv2")
        for i in range(3):
            _, single = eng.layer_grads_batch(
                toy_handle, [images[i]], [targets[i]], "conv2"
            )
            assert np.allclose(batch_grads[i], single[0], atol=1e-5)

    def test_needs_layer_or_input(self, toy_handle, toy_image):
        with pytest.raises(ValueError, match="layer"):
            backward_target(toy_handle, toy_image, BackpropTarget.logit(0))


class TestMaskImage:
    def test_all_ones_is_identity(self, toy_image):
        out = mask_image(toy_image, np.ones((8, 8)))
        assert np.allclose(out.pixels, toy_image.pixels, atol=1e-7)

    def test_all_zeros_blanks(self, toy_image):
        out = mask_image(toy_image, np.zeros((8, 8)))
        assert np.all(out.pixels == 0)

    def test_hand_hadamard(self):
        px = np.zeros((8, 8, 1), dtype=np.float32)
        px[:2, :2, 0] = [[0.2, 0.4], [0.6, 0.8]]
        x = ImageTensor(pixels=px, norm_mean=(0.5,), norm_std=(0.25,))
        m = np.zeros((8, 8))
        m[0, 0] = 1.0
        m[1, 1] = 1.0
        out = mask_image(x, m)
        corner = out.pixels[:2, :2, 0]
        assert np.allclose(corner, [[0.2, 0.0], [0.0, 0.8]], atol=1e-7)

    def test_upsamples_small_masks(self, toy_image):
        out = mask_image(toy_image, np.ones((2, 2)))
        assert out.pixels.shape == toy_image.pixels.shape
        assert np.allclose(out.pixels, toy_image.pixels, atol=1e-6)

    def test_binary_mask_idempotent(self, toy_image):
        rng = np.random.default_rng(0)
        m = (rng.uniform(size=(8, 8)) > 0.5).astype(np.float64)
        once = mask_image(toy_image, m)
        twice = mask_image(once, m)
        assert np.array_equal(once.pixels, twice.pixels)

    def test_rejects_bad_mask_rank(self, toy_image):
        with pytest.raises(ValueError, match="2-D"):
            mask_image(toy_image, np.ones((8, 8, 3)))
