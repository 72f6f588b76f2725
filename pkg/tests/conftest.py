"""Shared fixtures: toy models, small datasets, and the session-trained
reference model used by the acceptance suite."""

import numpy as np
import pytest
import torch
import torch.nn as nn

from voice.data import ImageTensor, make_synthetic_dataset
from voice.models import ModelHandle
from voice.training import train_reference_model, evaluate_accuracy


class TinyConvNet(nn.Module):
    """A few-hundred-parameter ReLU CNN for gradient and explainer tests."""

    def __init__(self, num_classes=4, in_channels=3, width=6, input_size=8,
                 with_pool=True):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, width, 3, padding=1)
        self.relu1 = nn.ReLU()
        self.pool = nn.MaxPool2d(2) if with_pool else nn.Identity()
        self.conv2 = nn.Conv2d(width, 2 * width, 3, padding=1)
        self.relu2 = nn.ReLU()
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(2 * width, num_classes)

    def forward(self, x):
        x = self.pool(self.relu1(self.conv1(x)))
        x = self.relu2(self.conv2(x))
        return self.fc(self.gap(x).flatten(1))


def make_toy_handle(seed=0, num_classes=4, in_channels=3, input_size=8,
                    dtype=torch.float32) -> ModelHandle:
    torch.manual_seed(seed)
    module = TinyConvNet(num_classes=num_classes, in_channels=in_channels)
    module.to(dtype)
    return ModelHandle.from_module(module, "tinyconv", num_classes,
                                   input_size=input_size)


class SmoothToyNet(nn.Module):
    """Tanh CNN with damped weights; its input gradient varies gently, so
    Monte-Carlo gradient averages converge fast."""

    def __init__(self, width=8, num_classes=4, gain=0.4):
        super().__init__()
        self.conv1 = nn.Conv2d(3, width, 3, padding=1)
        self.act1 = nn.Tanh()
        self.conv2 = nn.Conv2d(width, width, 3, padding=1)
        self.act2 = nn.Tanh()
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(width, num_classes)
        with torch.no_grad():
            for m in self.modules():
                if isinstance(m, (nn.Conv2d, nn.Linear)):
                    m.weight *= gain

    def forward(self, x):
        x = self.act1(self.conv1(x))
        x = self.act2(self.conv2(x))
        return self.fc(self.gap(x).flatten(1))


def make_smooth_handle(seed=0) -> ModelHandle:
    torch.manual_seed(seed)
    return ModelHandle.from_module(SmoothToyNet(), "smoothtoy", 4, input_size=8)


def make_image(seed=0, size=8, channels=3, source_id="img") -> ImageTensor:
    rng = np.random.default_rng(seed)
    return ImageTensor(
        pixels=rng.uniform(0.05, 0.95, size=(size, size, channels)).astype(np.float32),
        norm_mean=(0.5,) * channels,
        norm_std=(0.25,) * channels,
        source_id=f"{source_id}-{seed}",
    )


@pytest.fixture
def toy_handle():
    return make_toy_handle(seed=0)


@pytest.fixture
def toy_image():
    return make_image(seed=1)


@pytest.fixture(scope="session")
def tiny_dataset():
    return make_synthetic_dataset(48, seed=11, id_prefix="fixture")


# -- session-trained reference model (shared by acceptance + integration) ----

TRAIN_SPEC = "synthetic:6000:60"
TEST_SPEC = "synthetic:2000:60"
MODEL_SEED = 7
EPOCHS = 6


class ReferenceBundle:
    def __init__(self, handle, train, test, weights_path, train_seconds):
        self.handle = handle
        self.train = train
        self.test = test
        self.weights_path = weights_path
        self.train_seconds = train_seconds
        self.test_accuracy = evaluate_accuracy(handle, test)


@pytest.fixture(scope="session")
def reference_bundle(tmp_path_factory):
    """Train the bundled classifier once per session on the synthetic set."""
    import time

    from voice.data import load_dataset
    from voice.models import save_weights

    train = load_dataset(TRAIN_SPEC, split="train")
    test = load_dataset(TEST_SPEC, split="test")
    t0 = time.time()
    handle = train_reference_model(train, epochs=EPOCHS, seed=MODEL_SEED)
    elapsed = time.time() - t0
    weights_path = tmp_path_factory.mktemp("weights") / "reference.bin"
    save_weights(handle, weights_path)
    return ReferenceBundle(handle, train, test, weights_path, elapsed)


# -- acceptance reporter ------------------------------------------------------

ACCEPTANCE_RESULTS: list[tuple[str, bool, str]] = []


def record_acceptance(name: str, passed: bool, detail: str = "") -> None:
    ACCEPTANCE_RESULTS.append((name, passed, detail))


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE_RESULTS:
        status = "PASS" if passed else "FAIL"
        line = f"{status}  {name}"
        if detail:
            line += f"  [{detail}]"
        terminalreporter.write_line(line)
