"""Classifier architectures, model handles and weight-file persistence."""

from __future__ import annotations

import hashlib
import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import torch
import torch.nn as nn

WEIGHT_MAGIC = b"VOICEWT1"


class WeightFileError(RuntimeError):
    """Raised for unreadable, corrupt or mismatched weight files."""


class SmallConvNet(nn.Module):
    """Four-block convolutional classifier for 32x32 inputs (~0.8M params).

    Block 1 holds two 3x3 convolutions, blocks 2-4 one each; spatial size
    falls 32 -> 16 -> 8 -> 4 so the last convolution keeps a 4x4 grid for
    activation-map explainers. All rectifications are non-inplace
    ``nn.ReLU`` modules so backward hooks can reshape their gradients.
    """

    def __init__(self, num_classes: int = 10, in_channels: int = 3):
        super().__init__()
        self.conv1 = nn.Conv2d(in_channels, 64, 3, padding=1)
        self.bn1 = nn.BatchNorm2d(64)
        self.relu1 = nn.ReLU()
        self.conv2 = nn.Conv2d(64, 64, 3, padding=1)
        self.bn2 = nn.BatchNorm2d(64)
        self.relu2 = nn.ReLU()
        self.pool1 = nn.MaxPool2d(2)
        self.conv3 = nn.Conv2d(64, 128, 3, padding=1)
        self.bn3 = nn.BatchNorm2d(128)
        self.relu3 = nn.ReLU()
        self.pool2 = nn.MaxPool2d(2)
        self.conv4 = nn.Conv2d(128, 192, 3, padding=1)
        self.bn4 = nn.BatchNorm2d(192)
        self.relu4 = nn.ReLU()
        self.pool3 = nn.MaxPool2d(2)
        self.conv5 = nn.Conv2d(192, 256, 3, padding=1)
        self.bn5 = nn.BatchNorm2d(256)
        self.relu5 = nn.ReLU()
        self.gap = nn.AdaptiveAvgPool2d(1)
        self.fc = nn.Linear(256, num_classes)

    def forward(self, x):
        x = self.relu1(self.bn1(self.conv1(x)))
        x = self.pool1(self.relu2(self.bn2(self.conv2(x))))
        x = self.pool2(self.relu3(self.bn3(self.conv3(x))))
        x = self.pool3(self.relu4(self.bn4(self.conv4(x))))
        x = self.relu5(self.bn5(self.conv5(x)))
        x = self.gap(x).flatten(1)
        return self.fc(x)


ARCHITECTURES = {
    "smallconv-v1": SmallConvNet,
}


def weight_checksum(module: nn.Module) -> str:
    """SHA-256 over the state dict in canonical (name-sorted) order.

    Buffers (e.g. batch-norm running statistics) are included since they
    affect inference.
    """
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name]
        h.update(name.encode())
        h.update(str(tuple(t.shape)).encode())
        h.update(str(t.dtype).encode())
        if t.numel():
            h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def conv_layer_names(module: nn.Module) -> list[str]:
    return [name for name, m in module.named_modules() if isinstance(m, nn.Conv2d)]


@dataclass
class ModelHandle:
    """A trained network plus the metadata the pipeline needs.

    ``explainable_layers`` lists each convolution by module name, followed
    by ``"input"`` for pixel-space gradients.
    """

    module: nn.Module
    architecture_id: str
    num_classes: int
    weight_checksum: str
    explainable_layers: list[str]
    input_size: int = 32

    @classmethod
    def from_module(
        cls,
        module: nn.Module,
        architecture_id: str,
        num_classes: int,
        input_size: int = 32,
    ) -> "ModelHandle":
        module.eval()
        return cls(
            module=module,
            architecture_id=architecture_id,
            num_classes=num_classes,
            weight_checksum=weight_checksum(module),
            explainable_layers=conv_layer_names(module) + ["input"],
            input_size=input_size,
        )

    @property
    def last_conv_layer(self) -> str:
        convs = [n for n in self.explainable_layers if n != "input"]
        if not convs:
            raise ValueError("model has no convolution layers")
        return convs[-1]

    def refresh_checksum(self) -> None:
        self.weight_checksum = weight_checksum(self.module)

    def replicate(self) -> "ModelHandle":
        """Independent copy for a worker (weights shared by value, not state)."""
        import copy

        clone = copy.deepcopy(self.module)
        clone.eval()
        return ModelHandle(
            module=clone,
            architecture_id=self.architecture_id,
            num_classes=self.num_classes,
            weight_checksum=self.weight_checksum,
            explainable_layers=list(self.explainable_layers),
            input_size=self.input_size,
        )


def new_model(architecture_id: str = "smallconv-v1", num_classes: int = 10,
              in_channels: int = 3, seed: int | None = None) -> ModelHandle:
    if architecture_id not in ARCHITECTURES:
        raise ValueError(f"unknown architecture {architecture_id!r}; "
                         f"known: {sorted(ARCHITECTURES)}")
    if seed is not None:
        torch.manual_seed(seed)
    module = ARCHITECTURES[architecture_id](num_classes=num_classes, in_channels=in_channels)
    return ModelHandle.from_module(module, architecture_id, num_classes)


# ---------------------------------------------------------------------------
# weight files: 8-byte magic, u32 header length, JSON header, torch blob
# ---------------------------------------------------------------------------

def save_weights(handle: ModelHandle, path: str | Path) -> str:
    """Write the weight file and return its checksum."""
    path = Path(path)
    handle.refresh_checksum()
    header = {
        "architecture_id": handle.architecture_id,
        "num_classes": handle.num_classes,
        "input_size": handle.input_size,
        "explainable_layers": handle.explainable_layers,
        "checksum": handle.weight_checksum,
    }
    blob = io.BytesIO()
    torch.save(handle.module.state_dict(), blob)
    header_bytes = json.dumps(header, sort_keys=True).encode()
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(WEIGHT_MAGIC)
        f.write(struct.pack(">I", len(header_bytes)))
        f.write(header_bytes)
        f.write(blob.getvalue())
    return handle.weight_checksum


def load_weights(path: str | Path, expect_classes: int | None = None) -> ModelHandle:
    """Load a weight file, rebuilding the architecture named in its header.

    Raises WeightFileError when the stored checksum does not match the
    loaded tensors or the class count differs from ``expect_classes``.
    """
    path = Path(path)
    if not path.is_file():
        raise WeightFileError(f"weight file not found: {path}")
    with open(path, "rb") as f:
        magic = f.read(len(WEIGHT_MAGIC))
        if magic != WEIGHT_MAGIC:
            raise WeightFileError(f"{path} is not a weight file (bad magic)")
        (header_len,) = struct.unpack(">I", f.read(4))
        try:
            header = json.loads(f.read(header_len))
        except (UnicodeDecodeError, json.JSONDecodeError) as e:
            raise WeightFileError(f"corrupt weight-file header in {path}: {e}") from e
        blob = f.read()
    if expect_classes is not None and header["num_classes"] != expect_classes:
        raise WeightFileError(
            f"class-count mismatch: file has {header['num_classes']}, "
            f"expected {expect_classes}"
        )
    arch = header["architecture_id"]
    if arch not in ARCHITECTURES:
        raise WeightFileError(f"unknown architecture {arch!r} in {path}")
    try:
        state = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=True)
    except Exception as e:
        raise WeightFileError(f"corrupt weight blob in {path}: {e}") from e
    in_channels = state[conv_first_weight_key(state)].shape[1]
    module = ARCHITECTURES[arch](num_classes=header["num_classes"], in_channels=in_channels)
    module.load_state_dict(state)
    handle = ModelHandle.from_module(
        module, arch, header["num_classes"], input_size=header.get("input_size", 32)
    )
    if handle.weight_checksum != header["checksum"]:
        raise WeightFileError(
            f"checksum mismatch in {path}: header {header['checksum'][:12]}..., "
            f"recomputed {handle.weight_checksum[:12]}..."
        )
    return handle


def conv_first_weight_key(state: dict) -> str:
    for key in state:
        if key.endswith("weight") and state[key].ndim == 4:
            return key
    raise WeightFileError("no convolution weights in state dict")
