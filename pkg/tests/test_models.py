"""Model construction, training determinism, and weight persistence."""

import numpy as np
import pytest
import torch

from voice.data import make_synthetic_dataset
from voice.engine import GradientEngine
from voice.models import (
    ModelHandle,
    SmallConvNet,
    WeightFileError,
    load_weights,
    new_model,
    save_weights,
    weight_checksum,
)
from voice.training import evaluate_accuracy, train_reference_model


class TestArchitecture:
    def test_parameter_budget(self):
        handle = new_model(seed=0)
        n = sum(p.numel() for p in handle.module.parameters())
        assert 5e5 < n < 1.5e6

    def test_explainable_layers(self):
        handle = new_model(seed=0)
        assert handle.explainable_layers == [
            "conv1", "conv2", "conv3", "conv4", "conv5", "input",
        ]
        assert handle.last_conv_layer == "conv5"

    def test_last_conv_keeps_spatial_grid(self):
        m = SmallConvNet()
        acts = {}

        def grab(mod, inp, out):
            acts["s"] = tuple(out.shape)

        m.conv5.register_forward_hook(grab)
        with torch.inference_mode():
            m(torch.zeros(1, 3, 32, 32))
        assert acts["s"][2:] == (4, 4)

    def test_unknown_architecture(self):
        with pytest.raises(ValueError, match="unknown architecture"):
            new_model("resnet-billion")


class TestPersistence:
    def test_save_load_roundtrip(self, tmp_path):
        handle = new_model(seed=3)
        path = tmp_path / "w.bin"
        checksum = save_weights(handle, path)
        loaded = load_weights(path)
        assert loaded.weight_checksum == checksum
        assert loaded.architecture_id == handle.architecture_id
        for k, v in handle.module.state_dict().items():
            assert torch.equal(v, loaded.module.state_dict()[k])

    def test_forward_outputs_identical_after_roundtrip(self, tmp_path):
        from tests.conftest import make_image

        handle = new_model(seed=3)
        path = tmp_path / "w.bin"
        save_weights(handle, path)
        loaded = load_weights(path)
        eng = GradientEngine()
        x = make_image(seed=0, size=32)
        a = eng.forward(handle, x)
        b = eng.forward(loaded, x)
        assert np.array_equal(a.probs, b.probs)

    def test_corrupt_blob_detected(self, tmp_path):
        import struct

        handle = new_model(seed=1)
        path = tmp_path / "w.bin"
        save_weights(handle, path)
        raw = bytearray(path.read_bytes())
        (header_len,) = struct.unpack(">I", raw[8:12])
        blob_start = 12 + header_len
        mid = blob_start + (len(raw) - blob_start) // 2  # inside tensor data
        raw[mid] ^= 0xFF
        path.write_bytes(bytes(raw))
        with pytest.raises(WeightFileError):
            load_weights(path)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "w.bin"
        path.write_bytes(b"garbage here")
        with pytest.raises(WeightFileError, match="magic"):
            load_weights(path)

    def test_class_count_mismatch(self, tmp_path):
        handle = new_model(seed=1, num_classes=10)
        path = tmp_path / "w.bin"
        save_weights(handle, path)
        with pytest.raises(WeightFileError, match="class-count"):
            load_weights(path, expect_classes=7)

    def test_missing_file(self, tmp_path):
        with pytest.raises(WeightFileError, match="not found"):
            load_weights(tmp_path / "missing.bin")


class TestTraining:
    def test_zero_epochs_keeps_initialization(self):
        ds = make_synthetic_dataset(32, seed=5)
        trained = train_reference_model(ds, epochs=0, seed=42)
        fresh = new_model(seed=42, num_classes=ds.num_classes)
        assert trained.weight_checksum == fresh.weight_checksum

    def test_fixed_seed_reproduces_accuracy(self):
        ds = make_synthetic_dataset(96, seed=5)
        test = make_synthetic_dataset(48, seed=6)
        acc = [
            evaluate_accuracy(train_reference_model(ds, epochs=1, seed=9), test)
            for _ in range(2)
        ]
        assert acc[0] == acc[1]

    def test_training_changes_checksum(self):
        ds = make_synthetic_dataset(32, seed=5)
        a = train_reference_model(ds, epochs=0, seed=1)
        b = train_reference_model(ds, epochs=1, seed=1)
        assert a.weight_checksum != b.weight_checksum

    def test_checksum_covers_buffers(self):
        handle = new_model(seed=0)
        before = weight_checksum(handle.module)
        handle.module.bn1.running_mean += 1.0
        assert weight_checksum(handle.module) != before
