"""Reference-model training at desk scale."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F

from voice.data import ImageDataset
from voice.models import ModelHandle, new_model


def _dataset_tensors(dataset: ImageDataset) -> tuple[torch.Tensor, torch.Tensor]:
    mean = torch.tensor(dataset.norm_mean).view(1, -1, 1, 1)
    std = torch.tensor(dataset.norm_std).view(1, -1, 1, 1)
    x = torch.from_numpy(dataset.images.transpose(0, 3, 1, 2).copy())
    return (x - mean) / std, torch.from_numpy(dataset.labels)


def train_reference_model(
    dataset: ImageDataset,
    epochs: int,
    seed: int,
    architecture_id: str = "smallconv-v1",
    batch_size: int = 128,
    lr: float = 1e-3,
    val_dataset: ImageDataset | None = None,
    log=None,
) -> ModelHandle:
    """Train the bundled classifier; deterministic for a fixed seed.

    Initialization, shuffling and optimization are all driven by the one
    seed; zero epochs returns the untouched initialization.
    """
    handle = new_model(
        architecture_id,
        num_classes=dataset.num_classes,
        in_channels=dataset.images.shape[3],
        seed=seed,
    )
    module = handle.module
    x, y = _dataset_tensors(dataset)
    opt = torch.optim.Adam(module.parameters(), lr=lr)
    gen = torch.Generator().manual_seed(seed)
    module.train()
    for epoch in range(epochs):
        order = torch.randperm(len(dataset), generator=gen)
        total, seen = 0.0, 0
        for start in range(0, len(dataset), batch_size):
            idx = order[start : start + batch_size]
            loss = F.cross_entropy(module(x[idx]), y[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += float(loss.detach()) * len(idx)
            seen += len(idx)
        if log is not None:
            msg = f"epoch {epoch + 1}/{epochs} loss {total / seen:.4f}"
            if val_dataset is not None:
                msg += f" val_acc {evaluate_accuracy(handle, val_dataset):.4f}"
            log(msg)
    module.eval()
    handle.refresh_checksum()
    return handle


def evaluate_accuracy(handle: ModelHandle, dataset: ImageDataset,
                      batch_size: int = 256) -> float:
    """Top-1 accuracy over a dataset."""
    was_training = handle.module.training
    handle.module.eval()
    x, y = _dataset_tensors(dataset)
    hits = 0
    with torch.inference_mode():
        for start in range(0, len(dataset), batch_size):
            logits = handle.module(x[start : start + batch_size])
            hits += int((logits.argmax(dim=1) == y[start : start + batch_size]).sum())
    if was_training:
        handle.module.train()
    return hits / len(dataset)
