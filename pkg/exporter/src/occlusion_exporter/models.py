"""Rebuild analyzer model manifests as torch modules.

The analyzer persists its classifier as ``model.json`` plus interchange
tensors named ``block<j>/w``, ``block<j>/b``, ``head/w``, ``head/b``.  The
network is a stack of ``3x3 conv (pad 1) -> ReLU -> 2x2 max-pool`` blocks
followed by global average pooling and a linear head, so it maps directly
onto torch primitives.  Each block is exposed as a named submodule
``block1`` .. ``blockK`` for the block-to-layer mapping.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np
import torch
from torch import nn

from . import interchange


class BlockStack(nn.Module):
    """Conv blocks with named submodules plus a pooled linear head."""

    def __init__(self, in_channels: int, channels: list[int], num_classes: int):
        super().__init__()
        prev = in_channels
        for j, out in enumerate(channels, start=1):
            block = nn.Sequential(
                nn.Conv2d(prev, out, 3, padding=1),
                nn.ReLU(),
                nn.MaxPool2d(2),
            )
            self.add_module(f"block{j}", block)
            prev = out
        self.head = nn.Linear(prev, num_classes)
        self.num_blocks = len(channels)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for j in range(1, self.num_blocks + 1):
            x = self.get_submodule(f"block{j}")(x)
        return self.head(x.mean(dim=(2, 3)))


def load_model_manifest(root: str | Path) -> tuple[BlockStack, dict]:
    """Instantiate the persisted analyzer model; returns (module, manifest)."""
    root = Path(root)
    doc = json.loads((root / "model.json").read_text())
    tensors = interchange.read_dir(root)
    arch = doc["arch"]
    model = BlockStack(arch["in_channels"], list(arch["channels"]), int(doc["num_classes"]))
    with torch.no_grad():
        for j in range(model.num_blocks):
            conv = model.get_submodule(f"block{j + 1}")[0]
            conv.weight.copy_(torch.from_numpy(tensors[f"block{j}/w"].astype(np.float32)))
            conv.bias.copy_(torch.from_numpy(tensors[f"block{j}/b"].astype(np.float32)))
        model.head.weight.copy_(torch.from_numpy(tensors["head/w"].astype(np.float32)))
        model.head.bias.copy_(torch.from_numpy(tensors["head/b"].astype(np.float32)))
    model.eval()
    return model, doc


def default_block_layers(model: BlockStack) -> list[str]:
    return [f"block{j}" for j in range(1, model.num_blocks + 1)]
