"""Face-parsing backends producing per-pixel class logits."""

from __future__ import annotations

import math
from typing import Protocol

import torch
import torch.nn as nn

from .types import FaceImage, SemanticLogits, SemanticMap


class SegmentationBackend(Protocol):
    class_count: int
    differentiable: bool

    def logits_pixels(self, pixels: torch.Tensor) -> torch.Tensor: ...


class ToySegmenter(nn.Module):
    """Fixed random 3 -> 16 -> C conv net; class meaning is irrelevant to the losses."""

    differentiable = True

    def __init__(self, class_count: int = 6, hidden: int = 16, seed: int = 77):
        super().__init__()
        self.class_count = class_count
        g = torch.Generator().manual_seed(seed)
        self.conv1 = nn.Conv2d(3, hidden, 3, padding=1)
        self.conv2 = nn.Conv2d(hidden, class_count, 3, padding=1)
        with torch.no_grad():
            self.conv1.weight.normal_(0.0, 3.0 / math.sqrt(27), generator=g)
            self.conv1.bias.normal_(0.0, 0.5, generator=g)
            self.conv2.weight.normal_(0.0, 3.0 / math.sqrt(hidden * 9), generator=g)
            self.conv2.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def logits_pixels(self, pixels: torch.Tensor) -> torch.Tensor:
        """(H, W, C) logits for (H, W, 3) pixels; batched inputs give (B, H, W, C)."""
        x = pixels if pixels.ndim == 4 else pixels.unsqueeze(0)
        x = (x.permute(0, 3, 1, 2).to(self.conv1.weight.dtype) - 0.5) * 2.0
        y = self.conv2(torch.tanh(self.conv1(x))).permute(0, 2, 3, 1)
        return y if pixels.ndim == 4 else y[0]

    def as_dtype(self, dtype: torch.dtype) -> "ToySegmenter":
        clone = ToySegmenter(self.class_count, self.conv1.out_channels)
        clone.load_state_dict(self.state_dict())
        return clone.to(dtype)


def segment_logits(backend, image: FaceImage | torch.Tensor) -> SemanticLogits:
    pixels = image.pixels if isinstance(image, FaceImage) else image
    return SemanticLogits(backend.logits_pixels(pixels))


def segment_labels(backend, image: FaceImage | torch.Tensor) -> SemanticMap:
    return segment_logits(backend, image).labels()
