"""Synthetic identities rendered by the toy generator.

An identity is an anchor style vector; a render adds independent Gaussian
jitter to each layer's copy of the anchor, so renders live in W+ but not W.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch

from .generator import style_names
from .types import FaceImage, LatentCode, LatentSpace


@dataclass(frozen=True)
class ToyIdentities:
    identity_count: int = 32
    jitter: float = 0.3
    seed: int = 2024

    def anchors(self, style_dim: int) -> torch.Tensor:
        g = torch.Generator().manual_seed(self.seed)
        return torch.randn(self.identity_count, style_dim, generator=g)

    def styles(self, generator, identity: int, render_seed: int, count: int = 1) -> torch.Tensor:
        """Per-layer styles, shape (count, L, d)."""
        anchor = self.anchors(generator.style_dim)[identity]
        g = torch.Generator().manual_seed(self.seed * 1_000_003 + identity * 7919 + render_seed)
        noise = torch.randn(count, generator.layer_count, generator.style_dim, generator=g)
        return anchor[None, None, :] + self.jitter * noise

    def code(self, generator, identity: int, render_seed: int) -> LatentCode:
        s = self.styles(generator, identity, render_seed)[0]
        comps = {n: s[i].clone() for i, n in enumerate(style_names(1, generator.layer_count))}
        return LatentCode(LatentSpace.WPLUS, comps, generator.fingerprint)

    def image(self, generator, identity: int, render_seed: int) -> FaceImage:
        with torch.no_grad():
            return generator.synthesize(self.code(generator, identity, render_seed))

    @torch.no_grad()
    def render_batch(self, generator, identity: int, render_seed: int, count: int) -> torch.Tensor:
        s = self.styles(generator, identity, render_seed, count)
        comps = {n: s[:, i] for i, n in enumerate(style_names(1, generator.layer_count))}
        return generator.render(comps, LatentSpace.WPLUS).clamp(0.0, 1.0)
