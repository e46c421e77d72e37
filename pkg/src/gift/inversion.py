"""Latent code initialization: fit a code whose synthesis reconstructs the source."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import torch
import torch.nn as nn

from .errors import DivergenceError, ValidationError
from .types import FaceImage, LatentCode, LatentSpace, OptimConfig

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8


class ToyPerceptual(nn.Module):
    """Fixed random three-layer conv feature extractor standing in for LPIPS."""

    def __init__(self, seed: int = 1234, widths: tuple[int, int, int] = (8, 16, 32)):
        super().__init__()
        g = torch.Generator().manual_seed(seed)
        c = (3,) + tuple(widths)
        self.layers = nn.ModuleList(
            nn.Conv2d(c[i], c[i + 1], 3, stride=1 if i == 0 else 2, padding=1) for i in range(3)
        )
        with torch.no_grad():
            for conv in self.layers:
                fan_in = conv.in_channels * 9
                conv.weight.normal_(0.0, 1.0 / math.sqrt(fan_in), generator=g)
                conv.bias.zero_()
        self.requires_grad_(False)
        self.eval()

    def activations(self, pixels: torch.Tensor) -> list[torch.Tensor]:
        x = pixels if pixels.ndim == 4 else pixels.unsqueeze(0)
        x = (x.permute(0, 3, 1, 2).to(self.layers[0].weight.dtype) - 0.5) * 2.0
        outs = []
        for conv in self.layers:
            x = torch.tanh(conv(x))
            outs.append(x)
        return outs

    def forward(self, pixels: torch.Tensor) -> torch.Tensor:
        """Flattened concatenation of all layer activations, (B, D)."""
        return torch.cat([a.flatten(1) for a in self.activations(pixels)], dim=1)

    def pooled(self, pixels: torch.Tensor) -> torch.Tensor:
        """Per-channel mean and std of every layer, (B, 2 * sum(widths)); used for FID."""
        feats = []
        for a in self.activations(pixels):
            feats.append(a.mean(dim=(2, 3)))
            feats.append(a.std(dim=(2, 3)))
        return torch.cat(feats, dim=1)


def _as_pixels(image) -> torch.Tensor:
    return image.pixels if isinstance(image, FaceImage) else image


def reconstruction_terms(generator, code: LatentCode, source, perceptual, source_features=None):
    """Return (L_mse, L_per) as differentiable scalars; norms are element means."""
    src = _as_pixels(source).to(generator.dtype)
    recon = generator.render(code.components, code.space).clamp(0.0, 1.0)
    if recon.shape != src.shape:
        raise ValidationError(f"source shape {tuple(src.shape)} != synthesis shape {tuple(recon.shape)}")
    mse = ((src - recon) ** 2).mean()
    if source_features is None:
        with torch.no_grad():
            source_features = perceptual(src)
    per = ((source_features - perceptual(recon)) ** 2).mean()
    return mse, per


def reconstruction_loss(generator, code: LatentCode, source, alpha: float, perceptual) -> torch.Tensor:
    if alpha < 0:
        raise ValidationError("alpha must be >= 0")
    mse, per = reconstruction_terms(generator, code, source, perceptual)
    return mse + alpha * per


@dataclass
class InversionResult:
    code: LatentCode
    recon: FaceImage
    loss_trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    final_terms: tuple[float, float, float] | None = None  # (L_mse, L_per, L_rec) of ``code``

    @property
    def initial_loss(self) -> float:
        return self.loss_trace[0][3] if self.loss_trace else math.nan

    @property
    def final_loss(self) -> float:
        return self.final_terms[2] if self.final_terms else math.nan


def _optimize(generator, code, source, perceptual, steps, lr, alpha, stage):
    params = {k: v.detach().clone().to(generator.dtype).requires_grad_(True) for k, v in code.components.items()}
    opt = torch.optim.Adam(list(params.values()), lr=lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    src = _as_pixels(source).detach().to(generator.dtype)
    with torch.no_grad():
        src_feat = perceptual(src)
    trace = []
    for step in range(steps):
        current = LatentCode(code.space, params, code.generator_fingerprint)
        mse, per = reconstruction_terms(generator, current, src, perceptual, src_feat)
        loss = mse + alpha * per
        value = loss.item()
        if not math.isfinite(value):
            raise DivergenceError(stage, step, value)
        trace.append((step, mse.item(), per.item(), value))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()
    out = LatentCode(code.space, {k: v.detach().to(code[k].dtype) for k, v in params.items()},
                     code.generator_fingerprint)
    with torch.no_grad():
        mse, per = reconstruction_terms(generator, out, src, perceptual, src_feat)
    final = (float(mse), float(per), float(mse + alpha * per))
    return out, trace, final


def warm_start(generator, image: FaceImage, space: LatentSpace, perceptual, steps: int = 200,
               lr: float = 0.01, alpha: float = 10.0, seed: int = 0) -> LatentCode:
    """Stand-in for a pretrained encoder: a short inversion run from a seeded random code."""
    start = generator.init_latent(space, seed)
    code, _, _ = _optimize(generator, start, image, perceptual, steps, lr, alpha, "encode")
    return code


def invert(generator, source: FaceImage, config: OptimConfig, perceptual,
           warm_start_code: LatentCode | None = None) -> InversionResult:
    """Optimize every component of the code with Adam for ``config.t1_steps`` steps."""
    if source.size != generator.output_size:
        raise ValidationError(f"source is {source.size}, generator renders {generator.output_size}")
    if warm_start_code is None:
        warm_start_code = generator.encode(source, config.space)
    generator.check(warm_start_code)
    code, trace, final = _optimize(generator, warm_start_code, source, perceptual,
                                   config.t1_steps, config.t1_lr, config.alpha, "invert")
    if trace:
        log.debug("inversion: L_rec %.5f -> %.5f over %d steps", trace[0][3], final[2], len(trace))
    recon = generator.synthesize(code).detach()
    return InversionResult(code=code, recon=recon, loss_trace=trace, final_terms=final)
