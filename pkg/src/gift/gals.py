"""Global adversarial latent search.

Adversarial ensemble loss with input diversity, key-landmark (semantic map)
regularization, their weighted sum, and the masked Adam search loop.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import DivergenceError, ValidationError
from .fr import Ensemble
from .generator import component_mask
from .inversion import ADAM_BETAS, ADAM_EPS, InversionResult, invert
from .types import FaceImage, LatentCode, OptimConfig, SemanticMap

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DiversifyParams:
    prob: float = 0.5
    resize_lo: float = 0.8
    resize_hi: float = 1.0
    noise_sigma: float = 0.05

    def __post_init__(self):
        if not 0.0 <= self.prob <= 1.0:
            raise ValidationError("diversify probability must lie in [0, 1]")
        if not 0.0 < self.resize_lo <= self.resize_hi <= 1.0:
            raise ValidationError("need 0 < resize_lo <= resize_hi <= 1")
        if self.noise_sigma < 0:
            raise ValidationError("noise_sigma must be >= 0")


def diversify(image, params: DiversifyParams, rng: np.random.Generator):
    """Random down/up bilinear resize plus Gaussian noise, applied with probability p.

    Returns the same type it was given (FaceImage or raw (H, W, 3) tensor).
    One Bernoulli draw per call.
    """
    pixels = image.pixels if isinstance(image, FaceImage) else image
    if rng.random() >= params.prob:
        return image
    h, w = pixels.shape[-3], pixels.shape[-2]
    scale = rng.uniform(params.resize_lo, params.resize_hi)
    out = pixels
    sh, sw = max(1, int(round(h * scale))), max(1, int(round(w * scale)))
    if (sh, sw) != (h, w):
        x = out.unsqueeze(0) if out.ndim == 3 else out
        x = x.permute(0, 3, 1, 2)
        x = F.interpolate(x, size=(sh, sw), mode="bilinear", align_corners=False)
        x = F.interpolate(x, size=(h, w), mode="bilinear", align_corners=False)
        x = x.permute(0, 2, 3, 1)
        out = x[0] if pixels.ndim == 3 else x
    if params.noise_sigma > 0:
        noise = rng.standard_normal(tuple(out.shape))
        out = out + torch.as_tensor(noise, dtype=out.dtype) * params.noise_sigma
    out = out.clamp(0.0, 1.0)
    return FaceImage(out) if isinstance(image, FaceImage) else out


def target_embeddings(ensemble: Ensemble, target: FaceImage) -> list[torch.Tensor]:
    with torch.no_grad():
        return [m.embed_pixels(target.pixels).detach() for m in ensemble]


def adversarial_loss(generator, code: LatentCode, target: FaceImage | None, ensemble: Ensemble,
                     params: DiversifyParams, rng: np.random.Generator,
                     target_embeds: list[torch.Tensor] | None = None,
                     rendered: torch.Tensor | None = None) -> torch.Tensor:
    """Mean cosine distance between the (diversified) synthesis and the target, per surrogate."""
    if not isinstance(ensemble, Ensemble):
        ensemble = Ensemble(ensemble)
    if target_embeds is None:
        target_embeds = target_embeddings(ensemble, target)
    x = rendered if rendered is not None else generator.render(code.components, code.space).clamp(0.0, 1.0)
    x = diversify(x, params, rng)  # one draw shared by every member
    total = 0.0
    for member, t in zip(ensemble, target_embeds):
        e = member.embed_pixels(x)
        cos = (e * t.to(e.dtype)).sum()
        total = total + (1.0 - cos)
    return total / len(ensemble)


def klr_loss(generator, code: LatentCode, source_labels: SemanticMap, seg,
             rendered: torch.Tensor | None = None) -> torch.Tensor:
    """Pixel-mean cross entropy of the synthesis' parsing logits against the source labels."""
    x = rendered if rendered is not None else generator.render(code.components, code.space).clamp(0.0, 1.0)
    logits = seg.logits_pixels(x)
    if tuple(logits.shape[:2]) != tuple(source_labels.labels.shape):
        raise ValidationError(
            f"label map {tuple(source_labels.labels.shape)} does not match image {tuple(logits.shape[:2])}"
        )
    return F.cross_entropy(logits.reshape(-1, logits.shape[-1]), source_labels.labels.reshape(-1).long())


def total_loss(generator, code, target, source_labels, ensemble, seg, config: OptimConfig,
               rng, params: DiversifyParams | None = None, target_embeds=None):
    """Weighted sum of the adversarial and regularization terms.

    Returns (loss tensor, {"adv", "sem", "total"}) with the breakdown as floats.
    """
    params = params or DiversifyParams(prob=config.diversify_prob)
    x = generator.render(code.components, code.space).clamp(0.0, 1.0)
    adv = adversarial_loss(generator, code, target, ensemble, params, rng, target_embeds, rendered=x)
    if config.lambda_sem > 0:
        sem = klr_loss(generator, code, source_labels, seg, rendered=x)
    else:
        sem = torch.zeros((), dtype=x.dtype)
    total = config.lambda_adv * adv.double() + config.lambda_sem * sem.double()
    return total, {"adv": adv.item(), "sem": sem.item(), "total": total.item()}


@dataclass
class ProtectResult:
    protected: FaceImage
    code: LatentCode
    loss_trace: list[tuple[int, float, float, float]] = field(default_factory=list)
    per_surrogate_cos: dict[str, float] = field(default_factory=dict)
    inversion: InversionResult | None = None


def protect(generator, source: FaceImage, target: FaceImage, ensemble, seg, config: OptimConfig,
            perceptual=None, inversion_warm: LatentCode | None = None,
            params: DiversifyParams | None = None) -> ProtectResult:
    """Invert the source, then adversarially search its latent code toward the target."""
    if not isinstance(ensemble, Ensemble):
        ensemble = Ensemble(ensemble)
    params = params or DiversifyParams(prob=config.diversify_prob)
    inversion = None
    if inversion_warm is None:
        if perceptual is None:
            raise ValidationError("a perceptual backend is required to invert the source")
        inversion = invert(generator, source, config, perceptual)
        start = inversion.code
    else:
        generator.check(inversion_warm)
        start = inversion_warm

    mask = component_mask(start, config.search_mode, generator.layer_count)
    t_embeds = target_embeddings(ensemble, target)
    source_labels = SemanticMap(
        torch.argmax(seg.logits_pixels(source.pixels.to(generator.dtype)).detach(), dim=-1),
        seg.class_count,
    )
    frozen = {k: start[k].detach().clone().to(generator.dtype) for k in mask.frozen}
    active = {k: start[k].detach().clone().to(generator.dtype).requires_grad_(True) for k in mask.active}
    opt = torch.optim.Adam(list(active.values()), lr=config.t2_lr, betas=ADAM_BETAS, eps=ADAM_EPS)
    rng = np.random.default_rng(config.seed)

    def current() -> LatentCode:
        return LatentCode(start.space, {k: active[k] if k in active else frozen[k] for k in start.names},
                          start.generator_fingerprint)

    trace = []
    for step in range(config.t2_steps):
        loss, parts = total_loss(generator, current(), target, source_labels, ensemble, seg, config,
                                 rng, params, t_embeds)
        if not math.isfinite(parts["total"]):
            raise DivergenceError("protect", step, parts["total"])
        trace.append((step, parts["adv"], parts["sem"], parts["total"]))
        opt.zero_grad(set_to_none=True)
        loss.backward()
        opt.step()

    final = LatentCode(
        start.space,
        {k: active[k].detach().to(start[k].dtype).clone() if k in active else start[k].detach().clone()
         for k in start.names},
        start.generator_fingerprint,
    )
    with torch.no_grad():
        protected = generator.synthesize(final).detach()
        cos = {m.model_id: float((m.embed_pixels(protected.pixels) * t).sum())
               for m, t in zip(ensemble, t_embeds)}
    if trace:
        log.debug("protect: L_total %.5f -> %.5f", trace[0][3], trace[-1][3])
    return ProtectResult(protected, final, trace, cos, inversion)
