"""Style-based generator backends and the W / W+ / F latent taxonomy."""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass
from typing import Callable, Mapping, Protocol

import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import IncompatibleLatentError, UnsupportedCombinationError, ValidationError
from .types import FaceImage, LatentCode, LatentSpace, SearchMode


class GeneratorBackend(Protocol):
    layer_count: int
    style_dim: int
    output_size: tuple[int, int]
    fingerprint: str
    split_layer: int

    def layout(self, space: LatentSpace) -> dict[str, tuple[int, ...]]: ...

    def render(self, components: Mapping[str, torch.Tensor], space: LatentSpace) -> torch.Tensor: ...

    def synthesize(self, code: LatentCode) -> FaceImage: ...

    def init_latent(self, space: LatentSpace, seed: int) -> LatentCode: ...

    def encode(self, image: FaceImage, space: LatentSpace) -> LatentCode: ...


@dataclass(frozen=True)
class ComponentMask:
    optimizable: dict[str, bool]

    def __post_init__(self):
        if not any(self.optimizable.values()):
            raise ValidationError("component mask freezes every component")

    def __getitem__(self, name: str) -> bool:
        return self.optimizable[name]

    @property
    def active(self) -> list[str]:
        return [k for k, v in self.optimizable.items() if v]

    @property
    def frozen(self) -> list[str]:
        return [k for k, v in self.optimizable.items() if not v]


def style_names(first: int, last: int) -> list[str]:
    return [f"style_{j}" for j in range(first, last + 1)]


def lals_boundary(layer_count: int) -> int:
    return math.ceil(layer_count / 2)


def component_mask(code: LatentCode, mode: SearchMode | str, layer_count: int | None = None) -> ComponentMask:
    """Which latent components the adversarial search may update.

    GALS frees everything. LALS only frees the deep per-layer styles
    ``style_j`` with ``j > ceil(L / 2)``; W has no per-layer styles, so LALS
    is rejected there.
    """
    mode = SearchMode.parse(mode)
    if mode is SearchMode.GALS:
        return ComponentMask({name: True for name in code.names})
    if code.space is LatentSpace.W:
        raise UnsupportedCombinationError("LALS needs a layer-wise latent space; W has a single style")
    if layer_count is None:
        layer_count = max(int(n.split("_")[1]) for n in code.names if n.startswith("style_"))
    boundary = lals_boundary(layer_count)
    mask = {}
    for name in code.names:
        mask[name] = name.startswith("style_") and int(name.split("_")[1]) > boundary
    return ComponentMask(mask)


class _StyleStage(nn.Module):
    """3x3 conv with style-dependent channel scale and bias."""

    def __init__(self, c_in: int, c_out: int, style_dim: int, upsample: bool):
        super().__init__()
        self.upsample = upsample
        self.conv = nn.Conv2d(c_in, c_out, 3, padding=1, bias=False)
        self.to_scale = nn.Linear(style_dim, c_out)
        self.to_bias = nn.Linear(style_dim, c_out)

    def forward(self, x: torch.Tensor, style: torch.Tensor) -> torch.Tensor:
        if self.upsample:
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
        y = self.conv(x)
        scale = 1.0 + self.to_scale(style)[:, :, None, None]
        bias = self.to_bias(style)[:, :, None, None]
        return torch.tanh(y * scale + bias)


class ToyGenerator(nn.Module):
    """Small frozen style-modulated generator, 64x64 RGB output.

    Eight stages starting from a 4x4 constant; every second stage doubles the
    resolution (4 -> 64 needs four doublings). The F space is the activation
    after ``split_layer`` plus the remaining per-stage styles.
    """

    def __init__(
        self,
        seed: int = 0,
        layer_count: int = 8,
        style_dim: int = 64,
        channels: int = 32,
        split_layer: int | None = None,
        modulation_gain: float = 1.0,
        encoder_steps: int = 200,
    ):
        super().__init__()
        if layer_count < 2 or layer_count % 2:
            raise ValidationError("toy generator needs an even layer count >= 2")
        self.layer_count = layer_count
        self.style_dim = style_dim
        self.channels = channels
        self.split_layer = split_layer if split_layer is not None else layer_count // 2
        if not 1 <= self.split_layer < layer_count:
            raise ValidationError("split layer must satisfy 1 <= k < L")
        self.seed = seed
        self.modulation_gain = modulation_gain
        self.encoder_steps = encoder_steps
        side = 4 * 2 ** (layer_count // 2)
        self.output_size = (side, side)

        g = torch.Generator().manual_seed(seed)
        self.const = nn.Parameter(torch.randn(1, channels, 4, 4, generator=g))
        self.stages = nn.ModuleList(
            _StyleStage(channels, channels, style_dim, upsample=(i % 2 == 1))
            for i in range(layer_count)
        )
        self.to_rgb = nn.Conv2d(channels, 3, 1)
        with torch.no_grad():
            for stage in self.stages:
                stage.conv.weight.normal_(0.0, 1.6 / math.sqrt(channels * 9), generator=g)
                stage.to_scale.weight.normal_(0.0, modulation_gain * 0.5 / math.sqrt(style_dim), generator=g)
                stage.to_scale.bias.zero_()
                stage.to_bias.weight.normal_(0.0, modulation_gain * 0.5 / math.sqrt(style_dim), generator=g)
                stage.to_bias.bias.normal_(0.0, 0.1, generator=g)
            self.to_rgb.weight.normal_(0.0, 2.0 / math.sqrt(channels), generator=g)
            self.to_rgb.bias.zero_()
        self.requires_grad_(False)
        self.eval()
        self.fingerprint = self._compute_fingerprint()
        self.encoder: Callable[[FaceImage, LatentSpace], LatentCode] | None = None
        # pixel MSE the warm-start encoder reaches on generator renders (measured)
        self.encoder_tolerance = {LatentSpace.F: 1e-2, LatentSpace.WPLUS: 3e-2, LatentSpace.W: 3e-2}

    def _compute_fingerprint(self) -> str:
        h = hashlib.sha256()
        for name, t in sorted(self.state_dict().items()):
            h.update(name.encode())
            h.update(t.detach().to(torch.float32).contiguous().numpy().tobytes())
        return f"toy-stylegan-L{self.layer_count}-d{self.style_dim}-{h.hexdigest()[:16]}"

    def as_dtype(self, dtype: torch.dtype) -> "ToyGenerator":
        """Copy in another precision; keeps the fingerprint so codes stay compatible."""
        clone = ToyGenerator(self.seed, self.layer_count, self.style_dim, self.channels,
                             self.split_layer, self.modulation_gain, self.encoder_steps)
        clone.load_state_dict(self.state_dict())
        clone.to(dtype)
        clone.fingerprint = self.fingerprint
        clone.encoder = self.encoder
        return clone

    @property
    def dtype(self) -> torch.dtype:
        return self.const.dtype

    @property
    def feature_shape(self) -> tuple[int, int, int]:
        side = 4 * 2 ** (self.split_layer // 2)
        return (self.channels, side, side)

    def layout(self, space: LatentSpace | str) -> dict[str, tuple[int, ...]]:
        space = LatentSpace.parse(space)
        d = (self.style_dim,)
        if space is LatentSpace.W:
            return {"style": d}
        if space is LatentSpace.WPLUS:
            return {n: d for n in style_names(1, self.layer_count)}
        out: dict[str, tuple[int, ...]] = {"feature": self.feature_shape}
        out.update({n: d for n in style_names(self.split_layer + 1, self.layer_count)})
        return out

    def check(self, code: LatentCode) -> None:
        if code.generator_fingerprint != self.fingerprint:
            raise IncompatibleLatentError(
                f"code belongs to generator {code.generator_fingerprint!r}, not {self.fingerprint!r}"
            )
        if code.layout() != self.layout(code.space):
            raise IncompatibleLatentError(
                f"layout {code.layout()} does not match {code.space.value} layout {self.layout(code.space)}"
            )

    def _run(self, x: torch.Tensor, styles: list[torch.Tensor], first: int) -> torch.Tensor:
        for i, style in zip(range(first, self.layer_count), styles):
            x = self.stages[i](x, style)
        return x

    def render(self, components: Mapping[str, torch.Tensor], space: LatentSpace | str) -> torch.Tensor:
        """Differentiable (H, W, 3) image, or (B, H, W, 3) for batched components."""
        space = LatentSpace.parse(space)
        if "feature" in components:
            batched = components["feature"].ndim == 4
        else:
            batched = next(iter(components.values())).ndim == 2
        comps = {k: (v if batched else v.unsqueeze(0)).to(self.dtype) for k, v in components.items()}
        bsz = next(iter(comps.values())).shape[0]
        if space is LatentSpace.W:
            styles = [comps["style"]] * self.layer_count
            x = self._run(self.const.expand(bsz, -1, -1, -1), styles, 0)
        elif space is LatentSpace.WPLUS:
            styles = [comps[n] for n in style_names(1, self.layer_count)]
            x = self._run(self.const.expand(bsz, -1, -1, -1), styles, 0)
        else:
            styles = [comps[n] for n in style_names(self.split_layer + 1, self.layer_count)]
            x = self._run(comps["feature"], styles, self.split_layer)
        img = torch.sigmoid(self.to_rgb(x)).permute(0, 2, 3, 1)
        return img if batched else img[0]

    def features_at_split(self, styles: torch.Tensor) -> torch.Tensor:
        """Activation after the split layer for (B, L, d) per-layer styles."""
        x = self.const.expand(styles.shape[0], -1, -1, -1)
        return self._run(x, [styles[:, i] for i in range(self.split_layer)], 0)

    def synthesize(self, code: LatentCode) -> FaceImage:
        self.check(code)
        return FaceImage(self.render(code.components, code.space).clamp(0.0, 1.0))

    def init_latent(self, space: LatentSpace | str, seed: int) -> LatentCode:
        space = LatentSpace.parse(space)
        g = torch.Generator().manual_seed(int(seed))
        comps = {
            name: torch.randn(shape, generator=g, dtype=torch.float32)
            for name, shape in self.layout(space).items()
        }
        return LatentCode(space, comps, self.fingerprint)

    def encode(self, image: FaceImage, space: LatentSpace | str) -> LatentCode:
        space = LatentSpace.parse(space)
        if image.size != self.output_size:
            raise ValidationError(f"encoder expects {self.output_size} images, got {image.size}")
        if self.encoder is not None:
            code = self.encoder(image, space)
            self.check(code)
            return code
        from .inversion import ToyPerceptual, warm_start

        perceptual = ToyPerceptual().to(self.dtype)
        return warm_start(self, image, space, perceptual, steps=self.encoder_steps)


def synthesize(generator: GeneratorBackend, code: LatentCode) -> FaceImage:
    return generator.synthesize(code)


def init_latent(generator: GeneratorBackend, space: LatentSpace | str, seed: int) -> LatentCode:
    return generator.init_latent(space, seed)


def encode(generator: GeneratorBackend, image: FaceImage, space: LatentSpace | str) -> LatentCode:
    return generator.encode(image, space)
