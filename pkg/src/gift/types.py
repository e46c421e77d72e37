"""Value types for images, latent codes, embeddings and semantic maps."""

from __future__ import annotations

import enum
import json
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import numpy as np
import torch
from PIL import Image

from . import __version__
from .errors import IncompatibleLatentError, LatentFormatError, ValidationError

MIN_SIDE = 16


class LatentSpace(str, enum.Enum):
    W = "W"
    WPLUS = "WPLUS"
    F = "F"

    @classmethod
    def parse(cls, value: "str | LatentSpace") -> "LatentSpace":
        if isinstance(value, cls):
            return value
        key = str(value).upper().replace("+", "PLUS")
        try:
            return cls[key]
        except KeyError:
            raise ValidationError(f"unknown latent space {value!r}") from None


class SearchMode(str, enum.Enum):
    GALS = "GALS"
    LALS = "LALS"

    @classmethod
    def parse(cls, value: "str | SearchMode") -> "SearchMode":
        if isinstance(value, cls):
            return value
        try:
            return cls[str(value).upper()]
        except KeyError:
            raise ValidationError(f"unknown search mode {value!r}") from None


def _pixels_of(image) -> torch.Tensor:
    return image.pixels if isinstance(image, FaceImage) else torch.as_tensor(image)


def _check_shape(t: torch.Tensor) -> None:
    if t.ndim != 3 or t.shape[-1] != 3:
        raise ValidationError(f"expected an (H, W, 3) image, got shape {tuple(t.shape)}")
    if t.shape[0] < MIN_SIDE or t.shape[1] < MIN_SIDE:
        raise ValidationError(f"image sides must be >= {MIN_SIDE}, got {tuple(t.shape[:2])}")


@dataclass(frozen=True, eq=False)
class FaceImage:
    """RGB image, channel-last, float values in [0, 1].

    The tensor may carry autograd history; validation only looks at values.
    """

    pixels: torch.Tensor

    def __post_init__(self):
        t = self.pixels
        if not isinstance(t, torch.Tensor):
            t = torch.as_tensor(np.asarray(t, dtype=np.float32))
            object.__setattr__(self, "pixels", t)
        _check_shape(t)
        v = t.detach()
        if not torch.isfinite(v).all():
            raise ValidationError("image contains non-finite values")
        if v.min() < 0 or v.max() > 1:
            raise ValidationError("image values outside [0, 1]; use clamp()")

    @property
    def height(self) -> int:
        return int(self.pixels.shape[0])

    @property
    def width(self) -> int:
        return int(self.pixels.shape[1])

    @property
    def size(self) -> tuple[int, int]:
        return self.height, self.width

    def numpy(self) -> np.ndarray:
        return self.pixels.detach().cpu().numpy()

    def detach(self) -> "FaceImage":
        return FaceImage(self.pixels.detach())

    def equal(self, other: "FaceImage") -> bool:
        return torch.equal(self.pixels.detach(), other.pixels.detach())


def clamp(image) -> FaceImage:
    t = _pixels_of(image)
    if not isinstance(t, torch.Tensor):
        t = torch.as_tensor(t)
    _check_shape(t)
    if not torch.isfinite(t.detach()).all():
        raise ValidationError("cannot clamp non-finite values")
    return FaceImage(t.clamp(0.0, 1.0))


def load_png(path: str | os.PathLike) -> FaceImage:
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0
    return FaceImage(torch.from_numpy(arr.copy()))


def to_uint8(image) -> np.ndarray:
    arr = _pixels_of(image).detach().cpu().double().numpy()
    return np.round(np.clip(arr, 0.0, 1.0) * 255.0).astype(np.uint8)


def save_png(image, path: str | os.PathLike) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    # no timestamp/text chunks, so encoding is byte-deterministic
    Image.fromarray(to_uint8(image), mode="RGB").save(path, format="PNG", optimize=False)


def quantize(image) -> FaceImage:
    """Round-trip through the 8-bit file domain without touching disk."""
    return FaceImage(torch.from_numpy(to_uint8(image).astype(np.float32) / 255.0))


@dataclass(frozen=True, eq=False)
class Embedding:
    values: torch.Tensor

    def __post_init__(self):
        v = self.values.detach()
        if v.ndim != 1:
            raise ValidationError("embedding must be a vector")
        norm = float(torch.linalg.vector_norm(v.double()))
        if abs(norm - 1.0) > 1e-6:
            raise ValidationError(f"embedding not unit norm (|e| = {norm!r})")

    @property
    def dim(self) -> int:
        return int(self.values.shape[0])


@dataclass(frozen=True, eq=False)
class SemanticLogits:
    values: torch.Tensor  # (H, W, C)

    def __post_init__(self):
        if self.values.ndim != 3:
            raise ValidationError("semantic logits must be (H, W, C)")
        if not torch.isfinite(self.values.detach()).all():
            raise ValidationError("semantic logits contain non-finite values")

    @property
    def class_count(self) -> int:
        return int(self.values.shape[-1])

    def labels(self) -> "SemanticMap":
        # torch.argmax returns the first maximal index, i.e. lowest class on ties
        return SemanticMap(torch.argmax(self.values.detach(), dim=-1), self.class_count)


@dataclass(frozen=True, eq=False)
class SemanticMap:
    labels: torch.Tensor  # (H, W) int64
    class_count: int

    def __post_init__(self):
        if self.labels.ndim != 2:
            raise ValidationError("semantic map must be (H, W)")
        if self.labels.dtype not in (torch.int64, torch.int32, torch.int16, torch.uint8):
            raise ValidationError("semantic labels must be integers")
        if self.labels.numel() and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise ValidationError("semantic label out of range")

    def agreement(self, other: "SemanticMap") -> float:
        if self.labels.shape != other.labels.shape:
            raise ValidationError("semantic maps differ in shape")
        return float((self.labels == other.labels).double().mean())


@dataclass(frozen=True, eq=False)
class LatentCode:
    """Generator input in one of the W / W+ / F parameterizations.

    ``components`` is ordered; names and shapes follow the generator layout.
    """

    space: LatentSpace
    components: Mapping[str, torch.Tensor]
    generator_fingerprint: str

    def __post_init__(self):
        object.__setattr__(self, "space", LatentSpace.parse(self.space))
        object.__setattr__(self, "components", dict(self.components))
        for name, t in self.components.items():
            if not torch.isfinite(t.detach()).all():
                raise ValidationError(f"latent component {name!r} has non-finite values")

    @property
    def names(self) -> list[str]:
        return list(self.components)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.components[name]

    def layout(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self.components.items()}

    def replace(self, **components: torch.Tensor) -> "LatentCode":
        new = dict(self.components)
        new.update(components)
        return LatentCode(self.space, new, self.generator_fingerprint)

    def detached(self, dtype: torch.dtype | None = None) -> "LatentCode":
        comps = {
            k: v.detach().clone() if dtype is None else v.detach().to(dtype).clone()
            for k, v in self.components.items()
        }
        return LatentCode(self.space, comps, self.generator_fingerprint)

    def equal(self, other: "LatentCode") -> bool:
        return (
            self.space == other.space
            and self.generator_fingerprint == other.generator_fingerprint
            and self.names == other.names
            and all(
                v.dtype == other[k].dtype and torch.equal(v.detach(), other[k].detach())
                for k, v in self.components.items()
            )
        )


def serialize_latent(code: LatentCode, path: str | os.PathLike) -> None:
    """Write ``meta.json`` plus one little-endian float32 ``.bin`` per component."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for name, t in code.components.items():
        arr = t.detach().cpu().numpy().astype("<f4", copy=False)
        fname = f"{name}.bin"
        (root / fname).write_bytes(arr.tobytes(order="C"))
        entries.append({"name": name, "shape": list(arr.shape), "file": fname})
    meta = {
        "space": code.space.value,
        "dtype": "f32",
        "byte_order": "little",
        "generator_fingerprint": code.generator_fingerprint,
        "toolkit_version": __version__,
        "components": entries,
    }
    (root / "meta.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def deserialize_latent(path: str | os.PathLike, expected_fingerprint: str | None = None) -> LatentCode:
    root = Path(path)
    try:
        meta = json.loads((root / "meta.json").read_text())
    except FileNotFoundError:
        raise LatentFormatError(f"{root}: missing meta.json") from None
    except json.JSONDecodeError as exc:
        raise LatentFormatError(f"{root}: unreadable meta.json ({exc})") from None
    if meta.get("dtype") != "f32" or meta.get("byte_order") != "little":
        raise LatentFormatError(f"{root}: unsupported dtype/byte order")
    fingerprint = meta["generator_fingerprint"]
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise IncompatibleLatentError(
            f"latent was produced for generator {fingerprint!r}, not {expected_fingerprint!r}"
        )
    comps: dict[str, torch.Tensor] = {}
    for entry in meta["components"]:
        shape = tuple(entry["shape"])
        raw = (root / entry["file"]).read_bytes()
        expected = 4 * int(np.prod(shape, dtype=np.int64))
        if len(raw) != expected:
            raise LatentFormatError(
                f"{root / entry['file']}: {len(raw)} bytes, expected {expected}"
            )
        arr = np.frombuffer(raw, dtype="<f4").reshape(shape).astype(np.float32)
        comps[entry["name"]] = torch.from_numpy(arr.copy())
    return LatentCode(LatentSpace.parse(meta["space"]), comps, fingerprint)


@dataclass(frozen=True)
class OptimConfig:
    t1_steps: int = 1200
    t1_lr: float = 0.01
    t2_steps: int = 50
    t2_lr: float = 0.002
    alpha: float = 10.0
    lambda_adv: float = 1.0
    lambda_sem: float = 0.01
    diversify_prob: float = 0.5
    search_mode: SearchMode = SearchMode.GALS
    space: LatentSpace = LatentSpace.F
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "search_mode", SearchMode.parse(self.search_mode))
        object.__setattr__(self, "space", LatentSpace.parse(self.space))
        if self.t1_steps < 0 or self.t2_steps < 0:
            raise ValidationError("step counts must be >= 0")
        if self.t1_lr <= 0 or self.t2_lr <= 0:
            raise ValidationError("learning rates must be > 0")
        if not 0.0 <= self.diversify_prob <= 1.0:
            raise ValidationError("diversify_prob must lie in [0, 1]")
        if self.lambda_adv < 0 or self.lambda_sem < 0 or self.alpha < 0:
            raise ValidationError("loss weights must be >= 0")
        if self.seed < 0:
            raise ValidationError("seed must be unsigned")

    def with_(self, **changes) -> "OptimConfig":
        from dataclasses import replace

        return replace(self, **changes)

    def to_dict(self) -> dict:
        from dataclasses import asdict

        d = asdict(self)
        d["search_mode"] = self.search_mode.value
        d["space"] = self.space.value
        return d
