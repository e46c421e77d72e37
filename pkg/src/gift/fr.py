"""Face-recognition embedders, cosine scoring, thresholds and surrogate ensembles."""

from __future__ import annotations

import json
import logging
import math
import threading
from dataclasses import dataclass
from importlib import resources
from pathlib import Path
from typing import Callable, Iterable, Protocol, Sequence

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .errors import ConfigurationError, TrainingFailure, ValidationError
from .types import Embedding, FaceImage

log = logging.getLogger(__name__)


class FRBackend(Protocol):
    model_id: str
    embed_dim: int
    differentiable: bool

    def embed_pixels(self, pixels: torch.Tensor) -> torch.Tensor: ...

    def embed(self, image: FaceImage) -> Embedding: ...


class QueryAudit:
    """Counts embedding queries and forwards them to registered hooks."""

    def __init__(self):
        self._lock = threading.Lock()
        self.count = 0
        self.hooks: list[Callable[[str, int], None]] = []

    def record(self, model_id: str, batch: int) -> None:
        with self._lock:
            self.count += batch
        for hook in list(self.hooks):
            hook(model_id, batch)


def resize_bilinear(pixels: torch.Tensor, size: tuple[int, int]) -> torch.Tensor:
    """Differentiable bilinear resize of channel-last images."""
    x = pixels if pixels.ndim == 4 else pixels.unsqueeze(0)
    if tuple(x.shape[1:3]) == tuple(size):
        return pixels
    y = F.interpolate(x.permute(0, 3, 1, 2), size=size, mode="bilinear", align_corners=False)
    y = y.permute(0, 2, 3, 1)
    return y if pixels.ndim == 4 else y[0]


class ToyFR(nn.Module):
    """Three-stage conv embedder with an L2-normalized output."""

    differentiable = True

    def __init__(self, model_id: str = "toy", width: int = 16, embed_dim: int = 64,
                 input_size: int = 32, seed: int = 0):
        super().__init__()
        self.model_id = model_id
        self.width = width
        self.embed_dim = embed_dim
        self.input_size = (input_size, input_size)
        self.seed = seed
        w = width
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.body = nn.Sequential(
                nn.Conv2d(3, w, 3, padding=1), nn.SiLU(),
                nn.Conv2d(w, 2 * w, 3, stride=2, padding=1), nn.SiLU(),
                nn.Conv2d(2 * w, 4 * w, 3, stride=2, padding=1), nn.SiLU(),
            )
            self.head = nn.Linear(4 * w * 2, embed_dim)
        self.requires_grad_(False)
        self.eval()
        self.audit = QueryAudit()

    def features(self, pixels: torch.Tensor) -> torch.Tensor:
        x = resize_bilinear(pixels, self.input_size)
        x = (x.permute(0, 3, 1, 2).to(self.head.weight.dtype) - 0.5) * 2.0
        h = self.body(x)
        # log-sum-exp is a smooth max, so gradients have no pooling kinks
        soft_max = torch.logsumexp(8.0 * h.flatten(2), dim=2) / 8.0
        pooled = torch.cat([h.mean(dim=(2, 3)), soft_max], dim=1)
        return self.head(pooled)

    def embed_pixels(self, pixels: torch.Tensor) -> torch.Tensor:
        """Unit-norm embeddings for (B, H, W, 3) or (H, W, 3) pixels; keeps autograd."""
        batched = pixels.ndim == 4
        x = pixels if batched else pixels.unsqueeze(0)
        self.audit.record(self.model_id, x.shape[0])
        e = F.normalize(self.features(x), dim=1)
        return e if batched else e[0]

    def embed(self, image: FaceImage | torch.Tensor) -> Embedding:
        pixels = image.pixels if isinstance(image, FaceImage) else image
        if pixels.ndim != 3:
            raise ValidationError("embed takes a single (H, W, 3) image")
        if min(pixels.shape[:2]) < 16:
            raise ValidationError("image too small for the embedder")
        return Embedding(self.embed_pixels(pixels))

    def as_dtype(self, dtype: torch.dtype) -> "ToyFR":
        clone = ToyFR(self.model_id, self.width, self.embed_dim, self.input_size[0], self.seed)
        clone.load_state_dict(self.state_dict())
        return clone.to(dtype)


def cosine_similarity(e1, e2) -> float:
    a = e1.values if isinstance(e1, Embedding) else torch.as_tensor(e1)
    b = e2.values if isinstance(e2, Embedding) else torch.as_tensor(e2)
    if a.shape != b.shape:
        raise ValidationError(f"embedding dims differ: {tuple(a.shape)} vs {tuple(b.shape)}")
    return float(torch.dot(a.detach().double(), b.detach().double()))


def cosine_distance(e1, e2) -> float:
    return min(2.0, max(0.0, 1.0 - cosine_similarity(e1, e2)))


def verify(e1, e2, tau: float) -> bool:
    return cosine_similarity(e1, e2) >= tau


def calibrate_threshold(impostor_scores: Iterable[float], far: float) -> float:
    """Smallest threshold whose false-accept rate on ``impostor_scores`` is <= far."""
    s = np.sort(np.asarray(list(impostor_scores), dtype=np.float64))[::-1]
    if s.size == 0:
        raise ValidationError("no impostor scores")
    allowed = int(math.floor(far * s.size))
    if allowed >= s.size:
        return float(s[-1])
    # accept the ``allowed`` highest scores, reject the next one
    return float(np.nextafter(s[allowed], np.inf))


class ThresholdRegistry:
    """(model_id, far) -> tau lookup backed by ``thresholds.json``."""

    def __init__(self, table: dict[str, dict[str, float]] | None = None):
        self._table: dict[str, dict[float, float]] = {}
        for model_id, entries in (table or {}).items():
            for far, tau in entries.items():
                self.register(model_id, float(far), float(tau))

    @classmethod
    def default(cls) -> "ThresholdRegistry":
        text = resources.files("gift.data").joinpath("thresholds.json").read_text()
        return cls(json.loads(text))

    @classmethod
    def load(cls, path: str | Path) -> "ThresholdRegistry":
        return cls(json.loads(Path(path).read_text()))

    def register(self, model_id: str, far: float, tau: float) -> None:
        if not (math.isfinite(tau) and -1.0 < tau < 1.0):
            raise ValidationError(f"threshold {tau!r} for {model_id} outside (-1, 1)")
        self._table.setdefault(model_id, {})[float(far)] = float(tau)

    def lookup(self, model_id: str, far: float = 0.01) -> float:
        try:
            return self._table[model_id][float(far)]
        except KeyError:
            raise KeyError(f"no threshold registered for {model_id!r} at FAR {far}") from None

    def to_dict(self) -> dict[str, dict[str, float]]:
        return {m: {repr(f): t for f, t in sorted(e.items())} for m, e in sorted(self._table.items())}

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


@dataclass(frozen=True)
class Ensemble:
    members: tuple

    def __init__(self, members: Sequence):
        object.__setattr__(self, "members", tuple(members))
        if not self.members:
            raise ConfigurationError("ensemble needs at least one surrogate")
        for m in self.members:
            if not getattr(m, "differentiable", False):
                raise ConfigurationError(f"surrogate {m.model_id!r} is not differentiable")

    def __len__(self):
        return len(self.members)

    def __iter__(self):
        return iter(self.members)

    @property
    def model_ids(self) -> list[str]:
        return [m.model_id for m in self.members]


@dataclass(frozen=True)
class ToyFRRecipe:
    """Pinned dataset and training budget for toy embedders."""

    identity_count: int = 32
    renders_per_identity: int = 64
    holdout_per_identity: int = 16
    jitter: float = 0.3
    dataset_seed: int = 2024
    epochs: int = 20
    batch_size: int = 64
    lr: float = 3e-3
    scale: float = 16.0
    min_accuracy: float = 0.90


def _render_dataset(generator, recipe: ToyFRRecipe):
    from .toydata import ToyIdentities

    ids = ToyIdentities(recipe.identity_count, recipe.jitter, recipe.dataset_seed)
    xs, ys = [], []
    for i in range(recipe.identity_count):
        xs.append(ids.render_batch(generator, i, 0, recipe.renders_per_identity))
        ys.append(torch.full((recipe.renders_per_identity,), i, dtype=torch.long))
    return torch.stack(xs), torch.stack(ys)


_DATASET_CACHE: dict = {}


def fit_toy_fr(generator, seed: int, width: int = 16, recipe: ToyFRRecipe | None = None,
               model_id: str | None = None) -> ToyFR:
    """Train a toy embedder with a normalized-softmax loss on rendered identities."""
    recipe = recipe or ToyFRRecipe()
    key = (generator.fingerprint, recipe.identity_count, recipe.renders_per_identity,
           recipe.jitter, recipe.dataset_seed)
    if key not in _DATASET_CACHE:
        _DATASET_CACHE[key] = _render_dataset(generator, recipe)
    xs, ys = _DATASET_CACHE[key]
    n_train = recipe.renders_per_identity - recipe.holdout_per_identity
    x_train = xs[:, :n_train].reshape(-1, *xs.shape[2:]).float()
    y_train = ys[:, :n_train].reshape(-1)
    x_test = xs[:, n_train:].reshape(-1, *xs.shape[2:]).float()
    y_test = ys[:, n_train:].reshape(-1)

    model = ToyFR(model_id or f"toy-w{width}-s{seed}", width=width, seed=seed)
    g = torch.Generator().manual_seed(seed)
    classes = nn.Parameter(torch.randn(recipe.identity_count, model.embed_dim, generator=g) * 0.1)
    model.requires_grad_(True)
    opt = torch.optim.Adam(list(model.parameters()) + [classes], lr=recipe.lr)
    model.train()
    for _ in range(recipe.epochs):
        perm = torch.randperm(len(x_train), generator=g)
        for start in range(0, len(perm), recipe.batch_size):
            idx = perm[start:start + recipe.batch_size]
            e = F.normalize(model.features(x_train[idx]), dim=1)
            logits = recipe.scale * e @ F.normalize(classes, dim=1).T
            loss = F.cross_entropy(logits, y_train[idx])
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
    model.eval()
    model.requires_grad_(False)
    with torch.no_grad():
        e = F.normalize(model.features(x_test), dim=1)
        pred = (e @ F.normalize(classes, dim=1).T).argmax(dim=1)
    acc = float((pred == y_test).double().mean())
    model.holdout_accuracy = acc
    log.info("toy FR %s: held-out accuracy %.3f", model.model_id, acc)
    if acc < recipe.min_accuracy:
        raise TrainingFailure(f"{model.model_id}: held-out accuracy {acc:.3f} < {recipe.min_accuracy}")
    model.audit = QueryAudit()
    return model


def save_toy_fr(model: ToyFR, path: str | Path) -> None:
    meta = {"model_id": model.model_id, "width": model.width, "embed_dim": model.embed_dim,
            "input_size": model.input_size[0], "seed": model.seed,
            "holdout_accuracy": getattr(model, "holdout_accuracy", None)}
    torch.save({"meta": meta, "state": model.state_dict()}, path)


def load_toy_fr(path: str | Path) -> ToyFR:
    blob = torch.load(path, weights_only=True)
    meta = blob["meta"]
    model = ToyFR(meta["model_id"], meta["width"], meta["embed_dim"], meta["input_size"], meta["seed"])
    model.load_state_dict(blob["state"])
    model.holdout_accuracy = meta.get("holdout_accuracy")
    return model


def toy_impostor_scores(model, generator, identities=None, renders: int = 4, render_seed: int = 500) -> np.ndarray:
    """Cosine scores of all cross-identity pairs among fresh toy renders."""
    from .toydata import ToyIdentities

    identities = identities or ToyIdentities()
    with torch.no_grad():
        embeds = [model.embed_pixels(identities.render_batch(generator, i, render_seed, renders))
                  for i in range(identities.identity_count)]
    e = torch.cat(embeds).double()
    labels = torch.arange(identities.identity_count).repeat_interleave(renders)
    sims = e @ e.T
    cross = labels[:, None] != labels[None, :]
    upper = torch.triu(torch.ones_like(sims, dtype=torch.bool), diagonal=1)
    return sims[cross & upper].numpy()


def calibrate_toy_threshold(model, generator, far: float = 0.01, identities=None) -> float:
    return calibrate_threshold(toy_impostor_scores(model, generator, identities), far)
