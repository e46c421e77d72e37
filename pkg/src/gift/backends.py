"""Build backends from config blocks.

``kind: toy`` blocks construct the seeded toy models. ``kind: checkpoint``
blocks name a factory ``"package.module:callable"`` that receives the
block's remaining keys (checkpoint paths etc.) and must return an object
honoring the same protocol as the toy backend it replaces.
"""

from __future__ import annotations

import hashlib
import importlib
import json
import logging
from pathlib import Path

from .errors import ConfigurationError
from .fr import (
    ToyFRRecipe,
    calibrate_toy_threshold,
    fit_toy_fr,
    load_toy_fr,
    save_toy_fr,
)
from .generator import ToyGenerator
from .inversion import ToyPerceptual
from .segmentation import ToySegmenter

log = logging.getLogger(__name__)


def load_factory(spec: str):
    module, _, attr = spec.partition(":")
    if not module or not attr:
        raise ConfigurationError(f"factory must look like 'package.module:callable', got {spec!r}")
    try:
        return getattr(importlib.import_module(module), attr)
    except (ImportError, AttributeError) as exc:
        raise ConfigurationError(f"cannot import factory {spec!r}: {exc}") from None


def _checkpoint(block: dict, what: str):
    if "factory" not in block:
        raise ConfigurationError(f"{what}: checkpoint backends need a 'factory' entry")
    kwargs = {k: v for k, v in block.items() if k not in ("kind", "factory")}
    return load_factory(block["factory"])(**kwargs)


def build_generator(block: dict | None):
    block = dict(block or {"kind": "toy"})
    kind = block.pop("kind", "toy")
    if kind == "toy":
        return ToyGenerator(**block)
    if kind == "checkpoint":
        return _checkpoint(block, "generator")
    raise ConfigurationError(f"unknown generator kind {kind!r}")


def build_segmenter(block: dict | None):
    block = dict(block or {"kind": "toy"})
    kind = block.pop("kind", "toy")
    if kind == "toy":
        return ToySegmenter(**block)
    if kind == "checkpoint":
        return _checkpoint(block, "segmentation")
    raise ConfigurationError(f"unknown segmentation kind {kind!r}")


def build_perceptual(block: dict | None):
    block = dict(block or {"kind": "toy"})
    kind = block.pop("kind", "toy")
    if kind == "toy":
        return ToyPerceptual(**block)
    if kind == "checkpoint":
        return _checkpoint(block, "perceptual")
    raise ConfigurationError(f"unknown perceptual kind {kind!r}")


def build_fr(model_id: str, block: dict, generator, cache_dir: str | Path | None, far: float = 0.01):
    """Return ``(backend, tau_or_None)``; toy models come with a calibrated threshold."""
    block = dict(block)
    kind = block.pop("kind", "toy")
    if kind == "checkpoint":
        return _checkpoint(block, f"FR model {model_id}"), None
    if kind != "toy":
        raise ConfigurationError(f"unknown FR kind {kind!r} for {model_id}")
    seed = int(block.get("seed", 0))
    width = int(block.get("width", 16))
    recipe = ToyFRRecipe(**block.get("recipe", {}))
    key = json.dumps({"gen": generator.fingerprint, "seed": seed, "width": width, "far": far,
                      "recipe": recipe.__dict__, "id": model_id}, sort_keys=True)
    digest = hashlib.sha256(key.encode()).hexdigest()[:12]
    path = Path(cache_dir) / f"{model_id}-{digest}.pt" if cache_dir else None
    tau_path = path.with_suffix(".tau.json") if path else None
    if path is not None and path.exists() and tau_path.exists():
        model = load_toy_fr(path)
        tau = json.loads(tau_path.read_text())["tau"]
        return model, tau
    model = fit_toy_fr(generator, seed, width, recipe, model_id=model_id)
    tau = calibrate_toy_threshold(model, generator, far)
    if path is not None:
        path.parent.mkdir(parents=True, exist_ok=True)
        save_toy_fr(model, path)
        tau_path.write_text(json.dumps({"tau": tau, "far": far}) + "\n")
    log.info("toy FR %s ready (tau %.4f at FAR %g)", model_id, tau, far)
    return model, tau
