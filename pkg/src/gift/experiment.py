"""Config-driven experiment runs: ingest, protect, evaluate, report."""

from __future__ import annotations

import copy
import csv
import json
import logging
import math
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Callable

import numpy as np
import torch
import yaml

from . import __version__
from .backends import build_fr, build_generator, build_perceptual, build_segmenter
from .errors import ConfigurationError, GiftError, ValidationError
from .fr import Ensemble, ThresholdRegistry
from .gals import DiversifyParams, protect
from .metrics import (
    GalleryEntry,
    VerificationRecord,
    fid,
    psnr,
    psr_gain,
    psr_verification,
    rank_n_hit,
    ssim,
)
from .types import FaceImage, OptimConfig, deserialize_latent, load_png, save_png, serialize_latent

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_PARTIAL = 3


# ---------------------------------------------------------------- config

def default_config() -> dict:
    text = resources.files("gift.data").joinpath("default_config.yaml").read_text()
    return yaml.safe_load(text)


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict) and k != "models":
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b.c=value`` with the value parsed as YAML."""
    key, sep, raw = item.partition("=")
    if not sep or not key:
        raise ConfigurationError(f"override must look like key.path=value, got {item!r}")
    return key.split("."), yaml.safe_load(raw)


def apply_overrides(cfg: dict, overrides: list[str]) -> dict:
    cfg = copy.deepcopy(cfg)
    for item in overrides or []:
        path, value = parse_override(item)
        node = cfg
        for p in path[:-1]:
            node = node.setdefault(p, {})
        node[path[-1]] = value
    return cfg


def load_config(path: str | Path | None, overrides: list[str] | None = None) -> dict:
    cfg = default_config()
    if path:
        try:
            user = yaml.safe_load(Path(path).read_text()) or {}
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigurationError(f"cannot read config {path}: {exc}") from None
        cfg = deep_merge(cfg, user)
    return apply_overrides(cfg, overrides or [])


@dataclass
class ExperimentConfig:
    raw: dict

    def __post_init__(self):
        r = self.raw
        missing = [m for m in list(r["surrogates"]) + list(r["held_out"]) if m not in r["models"]]
        if missing:
            raise ConfigurationError(f"models not defined: {', '.join(missing)}")
        overlap = set(r["surrogates"]) & set(r["held_out"])
        if overlap:
            raise ConfigurationError(f"held-out models also used as surrogates: {sorted(overlap)}")
        if not r["surrogates"]:
            raise ConfigurationError("at least one surrogate model is required")
        self.optim  # validate early

    @classmethod
    def load(cls, path=None, overrides=None) -> "ExperimentConfig":
        return cls(load_config(path, overrides))

    @property
    def optim(self) -> OptimConfig:
        o = dict(self.raw["optim"])
        o.setdefault("seed", self.raw.get("seed", 0))
        return OptimConfig(**o)

    @property
    def diversify(self) -> DiversifyParams:
        return DiversifyParams(prob=self.optim.diversify_prob, **self.raw.get("diversify", {}))

    @property
    def dataset_dir(self) -> Path:
        return Path(self.raw["dataset"]["dir"])

    @property
    def output_dir(self) -> Path:
        return Path(self.raw["output_dir"])

    @property
    def far(self) -> float:
        return float(self.raw.get("thresholds", {}).get("far", 0.01))

    @property
    def metrics(self) -> dict:
        return self.raw.get("metrics", {})


# ---------------------------------------------------------------- dataset

@dataclass(frozen=True)
class ManifestEntry:
    image_id: str
    path: Path
    identity: str
    group: str
    target: str
    target_path: Path
    gallery_path: Path | None = None


@dataclass
class DatasetManifest:
    entries: list[ManifestEntry]
    warnings: list[str] = field(default_factory=list)

    def __len__(self):
        return len(self.entries)


class ManifestError(ValidationError):
    def __init__(self, problems: list[str]):
        super().__init__("invalid manifest:\n  " + "\n  ".join(problems))
        self.problems = problems


REQUIRED_COLUMNS = ("path", "identity", "group", "target")


def _readable_image(path: Path) -> bool:
    try:
        load_png(path)
        return True
    except Exception:  # noqa: BLE001 - any decode failure makes the row invalid
        return False


def ingest(dataset_dir: str | Path) -> DatasetManifest:
    """Validate ``manifest.csv`` (path, identity, group, target) and resolve target images.

    Target ``t`` resolves through ``targets.csv`` (target, path) when present,
    otherwise ``targets/<t>.png``.
    """
    root = Path(dataset_dir)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise ManifestError([f"{manifest}: missing"])
    with manifest.open(newline="") as fh:
        reader = csv.DictReader(fh)
        cols = reader.fieldnames or []
        absent = [c for c in REQUIRED_COLUMNS if c not in cols]
        if absent:
            raise ManifestError([f"manifest.csv: missing columns {', '.join(absent)}"])
        rows = list(reader)

    target_map: dict[str, Path] = {}
    tcsv = root / "targets.csv"
    if tcsv.exists():
        with tcsv.open(newline="") as fh:
            for row in csv.DictReader(fh):
                target_map[row["target"]] = root / row["path"]

    problems: list[str] = []
    warnings: list[str] = []
    entries: list[ManifestEntry] = []
    seen_ids: dict[str, int] = {}
    seen_identity: dict[str, int] = {}
    checked: dict[Path, bool] = {}

    def ok(p: Path) -> bool:
        if p not in checked:
            checked[p] = p.exists() and _readable_image(p)
        return checked[p]

    for lineno, row in enumerate(rows, start=2):
        rel = (row.get("path") or "").strip()
        path = root / rel
        if not rel or not ok(path):
            problems.append(f"row {lineno}: image {rel!r} missing or unreadable")
            continue
        target = (row.get("target") or "").strip()
        tpath = target_map.get(target, root / "targets" / f"{target}.png")
        if not target or not ok(tpath):
            problems.append(f"row {lineno}: target {target!r} does not resolve to an image")
            continue
        gallery = (row.get("gallery") or "").strip()
        gpath = root / gallery if gallery else None
        if gpath is not None and not ok(gpath):
            problems.append(f"row {lineno}: gallery image {gallery!r} missing or unreadable")
            continue
        image_id = Path(rel).with_suffix("").as_posix().replace("/", "__")
        if image_id in seen_ids:
            problems.append(f"row {lineno}: duplicate image id {image_id!r} (row {seen_ids[image_id]})")
            continue
        seen_ids[image_id] = lineno
        identity = row["identity"].strip()
        if identity in seen_identity:
            warnings.append(f"row {lineno}: identity {identity!r} repeats row {seen_identity[identity]}")
        else:
            seen_identity[identity] = lineno
        entries.append(ManifestEntry(image_id, path, identity, row["group"].strip(), target, tpath, gpath))
    if problems:
        raise ManifestError(problems)
    for w in warnings:
        log.warning(w)
    entries.sort(key=lambda e: e.path.as_posix())
    return DatasetManifest(entries, warnings)


def write_toy_dataset(out_dir: str | Path, generator, count: int = 8, targets: int = 2,
                      seed: int = 0) -> Path:
    """Render a small manifest-backed dataset from the toy identities."""
    from .toydata import ToyIdentities

    root = Path(out_dir)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "targets").mkdir(parents=True, exist_ok=True)
    (root / "gallery").mkdir(parents=True, exist_ok=True)
    ids = ToyIdentities()
    rng = np.random.default_rng(seed)
    order = rng.permutation(ids.identity_count)
    target_ids = [int(i) for i in order[:targets]]
    source_ids = [int(i) for i in order[targets:targets + count]]
    for t in target_ids:
        save_png(ids.image(generator, t, 3000 + seed), root / "targets" / f"id{t:02d}.png")
    rows = []
    for k, s in enumerate(source_ids):
        rel = f"images/src{k:03d}_id{s:02d}.png"
        save_png(ids.image(generator, s, 1000 + seed * 100 + k), root / rel)
        grel = f"gallery/id{s:02d}.png"
        save_png(ids.image(generator, s, 4000 + seed), root / grel)
        t = target_ids[k % targets]
        rows.append({"path": rel, "identity": f"id{s:02d}", "group": str(k % targets),
                     "target": f"id{t:02d}", "gallery": grel})
    with (root / "manifest.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=["path", "identity", "group", "target", "gallery"])
        w.writeheader()
        w.writerows(rows)
    return root


# ---------------------------------------------------------------- runtime

@dataclass
class Runtime:
    config: ExperimentConfig
    generator: Any
    segmenter: Any
    perceptual: Any
    models: dict[str, Any]
    thresholds: dict[str, float]

    @property
    def ensemble(self) -> Ensemble:
        return Ensemble([self.models[m] for m in self.config.raw["surrogates"]])

    @property
    def held_out(self) -> list[str]:
        return list(self.config.raw["held_out"])


def build_runtime(config: ExperimentConfig) -> Runtime:
    raw = config.raw
    generator = build_generator(raw.get("generator"))
    registry = ThresholdRegistry.default()
    if raw.get("thresholds", {}).get("file"):
        registry = ThresholdRegistry.load(raw["thresholds"]["file"])
    models, taus = {}, {}
    for mid in list(raw["surrogates"]) + list(raw["held_out"]):
        model, tau = build_fr(mid, raw["models"][mid], generator, raw.get("cache_dir"), config.far)
        models[mid] = model
        if tau is not None:
            registry.register(mid, config.far, tau)
    for mid in raw["held_out"]:
        taus[mid] = registry.lookup(mid, config.far)
    return Runtime(config, generator, build_segmenter(raw.get("segmentation")),
                   build_perceptual(raw.get("perceptual")), models, taus)


def write_trace(trace, path: Path) -> None:
    with path.open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "L_adv", "L_sem", "L_total"])
        for step, adv, sem, total in trace:
            w.writerow([step, repr(adv), repr(sem), repr(total)])


def protect_entry(rt: Runtime, entry: ManifestEntry, force: bool = False) -> str:
    """Run inversion + search for one image; returns 'skipped' or 'done'."""
    out = rt.config.output_dir / entry.image_id
    done = (out / "protected.png").exists() and (out / "latent" / "meta.json").exists()
    if done and not force:
        return "skipped"
    out.mkdir(parents=True, exist_ok=True)
    source, target = load_png(entry.path), load_png(entry.target_path)
    result = protect(rt.generator, source, target, rt.ensemble, rt.segmenter, rt.config.optim,
                     perceptual=rt.perceptual, params=rt.config.diversify)
    serialize_latent(result.code, out / "latent")
    write_trace(result.loss_trace, out / "trace.csv")
    save_png(result.protected, out / "protected.png")
    return "done"


def _cos(model, a: FaceImage, b: FaceImage) -> float:
    with torch.no_grad():
        return float(torch.dot(model.embed_pixels(a.pixels).double(), model.embed_pixels(b.pixels).double()))


def _embed(model, image: FaceImage):
    from .types import Embedding

    with torch.no_grad():
        return Embedding(model.embed_pixels(image.pixels).detach())


def evaluate_entry(rt: Runtime, entry: ManifestEntry, gallery_images: dict[str, FaceImage]) -> dict:
    out = rt.config.output_dir / entry.image_id
    source, target = load_png(entry.path), load_png(entry.target_path)
    protected = load_png(out / "protected.png")
    m = rt.config.metrics
    record: dict[str, Any] = {"image_id": entry.image_id, "identity": entry.identity,
                              "target": entry.target, "models": {}}
    for mid in rt.held_out:
        model, tau = rt.models[mid], rt.thresholds[mid]
        row: dict[str, Any] = {"tau": tau}
        if m.get("verification", True):
            c0, c1 = _cos(model, source, target), _cos(model, protected, target)
            row.update(cos_clean=c0, cos_protected=c1, success_clean=c0 >= tau, success_protected=c1 >= tau)
        if m.get("identification", True):
            gallery = [GalleryEntry(ident, _embed(model, img)) for ident, img in sorted(gallery_images.items())]
            for n in m.get("ranks", [1, 5]):
                row[f"rank{n}_clean"] = rank_n_hit(_embed(model, source), gallery, entry.target, n)
                row[f"rank{n}_protected"] = rank_n_hit(_embed(model, protected), gallery, entry.target, n)
        record["models"][mid] = row
    if m.get("quality", True):
        record["psnr"] = psnr(protected, source)
        record["ssim"] = ssim(protected, source)
    return record


def _gallery(manifest: DatasetManifest) -> dict[str, FaceImage]:
    """One image per source identity plus every target image, keyed by identity."""
    gallery: dict[str, FaceImage] = {}
    for e in manifest.entries:
        gallery.setdefault(e.identity, load_png(e.gallery_path or e.path))
        gallery.setdefault(e.target, load_png(e.target_path))
    return gallery


def _json_float(x: float):
    return "inf" if x == math.inf else x


def aggregate(rt: Runtime, manifest: DatasetManifest, records: list[dict], failures: list[dict]) -> dict:
    m = rt.config.metrics
    report: dict[str, Any] = {
        "toolkit_version": __version__,
        "images": len(manifest),
        "evaluated": len(records),
        "surrogates": list(rt.config.raw["surrogates"]),
        "held_out": rt.held_out,
        "optim": rt.config.optim.to_dict(),
        "far": rt.config.far,
        "failures": failures,
    }
    if records and m.get("verification", True):
        models = {}
        for mid in rt.held_out:
            clean = [VerificationRecord(r["image_id"], r["models"][mid]["cos_clean"], rt.thresholds[mid],
                                        r["models"][mid]["success_clean"]) for r in records]
            prot = [VerificationRecord(r["image_id"], r["models"][mid]["cos_protected"], rt.thresholds[mid],
                                       r["models"][mid]["success_protected"]) for r in records]
            pc, pp = psr_verification(clean), psr_verification(prot)
            models[mid] = {
                "tau": rt.thresholds[mid],
                "psr_clean": pc,
                "psr_protected": pp,
                "psr_gain": psr_gain(pp, pc),
                "mean_cos_clean": float(np.mean([r.cos_to_target for r in clean])),
                "mean_cos_protected": float(np.mean([r.cos_to_target for r in prot])),
            }
        report["verification"] = {
            "models": models,
            "average": {
                "psr_clean": float(np.mean([v["psr_clean"] for v in models.values()])),
                "psr_protected": float(np.mean([v["psr_protected"] for v in models.values()])),
            },
        }
    if records and m.get("identification", True):
        ident = {}
        for mid in rt.held_out:
            row = {}
            for n in m.get("ranks", [1, 5]):
                for kind in ("clean", "protected"):
                    hits = [r["models"][mid][f"rank{n}_{kind}"] for r in records]
                    row[f"rank{n}_{kind}"] = 100.0 * sum(hits) / len(hits)
            ident[mid] = row
        report["identification"] = {"models": ident}
    if records and m.get("quality", True):
        quality: dict[str, Any] = {
            "psnr": _json_float(float(np.mean([r["psnr"] for r in records]))),
            "ssim": float(np.mean([r["ssim"] for r in records])),
            "fid_extractor": type(rt.perceptual).__name__ + ".pooled",
        }
        if len(records) >= 2:
            with torch.no_grad():
                feats_p = torch.cat([rt.perceptual.pooled(load_png(rt.config.output_dir / r["image_id"] /
                                                                   "protected.png").pixels) for r in records])
                feats_s = torch.cat([rt.perceptual.pooled(load_png(e.path).pixels)
                                     for e in manifest.entries if e.image_id in {r["image_id"] for r in records}])
            quality["fid"] = fid(feats_p.double().numpy(), feats_s.double().numpy())
        report["quality"] = quality
    return report


def write_report(rt: Runtime, report: dict) -> dict[str, Path]:
    out = rt.config.output_dir
    paths = {"json": out / "report.json", "csv": out / "report.csv"}
    paths["json"].write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    with paths["csv"].open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["model", "tau", "psr_clean", "psr_protected", "psr_gain", "rank1_protected", "rank5_protected"])
        ver = report.get("verification", {}).get("models", {})
        ide = report.get("identification", {}).get("models", {})
        for mid in sorted(ver):
            v, i = ver[mid], ide.get(mid, {})
            w.writerow([mid, v["tau"], v["psr_clean"], v["psr_protected"], v["psr_gain"],
                        i.get("rank1_protected", ""), i.get("rank5_protected", "")])
    if rt.config.metrics.get("figures", True) and ver:
        from .plotting import plot_psr

        paths["psr_figure"] = plot_psr(ver, out / "psr.png", "verification PSR")
    return paths


@dataclass
class RunOutcome:
    report_paths: dict[str, Path]
    failures: list[dict]
    statuses: dict[str, str]

    @property
    def exit_code(self) -> int:
        return EXIT_PARTIAL if self.failures else EXIT_OK


def _audit_counts(rt: Runtime) -> dict[str, int]:
    return {m: getattr(rt.models[m], "audit", None).count if hasattr(rt.models[m], "audit") else 0
            for m in rt.held_out}


def evaluate_and_report(rt: Runtime, manifest: DatasetManifest, failures: list[dict]) -> dict[str, Path]:
    gallery = _gallery(manifest) if rt.config.metrics.get("identification", True) else {}
    records = []
    failed = {f["image_id"] for f in failures}
    for entry in manifest.entries:
        if entry.image_id in failed:
            continue
        if not (rt.config.output_dir / entry.image_id / "protected.png").exists():
            failures.append({"image_id": entry.image_id, "error": "no protected image"})
            continue
        rec = evaluate_entry(rt, entry, gallery)
        (rt.config.output_dir / entry.image_id / "metrics.json").write_text(
            json.dumps({k: _json_float(v) if isinstance(v, float) else v for k, v in rec.items()},
                       indent=2, sort_keys=True) + "\n")
        records.append(rec)
    failures.sort(key=lambda f: f["image_id"])
    return write_report(rt, aggregate(rt, manifest, records, failures))


def run_experiment(config: ExperimentConfig, force: bool = False, runtime: Runtime | None = None,
                   on_protect: Callable[[str, str], None] | None = None) -> RunOutcome:
    """Protect every manifest image with the surrogate ensemble, then score on held-out models."""
    rt = runtime or build_runtime(config)
    manifest = ingest(config.dataset_dir)
    out = config.output_dir
    out.mkdir(parents=True, exist_ok=True)
    started = time.strftime("%Y-%m-%dT%H:%M:%S")

    before = _audit_counts(rt)
    failures: list[dict] = []
    statuses: dict[str, str] = {}

    def job(entry: ManifestEntry):
        try:
            status = protect_entry(rt, entry, force)
        except (GiftError, OSError, RuntimeError) as exc:
            log.error("%s: %s", entry.image_id, exc)
            return entry.image_id, "failed", str(exc)
        return entry.image_id, status, None

    workers = max(1, int(config.raw.get("workers", 1)))
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for image_id, status, err in pool.map(job, manifest.entries):
            statuses[image_id] = status
            if err is not None:
                failures.append({"image_id": image_id, "error": err})
            if on_protect:
                on_protect(image_id, status)
    after = _audit_counts(rt)
    if after != before:
        raise RuntimeError(f"held-out models were queried during protection: {before} -> {after}")

    paths = evaluate_and_report(rt, manifest, failures)
    with (out / "run.log").open("a") as fh:
        fh.write(f"{started} run: {len(manifest)} images, statuses {json.dumps(statuses, sort_keys=True)}, "
                 f"failures {len(failures)}\n")
    return RunOutcome(paths, failures, statuses)


def regenerate_report(config: ExperimentConfig, runtime: Runtime | None = None) -> dict[str, Path]:
    rt = runtime or build_runtime(config)
    manifest = ingest(config.dataset_dir)
    return evaluate_and_report(rt, manifest, [])


def load_protected_latent(config: ExperimentConfig, image_id: str, generator) -> Any:
    return deserialize_latent(config.output_dir / image_id / "latent", generator.fingerprint)
