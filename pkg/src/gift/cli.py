"""Command-line entry point: ``gift <verb> ...``."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import __version__
from .errors import ConfigurationError, GiftError, ValidationError
from .experiment import (
    EXIT_OK,
    EXIT_PARTIAL,
    EXIT_VALIDATION,
    ExperimentConfig,
    build_runtime,
    regenerate_report,
    run_experiment,
    write_toy_dataset,
)
from .types import load_png

log = logging.getLogger("gift")


def _config(args) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "space", None):
        overrides.append(f"optim.space={args.space.upper().replace('+', 'PLUS')}")
    if getattr(args, "out_dir", None) and args.command in ("run", "report"):
        overrides.append(f"output_dir={args.out_dir}")
    return ExperimentConfig.load(args.config, overrides)


def cmd_invert(args) -> int:
    from .backends import build_generator, build_perceptual
    from .inversion import invert
    from .types import serialize_latent

    cfg = _config(args)
    gen = build_generator(cfg.raw.get("generator"))
    result = invert(gen, load_png(args.source), cfg.optim, build_perceptual(cfg.raw.get("perceptual")))
    serialize_latent(result.code, args.out)
    print(f"L_rec {result.initial_loss:.6g} -> {result.final_loss:.6g}; latent written to {args.out}")
    return EXIT_OK


def cmd_protect(args) -> int:
    from .experiment import write_trace
    from .gals import protect
    from .types import save_png, serialize_latent

    cfg = _config(args)
    rt = build_runtime(cfg)
    result = protect(rt.generator, load_png(args.source), load_png(args.target), rt.ensemble, rt.segmenter,
                     cfg.optim, perceptual=rt.perceptual, params=cfg.diversify)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_png(result.protected, out / "protected.png")
    serialize_latent(result.code, out / "latent")
    write_trace(result.loss_trace, out / "trace.csv")
    if cfg.metrics.get("figures", True):
        from .plotting import plot_trace

        plot_trace(result.loss_trace, out / "trace.png")
    for mid, cos in sorted(result.per_surrogate_cos.items()):
        print(f"{mid},{cos:.6f}")
    return EXIT_OK


def cmd_eval_verify(args) -> int:
    from .metrics import VerificationRecord

    cfg = _config(args)
    rt = build_runtime(cfg)
    probe, target = load_png(args.probe), load_png(args.target)
    w = csv.writer(sys.stdout)
    w.writerow(["model", "cos", "tau", "success"])
    for mid in args.model or rt.held_out:
        if mid not in rt.models:
            raise ConfigurationError(f"model {mid!r} not loaded")
        m = rt.models[mid]
        tau = rt.thresholds.get(mid)
        rec = VerificationRecord.score(args.probe, m.embed(probe), m.embed(target), tau)
        w.writerow([mid, f"{rec.cos_to_target:.6f}", tau, int(rec.success)])
    return EXIT_OK


def cmd_eval_identify(args) -> int:
    from .metrics import GalleryEntry, rank_n_hit

    cfg = _config(args)
    rt = build_runtime(cfg)
    root = Path(args.gallery).parent
    with open(args.gallery, newline="") as fh:
        rows = list(csv.DictReader(fh))
    w = csv.writer(sys.stdout)
    ranks = [int(n) for n in args.ranks.split(",")]
    w.writerow(["model"] + [f"rank{n}" for n in ranks])
    for mid in rt.held_out:
        m = rt.models[mid]
        gallery = [GalleryEntry(r["identity"], m.embed(load_png(root / r["path"]))) for r in rows]
        probe = m.embed(load_png(args.probe))
        w.writerow([mid] + [int(rank_n_hit(probe, gallery, args.target_id, n)) for n in ranks])
    return EXIT_OK


def cmd_eval_quality(args) -> int:
    from .metrics import fid, psnr, ssim

    a, b = load_png(args.a), load_png(args.b)
    p = psnr(a, b)
    out = {"psnr": "inf" if p == float("inf") else p, "ssim": ssim(a, b)}
    if args.fid_a and args.fid_b:
        import torch

        from .backends import build_perceptual

        per = build_perceptual(None)
        with torch.no_grad():
            fa = torch.cat([per.pooled(load_png(p).pixels) for p in sorted(Path(args.fid_a).glob("*.png"))])
            fb = torch.cat([per.pooled(load_png(p).pixels) for p in sorted(Path(args.fid_b).glob("*.png"))])
        out["fid"] = fid(fa.double().numpy(), fb.double().numpy())
        out["fid_extractor"] = "ToyPerceptual.pooled"
    print(json.dumps(out, sort_keys=True))
    return EXIT_OK


def cmd_api_probe(args) -> int:
    from .api.client import ProviderConfig, batch_confidence

    cfg = ProviderConfig(provider=args.provider, base_url=args.url, max_attempts=args.attempts,
                         backoff_base=args.backoff, max_in_flight=args.in_flight)
    root = Path(args.pairs).parent
    with open(args.pairs, newline="") as fh:
        rows = list(csv.DictReader(fh))
    pairs = [(load_png(root / r["image_a"]), load_png(root / r["image_b"])) for r in rows]
    result = batch_confidence(cfg, pairs)
    w = csv.writer(sys.stdout)
    w.writerow(["image_a", "image_b", "confidence", "attempts"])
    for r, res in zip(rows, result.results):
        w.writerow([r["image_a"], r["image_b"], "" if res is None else repr(res.confidence),
                    "" if res is None else res.attempts])
    summary = {"provider": args.provider, "mean": result.mean, "failure_count": result.failure_count,
               "pairs": len(pairs)}
    print(json.dumps(summary, sort_keys=True), file=sys.stderr)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        summary["confidences"] = [None if r is None else r.confidence for r in result.results]
        (out / "api_probe.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
        from .plotting import plot_confidence

        plot_confidence({args.provider: {"mean": result.mean}}, out / "api_confidence.png")
    return EXIT_PARTIAL if result.failure_count else EXIT_OK


def cmd_report(args) -> int:
    paths = regenerate_report(_config(args))
    for k, p in sorted(paths.items()):
        print(f"{k}: {p}")
    return EXIT_OK


def cmd_run(args) -> int:
    outcome = run_experiment(_config(args), force=args.force)
    for k, p in sorted(outcome.report_paths.items()):
        print(f"{k}: {p}")
    for f in outcome.failures:
        print(f"FAILED {f['image_id']}: {f['error']}", file=sys.stderr)
    return outcome.exit_code


def cmd_toy_dataset(args) -> int:
    from .backends import build_generator

    cfg = _config(args)
    root = write_toy_dataset(args.out, build_generator(cfg.raw.get("generator")), args.count, args.targets,
                             args.seed)
    print(root / "manifest.csv")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="gift", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, help_):
        p = sub.add_parser(name, help=help_)
        p.add_argument("--config", help="YAML experiment config")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config entry")
        p.set_defaults(func=fn)
        return p

    p = add("invert", cmd_invert, "fit a latent code to a source image")
    p.add_argument("--source", required=True)
    p.add_argument("--space", choices=["w", "wplus", "f"])
    p.add_argument("--out", required=True, help="latent directory to write")

    p = add("protect", cmd_protect, "produce a protected image for one source/target pair")
    p.add_argument("--source", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--space", choices=["w", "wplus", "f"])
    p.add_argument("--out-dir", required=True)

    p = add("eval-verify", cmd_eval_verify, "cosine and match decision on held-out models")
    p.add_argument("--probe", required=True)
    p.add_argument("--target", required=True)
    p.add_argument("--model", action="append")

    p = add("eval-identify", cmd_eval_identify, "Rank-N hit of a probe against a gallery CSV")
    p.add_argument("--probe", required=True)
    p.add_argument("--gallery", required=True, help="CSV with path,identity columns")
    p.add_argument("--target-id", required=True)
    p.add_argument("--ranks", default="1,5")

    p = add("eval-quality", cmd_eval_quality, "PSNR/SSIM of two images, optional FID of two folders")
    p.add_argument("--a", required=True)
    p.add_argument("--b", required=True)
    p.add_argument("--fid-a")
    p.add_argument("--fid-b")

    p = add("api-probe", cmd_api_probe, "query a face-comparison API for image pairs")
    p.add_argument("--provider", default="mock", choices=["mock", "facepp", "aliyun", "tencent"])
    p.add_argument("--url", default="http://127.0.0.1:8765")
    p.add_argument("--pairs", required=True, help="CSV with image_a,image_b columns")
    p.add_argument("--attempts", type=int, default=3)
    p.add_argument("--backoff", type=float, default=1.0)
    p.add_argument("--in-flight", type=int, default=4)
    p.add_argument("--out")

    p = add("report", cmd_report, "rebuild report.json from per-image artifacts")
    p.add_argument("--out-dir")

    p = add("run", cmd_run, "full pipeline over a dataset manifest")
    p.add_argument("--out-dir")
    p.add_argument("--force", action="store_true", help="re-optimize images that already have outputs")

    p = add("toy-dataset", cmd_toy_dataset, "render a small toy dataset with a manifest")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, default=8)
    p.add_argument("--targets", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ValidationError, ConfigurationError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except GiftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    raise SystemExit(main())
