import csv
import json
import shutil

import pytest
import torch
import yaml

from gift import experiment
from gift.errors import ConfigurationError, GiftError
from gift.experiment import (EXIT_PARTIAL, ExperimentConfig, ManifestError, apply_overrides, build_runtime,
                             ingest, load_protected_latent, regenerate_report, run_experiment,
                             write_toy_dataset)
from gift.types import load_png


@pytest.fixture(scope="module")
def dataset(tmp_path_factory, generator):
    return write_toy_dataset(tmp_path_factory.mktemp("data"), generator, count=3, targets=2)


def small_config(dataset, out, fr_cache, **extra):
    raw = {"dataset": {"dir": str(dataset)}, "output_dir": str(out), "cache_dir": str(fr_cache),
           "optim": {"t1_steps": 15, "t2_steps": 4}}
    overrides = [f"{k}={v}" for k, v in extra.items()]
    return ExperimentConfig(apply_overrides(experiment.deep_merge(experiment.default_config(), raw), overrides))


@pytest.fixture(scope="module")
def runtime(dataset, tmp_path_factory, fr_cache, toy_models):
    return build_runtime(small_config(dataset, tmp_path_factory.mktemp("rt"), fr_cache))


# ------------------------------------------------------------------ config


def test_overrides_are_yaml_typed():
    cfg = apply_overrides({"optim": {"t2_steps": 50}}, ["optim.t2_steps=7", "held_out=[toyA]", "x.y=true"])
    assert cfg["optim"]["t2_steps"] == 7 and cfg["held_out"] == ["toyA"] and cfg["x"]["y"] is True
    with pytest.raises(ConfigurationError):
        apply_overrides({}, ["no-equals-sign"])


def test_held_out_may_not_be_a_surrogate():
    with pytest.raises(ConfigurationError, match="surrogates"):
        ExperimentConfig.load(None, ["held_out=[toyA]"])
    with pytest.raises(ConfigurationError):
        ExperimentConfig.load(None, ["surrogates=[toyZ]"])


def test_bad_optim_values_rejected():
    from gift.errors import ValidationError

    with pytest.raises(ValidationError):
        ExperimentConfig.load(None, ["optim.t2_lr=-1"])


def test_config_file_merges(tmp_path):
    path = tmp_path / "c.yaml"
    path.write_text(yaml.safe_dump({"optim": {"t2_steps": 9}, "held_out": ["toyD"]}))
    cfg = ExperimentConfig.load(path, ["optim.alpha=2"])
    assert cfg.optim.t2_steps == 9 and cfg.optim.alpha == 2 and cfg.optim.t1_steps == 1200


# ------------------------------------------------------------------ ingest


def test_ingest_valid(dataset):
    m = ingest(dataset)
    assert len(m) == 3 and m.warnings == []
    assert [e.path.as_posix() for e in m.entries] == sorted(e.path.as_posix() for e in m.entries)
    for e in m.entries:
        assert e.target_path.exists() and e.gallery_path.exists()


def _copy(dataset, tmp_path):
    dst = tmp_path / "ds"
    shutil.copytree(dataset, dst)
    return dst


def _rewrite(root, mutate):
    with (root / "manifest.csv").open(newline="") as fh:
        rows = list(csv.DictReader(fh))
    rows = mutate(rows)
    with (root / "manifest.csv").open("w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=list(rows[0]))
        w.writeheader()
        w.writerows(rows)


def test_ingest_names_missing_row(dataset, tmp_path):
    root = _copy(dataset, tmp_path)
    rows = list(csv.DictReader((root / "manifest.csv").open()))
    (root / rows[1]["path"]).unlink()
    with pytest.raises(ManifestError) as err:
        ingest(root)
    assert any("row 3" in p and rows[1]["path"] in p for p in err.value.problems)


def test_ingest_unresolved_target(dataset, tmp_path):
    root = _copy(dataset, tmp_path)
    _rewrite(root, lambda rows: [dict(rows[0], target="nobody")] + rows[1:])
    with pytest.raises(ManifestError, match="nobody"):
        ingest(root)


def test_ingest_targets_csv(dataset, tmp_path):
    root = _copy(dataset, tmp_path)
    first = sorted((root / "targets").iterdir())[0]
    (root / "targets.csv").write_text(f"target,path\nalias,targets/{first.name}\n")
    _rewrite(root, lambda rows: [dict(r, target="alias") for r in rows])
    assert all(e.target_path == first for e in ingest(root).entries)


def test_ingest_duplicate_identity_warns(dataset, tmp_path):
    root = _copy(dataset, tmp_path)
    _rewrite(root, lambda rows: [dict(r, identity="same") for r in rows])
    m = ingest(root)
    assert len(m) == 3 and len(m.warnings) == 2


def test_ingest_missing_columns(tmp_path):
    (tmp_path / "manifest.csv").write_text("path,identity\nx.png,a\n")
    with pytest.raises(ManifestError, match="group"):
        ingest(tmp_path)


# ------------------------------------------------------------------ run


def test_run_resumes_and_reproduces(dataset, runtime, tmp_path):
    cfg = small_config(dataset, tmp_path / "out", runtime.config.raw["cache_dir"])
    rt = experiment.Runtime(cfg, runtime.generator, runtime.segmenter, runtime.perceptual,
                            runtime.models, runtime.thresholds)
    first = run_experiment(cfg, runtime=rt)
    assert first.exit_code == 0
    assert set(first.statuses.values()) == {"done"}
    report = (tmp_path / "out" / "report.json").read_bytes()
    rep = json.loads(report)
    assert set(rep["verification"]["models"]) == {"toyD"}
    assert {"psnr", "ssim", "fid"} <= set(rep["quality"])
    assert (tmp_path / "out" / "psr.png").exists()

    second = run_experiment(cfg, runtime=rt)
    assert set(second.statuses.values()) == {"skipped"}
    assert (tmp_path / "out" / "report.json").read_bytes() == report

    pngs = {p: p.read_bytes() for p in (tmp_path / "out").glob("*/protected.png")}
    third = run_experiment(cfg, force=True, runtime=rt)
    assert set(third.statuses.values()) == {"done"}
    assert {p: p.read_bytes() for p in pngs} == pngs
    assert (tmp_path / "out" / "report.json").read_bytes() == report
    assert len((tmp_path / "out" / "run.log").read_text().splitlines()) == 3

    (tmp_path / "out" / "report.json").unlink()
    regenerate_report(cfg, runtime=rt)
    assert (tmp_path / "out" / "report.json").read_bytes() == report

    entry = ingest(dataset).entries[0]
    code = load_protected_latent(cfg, entry.image_id, rt.generator)
    with torch.no_grad():
        again = rt.generator.synthesize(code)
    stored = load_png(tmp_path / "out" / entry.image_id / "protected.png")
    assert float((again.pixels - stored.pixels).abs().max()) <= 0.5 / 255 + 1e-6


def test_held_out_never_queried_during_protection(dataset, runtime, tmp_path):
    cfg = small_config(dataset, tmp_path / "out", runtime.config.raw["cache_dir"])
    rt = experiment.Runtime(cfg, runtime.generator, runtime.segmenter, runtime.perceptual,
                            runtime.models, runtime.thresholds)
    held = rt.models["toyD"]
    seen = []
    start = held.audit.count
    run_experiment(cfg, runtime=rt, on_protect=lambda image_id, status: seen.append(held.audit.count - start))
    assert seen == [0, 0, 0]
    assert held.audit.count > start  # evaluation does query it


def test_leak_is_detected(dataset, runtime, tmp_path, monkeypatch):
    cfg = small_config(dataset, tmp_path / "out", runtime.config.raw["cache_dir"])
    rt = experiment.Runtime(cfg, runtime.generator, runtime.segmenter, runtime.perceptual,
                            runtime.models, runtime.thresholds)

    def leaky(rt_, entry, force=False):
        rt_.models["toyD"].embed(load_png(entry.path))
        return "done"

    monkeypatch.setattr(experiment, "protect_entry", leaky)
    with pytest.raises(RuntimeError, match="held-out"):
        run_experiment(cfg, runtime=rt)


def test_partial_failure(dataset, runtime, tmp_path, monkeypatch):
    cfg = small_config(dataset, tmp_path / "out", runtime.config.raw["cache_dir"])
    rt = experiment.Runtime(cfg, runtime.generator, runtime.segmenter, runtime.perceptual,
                            runtime.models, runtime.thresholds)
    real = experiment.protect_entry
    bad = ingest(dataset).entries[1].image_id

    def flaky(rt_, entry, force=False):
        if entry.image_id == bad:
            raise GiftError("boom")
        return real(rt_, entry, force)

    monkeypatch.setattr(experiment, "protect_entry", flaky)
    outcome = run_experiment(cfg, runtime=rt)
    assert outcome.exit_code == EXIT_PARTIAL
    rep = json.loads((tmp_path / "out" / "report.json").read_text())
    assert rep["failures"] == [{"image_id": bad, "error": "boom"}]
    assert rep["evaluated"] == 2
