import json
import os
from pathlib import Path

import pandas as pd
import pytest

from app.core.config import settings
from app.core.errors import ConfigurationError, IngestionError, NumericalAbort, RunLockedError
from app.schemas import MetricReport, RunStatus
from app.services.metrics import config_hash_of
from app.services.pipeline import (
    _prepare_run_dir,
    baseline_hash,
    checkpoints_dir,
    config_hash,
    load_pretrained,
    load_run_config,
    load_scene,
    pretrained_paths,
    read_status,
    run_compare,
    run_generate,
    run_lock,
    run_pretrain,
    scene_dir,
    write_status,
)

from .conftest import tiny_overrides


@pytest.fixture
def tiny_config():
    return load_run_config(None, tiny_overrides())


def test_run_lock_is_exclusive(tmp_path):
    with run_lock(tmp_path / "run") as lock:
        assert lock.is_file()
        with pytest.raises(RunLockedError):
            with run_lock(tmp_path / "run"):
                pass
    assert not lock.exists(), "the lock is released on exit"


def test_stale_lock_is_taken_over(tmp_path, dead_pid):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text(str(dead_pid))
    with run_lock(run) as lock:
        assert lock.read_text() == str(os.getpid())
    assert not lock.exists()


def test_unreadable_lock_counts_as_held(tmp_path):
    run = tmp_path / "run"
    run.mkdir()
    (run / ".lock").write_text("")
    with pytest.raises(RunLockedError):
        with run_lock(run):
            pass


def test_pretrain_keeps_codec_when_denoiser_training_dies(tiny_config, monkeypatch):
    def diverge(*args, **kwargs):
        raise NumericalAbort("denoiser loss diverged", stage="denoiser", iteration=2)

    monkeypatch.setattr("app.services.pipeline.pretrain_denoiser", diverge)
    with pytest.raises(NumericalAbort):
        run_pretrain(tiny_config)
    paths = pretrained_paths(checkpoints_dir(tiny_config))
    recorded = json.loads(paths.hashes.read_text())
    assert set(recorded) == {"codec"}
    codec_bytes = paths.codec.read_bytes()

    def retrain(*args, **kwargs):
        raise AssertionError("codec retrained although codec.bin matches its recorded hash")

    monkeypatch.setattr("app.services.pipeline.train_codec", retrain)
    with pytest.raises(NumericalAbort):
        run_pretrain(tiny_config)
    assert paths.codec.read_bytes() == codec_bytes


def test_pretrain_reuses_codec_after_denoiser_is_lost(tiny_config, monkeypatch):
    first = run_pretrain(tiny_config)
    paths = pretrained_paths(checkpoints_dir(tiny_config))
    paths.denoiser.unlink()

    def retrain(*args, **kwargs):
        raise AssertionError("codec retrained although codec.bin matches its recorded hash")

    monkeypatch.setattr("app.services.pipeline.train_codec", retrain)
    second = run_pretrain(tiny_config)
    assert second["codec"] == first["codec"]
    assert paths.denoiser.is_file() and second["denoiser"]
    assert json.loads(paths.hashes.read_text()) == second


def test_status_roundtrip(tmp_path):
    assert read_status(tmp_path) is None
    write_status(tmp_path, RunStatus(state="failed", stage="sync", round_index=1, error="boom", exit_code=4))
    status = read_status(tmp_path)
    assert status.state == "failed" and status.round_index == 1 and status.exit_code == 4


def test_default_locations_follow_data_root(tiny_config):
    assert checkpoints_dir(tiny_config) == Path(settings.data_root) / "checkpoints"
    assert scene_dir(7) == Path(settings.data_root) / "scenes" / "synthetic-7"
    custom = tiny_config.model_copy(update={"checkpoints_dir": "elsewhere"})
    assert checkpoints_dir(custom) == Path("elsewhere")


def test_generate_refuses_non_empty_targets(tiny_config, tmp_path):
    target = tmp_path / "scene"
    files = run_generate(tiny_config, target)
    assert (target / "manifest.json") in files
    with pytest.raises(ConfigurationError, match="not empty"):
        run_generate(tiny_config, target)
    assert run_generate(tiny_config, target, force=True)


def test_load_scene_caches_synthetic_scenes(tiny_config):
    _, first = load_scene(tiny_config)
    assert (scene_dir(tiny_config.scene.seed) / "poses.json").is_file()
    _, second = load_scene(tiny_config)
    assert len(first) == len(second) == tiny_config.scene.n_views


def test_load_pretrained_reports_missing_artifacts(tmp_path):
    with pytest.raises(IngestionError, match="codec.bin"):
        load_pretrained(tmp_path)


def test_prepare_run_dir_guards_config_changes(tiny_config, tmp_path):
    _prepare_run_dir(tiny_config, tmp_path, force=False)
    assert config_hash_of(tmp_path) == config_hash(tiny_config)
    _prepare_run_dir(tiny_config, tmp_path, force=False)
    changed = tiny_config.model_copy(update={"seed": 5})
    with pytest.raises(ConfigurationError, match="different config"):
        _prepare_run_dir(changed, tmp_path, force=False)
    _prepare_run_dir(changed, tmp_path, force=True)
    assert config_hash_of(tmp_path) == config_hash(changed)


def _finished_run(root, name, method, psnr, with_baseline=True):
    run = root / name
    run.mkdir()
    (run / "config.json").write_text(json.dumps({"method": method}))
    report = MetricReport(method=method, psnr_db=psnr, n_views=2, config_hash=f"hash-{name}")
    (run / "report.json").write_text(report.model_dump_json())
    if with_baseline:
        baseline = MetricReport(method="bicubic", psnr_db=10.0, n_views=2, config_hash="shared-scene")
        (run / "baseline_report.json").write_text(baseline.model_dump_json())
    write_status(run, RunStatus(state="completed"))
    return run


def test_compare_marks_failed_runs_and_dedupes_baseline(tmp_path):
    a = _finished_run(tmp_path, "a", "vsd_lora_spaced", 21.5)
    b = _finished_run(tmp_path, "b", "sds", 20.25)
    broken = tmp_path / "broken"
    broken.mkdir()
    (broken / "config.json").write_text(json.dumps({"method": "vsd_lora"}))
    write_status(broken, RunStatus(state="failed", error="diverged", exit_code=4))

    paths = run_compare([a, b, broken], tmp_path / "out", with_baseline=True)
    df = pd.read_csv(paths[0], keep_default_na=False)
    assert list(df["method"]) == ["bicubic", "sds", "vsd_lora", "vsd_lora_spaced"]
    rows = df.set_index("method")
    assert rows.loc["vsd_lora", "psnr_db"] == "FAILED"
    assert rows.loc["vsd_lora_spaced", "psnr_db"] == "21.5000"
    assert rows.loc["bicubic", "psnr_db"] == "10.0000"
    assert "FAILED" in (tmp_path / "out" / "comparison.txt").read_text()


def test_baseline_hash_ignores_the_method(tiny_config):
    sds = tiny_config.model_copy(update={"method": "sds", "output_dir": "runs/sds"})
    assert baseline_hash(sds) == baseline_hash(tiny_config)
    assert baseline_hash(tiny_config.model_copy(update={"seed": 1})) != baseline_hash(tiny_config)
