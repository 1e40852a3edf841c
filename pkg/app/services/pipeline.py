"""Run-directory orchestration behind the CLI commands."""
from __future__ import annotations

import hashlib
import json
import logging
import os

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Sequence, Tuple

from pydantic import ValidationError

from app.core.config import settings
from app.core.errors import ConfigurationError, IngestionError, NerfSRError, RunLockedError
from app.core.monitoring import get_stage_stats, stage_timer, write_metrics
from app.schemas import MetricReport, Method, RunConfig, RunStatus, SceneSource
from app.services import exporter
from app.services import radiance_field as rf
from app.services.diffusion_core import (
    Denoiser,
    NoiseSchedule,
    PromptVocabulary,
    build_corpus,
    build_vocabulary,
    load_denoiser,
    pretrain_denoiser,
    save_denoiser,
)
from app.services.helpers import derive_seed, split_views
from app.services.i3ds import run_i3ds
from app.services.latent_codec import LatentCodec, train_codec
from app.services.metrics import NIQEModel, evaluate_bicubic_baseline, evaluate_run, fit_niqe_model
from app.services.scene_data import (
    GroundTruthField,
    MultiViewDataset,
    generate_synthetic_scene,
    load_llff,
    load_synthetic,
    save_dataset,
)

logger = logging.getLogger(__name__)

LOCK_NAME = ".lock"


# Configuration


def _parse_value(raw: str) -> Any:
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def apply_overrides(data: Dict[str, Any], overrides: Sequence[str]) -> Dict[str, Any]:
    """Applies ``section.key=value`` assignments; values are parsed as JSON when possible."""
    for item in overrides:
        if "=" not in item:
            raise ConfigurationError(f"override '{item}' must look like section.key=value")
        dotted, raw = item.split("=", 1)
        keys = [k for k in dotted.strip().split(".") if k]
        if not keys:
            raise ConfigurationError(f"override '{item}' has an empty key")
        node = data
        for k in keys[:-1]:
            node = node.setdefault(k, {})
            if not isinstance(node, dict):
                raise ConfigurationError(f"override '{item}' descends into a non-table value")
        node[keys[-1]] = _parse_value(raw.strip())
    return data


def read_config_file(path: str | Path) -> Dict[str, Any]:
    path = Path(path)
    if not path.is_file():
        raise ConfigurationError(f"config file not found: {path}")
    try:
        if path.suffix.lower() == ".toml":
            with open(path, "rb") as fh:
                return tomllib.load(fh)
        return json.loads(path.read_text())
    except (tomllib.TOMLDecodeError, json.JSONDecodeError) as e:
        raise ConfigurationError(f"cannot parse config {path}: {e}") from e


def load_run_config(
    path: str | Path | None = None,
    overrides: Sequence[str] = (),
    *,
    seed: Optional[int] = None,
    method: Optional[str] = None,
    output_dir: Optional[str] = None,
) -> RunConfig:
    """File < --set overrides < dedicated flags."""
    data = read_config_file(path) if path else {}
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = seed
    if method is not None:
        data["method"] = method
    if output_dir is not None:
        data["output_dir"] = output_dir
    try:
        return RunConfig.model_validate(data)
    except ValidationError as e:
        raise ConfigurationError(f"invalid configuration:\n{e}") from e


def config_json(config: RunConfig) -> str:
    return config.model_dump_json(indent=2)


def config_hash(config: RunConfig) -> str:
    return hashlib.sha256(config_json(config).encode("utf-8")).hexdigest()


def baseline_hash(config: RunConfig) -> str:
    """Key of everything the bicubic baseline depends on: scene, LR field settings and seed."""
    doc = {"scene": config.scene.model_dump(mode="json"), "field": config.field.model_dump(mode="json"), "seed": config.seed}
    return hashlib.sha256(json.dumps(doc, sort_keys=True).encode("utf-8")).hexdigest()


def checkpoints_dir(config: RunConfig) -> Path:
    return Path(config.checkpoints_dir) if config.checkpoints_dir else Path(settings.data_root) / "checkpoints"


def scene_dir(seed: int) -> Path:
    return Path(settings.data_root) / "scenes" / f"synthetic-{seed}"


@dataclass(frozen=True)
class PretrainedPaths:
    root: Path

    @property
    def codec(self) -> Path:
        return self.root / "codec.bin"

    @property
    def denoiser(self) -> Path:
        return self.root / "denoiser.bin"

    @property
    def vocab(self) -> Path:
        return self.root / "vocab.json"

    @property
    def niqe(self) -> Path:
        return self.root / "niqe_model.json"

    @property
    def hashes(self) -> Path:
        return self.root / "hashes.json"

    @property
    def schedule_csv(self) -> Path:
        return self.root / "schedule.csv"


@dataclass
class PretrainedBundle:
    codec: LatentCodec
    denoiser: Denoiser
    schedule: NoiseSchedule
    vocab: PromptVocabulary
    niqe: Optional[NIQEModel]
    hashes: Dict[str, str]


def pretrained_paths(root: str | Path) -> PretrainedPaths:
    return PretrainedPaths(Path(root))


def load_pretrained(root: str | Path) -> PretrainedBundle:
    """Frozen codec and denoiser plus their schedule, vocabulary and NIQE model."""
    paths = pretrained_paths(root)
    missing = [p.name for p in (paths.codec, paths.denoiser) if not p.is_file()]
    if missing:
        raise IngestionError(f"Pretrained artifacts missing: {', '.join(missing)}; run 'nerfsr pretrain' first", paths.root)
    codec = LatentCodec.load(paths.codec)
    denoiser, schedule, vocab = load_denoiser(paths.denoiser)
    hashes = _hashes(paths.hashes)
    for name, module in (("codec", codec), ("denoiser", denoiser)):
        if hashes.get(name) and hashes[name] != module.metadata.weights_hash:
            raise IngestionError(f"{name} weights do not match hashes.json", paths.root)
    niqe_model = NIQEModel.load(paths.niqe) if paths.niqe.is_file() else None
    if niqe_model is None:
        logger.warning("No NIQE model under %s; NIQE will be reported as n/a", paths.root)
    return PretrainedBundle(codec, denoiser, schedule, vocab, niqe_model, hashes)


# Run directory bookkeeping


def _lock_holder_alive(lock: Path) -> bool:
    """False only when the recorded pid names a process that no longer exists."""
    try:
        pid = int(lock.read_text().strip())
    except (OSError, ValueError):
        return True
    try:
        os.kill(pid, 0)
    except ProcessLookupError:
        return False
    except PermissionError:
        return True
    return True


@contextmanager
def run_lock(run_dir: str | Path) -> Iterator[Path]:
    """Exclusive lock on a run directory; a lock left by a killed process is taken over."""
    run_dir = Path(run_dir)
    run_dir.mkdir(parents=True, exist_ok=True)
    lock = run_dir / LOCK_NAME
    for attempt in range(2):
        try:
            fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
            break
        except FileExistsError as e:
            if attempt == 0 and not _lock_holder_alive(lock):
                logger.warning("Removing stale lock %s; its process is gone", lock)
                lock.unlink(missing_ok=True)
                continue
            raise RunLockedError(f"run directory {run_dir} is locked by another command ({lock})") from e
    with os.fdopen(fd, "w") as fh:
        fh.write(str(os.getpid()))
    try:
        yield lock
    finally:
        lock.unlink(missing_ok=True)


def write_status(run_dir: str | Path, status: RunStatus) -> Path:
    path = Path(run_dir) / "status.json"
    path.write_text(status.model_dump_json(indent=2))
    return path


def read_status(run_dir: str | Path) -> Optional[RunStatus]:
    path = Path(run_dir) / "status.json"
    if not path.is_file():
        return None
    return RunStatus.model_validate_json(path.read_text())


# Scenes


def _synthetic(config: RunConfig, seed: int, n_views: int) -> Tuple[GroundTruthField, MultiViewDataset]:
    sc = config.scene
    return generate_synthetic_scene(
        seed, sc.grid_res, n_views, sc.hr_size, n_samples=config.field.n_samples, camera_radius=sc.camera_radius,
        focal_factor=sc.focal_factor, near=sc.near, far=sc.far, background=config.field.background, prompt=sc.prompt,
    )


def load_scene(config: RunConfig) -> Tuple[Optional[GroundTruthField], MultiViewDataset]:
    """The configured scene; synthetic scenes are read from the data root or generated and cached there."""
    if config.scene.source == SceneSource.llff:
        return None, load_llff(config.scene.llff_path, prompt=config.scene.prompt)
    directory = scene_dir(config.scene.seed)
    if (directory / "poses.json").is_file():
        return load_synthetic(directory)
    gt, dataset = _synthetic(config, config.scene.seed, config.scene.n_views)
    save_dataset(dataset, directory, gt)
    return gt, dataset


def run_generate(config: RunConfig, out_dir: str | Path | None = None, *, force: bool = False, corpus: bool = False) -> List[Path]:
    """Writes the configured synthetic scene (and optionally the pretraining corpus)."""
    if config.scene.source != SceneSource.synthetic:
        raise ConfigurationError("generate only builds synthetic scenes")
    jobs = [(config.scene.seed, config.scene.n_views, Path(out_dir) if out_dir else scene_dir(config.scene.seed))]
    if corpus:
        jobs += [(s, config.pretrain.corpus_views, scene_dir(s)) for s in config.pretrain.corpus_seeds]
    written: List[Path] = []
    for seed, n_views, target in jobs:
        if target.exists() and any(target.iterdir()) and not force:
            raise ConfigurationError(f"{target} is not empty; pass --force to overwrite")
        with stage_timer("generate"):
            gt, dataset = _synthetic(config, seed, n_views)
            written += save_dataset(dataset, target, gt)
        logger.info("Scene synthetic-%d written to %s", seed, target)
    return written


def corpus_datasets(config: RunConfig) -> List[MultiViewDataset]:
    out = []
    for seed in config.pretrain.corpus_seeds:
        directory = scene_dir(seed)
        if (directory / "poses.json").is_file():
            _, ds = load_synthetic(directory)
        else:
            logger.warning("Corpus scene %d missing under %s; generating it", seed, directory)
            gt, ds = _synthetic(config, seed, config.pretrain.corpus_views)
            save_dataset(ds, directory, gt)
        out.append(ds)
    return out


# Pretraining


def _hashes(path: Path) -> Dict[str, str]:
    return json.loads(path.read_text()) if path.is_file() else {}


def _record_hashes(path: Path, hashes: Dict[str, str]) -> None:
    path.write_text(json.dumps(hashes, indent=2, sort_keys=True))


def run_pretrain(config: RunConfig, *, force: bool = False) -> Dict[str, str]:
    """Trains (or reuses) codec, denoiser, vocabulary and NIQE model; returns the recorded hashes."""
    paths = pretrained_paths(checkpoints_dir(config))
    paths.root.mkdir(parents=True, exist_ok=True)
    hashes = {} if force else _hashes(paths.hashes)
    datasets = corpus_datasets(config)
    images = [img for ds in datasets for img in ds.hr_images]
    schedule = NoiseSchedule.from_config(config.schedule)
    schedule.to_csv(paths.schedule_csv)

    codec: Optional[LatentCodec] = None
    if paths.codec.is_file() and hashes.get("codec"):
        codec = LatentCodec.load(paths.codec)
        if codec.metadata.weights_hash != hashes["codec"]:
            logger.warning("codec.bin does not match the recorded hash; retraining")
            codec = None
    if codec is None:
        with stage_timer("codec"):
            codec = train_codec(images, config.codec.epochs, config.pretrain.seed, config.codec)
        codec.save(paths.codec, config.codec)
        hashes["codec"] = codec.metadata.weights_hash
        hashes.pop("denoiser", None)
        _record_hashes(paths.hashes, hashes)
    else:
        logger.info("Reusing codec %s", hashes["codec"][:12])

    vocab = build_vocabulary(datasets)
    vocab.add(config.scene.prompt)
    if not (paths.denoiser.is_file() and hashes.get("denoiser")):
        with stage_timer("denoiser"):
            corpus = build_corpus(codec, datasets, vocab)
            denoiser = pretrain_denoiser(
                codec, datasets, config.denoiser.steps, derive_seed(config.pretrain.seed, "denoiser"),
                config=config.denoiser, schedule=schedule, vocab=vocab, corpus=corpus,
            )
        save_denoiser(paths.denoiser, denoiser, config.denoiser, schedule, vocab)
        vocab.save(paths.vocab)
        hashes["denoiser"] = denoiser.metadata.weights_hash
        _record_hashes(paths.hashes, hashes)
    else:
        logger.info("Reusing denoiser %s", hashes["denoiser"][:12])

    if force or not paths.niqe.is_file():
        with stage_timer("niqe_fit"):
            fit_niqe_model(images, config.metrics.niqe_patch_size, config.metrics.niqe_min_side).save(paths.niqe)
    _record_hashes(paths.hashes, hashes)
    return hashes


# Fitting and super-resolution


def train_split(dataset: MultiViewDataset, held_out_every: int) -> MultiViewDataset:
    train, _ = split_views(len(dataset), held_out_every)
    return dataset.subset(train)


def run_fit_lr(config: RunConfig, run_dir: str | Path, *, force: bool = False) -> rf.RadianceField:
    run_dir = Path(run_dir)
    path = run_dir / "field_lr.bin"
    if path.is_file() and not force:
        field, _ = rf.RadianceField.load(path)
        logger.info("Reusing LR field %s", path)
        return field
    _, dataset = load_scene(config)
    with stage_timer("fit"):
        field = rf.fit_lr_nerf(
            train_split(dataset, config.scene.held_out_every), config.field.fit_steps, config.field,
            seed=derive_seed(config.seed, "fit_lr"), checkpoint_dir=run_dir / "checkpoints",
        )
    field.save(path)
    return field


def _prepare_run_dir(config: RunConfig, run_dir: Path, force: bool) -> None:
    cfg_path = run_dir / "config.json"
    text = config_json(config)
    if cfg_path.is_file() and cfg_path.read_text() != text and not force:
        raise ConfigurationError(f"{run_dir} holds a run with a different config; pass --force or pick another --out")
    cfg_path.write_text(text)


def run_superres(config: RunConfig, *, resume: bool = True, force: bool = False) -> MetricReport:
    """LR fit (if needed), I3DS rounds, final evaluation; records progress in status.json."""
    run_dir = Path(config.output_dir)
    with run_lock(run_dir):
        _prepare_run_dir(config, run_dir, force)
        write_status(run_dir, RunStatus(state="running", stage="setup"))
        try:
            report = _superres(config, run_dir, resume=resume)
        except NerfSRError as e:
            diag = getattr(e, "diagnostics", {})
            write_status(run_dir, RunStatus(state="failed", stage=diag.get("stage"), round_index=diag.get("round"), error=str(e), exit_code=e.exit_code))
            raise
        except Exception as e:
            write_status(run_dir, RunStatus(state="failed", error=repr(e), exit_code=1))
            raise
        write_status(run_dir, RunStatus(state="completed", stage="evaluate"))
        write_metrics(run_dir / "metrics.prom")
        logger.info("Stage timings: %s", get_stage_stats()["stages"])
        return report


def _superres(config: RunConfig, run_dir: Path, *, resume: bool) -> MetricReport:
    bundle: PretrainedBundle = load_pretrained(checkpoints_dir(config))
    _, dataset = load_scene(config)
    write_status(run_dir, RunStatus(state="running", stage="fit"))
    lr_field = run_fit_lr(config, run_dir)
    write_status(run_dir, RunStatus(state="running", stage="i3ds"))
    vsd_config = config.vsd_for_method()
    run_i3ds(
        lr_field, train_split(dataset, config.scene.held_out_every), bundle.denoiser, bundle.codec, config.i3ds,
        vsd_config=vsd_config, sched=bundle.schedule, prompt_id=bundle.vocab.lookup(dataset.prompt),
        run_dir=run_dir, field_config=config.field, lora_config=config.lora, seed=config.seed, resume=resume,
    )
    write_status(run_dir, RunStatus(state="running", stage="evaluate"))
    report = evaluate_run(
        run_dir, dataset, bundle.codec, method=config.method.value, niqe_model=bundle.niqe,
        field_config=config.field, metrics_config=config.metrics, held_out_every=config.scene.held_out_every,
    )
    (run_dir / "report.json").write_text(report.model_dump_json(indent=2))
    baseline = evaluate_bicubic_baseline(
        lr_field, dataset, bundle.codec, niqe_model=bundle.niqe, field_config=config.field,
        metrics_config=config.metrics, held_out_every=config.scene.held_out_every, config_hash=baseline_hash(config),
    )
    (run_dir / "baseline_report.json").write_text(baseline.model_dump_json(indent=2))
    return report


# Evaluation and comparison


def _read_report(path: Path) -> MetricReport:
    try:
        return MetricReport.model_validate_json(path.read_text())
    except (OSError, ValueError) as e:
        raise IngestionError(f"Cannot read report: {e}", path) from e


def _run_method(run_dir: Path) -> str:
    cfg = run_dir / "config.json"
    if cfg.is_file():
        try:
            return json.loads(cfg.read_text()).get("method", run_dir.name)
        except json.JSONDecodeError:
            pass
    return run_dir.name


def _baseline_rows(run_dirs: Sequence[Path]) -> List[Dict]:
    rows, seen = [], set()
    for run_dir in run_dirs:
        path = run_dir / "baseline_report.json"
        if path.is_file():
            report = _read_report(path)
            if report.config_hash not in seen:
                seen.add(report.config_hash)
                rows.append(exporter.report_row(report, str(run_dir)))
    return rows


def run_evaluate(run_dirs: Sequence[str | Path], out_dir: str | Path, *, with_baseline: bool = False) -> List[Path]:
    """Re-evaluates each run from its own config and writes the comparison table."""
    rows = []
    dirs = [Path(d) for d in run_dirs]
    for run_dir in dirs:
        method = _run_method(run_dir)
        status = read_status(run_dir)
        if status is None or status.state != "completed":
            rows.append(exporter.failed_row(method, str(run_dir), f"run state is {status.state if status else 'unknown'}"))
            continue
        try:
            config = RunConfig.model_validate_json((run_dir / "config.json").read_text())
            bundle = load_pretrained(checkpoints_dir(config))
            _, dataset = load_scene(config)
            report = evaluate_run(
                run_dir, dataset, bundle.codec, method=config.method.value, niqe_model=bundle.niqe,
                field_config=config.field, metrics_config=config.metrics, held_out_every=config.scene.held_out_every,
            )
            (run_dir / "report.json").write_text(report.model_dump_json(indent=2))
            rows.append(exporter.report_row(report, str(run_dir)))
        except (NerfSRError, OSError, ValidationError) as e:
            logger.warning("Evaluation of %s failed: %s", run_dir, e)
            rows.append(exporter.failed_row(method, str(run_dir), str(e).splitlines()[0]))
    if with_baseline:
        rows += _baseline_rows(dirs)
    return exporter.write_comparison(rows, out_dir)


def run_compare(run_dirs: Sequence[str | Path], out_dir: str | Path, *, with_baseline: bool = False) -> List[Path]:
    """Comparison table from the report.json files already present."""
    rows = []
    dirs = [Path(d) for d in run_dirs]
    for run_dir in dirs:
        path = run_dir / "report.json"
        status = read_status(run_dir)
        if not path.is_file() or status is None or status.state != "completed":
            rows.append(exporter.failed_row(_run_method(run_dir), str(run_dir), "no completed report"))
            continue
        rows.append(exporter.report_row(_read_report(path), str(run_dir)))
    if with_baseline:
        rows += _baseline_rows(dirs)
    return exporter.write_comparison(rows, out_dir)


def method_names() -> List[str]:
    return [m.value for m in Method]

