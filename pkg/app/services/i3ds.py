"""Iterative 3D synchronization: alternate per-view latent upscaling with
re-fitting the radiance field to the resulting SR targets.

Run directory layout written by :func:`run_i3ds`::

    round_##/targets/####.png
    round_##/latents.bin
    round_##/loss_trace.csv
    round_##/report.json
    checkpoints/field_round##.bin
    checkpoints/adapters_round##.bin
    field_sr.bin
"""
from __future__ import annotations

import dataclasses
import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch

from app.core.checkpoint import load_container, module_hash, save_container
from app.core.errors import NerfSRError, NumericalAbort, StageIsolationError
from app.core.monitoring import stage_timer
from app.schemas import FieldConfig, I3DSConfig, LoRAConfig, RoundReport, VSDConfig
from app.services import radiance_field as rf
from app.services.diffusion_core import Denoiser, NoiseSchedule
from app.services.helpers import derive_seed, make_generator, save_pngs, view_bucket
from app.services.latent_codec import LatentCodec, decode, encode, upsample_x4
from app.services.lora import AttachedAdapters, LoRAAdapter, adapters_hash, attach, detach, init_adapters, load_adapters, save_adapters
from app.services.metrics import mean_psnr, reprojection_error
from app.services.scene_data import CameraPose, MultiViewDataset
from app.services.vsd_sr import TRACE_COLUMNS, TraceRow, make_lora_optimizer, vsd_upscale

logger = logging.getLogger(__name__)


@dataclass
class UpscaleResult:
    targets: List[torch.Tensor]
    latents: List[torch.Tensor]
    trace: List[TraceRow] = dataclasses.field(default_factory=list)
    final_losses: List[float] = dataclasses.field(default_factory=list)


def _hash_adapters(adapters: Optional[AttachedAdapters]) -> Optional[str]:
    return adapters_hash(adapters.adapters) if adapters is not None else None


def upscale_stage(
    field: rf.RadianceField,
    dataset: MultiViewDataset,
    denoiser: Denoiser,
    codec: LatentCodec,
    adapters: Optional[AttachedAdapters],
    config: VSDConfig,
    generator: torch.Generator,
    *,
    sched: NoiseSchedule,
    prompt_id: int,
    field_config: FieldConfig | None = None,
) -> UpscaleResult:
    """Render LR, upsample 4x, encode, refine, decode; one SR target per pose."""
    field_config = field_config or FieldConfig()
    field_before = module_hash(field)
    h, w = dataset.lr_size
    result = UpscaleResult(targets=[], latents=[])
    # One optimizer per stage: Adam moments carry over from view to view
    trains_lora = adapters is not None and config.use_lora and not config.sds
    lora_optimizer = make_lora_optimizer(adapters, config.lr_lora) if trains_lora else None
    for i, pose in enumerate(dataset.poses):
        try:
            render = rf.render_image(
                field, pose, w, h, n_samples=field_config.n_samples, near=dataset.near, far=dataset.far,
                background=field_config.background,
            ).clamp(0.0, 1.0)
            x0 = encode(upsample_x4(render), codec, source_view=i)
            out = vsd_upscale(
                x0, dataset.lr_images[i], prompt_id, view_bucket(pose.rotation, denoiser.n_classes), denoiser, codec, config, generator,
                sched=sched, adapters=adapters, lora_optimizer=lora_optimizer,
            )
        except NumericalAbort as e:
            e.diagnostics.setdefault("view", i)
            logger.error("Upscaling aborted at view %d: %s", i, e)
            raise
        except NerfSRError:
            logger.error("Upscaling failed at view %d", i)
            raise
        result.targets.append(decode(out.latent, codec).clamp(0.0, 1.0))
        result.latents.append(out.latent.data)
        result.trace.extend(out.trace)
        result.final_losses.append(out.trace[-1].loss_vsd if out.trace else 0.0)
    if module_hash(field) != field_before:
        raise StageIsolationError("radiance field changed during the upscaling stage")
    return result


def sync_stage(
    field: rf.RadianceField,
    targets: Sequence[torch.Tensor],
    poses: Sequence[CameraPose],
    config: I3DSConfig,
    generator: torch.Generator,
    *,
    near: float,
    far: float,
    field_config: FieldConfig | None = None,
    adapters: Optional[AttachedAdapters] = None,
) -> Tuple[rf.RadianceField, List[float]]:
    """Fits the field to the SR targets; ``poses`` address the LR plane and are scaled 4x here.

    A field coarser than ``field_config.sr_grid_res`` is upsampled first.
    """
    field_config = field_config or FieldConfig()
    if len({tuple(t.shape) for t in targets}) > 1:
        raise StageIsolationError("SR targets differ in size across views")
    adapters_before = _hash_adapters(adapters)
    if field.grid_res < field_config.sr_grid_res:
        logger.info("Upgrading field grid %d^3 -> %d^3", field.grid_res, field_config.sr_grid_res)
        field = field.upsampled(field_config.sr_grid_res)
    hr_poses = [p.scaled(4) for p in poses]
    losses = rf.fit_views(
        field, targets, hr_poses, config.max_sync_iter, field_config, generator,
        near=near, far=far, lr=config.sync_lr, ray_batch=config.ray_batch, stage="sync",
        jitter=config.sync_stratified,
    )
    if _hash_adapters(adapters) != adapters_before:
        raise StageIsolationError("LoRA adapters changed during the synchronization stage")
    return field, losses


def round_dir(run_dir: Path, r: int) -> Path:
    return run_dir / f"round_{r:02d}"


def _checkpoint_paths(run_dir: Path, r: int) -> Tuple[Path, Path]:
    ck = run_dir / "checkpoints"
    return ck / f"field_round{r:02d}.bin", ck / f"adapters_round{r:02d}.bin"


def last_completed_round(run_dir: str | Path) -> int:
    """Highest round with a report and both checkpoints on disk; -1 if none."""
    run_dir = Path(run_dir)
    r = -1
    while True:
        nxt = r + 1
        field_ck, adapters_ck = _checkpoint_paths(run_dir, nxt)
        if not ((round_dir(run_dir, nxt) / "report.json").is_file() and field_ck.is_file() and adapters_ck.is_file()):
            return r
        r = nxt


def _render_views(field: rf.RadianceField, poses: Sequence[CameraPose], size: Tuple[int, int], dataset: MultiViewDataset, field_config: FieldConfig) -> List[rf.RenderOutput]:
    h, w = size
    return [
        rf.render_view(field, p.scaled(4), 4 * w, 4 * h, n_samples=field_config.n_samples, near=dataset.near, far=dataset.far, background=field_config.background)
        for p in poses
    ]


def _round_report(
    r: int, upscaled: UpscaleResult, sync_losses: List[float], field: rf.RadianceField, dataset: MultiViewDataset,
    field_config: FieldConfig, adapters: Optional[AttachedAdapters], wall_clock: Dict[str, float],
) -> RoundReport:
    renders = _render_views(field, dataset.poses, dataset.lr_size, dataset, field_config)
    rgb = [o.rgb.clamp(0.0, 1.0) for o in renders]
    hr_poses = [p.scaled(4) for p in dataset.poses]
    depths = [o.depth for o in renders]
    masks = [o.opacity > 0.5 for o in renders]
    report = RoundReport(
        round_index=r,
        vsd_final_losses=upscaled.final_losses,
        sync_losses=sync_losses,
        consistency_targets=_finite_or_none(reprojection_error(upscaled.targets, hr_poses, depths, masks)),
        consistency_renders=_finite_or_none(reprojection_error(rgb, hr_poses, depths, masks)),
        wall_clock=wall_clock,
        field_hash=module_hash(field),
        adapter_hash=_hash_adapters(adapters),
    )
    if dataset.hr_images is not None:
        report.psnr_targets = _finite_or_none(mean_psnr(upscaled.targets, dataset.hr_images))
        report.psnr_renders = _finite_or_none(mean_psnr(rgb, dataset.hr_images))
    return report


def _finite_or_none(value: float) -> Optional[float]:
    return value if math.isfinite(value) else None


def _write_round(run_dir: Path, r: int, upscaled: UpscaleResult, report: RoundReport) -> None:
    rd = round_dir(run_dir, r)
    save_pngs(upscaled.targets, rd / "targets")
    save_container(rd / "latents.bin", "latents", {"latents": torch.stack(upscaled.latents) if upscaled.latents else torch.empty(0)}, meta={"round": r})
    pd.DataFrame([asdict(row) for row in upscaled.trace], columns=list(TRACE_COLUMNS)).to_csv(rd / "loss_trace.csv", index=False)
    (rd / "report.json").write_text(report.model_dump_json(indent=2))


def run_i3ds(
    lr_field: rf.RadianceField,
    dataset: MultiViewDataset,
    denoiser: Denoiser,
    codec: LatentCodec,
    config: I3DSConfig,
    *,
    vsd_config: VSDConfig,
    sched: NoiseSchedule,
    prompt_id: int,
    run_dir: str | Path,
    field_config: FieldConfig | None = None,
    lora_config: LoRAConfig | None = None,
    seed: int = 0,
    resume: bool = True,
) -> Tuple[rf.RadianceField, List[RoundReport]]:
    """``config.rounds`` x (upscale_stage -> sync_stage) on the training views of ``dataset``.

    Restarts after the last completed round found in ``run_dir`` when ``resume`` is set.
    """
    run_dir = Path(run_dir)
    field_config = field_config or FieldConfig()
    lora_config = lora_config or LoRAConfig()
    generator = make_generator(derive_seed(seed, config.seed, "i3ds"))
    denoiser_hash, codec_hash = module_hash(denoiser), module_hash(codec)
    uses_lora = not vsd_config.sds and vsd_config.max_steps > 0

    field = lr_field
    raw_adapters: Dict[str, LoRAAdapter] = init_adapters(denoiser, lora_config, generator) if uses_lora else {}
    reports: List[RoundReport] = []
    start = 0
    done = last_completed_round(run_dir) if resume else -1
    if done >= 0:
        field_ck, adapters_ck = _checkpoint_paths(run_dir, done)
        field, rng_state = rf.RadianceField.load(field_ck)
        raw_adapters, _ = load_adapters(adapters_ck)
        if rng_state is not None:
            generator.set_state(rng_state)
        for r in range(done + 1):
            reports.append(RoundReport.model_validate_json((round_dir(run_dir, r) / "report.json").read_text()))
        start = done + 1
        logger.info("Resuming I3DS at round %d of %d", start, config.rounds)

    handle = attach(raw_adapters, denoiser, max_param_fraction=lora_config.max_param_fraction) if uses_lora else None
    r = start
    try:
        for r in range(start, config.rounds):
            if handle is not None and config.reset_lora and r > 0:
                detach(handle)
                handle = attach(init_adapters(denoiser, lora_config, generator), denoiser, max_param_fraction=lora_config.max_param_fraction)
            wall_clock: Dict[str, float] = {}
            with stage_timer("upscale") as timing:
                upscaled = upscale_stage(
                    field, dataset, denoiser, codec, handle, vsd_config, generator,
                    sched=sched, prompt_id=prompt_id, field_config=field_config,
                )
            wall_clock["upscale"] = timing["duration"]
            with stage_timer("sync") as timing:
                field, sync_losses = sync_stage(
                    field, upscaled.targets, dataset.poses, config, generator,
                    near=dataset.near, far=dataset.far, field_config=field_config, adapters=handle,
                )
            wall_clock["sync"] = timing["duration"]
            if module_hash(denoiser) != denoiser_hash or module_hash(codec) != codec_hash:
                raise StageIsolationError(f"frozen denoiser or codec weights changed in round {r}")
            report = _round_report(r, upscaled, sync_losses, field, dataset, field_config, handle, wall_clock)
            _write_round(run_dir, r, upscaled, report)
            field_ck, adapters_ck = _checkpoint_paths(run_dir, r)
            save_adapters(adapters_ck, handle.adapters if handle is not None else {}, generator)
            field.save(field_ck, generator)
            reports.append(report)
            logger.info(
                "Round %d/%d done: psnr_targets=%s psnr_renders=%s sync %.4f -> %.4f",
                r + 1, config.rounds, report.psnr_targets, report.psnr_renders, sync_losses[0], sync_losses[-1],
            )
    except NumericalAbort as e:
        e.diagnostics.setdefault("round", r)
        raise
    finally:
        if handle is not None:
            detach(handle)
    if field.grid_res < field_config.sr_grid_res:
        field = field.upsampled(field_config.sr_grid_res)
    field.save(run_dir / "field_sr.bin")
    (run_dir / "rounds.json").write_text(json.dumps([rep.model_dump(mode="json") for rep in reports], indent=2))
    return field, reports


def load_round_latents(run_dir: str | Path, r: int) -> torch.Tensor:
    payload, _ = load_container(round_dir(Path(run_dir), r) / "latents.bin", "latents")
    return payload["latents"]
