"""Dense voxel radiance field, differentiable volume renderer and photometric fitting.

Grids are indexed ``[ix, iy, iz]`` over an axis-aligned box; queries use
trilinear interpolation with grid corners on the box faces. Points outside
the box carry zero density.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Optional, Protocol, Sequence, Tuple

import torch
import torch.nn.functional as F
from torch import nn

from app.core.checkpoint import load_container, save_container
from app.core.errors import ConfigurationError, NumericalAbort, ShapeError
from app.core.monitoring import record_abort, record_step
from app.schemas import FieldConfig
from app.services.helpers import make_generator

if TYPE_CHECKING:
    from app.services.scene_data import CameraPose, MultiViewDataset

logger = logging.getLogger(__name__)

DIRECTION_TOL = 1e-6
RENDER_CHUNK = 8192


class VolumeField(Protocol):
    bbox: torch.Tensor

    def query(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]: ...


@dataclass(frozen=True)
class RayBatch:
    origins: torch.Tensor  # N x 3
    directions: torch.Tensor  # N x 3, unit
    near: float
    far: float
    target: Optional[torch.Tensor] = None  # N x 3

    def __post_init__(self):
        if self.origins.shape != self.directions.shape or self.origins.shape[-1] != 3:
            raise ShapeError(f"origins {tuple(self.origins.shape)} / directions {tuple(self.directions.shape)} mismatch")
        norms = self.directions.norm(dim=-1)
        if norms.numel() and (norms - 1.0).abs().max().item() > DIRECTION_TOL:
            raise ShapeError("ray directions must be unit vectors")
        if not self.near < self.far:
            raise ConfigurationError(f"near ({self.near}) must be smaller than far ({self.far})")
        if self.target is not None and self.target.shape != self.origins.shape:
            raise ShapeError(f"target colors {tuple(self.target.shape)} do not match {tuple(self.origins.shape)}")

    def __len__(self) -> int:
        return int(self.origins.shape[0])


@dataclass
class RenderOutput:
    rgb: torch.Tensor
    depth: torch.Tensor
    opacity: torch.Tensor


def trilinear(grid: torch.Tensor, points: torch.Tensor, bbox: torch.Tensor, padding_mode: str = "zeros") -> torch.Tensor:
    """Samples a C x G x G x G grid at world points (..., 3); returns (..., C)."""
    lo, hi = bbox[0].to(points), bbox[1].to(points)
    norm = 2.0 * (points - lo) / (hi - lo) - 1.0
    # grid_sample reads (x, y, z) as (W, H, D); storage is [ix, iy, iz] = (D, H, W)
    coords = norm[..., [2, 1, 0]].reshape(1, -1, 1, 1, 3)
    out = F.grid_sample(grid[None], coords, mode="bilinear", padding_mode=padding_mode, align_corners=True)
    return out.reshape(grid.shape[0], -1).T.reshape(*points.shape[:-1], grid.shape[0])


def _inside(points: torch.Tensor, bbox: torch.Tensor) -> torch.Tensor:
    lo, hi = bbox[0].to(points), bbox[1].to(points)
    return ((points >= lo) & (points <= hi)).all(dim=-1)


class RadianceField(nn.Module):
    """Trainable voxel field: softplus(density_raw) and sigmoid(color_raw) at query time."""

    def __init__(self, grid_res: int, bbox: torch.Tensor, *, init_density: float = -2.0, dtype: torch.dtype = torch.float32):
        super().__init__()
        if grid_res < 2:
            raise ConfigurationError(f"grid_res must be >= 2, got {grid_res}")
        self.density_raw = nn.Parameter(torch.full((grid_res,) * 3, float(init_density), dtype=dtype))
        self.color_raw = nn.Parameter(torch.zeros((grid_res,) * 3 + (3,), dtype=dtype))
        self.register_buffer("bbox", torch.as_tensor(bbox, dtype=dtype).clone())
        self.step = 0

    @property
    def grid_res(self) -> int:
        return int(self.density_raw.shape[0])

    def query(self, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor]:
        raw_sigma = trilinear(self.density_raw[None], points, self.bbox, padding_mode="zeros")[..., 0]
        sigma = F.softplus(raw_sigma) * _inside(points, self.bbox).to(points.dtype)
        rgb = torch.sigmoid(trilinear(self.color_raw.permute(3, 0, 1, 2), points, self.bbox, padding_mode="border"))
        return sigma, rgb

    def upsampled(self, grid_res: int) -> "RadianceField":
        """Copy with both raw grids trilinearly resampled to ``grid_res``^3."""
        out = RadianceField(grid_res, self.bbox, dtype=self.density_raw.dtype)
        with torch.no_grad():
            dens = F.interpolate(self.density_raw[None, None], size=(grid_res,) * 3, mode="trilinear", align_corners=True)
            col = F.interpolate(self.color_raw.permute(3, 0, 1, 2)[None], size=(grid_res,) * 3, mode="trilinear", align_corners=True)
            out.density_raw.copy_(dens[0, 0])
            out.color_raw.copy_(col[0].permute(1, 2, 3, 0))
        out.step = self.step
        return out

    def save(self, path: str | Path, generator: torch.Generator | None = None) -> Path:
        payload = {
            "density_raw": self.density_raw.detach(),
            "color_raw": self.color_raw.detach(),
            "bbox": self.bbox,
            "step": self.step,
            "rng_state": generator.get_state() if generator is not None else None,
        }
        return save_container(path, "radiance_field", payload, meta={"grid_res": self.grid_res, "step": self.step})

    @classmethod
    def load(cls, path: str | Path) -> Tuple["RadianceField", Optional[torch.Tensor]]:
        """Returns the field and the stored RNG state (or None)."""
        payload, _ = load_container(path, "radiance_field")
        field = cls(int(payload["density_raw"].shape[0]), payload["bbox"], dtype=payload["density_raw"].dtype)
        with torch.no_grad():
            field.density_raw.copy_(payload["density_raw"])
            field.color_raw.copy_(payload["color_raw"])
        field.step = int(payload["step"])
        return field, payload.get("rng_state")


def composite(sigma: torch.Tensor, rgb: torch.Tensor, deltas: torch.Tensor, t: torch.Tensor, background: torch.Tensor) -> RenderOutput:
    """C = sum_i T_i (1 - exp(-sigma_i delta_i)) c_i + T_final * background."""
    tau = sigma * deltas
    cum = torch.cumsum(tau, dim=-1)
    trans = torch.exp(-torch.cat([torch.zeros_like(cum[..., :1]), cum[..., :-1]], dim=-1))
    weights = trans * (1.0 - torch.exp(-tau))
    t_final = torch.exp(-cum[..., -1])
    color = (weights[..., None] * rgb).sum(dim=-2) + t_final[..., None] * background.to(rgb)
    opacity = 1.0 - t_final
    depth = (weights * t).sum(dim=-1) / opacity.clamp_min(1e-10)
    return RenderOutput(rgb=color, depth=depth, opacity=opacity)


def sample_depths(near: float, far: float, n_rays: int, n_samples: int, generator: torch.Generator | None, dtype: torch.dtype) -> torch.Tensor:
    """Stratified depths (n_rays x n_samples); bin midpoints when no generator is given."""
    edges = torch.linspace(near, far, n_samples + 1, dtype=dtype)
    lower, upper = edges[:-1], edges[1:]
    if generator is None:
        u = torch.full((n_rays, n_samples), 0.5, dtype=dtype)
    else:
        u = torch.rand((n_rays, n_samples), generator=generator, dtype=dtype)
    return lower + (upper - lower) * u


def render_rays(
    field: VolumeField,
    rays: RayBatch,
    n_samples: int,
    *,
    generator: torch.Generator | None = None,
    background: Sequence[float] | torch.Tensor = (1.0, 1.0, 1.0),
) -> RenderOutput:
    if n_samples < 2:
        raise ConfigurationError(f"n_samples must be >= 2, got {n_samples}")
    dtype = rays.origins.dtype
    n = len(rays)
    t = sample_depths(rays.near, rays.far, n, n_samples, generator, dtype)
    points = rays.origins[:, None, :] + t[..., None] * rays.directions[:, None, :]
    sigma, rgb = field.query(points.reshape(-1, 3))
    sigma = sigma.reshape(n, n_samples)
    rgb = rgb.reshape(n, n_samples, 3)
    deltas = torch.cat([t[:, 1:] - t[:, :-1], rays.far - t[:, -1:]], dim=-1)
    return composite(sigma, rgb, deltas, t, torch.as_tensor(background, dtype=dtype))


def pixel_rays(pose: "CameraPose", width: int, height: int, dtype: torch.dtype = torch.float32) -> Tuple[torch.Tensor, torch.Tensor]:
    """Origins and unit directions through every pixel center, row-major (H*W x 3)."""
    v, u = torch.meshgrid(torch.arange(height, dtype=torch.float64) + 0.5, torch.arange(width, dtype=torch.float64) + 0.5, indexing="ij")
    dirs_cam = torch.stack([(u - pose.cx) / pose.fx, (v - pose.cy) / pose.fy, torch.ones_like(u)], dim=-1)
    dirs = dirs_cam.reshape(-1, 3) @ pose.rotation.T
    dirs = dirs / dirs.norm(dim=-1, keepdim=True)
    origins = pose.translation.expand_as(dirs)
    return origins.to(dtype).contiguous(), dirs.to(dtype).contiguous()


def render_view(
    field: VolumeField,
    pose: "CameraPose",
    width: int,
    height: int,
    *,
    n_samples: int = 64,
    near: float = 1.0,
    far: float = 5.0,
    background: Sequence[float] | torch.Tensor = (1.0, 1.0, 1.0),
    generator: torch.Generator | None = None,
    dtype: torch.dtype = torch.float32,
) -> RenderOutput:
    """Renders every pixel; outputs are image shaped (H x W x 3, H x W, H x W)."""
    origins, dirs = pixel_rays(pose, width, height, dtype)
    rgb, depth, opacity = [], [], []
    with torch.no_grad():
        for start in range(0, origins.shape[0], RENDER_CHUNK):
            sl = slice(start, start + RENDER_CHUNK)
            out = render_rays(field, RayBatch(origins[sl], dirs[sl], near, far), n_samples, generator=generator, background=background)
            rgb.append(out.rgb)
            depth.append(out.depth)
            opacity.append(out.opacity)
    return RenderOutput(
        rgb=torch.cat(rgb).reshape(height, width, 3),
        depth=torch.cat(depth).reshape(height, width),
        opacity=torch.cat(opacity).reshape(height, width),
    )


def render_image(field: VolumeField, pose: "CameraPose", width: int, height: int, **kwargs) -> torch.Tensor:
    return render_view(field, pose, width, height, **kwargs).rgb


def sample_rays(
    image: torch.Tensor,
    pose: "CameraPose",
    batch: int,
    generator: torch.Generator | int,
    *,
    near: float,
    far: float,
) -> RayBatch:
    """Uniform random pixel subset without replacement, targets read from ``image``."""
    h, w = int(image.shape[0]), int(image.shape[1])
    if batch > h * w:
        raise ShapeError(f"batch {batch} exceeds the {h * w} pixels of a {h}x{w} image")
    if isinstance(generator, int):
        generator = make_generator(generator)
    idx = torch.randperm(h * w, generator=generator)[:batch]
    origins, dirs = pixel_rays(pose, w, h, image.dtype)
    target = image.reshape(-1, 3)[idx]
    return RayBatch(origins[idx], dirs[idx], near, far, target=target)


def make_optimizer(field: RadianceField, lr: float) -> torch.optim.Optimizer:
    # Adaptive step without momentum
    return torch.optim.Adam(field.parameters(), lr=lr, betas=(0.0, 0.99))


def fit_step(
    field: RadianceField,
    rays: RayBatch,
    optimizer: torch.optim.Optimizer,
    *,
    n_samples: int = 64,
    generator: torch.Generator | None = None,
    background: Sequence[float] = (1.0, 1.0, 1.0),
    stage: str = "fit",
    view_index: int | None = None,
) -> float:
    """One optimizer step on mean per-ray L1 photometric error; returns the pre-step loss."""
    if rays.target is None:
        raise ShapeError("fit_step needs rays with target colors")
    optimizer.zero_grad(set_to_none=True)
    out = render_rays(field, rays, n_samples, generator=generator, background=background)
    loss = (out.rgb - rays.target).abs().sum(dim=-1).mean()
    if not torch.isfinite(loss):
        record_abort(stage)
        raise NumericalAbort("non-finite photometric loss", stage=stage, iteration=field.step, pose_index=view_index)
    loss.backward()
    if any(group["lr"] > 0 for group in optimizer.param_groups):
        optimizer.step()
    field.step += 1
    value = float(loss.detach())
    record_step(stage, value)
    return value


class DivergenceMonitor:
    """Aborts when the loss stays above ``factor`` x the first loss for ``patience`` consecutive steps."""

    def __init__(self, factor: float, patience: int, stage: str):
        self.factor = factor
        self.patience = patience
        self.stage = stage
        self.initial: float | None = None
        self.strikes = 0

    def update(self, loss: float, iteration: int, view_index: int | None = None) -> None:
        if self.initial is None:
            self.initial = loss
            return
        if loss > self.factor * max(self.initial, 1e-12):
            self.strikes += 1
        else:
            self.strikes = 0
        if self.strikes >= self.patience:
            record_abort(self.stage)
            raise NumericalAbort(
                "photometric loss diverged", stage=self.stage, iteration=iteration, pose_index=view_index,
                loss=loss, initial_loss=self.initial,
            )


def fit_views(
    field: RadianceField,
    images: Sequence[torch.Tensor],
    poses: Sequence["CameraPose"],
    steps: int,
    config: FieldConfig,
    generator: torch.Generator,
    *,
    near: float,
    far: float,
    lr: float,
    ray_batch: int,
    stage: str,
    checkpoint_dir: str | Path | None = None,
    jitter: bool = True,
) -> list[float]:
    """Shared sample_rays + fit_step loop over random views; returns the loss trace.

    With ``jitter`` off every ray is sampled at bin midpoints.
    """
    optimizer = make_optimizer(field, lr)
    monitor = DivergenceMonitor(config.divergence_factor, config.divergence_patience, stage)
    losses: list[float] = []
    for it in range(steps):
        v = int(torch.randint(len(images), (1,), generator=generator))
        img = images[v]
        batch = min(ray_batch, int(img.shape[0] * img.shape[1]))
        rays = sample_rays(img, poses[v], batch, generator, near=near, far=far)
        loss = fit_step(
            field, rays, optimizer, n_samples=config.n_samples, generator=generator if jitter else None,
            background=config.background, stage=stage, view_index=v,
        )
        monitor.update(loss, it, v)
        losses.append(loss)
        if (it + 1) % config.log_every == 0:
            logger.info("%s step %d/%d loss=%.5f", stage, it + 1, steps, loss)
        if checkpoint_dir is not None and (it + 1) % config.checkpoint_every == 0:
            field.save(Path(checkpoint_dir) / f"{stage}_step{it + 1:06d}.bin", generator)
    return losses


def fit_lr_nerf(
    dataset: "MultiViewDataset",
    steps: int,
    config: FieldConfig,
    *,
    seed: int = 0,
    checkpoint_dir: str | Path | None = None,
) -> RadianceField:
    if len(dataset) < 2:
        raise ConfigurationError(f"fit_lr_nerf needs at least 2 views, got {len(dataset)}")
    field = RadianceField(config.lr_grid_res, dataset.bbox, init_density=config.init_density)
    if steps == 0:
        return field
    generator = make_generator(seed)
    losses = fit_views(
        field, dataset.lr_images, dataset.poses, steps, config, generator,
        near=dataset.near, far=dataset.far, lr=config.lr, ray_batch=config.ray_batch,
        stage="fit", checkpoint_dir=checkpoint_dir,
    )
    logger.info("LR field fitted on %s: %d steps, first loss %.4f, last loss %.4f", dataset.scene_id, steps, losses[0], losses[-1])
    return field
