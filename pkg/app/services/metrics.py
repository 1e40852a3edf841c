"""Image quality metrics: PSNR, NIQE, a codec-feature perceptual proxy and
a cross-view reprojection error, plus evaluation of finished runs.
"""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import scipy.linalg
import scipy.ndimage
import scipy.special
import torch
import torch.nn.functional as F
from PIL import Image

from app.core.errors import ConfigurationError, IngestionError, ShapeError
from app.schemas import FieldConfig, MetricReport, MetricsConfig
from app.services import radiance_field as rf
from app.services.helpers import split_views
from app.services.latent_codec import LatentCodec, encoder_features, upsample_x4
from app.services.scene_data import CameraPose, MultiViewDataset

logger = logging.getLogger(__name__)

NIQE_MODEL_VERSION = 1

_GAMMA_RANGE = np.arange(0.2, 10.0, 0.001)
_PREC_GAMMAS = scipy.special.gamma(2.0 / _GAMMA_RANGE) ** 2 / (scipy.special.gamma(1.0 / _GAMMA_RANGE) * scipy.special.gamma(3.0 / _GAMMA_RANGE))


def _as_array(img) -> np.ndarray:
    if isinstance(img, torch.Tensor):
        img = img.detach().cpu().numpy()
    return np.asarray(img, dtype=np.float64)


def psnr(a, b, max_val: float = 1.0) -> float:
    """10 log10(max_val^2 / MSE) in dB; ``math.inf`` for identical images."""
    a, b = _as_array(a), _as_array(b)
    if a.shape != b.shape:
        raise ShapeError(f"psnr inputs differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return math.inf
    return 10.0 * math.log10(max_val ** 2 / mse)


def mean_psnr(images: Sequence, references: Sequence, max_val: float = 1.0) -> float:
    values = [psnr(a, b, max_val) for a, b in zip(images, references)]
    return float(np.mean(values)) if values else math.nan


# NIQE


@dataclass
class NIQEModel:
    mu: np.ndarray
    cov: np.ndarray
    patch_size: int = 32
    version: int = NIQE_MODEL_VERSION

    def to_json(self) -> dict:
        return {"version": self.version, "patch_size": self.patch_size, "mu": self.mu.tolist(), "cov": self.cov.tolist()}

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json()))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "NIQEModel":
        path = Path(path)
        try:
            doc = json.loads(path.read_text())
            model = cls(np.asarray(doc["mu"], dtype=np.float64), np.asarray(doc["cov"], dtype=np.float64), int(doc["patch_size"]), int(doc["version"]))
        except (OSError, json.JSONDecodeError, KeyError, TypeError) as e:
            raise IngestionError(f"Cannot read NIQE model: {e}", path) from e
        if model.version > NIQE_MODEL_VERSION:
            raise IngestionError(f"Unsupported NIQE model version {model.version}", path)
        return model


def _luminance(img) -> np.ndarray:
    arr = _as_array(img)
    if arr.ndim == 3:
        arr = arr @ np.array([0.299, 0.587, 0.114])
    if arr.ndim != 2:
        raise ShapeError(f"expected an H x W (x 3) image, got shape {arr.shape}")
    return arr * 255.0


def _gauss_window(lw: int = 3, sigma: float = 7.0 / 6.0) -> np.ndarray:
    x = np.arange(-lw, lw + 1, dtype=np.float64)
    w = np.exp(-0.5 * x ** 2 / sigma ** 2)
    return w / w.sum()


def mscn(image: np.ndarray, C: float = 1.0) -> np.ndarray:
    """Mean-subtracted contrast-normalized coefficients."""
    window = _gauss_window()
    mu = scipy.ndimage.correlate1d(image, window, 0, mode="constant")
    mu = scipy.ndimage.correlate1d(mu, window, 1, mode="constant")
    var = scipy.ndimage.correlate1d(image ** 2, window, 0, mode="constant")
    var = scipy.ndimage.correlate1d(var, window, 1, mode="constant")
    sigma = np.sqrt(np.abs(var - mu ** 2))
    return (image - mu) / (sigma + C)


def aggd_features(data: np.ndarray) -> Tuple[float, float, float, float]:
    """Asymmetric generalized Gaussian fit: (alpha, mean, left scale, right scale)."""
    data = data.reshape(-1)
    sq = data * data
    left, right = sq[data < 0], sq[data >= 0]
    left_std = math.sqrt(float(left.mean())) if left.size else 0.0
    right_std = math.sqrt(float(right.mean())) if right.size else 0.0
    gamma_hat = left_std / right_std if right_std != 0 else math.inf
    mean_sq = float(sq.mean())
    r_hat = float(np.abs(data).mean()) ** 2 / mean_sq if mean_sq != 0 else math.inf
    if math.isinf(gamma_hat) or math.isinf(r_hat):
        rhat_norm = math.inf
    else:
        rhat_norm = r_hat * ((gamma_hat ** 3 + 1) * (gamma_hat + 1)) / (gamma_hat ** 2 + 1) ** 2
    alpha = float(_GAMMA_RANGE[np.argmin((_PREC_GAMMAS - rhat_norm) ** 2)]) if math.isfinite(rhat_norm) else float(_GAMMA_RANGE[-1])
    g1, g2, g3 = (scipy.special.gamma(k / alpha) for k in (1.0, 2.0, 3.0))
    ratio = math.sqrt(g1) / math.sqrt(g3)
    bl, br = ratio * left_std, ratio * right_std
    return alpha, (br - bl) * (g2 / g1), bl, br


def _paired_products(m: np.ndarray) -> Tuple[np.ndarray, ...]:
    return (
        np.roll(m, 1, axis=1) * m,
        np.roll(m, 1, axis=0) * m,
        np.roll(np.roll(m, 1, axis=0), 1, axis=1) * m,
        np.roll(np.roll(m, 1, axis=0), -1, axis=1) * m,
    )


def _patch_features(patch: np.ndarray) -> np.ndarray:
    alpha, _, bl, br = aggd_features(patch)
    feats = [alpha, (bl + br) / 2.0]
    for pp in _paired_products(patch):
        feats.extend(aggd_features(pp))
    return np.asarray(feats)


def _patches(img: np.ndarray, size: int) -> List[np.ndarray]:
    h, w = img.shape
    return [img[j:j + size, i:i + size] for j in range(0, h - size + 1, size) for i in range(0, w - size + 1, size)]


def _half_scale(image: np.ndarray) -> np.ndarray:
    h, w = image.shape
    im = Image.fromarray(image.astype(np.float32))
    return np.asarray(im.resize((w // 2, h // 2), Image.Resampling.BICUBIC), dtype=np.float64)


def niqe_features(img, patch_size: int = 32, min_side: int = 96) -> np.ndarray:
    """Per-patch 36-dim features: 18 at full scale, 18 at half scale."""
    lum = _luminance(img)
    if min(lum.shape) < min_side:
        raise ShapeError(f"NIQE needs images with min side >= {min_side}, got {lum.shape}")
    full = np.stack([_patch_features(p) for p in _patches(mscn(lum), patch_size)])
    half = np.stack([_patch_features(p) for p in _patches(mscn(_half_scale(lum)), patch_size // 2)])
    n = min(len(full), len(half))
    return np.hstack([full[:n], half[:n]])


def fit_niqe_model(images: Sequence, patch_size: int = 32, min_side: int = 96) -> NIQEModel:
    """Pristine (mean, covariance) of patch features over a reference corpus."""
    if not images:
        raise ConfigurationError("fit_niqe_model needs at least one image")
    feats = np.vstack([niqe_features(img, patch_size, min_side) for img in images])
    model = NIQEModel(feats.mean(axis=0), np.cov(feats.T), patch_size)
    logger.info("Fitted NIQE model on %d images (%d patches)", len(images), feats.shape[0])
    return model


def niqe(img, model: NIQEModel, min_side: int = 96) -> float:
    """Mahalanobis-type distance between the image's patch statistics and the pristine model (lower is better)."""
    feats = niqe_features(img, model.patch_size, min_side)
    if feats.shape[0] < 2:
        raise ShapeError("NIQE needs at least two patches per image")
    x = feats.mean(axis=0) - model.mu
    cov = (model.cov + np.cov(feats.T)) / 2.0
    return float(np.sqrt(x @ scipy.linalg.pinv(cov) @ x))


def perc_proxy(a: torch.Tensor, b: torch.Tensor, codec: LatentCodec) -> float:
    """Mean squared distance of codec encoder features, averaged over stages."""
    if a.shape != b.shape:
        raise ShapeError(f"perc_proxy inputs differ in shape: {tuple(a.shape)} vs {tuple(b.shape)}")
    fa, fb = encoder_features(a, codec), encoder_features(b, codec)
    return float(np.mean([float(((x - y) ** 2).mean()) for x, y in zip(fa, fb)]))


# Cross-view consistency


def _project(pose: CameraPose, points: torch.Tensor) -> Tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    cam = (points - pose.translation) @ pose.rotation
    z = cam[:, 2]
    u = pose.fx * cam[:, 0] / z + pose.cx
    v = pose.fy * cam[:, 1] / z + pose.cy
    return u, v, z


def _sample(image: torch.Tensor, u: torch.Tensor, v: torch.Tensor) -> torch.Tensor:
    h, w = image.shape[:2]
    grid = torch.stack([2.0 * u / w - 1.0, 2.0 * v / h - 1.0], dim=-1).reshape(1, -1, 1, 2)
    out = F.grid_sample(image.permute(2, 0, 1)[None].to(grid.dtype), grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out[0, :, :, 0].T


def pair_reprojection_error(
    image_i: torch.Tensor, image_j: torch.Tensor, pose_i: CameraPose, pose_j: CameraPose, depth_i: torch.Tensor, mask_i: torch.Tensor,
) -> Optional[float]:
    """Mean L1 color error of view i pixels warped into view j through view i's depth."""
    h, w = image_i.shape[:2]
    origins, dirs = rf.pixel_rays(pose_i, w, h, torch.float64)
    points = origins + dirs * depth_i.reshape(-1, 1).to(torch.float64)
    u, v, z = _project(pose_j, points)
    hj, wj = image_j.shape[:2]
    valid = mask_i.reshape(-1) & (z > 0) & (u >= 0) & (u <= wj) & (v >= 0) & (v <= hj)
    if not bool(valid.any()):
        return None
    warped = _sample(image_j, u[valid], v[valid])
    src = image_i.reshape(-1, 3)[valid].to(torch.float64)
    return float((warped - src).abs().mean())


def reprojection_error(
    images: Sequence[torch.Tensor],
    poses: Sequence[CameraPose],
    depths: Sequence[torch.Tensor],
    masks: Sequence[torch.Tensor],
) -> float:
    """Average pairwise photometric reprojection error over cyclically adjacent views."""
    if not len(images) == len(poses) == len(depths) == len(masks):
        raise ShapeError("images, poses, depths and masks must have equal length")
    n = len(images)
    errors = []
    for i in range(n if n > 2 else n - 1):
        j = (i + 1) % n
        err = pair_reprojection_error(images[i], images[j], poses[i], poses[j], depths[i], masks[i])
        if err is not None:
            errors.append(err)
    return float(np.mean(errors)) if errors else math.nan


# Run evaluation


def config_hash_of(run_dir: str | Path) -> str:
    path = Path(run_dir) / "config.json"
    return hashlib.sha256(path.read_bytes()).hexdigest() if path.is_file() else ""


def evaluate_images(
    method: str,
    renders: Sequence[torch.Tensor],
    references: Optional[Sequence[torch.Tensor]],
    codec: Optional[LatentCodec],
    niqe_model: Optional[NIQEModel],
    *,
    config: MetricsConfig | None = None,
    config_hash: str = "",
) -> MetricReport:
    config = config or MetricsConfig()
    report = MetricReport(method=method, n_views=len(renders), config_hash=config_hash)
    if references is not None:
        value = mean_psnr(renders, references, config.max_val)
        if math.isinf(value):
            report.psnr_infinite = True
        else:
            report.psnr_db = value
        if codec is not None:
            report.perc_proxy = float(np.mean([perc_proxy(a, b, codec) for a, b in zip(renders, references)]))
    if niqe_model is not None:
        scores = []
        for img in renders:
            try:
                scores.append(niqe(img, niqe_model, config.niqe_min_side))
            except ShapeError as e:
                logger.warning("NIQE skipped: %s", e)
        report.niqe = float(np.mean(scores)) if scores else None
    return report


def _held_out(dataset: MultiViewDataset, held_out_every: int) -> List[int]:
    _, held = split_views(len(dataset), held_out_every)
    return held


def render_held_out(field: rf.VolumeField, dataset: MultiViewDataset, indices: Sequence[int], field_config: FieldConfig) -> List[torch.Tensor]:
    h, w = dataset.lr_size
    return [
        rf.render_image(
            field, dataset.poses[i].scaled(4), 4 * w, 4 * h,
            n_samples=field_config.n_samples, near=dataset.near, far=dataset.far, background=field_config.background,
        ).clamp(0.0, 1.0)
        for i in indices
    ]


def evaluate_run(
    run_dir: str | Path,
    dataset: MultiViewDataset,
    codec: Optional[LatentCodec],
    *,
    method: str,
    niqe_model: Optional[NIQEModel] = None,
    field_config: FieldConfig | None = None,
    metrics_config: MetricsConfig | None = None,
    held_out_every: int = 5,
) -> MetricReport:
    """Renders the held-out views of ``field_sr.bin`` at HR and scores them."""
    run_dir = Path(run_dir)
    required = [run_dir / "field_sr.bin", run_dir / "config.json"]
    missing = [str(p) for p in required if not p.is_file()]
    if missing:
        raise IngestionError(f"Run is incomplete, missing: {', '.join(missing)}", run_dir)
    field, _ = rf.RadianceField.load(run_dir / "field_sr.bin")
    held = _held_out(dataset, held_out_every)
    renders = render_held_out(field, dataset, held, field_config or FieldConfig())
    references = [dataset.hr_images[i] for i in held] if dataset.hr_images is not None else None
    report = evaluate_images(method, renders, references, codec, niqe_model, config=metrics_config, config_hash=config_hash_of(run_dir))
    logger.info("Evaluated %s (%s): psnr=%s niqe=%s perc=%s over %d views", run_dir, method, report.psnr_db, report.niqe, report.perc_proxy, report.n_views)
    return report


def evaluate_bicubic_baseline(
    lr_field: rf.VolumeField,
    dataset: MultiViewDataset,
    codec: Optional[LatentCodec],
    *,
    niqe_model: Optional[NIQEModel] = None,
    field_config: FieldConfig | None = None,
    metrics_config: MetricsConfig | None = None,
    held_out_every: int = 5,
    config_hash: str = "",
) -> MetricReport:
    """Bicubic 4x of the LR field's renders at the held-out poses."""
    field_config = field_config or FieldConfig()
    h, w = dataset.lr_size
    held = _held_out(dataset, held_out_every)
    renders = [
        upsample_x4(rf.render_image(
            lr_field, dataset.poses[i], w, h,
            n_samples=field_config.n_samples, near=dataset.near, far=dataset.far, background=field_config.background,
        ), mode="bicubic")
        for i in held
    ]
    references = [dataset.hr_images[i] for i in held] if dataset.hr_images is not None else None
    return evaluate_images("bicubic", renders, references, codec, niqe_model, config=metrics_config, config_hash=config_hash)
