"""Deterministic convolutional autoencoder (4x spatial reduction) and the 4x pixel upsampler."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

import torch
import torch.nn.functional as F
from torch import nn

from app.core.checkpoint import load_container, module_hash, save_container
from app.core.errors import ConfigurationError, NumericalAbort, ShapeError
from app.core.monitoring import record_abort, record_step
from app.schemas import CodecConfig, CodecMetadata
from app.services.helpers import make_generator

logger = logging.getLogger(__name__)


@dataclass
class LatentImage:
    data: torch.Tensor  # C x h x w
    scale: int = 4
    source_view: Optional[int] = None

    def __post_init__(self):
        if self.data.ndim != 3:
            raise ShapeError(f"latent must be C x h x w, got {tuple(self.data.shape)}")
        if not torch.isfinite(self.data).all():
            raise NumericalAbort("latent contains non-finite entries", stage="latent", view=self.source_view)

    @property
    def shape(self) -> torch.Size:
        return self.data.shape


def upsample_x4(image: torch.Tensor, mode: str = "bilinear") -> torch.Tensor:
    """4x interpolation of an H x W x 3 image, clamped to [0, 1]."""
    if image.ndim != 3:
        raise ShapeError(f"expected H x W x C image, got {tuple(image.shape)}")
    x = image.permute(2, 0, 1)[None]
    out = F.interpolate(x, scale_factor=4, mode=mode, align_corners=False)
    return out[0].permute(1, 2, 0).clamp(0.0, 1.0)


def _block(in_ch: int, out_ch: int, stride: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(in_ch, out_ch, 3, stride=stride, padding=1), nn.SiLU())


class LatentCodec(nn.Module):
    """Three-stage encoder (stride 1, 2, 2) with a mirrored decoder ending in a sigmoid."""

    def __init__(self, config: CodecConfig | None = None):
        super().__init__()
        config = config or CodecConfig()
        w0, w1, w2 = config.widths
        self.latent_channels = config.latent_channels
        self.scale = config.scale
        self.encoder_stages = nn.ModuleList([_block(3, w0, 1), _block(w0, w1, 2), _block(w1, w2, 2)])
        self.to_latent = nn.Conv2d(w2, config.latent_channels, 1)
        self.from_latent = nn.Sequential(nn.Conv2d(config.latent_channels, w2, 3, padding=1), nn.SiLU())
        self.decoder_stages = nn.ModuleList([
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _block(w2, w1, 1)),
            nn.Sequential(nn.Upsample(scale_factor=2, mode="nearest"), _block(w1, w0, 1)),
        ])
        self.to_rgb = nn.Conv2d(w0, 3, 3, padding=1)
        self.metadata = CodecMetadata()

    def encode_stages(self, x: torch.Tensor) -> List[torch.Tensor]:
        feats = []
        for stage in self.encoder_stages:
            x = stage(x)
            feats.append(x)
        return feats

    def encode_tensor(self, x: torch.Tensor) -> torch.Tensor:
        return self.to_latent(self.encode_stages(x)[-1])

    def decode_tensor(self, z: torch.Tensor) -> torch.Tensor:
        h = self.from_latent(z)
        for stage in self.decoder_stages:
            h = stage(h)
        return torch.sigmoid(self.to_rgb(h))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decode_tensor(self.encode_tensor(x))

    def freeze(self) -> str:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.metadata.weights_hash = module_hash(self)
        return self.metadata.weights_hash

    def save(self, path: str | Path, config: CodecConfig) -> Path:
        return save_container(
            path, "codec",
            {"state_dict": self.state_dict(), "config": config.model_dump(mode="json"), "metadata": self.metadata.model_dump(mode="json")},
            meta={"weights_hash": self.metadata.weights_hash},
        )

    @classmethod
    def load(cls, path: str | Path) -> "LatentCodec":
        payload, _ = load_container(path, "codec")
        codec = cls(CodecConfig.model_validate(payload["config"]))
        codec.load_state_dict(payload["state_dict"])
        codec.metadata = CodecMetadata.model_validate(payload["metadata"])
        codec.freeze()
        return codec


def _to_batch(image: torch.Tensor) -> torch.Tensor:
    return image.permute(2, 0, 1)[None]


def encode(image: torch.Tensor, codec: LatentCodec, source_view: Optional[int] = None) -> LatentImage:
    if image.ndim != 3 or image.shape[-1] != 3:
        raise ShapeError(f"expected H x W x 3 image, got {tuple(image.shape)}")
    h, w = image.shape[:2]
    if h % codec.scale or w % codec.scale:
        raise ShapeError(f"image dims {h}x{w} are not divisible by the codec scale {codec.scale}")
    dtype = next(codec.parameters()).dtype
    with torch.no_grad():
        z = codec.encode_tensor(_to_batch(image.to(dtype)))
    return LatentImage(z[0], scale=codec.scale, source_view=source_view)


def decode(latent: LatentImage, codec: LatentCodec) -> torch.Tensor:
    if latent.data.shape[0] != codec.latent_channels:
        raise ShapeError(f"latent has {latent.data.shape[0]} channels, codec expects {codec.latent_channels}")
    dtype = next(codec.parameters()).dtype
    with torch.no_grad():
        x = codec.decode_tensor(latent.data[None].to(dtype))
    return x[0].permute(1, 2, 0)


def encoder_features(image: torch.Tensor, codec: LatentCodec) -> List[torch.Tensor]:
    dtype = next(codec.parameters()).dtype
    with torch.no_grad():
        return codec.encode_stages(_to_batch(image.to(dtype)))


def _val_mse(codec: LatentCodec, images: torch.Tensor, batch_size: int) -> float:
    total = 0.0
    with torch.no_grad():
        for start in range(0, images.shape[0], batch_size):
            x = images[start:start + batch_size]
            total += float(F.mse_loss(codec(x), x, reduction="sum"))
    return total / images.numel()


def train_codec(images: Sequence[torch.Tensor], epochs: int, seed: int, config: CodecConfig | None = None) -> LatentCodec:
    """Fits the autoencoder on HR renders by mean squared reconstruction error, then freezes it."""
    config = config or CodecConfig()
    if len(images) < config.min_images:
        raise ConfigurationError(f"train_codec needs at least {config.min_images} images, got {len(images)}")
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        codec = LatentCodec(config)
    codec.metadata.seed = seed
    data = torch.stack([img.permute(2, 0, 1) for img in images]).float()
    generator = make_generator(seed)
    order = torch.randperm(data.shape[0], generator=generator)
    n_val = max(1, int(round(config.val_fraction * data.shape[0])))
    val, train = data[order[:n_val]], data[order[n_val:]]
    optimizer = torch.optim.Adam(codec.parameters(), lr=config.lr)

    best = _val_mse(codec, val, config.batch_size)
    stale = 0
    for epoch in range(epochs):
        codec.train()
        perm = torch.randperm(train.shape[0], generator=generator)
        for start in range(0, train.shape[0], config.batch_size):
            x = train[perm[start:start + config.batch_size]]
            optimizer.zero_grad(set_to_none=True)
            loss = F.mse_loss(codec(x), x)
            if not torch.isfinite(loss):
                record_abort("codec")
                raise NumericalAbort("non-finite codec loss", stage="codec", iteration=epoch)
            loss.backward()
            optimizer.step()
            record_step("codec", float(loss.detach()))
        codec.eval()
        val_mse = _val_mse(codec, val, config.batch_size)
        codec.metadata.history.append(val_mse)
        codec.metadata.epochs_run = epoch + 1
        logger.info("codec epoch %d/%d val_mse=%.6f", epoch + 1, epochs, val_mse)
        if val_mse < best:
            best, stale = val_mse, 0
        else:
            stale += 1
            if stale >= config.patience:
                logger.warning("codec validation error stalled for %d epochs; stopping early at epoch %d", stale, epoch + 1)
                break
    codec.metadata.final_val_mse = _val_mse(codec, val, config.batch_size)
    codec.freeze()
    logger.info("codec trained: %d epochs, val_mse=%.6f, hash=%s", codec.metadata.epochs_run, codec.metadata.final_val_mse, codec.metadata.weights_hash[:12])
    return codec
