import logging
import subprocess
import sys

import pytest
import torch

from app.core.config import settings
from app.schemas import (
    CodecConfig,
    DenoiserConfig,
    FieldConfig,
    I3DSConfig,
    LoRAConfig,
    MetricsConfig,
    VSDConfig,
)
from app.services.diffusion_core import Denoiser, NoiseSchedule
from app.services.helpers import make_generator
from app.services.latent_codec import LatentCodec
from app.services.lora import attach, detach, init_adapters
from app.services.scene_data import generate_synthetic_scene

logger = logging.getLogger(__name__)

TINY_CODEC = CodecConfig(widths=(8, 8, 8), latent_channels=4, epochs=1, batch_size=4, min_images=4)
TINY_DENOISER = DenoiserConfig(widths=(8, 16, 16), emb_dim=16, steps=5, batch_size=4, log_every=1)
# Rank-1 adapters on the two bottleneck convolutions stay under the 10% parameter limit
TINY_LORA = LoRAConfig(rank=1, layers=["mid.conv1", "mid.conv2"])
TINY_FIELD = FieldConfig(lr_grid_res=8, sr_grid_res=12, n_samples=8, fit_steps=10, ray_batch=32, log_every=5)
TINY_VSD = VSDConfig(max_steps=3, t_min=2, t_max=98, lr_residual=0.05, lr_lora=1e-3)
TINY_I3DS = I3DSConfig(rounds=2, max_sync_iter=5, ray_batch=64, vsd=TINY_VSD)
TINY_METRICS = MetricsConfig(niqe_patch_size=8, niqe_min_side=16)


def tiny_overrides() -> list[str]:
    """--set assignments that shrink every stage to a few seconds on CPU."""
    return [
        "scene.grid_res=16", "scene.n_views=6", "scene.hr_size=32", "scene.held_out_every=3",
        "schedule.T=100",
        "codec.widths=[8,8,8]", "codec.epochs=1", "codec.batch_size=4", "codec.min_images=4",
        "denoiser.widths=[8,16,16]", "denoiser.emb_dim=16", "denoiser.steps=5", "denoiser.batch_size=4",
        "lora.rank=1", 'lora.layers=["mid.conv1","mid.conv2"]',
        "field.lr_grid_res=8", "field.sr_grid_res=12", "field.n_samples=8", "field.fit_steps=10", "field.ray_batch=32",
        "i3ds.rounds=2", "i3ds.max_sync_iter=5", "i3ds.ray_batch=64",
        "i3ds.vsd.max_steps=3", "i3ds.vsd.t_min=2", "i3ds.vsd.t_max=98",
        "metrics.niqe_patch_size=8", "metrics.niqe_min_side=16",
        "pretrain.corpus_seeds=[101,102]", "pretrain.corpus_views=4",
    ]


@pytest.fixture(autouse=True)
def isolated_settings(monkeypatch, tmp_path):
    """Every test gets its own data root and no log file."""
    monkeypatch.setattr(settings, "data_root", str(tmp_path / "data"))
    monkeypatch.setattr(settings, "log_to_file", False)
    yield


@pytest.fixture(scope="session")
def tiny_scene():
    """(GroundTruthField, MultiViewDataset): 6 views, HR 32, LR 8."""
    return generate_synthetic_scene(3, 16, 6, 32, n_samples=16)


@pytest.fixture(scope="session")
def tiny_codec():
    with torch.random.fork_rng():
        torch.manual_seed(0)
        codec = LatentCodec(TINY_CODEC)
    codec.freeze()
    return codec


@pytest.fixture(scope="session")
def schedule():
    return NoiseSchedule.cosine(100)


def build_denoiser(seed: int = 0, n_prompts: int = 3, dtype: torch.dtype = torch.float32) -> Denoiser:
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        denoiser = Denoiser(TINY_DENOISER, TINY_CODEC.latent_channels, n_prompts).to(dtype)
    denoiser.freeze()
    return denoiser


@pytest.fixture
def tiny_denoiser():
    return build_denoiser()


@pytest.fixture
def attached(tiny_denoiser):
    """Zero-initialized rank-1 adapters attached to a fresh tiny denoiser."""
    handle = attach(init_adapters(tiny_denoiser, TINY_LORA, make_generator(1)), tiny_denoiser, max_param_fraction=TINY_LORA.max_param_fraction)
    yield handle
    if handle.active:
        detach(handle)


@pytest.fixture(scope="session")
def dead_pid():
    """Pid of a child process that has already exited and been reaped."""
    proc = subprocess.Popen([sys.executable, "-c", "pass"])
    proc.wait()
    return proc.pid
