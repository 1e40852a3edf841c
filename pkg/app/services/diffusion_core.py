"""Noise schedule, forward diffusion and the conditional latent denoiser.

The schedule stores the cumulative signal retention ``alpha_bar[t]`` for
t = 0..T, so ``x_t = sqrt(alpha_bar[t]) x0 + sqrt(1 - alpha_bar[t]) eps``.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple

import pandas as pd
import torch
import torch.nn.functional as F
from torch import nn

from app.core.checkpoint import load_container, module_hash, save_container
from app.core.errors import ConfigurationError, IngestionError, NumericalAbort, ShapeError
from app.core.monitoring import record_abort, record_step
from app.schemas import DenoiserConfig, DenoiserMetadata, ScheduleConfig, ScheduleKind, Weighting
from app.services.helpers import make_generator, view_bucket
from app.services.latent_codec import LatentCodec, LatentImage, encode, upsample_x4

if TYPE_CHECKING:
    from app.services.lora import AttachedAdapters
    from app.services.scene_data import MultiViewDataset

logger = logging.getLogger(__name__)

UNKNOWN_PROMPT = "<unk>"


@dataclass(frozen=True)
class NoiseSchedule:
    T: int
    alpha_bar: torch.Tensor  # T + 1 values, float64

    def __post_init__(self):
        ab = torch.as_tensor(self.alpha_bar, dtype=torch.float64)
        if ab.ndim != 1 or ab.shape[0] != self.T + 1:
            raise ConfigurationError(f"alpha_bar must hold T + 1 = {self.T + 1} values, got {tuple(ab.shape)}")
        if ab[0].item() != 1.0:
            raise ConfigurationError(f"alpha_bar[0] must be exactly 1, got {ab[0].item()}")
        if not bool((ab[1:] < ab[:-1]).all()):
            raise ConfigurationError("alpha_bar must be strictly decreasing")
        if ab[-1].item() < 0 or not torch.isfinite(ab).all():
            raise ConfigurationError("alpha_bar values must lie in [0, 1]")
        object.__setattr__(self, "alpha_bar", ab)

    @classmethod
    def cosine(cls, T: int = 1000, s: float = 0.008) -> "NoiseSchedule":
        steps = torch.arange(T + 1, dtype=torch.float64) / T
        f = torch.cos((steps + s) / (1.0 + s) * math.pi / 2.0) ** 2
        ab = (f / f[0]).clamp(0.0, 1.0)
        ab[0] = 1.0
        ab[-1] = 0.0
        return cls(T, ab)

    @classmethod
    def linear(cls, T: int = 1000, beta_start: float = 1e-4, beta_end: float = 0.02) -> "NoiseSchedule":
        betas = torch.linspace(beta_start, beta_end, T, dtype=torch.float64)
        ab = torch.cat([torch.ones(1, dtype=torch.float64), torch.cumprod(1.0 - betas, dim=0)])
        return cls(T, ab)

    @classmethod
    def from_config(cls, config: ScheduleConfig) -> "NoiseSchedule":
        if config.kind == ScheduleKind.linear:
            return cls.linear(config.T, config.beta_start, config.beta_end)
        return cls.cosine(config.T, config.cosine_s)

    def check_t(self, t: int) -> int:
        t = int(t)
        if not 0 <= t <= self.T:
            raise ConfigurationError(f"timestep {t} outside [0, {self.T}]")
        return t

    def coefficients(self, t: torch.Tensor, dtype: torch.dtype) -> Tuple[torch.Tensor, torch.Tensor]:
        """sqrt(alpha_bar) and sqrt(1 - alpha_bar) gathered for a batch of timesteps."""
        ab = self.alpha_bar[t.long()]
        return ab.sqrt().to(dtype), (1.0 - ab).sqrt().to(dtype)

    def to_csv(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        pd.DataFrame({"t": range(self.T + 1), "alpha_bar": self.alpha_bar.numpy()}).to_csv(path, index=False, float_format="%.12g")
        return path


def add_noise(x0: LatentImage | torch.Tensor, t: int, eps: torch.Tensor, sched: NoiseSchedule) -> LatentImage | torch.Tensor:
    """Forward diffusion at a single timestep; returns the same kind as ``x0``."""
    data = x0.data if isinstance(x0, LatentImage) else x0
    eps = torch.as_tensor(eps, dtype=data.dtype)
    if eps.shape != data.shape:
        raise ShapeError(f"noise shape {tuple(eps.shape)} does not match latent {tuple(data.shape)}")
    t = sched.check_t(t)
    ab = float(sched.alpha_bar[t])
    x_t = math.sqrt(ab) * data + math.sqrt(1.0 - ab) * eps
    if isinstance(x0, LatentImage):
        return LatentImage(x_t, scale=x0.scale, source_view=x0.source_view)
    return x_t


def weighting(t: int, sched: NoiseSchedule, kind: Weighting, scale: float = 1.0) -> float:
    """Distillation weight w(t)."""
    ab = float(sched.alpha_bar[sched.check_t(t)])
    if kind == Weighting.one_minus_alpha_bar:
        base = 1.0 - ab
    elif kind == Weighting.snr:
        base = ab / (1.0 - ab) if ab < 1.0 else math.inf
    else:
        base = 1.0
    return scale * base


@dataclass(frozen=True)
class Conditioning:
    t: int
    prompt_id: int
    class_id: int
    lr_latent: LatentImage
    # Schedule length; bounds t from above when set
    T: Optional[int] = None

    def __post_init__(self):
        if self.t < 0:
            raise ConfigurationError(f"timestep must be non-negative, got {self.t}")
        if self.T is not None and self.t > self.T:
            raise ConfigurationError(f"timestep {self.t} exceeds the schedule length {self.T}")

    def with_t(self, t: int) -> "Conditioning":
        return Conditioning(int(t), self.prompt_id, self.class_id, self.lr_latent, self.T)


class PromptVocabulary:
    """Prompt string <-> integer id; id 0 is reserved for unknown prompts."""

    def __init__(self, tokens: Sequence[str] = ()):
        self.tokens: List[str] = [UNKNOWN_PROMPT]
        self._ids: Dict[str, int] = {UNKNOWN_PROMPT: 0}
        for tok in tokens:
            self.add(tok)

    def __len__(self) -> int:
        return len(self.tokens)

    def add(self, prompt: str) -> int:
        if prompt not in self._ids:
            self._ids[prompt] = len(self.tokens)
            self.tokens.append(prompt)
        return self._ids[prompt]

    def lookup(self, prompt: str) -> int:
        pid = self._ids.get(prompt, 0)
        if pid == 0 and prompt != UNKNOWN_PROMPT:
            logger.warning("Prompt %r is not in the vocabulary; using %s", prompt, UNKNOWN_PROMPT)
        return pid

    def to_json(self) -> dict:
        return {"version": 1, "tokens": list(self.tokens)}

    @classmethod
    def from_json(cls, doc: dict) -> "PromptVocabulary":
        tokens = list(doc["tokens"])
        if not tokens or tokens[0] != UNKNOWN_PROMPT:
            raise ConfigurationError(f"vocabulary must start with {UNKNOWN_PROMPT}")
        return cls(tokens[1:])

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_json(), indent=2))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "PromptVocabulary":
        path = Path(path)
        try:
            return cls.from_json(json.loads(path.read_text()))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            raise IngestionError(f"Cannot read vocabulary: {e}", path) from e


def _groups(channels: int) -> int:
    return math.gcd(8, channels)


def timestep_embedding(t: torch.Tensor, dim: int) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.sin(args), torch.cos(args)], dim=-1)
    if dim % 2:
        emb = F.pad(emb, (0, 1))
    return emb


class ResBlock(nn.Module):
    def __init__(self, in_ch: int, out_ch: int, emb_dim: int):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(in_ch), in_ch)
        self.conv1 = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.emb_proj = nn.Linear(emb_dim, out_ch)
        self.norm2 = nn.GroupNorm(_groups(out_ch), out_ch)
        self.conv2 = nn.Conv2d(out_ch, out_ch, 3, padding=1)
        self.skip = nn.Conv2d(in_ch, out_ch, 1) if in_ch != out_ch else nn.Identity()

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = self.conv1(F.silu(self.norm1(x)))
        h = h + self.emb_proj(F.silu(emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class MidBlock(ResBlock):
    """Bottleneck block with an extra 1x1 projection mixing channels."""

    def __init__(self, channels: int, emb_dim: int):
        super().__init__(channels, channels, emb_dim)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x: torch.Tensor, emb: torch.Tensor) -> torch.Tensor:
        h = super().forward(x, emb)
        return h + self.proj(F.silu(h))


class Denoiser(nn.Module):
    """Three-level UNet predicting the injected noise from [x_t, lr_latent]."""

    def __init__(self, config: DenoiserConfig, latent_channels: int, n_prompts: int):
        super().__init__()
        w0, w1, w2 = config.widths
        emb = config.emb_dim
        self.latent_channels = latent_channels
        self.emb_dim = emb
        self.n_prompts = n_prompts
        self.n_classes = config.n_classes
        self.time_mlp = nn.Sequential(nn.Linear(emb, emb), nn.SiLU(), nn.Linear(emb, emb))
        self.prompt_emb = nn.Embedding(n_prompts, emb)
        self.class_emb = nn.Embedding(config.n_classes, emb)
        self.in_conv = nn.Conv2d(2 * latent_channels, w0, 3, padding=1)
        self.down0 = ResBlock(w0, w0, emb)
        self.pool0 = nn.Conv2d(w0, w0, 3, stride=2, padding=1)
        self.down1 = ResBlock(w0, w1, emb)
        self.pool1 = nn.Conv2d(w1, w1, 3, stride=2, padding=1)
        self.down2 = ResBlock(w1, w2, emb)
        self.mid = MidBlock(w2, emb)
        self.up2 = ResBlock(w2 + w2, w2, emb)
        self.up1 = ResBlock(w2 + w1, w1, emb)
        self.up0 = ResBlock(w1 + w0, w0, emb)
        self.out_norm = nn.GroupNorm(_groups(w0), w0)
        self.out_conv = nn.Conv2d(w0, latent_channels, 3, padding=1)
        with torch.no_grad():
            # Small initial outputs: an untrained model predicts ~0 noise
            self.out_conv.weight.mul_(0.1)
            self.out_conv.bias.zero_()
        self.metadata = DenoiserMetadata()

    def embed(self, t: torch.Tensor, prompt_id: torch.Tensor, class_id: torch.Tensor) -> torch.Tensor:
        dtype = self.in_conv.weight.dtype
        t_emb = self.time_mlp(timestep_embedding(t, self.emb_dim).to(dtype))
        # y^c: prompt and class embeddings summed before injection
        cond = self.prompt_emb(prompt_id) + self.class_emb(class_id)
        return t_emb + cond

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, prompt_id: torch.Tensor, class_id: torch.Tensor, lr_latent: torch.Tensor) -> torch.Tensor:
        emb = self.embed(t, prompt_id, class_id)
        h = self.in_conv(torch.cat([x_t, lr_latent], dim=1))
        s0 = self.down0(h, emb)
        s1 = self.down1(self.pool0(s0), emb)
        s2 = self.down2(self.pool1(s1), emb)
        h = self.mid(s2, emb)
        h = self.up2(torch.cat([h, s2], dim=1), emb)
        h = F.interpolate(h, size=s1.shape[-2:], mode="nearest")
        h = self.up1(torch.cat([h, s1], dim=1), emb)
        h = F.interpolate(h, size=s0.shape[-2:], mode="nearest")
        h = self.up0(torch.cat([h, s0], dim=1), emb)
        return self.out_conv(F.silu(self.out_norm(h)))

    def freeze(self) -> str:
        self.eval()
        for p in self.parameters():
            p.requires_grad_(False)
        self.metadata.weights_hash = module_hash(self)
        return self.metadata.weights_hash


def _batched_inputs(denoiser: Denoiser, x_t: torch.Tensor, cond: Conditioning) -> Tuple[tuple, bool]:
    single = x_t.ndim == 3
    x = x_t[None] if single else x_t
    lr = cond.lr_latent.data
    lr = lr[None] if lr.ndim == 3 else lr
    if x.ndim != 4 or x.shape[1] != denoiser.latent_channels:
        raise ShapeError(f"x_t must have {denoiser.latent_channels} channels, got {tuple(x_t.shape)}")
    if lr.shape[-2:] != x.shape[-2:] or lr.shape[1] != x.shape[1]:
        raise ShapeError(f"lr_latent {tuple(lr.shape)} does not match x_t {tuple(x.shape)}")
    if x.shape[-1] % 4 or x.shape[-2] % 4:
        raise ShapeError(f"latent dims {tuple(x.shape[-2:])} must be divisible by 4")
    if not 0 <= cond.prompt_id < denoiser.n_prompts or not 0 <= cond.class_id < denoiser.n_classes:
        raise ShapeError(f"prompt_id {cond.prompt_id} / class_id {cond.class_id} out of range")
    b = x.shape[0]
    dtype = denoiser.in_conv.weight.dtype
    t = torch.full((b,), int(cond.t), dtype=torch.long)
    pid = torch.full((b,), int(cond.prompt_id), dtype=torch.long)
    cid = torch.full((b,), int(cond.class_id), dtype=torch.long)
    return (x.to(dtype), t, pid, cid, lr.expand(b, -1, -1, -1).to(dtype)), single


def predict_noise_frozen(denoiser: Denoiser, x_t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
    args, single = _batched_inputs(denoiser, x_t, cond)
    out = denoiser(*args)
    return out[0] if single else out


def predict_noise_finetuned(denoiser: Denoiser, adapters: "AttachedAdapters", x_t: torch.Tensor, cond: Conditioning) -> torch.Tensor:
    """Same forward as the frozen model with W + scale * A @ B in every adapted layer."""
    adapters.check_owner(denoiser)
    args, single = _batched_inputs(denoiser, x_t, cond)
    out = adapters(*args)
    return out[0] if single else out


@dataclass
class DenoisingCorpus:
    hr_latents: torch.Tensor  # N x C x h x w
    lr_latents: torch.Tensor  # N x C x h x w
    prompt_ids: torch.Tensor  # N
    class_ids: torch.Tensor  # N

    def __len__(self) -> int:
        return int(self.hr_latents.shape[0])

    def subset(self, idx: torch.Tensor) -> "DenoisingCorpus":
        return DenoisingCorpus(self.hr_latents[idx], self.lr_latents[idx], self.prompt_ids[idx], self.class_ids[idx])


def build_vocabulary(datasets: Sequence["MultiViewDataset"]) -> PromptVocabulary:
    vocab = PromptVocabulary()
    for ds in datasets:
        vocab.add(ds.prompt)
    return vocab


def build_corpus(codec: LatentCodec, datasets: Sequence["MultiViewDataset"], vocab: PromptVocabulary) -> DenoisingCorpus:
    """(HR latent, encoded 4x-upsampled LR image, prompt id, view-bucket class id) per view."""
    hr, lr, pids, cids = [], [], [], []
    for ds in datasets:
        if ds.hr_images is None:
            raise ConfigurationError(f"dataset {ds.scene_id} has no HR images for pretraining")
        pid = vocab.lookup(ds.prompt)
        for i, pose in enumerate(ds.poses):
            hr.append(encode(ds.hr_images[i], codec).data)
            lr.append(encode(upsample_x4(ds.lr_images[i]), codec).data)
            pids.append(pid)
            cids.append(view_bucket(pose.rotation))
    if not hr:
        raise ConfigurationError("pretraining corpus is empty")
    return DenoisingCorpus(torch.stack(hr), torch.stack(lr), torch.tensor(pids), torch.tensor(cids))


def denoising_loss(
    denoiser: Denoiser, batch: DenoisingCorpus, sched: NoiseSchedule, generator: torch.Generator, *, p_unknown: float = 0.0,
) -> torch.Tensor:
    b = len(batch)
    x0 = batch.hr_latents
    t = torch.randint(1, sched.T + 1, (b,), generator=generator)
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    a, s = sched.coefficients(t, x0.dtype)
    x_t = a[:, None, None, None] * x0 + s[:, None, None, None] * eps
    pids = batch.prompt_ids
    if p_unknown > 0:
        drop = torch.rand(b, generator=generator) < p_unknown
        pids = torch.where(drop, torch.zeros_like(pids), pids)
    pred = denoiser(x_t, t, pids, batch.class_ids, batch.lr_latents)
    return F.mse_loss(pred, eps)


def validation_mse(denoiser: Denoiser, corpus: DenoisingCorpus, sched: NoiseSchedule, seed: int = 0, batch_size: int = 32) -> float:
    """Mean squared noise-prediction error with fixed (t, eps) draws."""
    generator = make_generator(seed)
    total, count = 0.0, 0
    with torch.no_grad():
        for start in range(0, len(corpus), batch_size):
            batch = corpus.subset(torch.arange(start, min(start + batch_size, len(corpus))))
            loss = denoising_loss(denoiser, batch, sched, generator)
            total += float(loss) * len(batch)
            count += len(batch)
    return total / max(count, 1)


def pretrain_denoiser(
    codec: LatentCodec,
    datasets: Sequence["MultiViewDataset"],
    steps: int,
    seed: int,
    *,
    config: DenoiserConfig | None = None,
    schedule: NoiseSchedule | None = None,
    vocab: PromptVocabulary | None = None,
    corpus: DenoisingCorpus | None = None,
) -> Denoiser:
    """Fits the denoiser on E|f(x_t, t, y, I_LR, c) - eps|^2, then freezes it."""
    config = config or DenoiserConfig()
    schedule = schedule or NoiseSchedule.cosine()
    vocab = vocab or build_vocabulary(datasets)
    corpus = corpus or build_corpus(codec, datasets, vocab)
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        denoiser = Denoiser(config, codec.latent_channels, len(vocab))
    denoiser.metadata.seed = seed
    generator = make_generator(seed)
    order = torch.randperm(len(corpus), generator=generator)
    n_val = max(1, int(round(config.val_fraction * len(corpus))))
    val, train = corpus.subset(order[:n_val]), corpus.subset(order[n_val:])
    if len(train) == 0:
        raise ConfigurationError("pretraining corpus too small for a train/validation split")
    optimizer = torch.optim.Adam(denoiser.parameters(), lr=config.lr)

    denoiser.train()
    for step in range(steps):
        idx = torch.randint(len(train), (min(config.batch_size, len(train)),), generator=generator)
        optimizer.zero_grad(set_to_none=True)
        loss = denoising_loss(denoiser, train.subset(idx), schedule, generator, p_unknown=config.p_unknown_prompt)
        if not torch.isfinite(loss):
            record_abort("denoiser")
            raise NumericalAbort("non-finite denoising loss", stage="denoiser", iteration=step)
        loss.backward()
        optimizer.step()
        value = float(loss.detach())
        record_step("denoiser", value)
        if (step + 1) % config.log_every == 0:
            logger.info("denoiser step %d/%d loss=%.5f", step + 1, steps, value)
    denoiser.metadata.steps_run = steps
    denoiser.metadata.final_val_mse = validation_mse(denoiser, val, schedule, seed=seed + 1)
    denoiser.freeze()
    logger.info("denoiser trained: %d steps, val_mse=%.5f, hash=%s", steps, denoiser.metadata.final_val_mse, denoiser.metadata.weights_hash[:12])
    return denoiser


def save_denoiser(path: str | Path, denoiser: Denoiser, config: DenoiserConfig, schedule: NoiseSchedule, vocab: PromptVocabulary) -> Path:
    payload = {
        "state_dict": denoiser.state_dict(),
        "config": config.model_dump(mode="json"),
        "latent_channels": denoiser.latent_channels,
        "schedule": {"T": schedule.T, "alpha_bar": schedule.alpha_bar},
        "vocabulary": vocab.to_json(),
        "metadata": denoiser.metadata.model_dump(mode="json"),
    }
    return save_container(path, "denoiser", payload, meta={"weights_hash": denoiser.metadata.weights_hash})


def load_denoiser(path: str | Path) -> Tuple[Denoiser, NoiseSchedule, PromptVocabulary]:
    payload, _ = load_container(path, "denoiser")
    vocab = PromptVocabulary.from_json(payload["vocabulary"])
    denoiser = Denoiser(DenoiserConfig.model_validate(payload["config"]), int(payload["latent_channels"]), len(vocab))
    denoiser.load_state_dict(payload["state_dict"])
    denoiser.metadata = DenoiserMetadata.model_validate(payload["metadata"])
    expected = denoiser.metadata.weights_hash
    if denoiser.freeze() != expected and expected:
        raise IngestionError("Denoiser weights do not match the recorded hash", path)
    sched = NoiseSchedule(int(payload["schedule"]["T"]), payload["schedule"]["alpha_bar"])
    return denoiser, sched, vocab
