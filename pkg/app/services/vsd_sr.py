"""Per-view latent refinement by variational score distillation.

A residual ``h`` is added to the encoded latent (x0' = x0 + h) and pushed
along the gap between the frozen denoiser and its LoRA-adapted twin, while
the adapters are trained on x0' with the usual denoising objective. SDS is
available as a baseline that replaces the adapted prediction by the injected
noise.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Tuple

import torch
import torch.nn.functional as F

from app.core.errors import NumericalAbort, ShapeError
from app.core.monitoring import record_abort, record_step
from app.schemas import LossMode, VSDConfig
from app.services.diffusion_core import (
    Conditioning,
    Denoiser,
    NoiseSchedule,
    add_noise,
    predict_noise_finetuned,
    predict_noise_frozen,
    weighting,
)
from app.services.latent_codec import LatentCodec, LatentImage, encode, upsample_x4
from app.services.lora import AttachedAdapters

logger = logging.getLogger(__name__)

# (x_t, t) -> predicted noise
Predictor = Callable[[torch.Tensor, int], torch.Tensor]

TRACE_COLUMNS = ("view", "step", "t", "loss_vsd", "loss_diff")


@dataclass
class ResidualLatent:
    h: torch.Tensor
    view_id: Optional[int] = None
    step: int = 0

    @classmethod
    def zeros_like(cls, latent: LatentImage) -> "ResidualLatent":
        return cls(torch.zeros_like(latent.data), view_id=latent.source_view)


@dataclass
class TraceRow:
    view: Optional[int]
    step: int
    t: int
    loss_vsd: float
    loss_diff: float = math.nan


@dataclass
class VSDResult:
    latent: LatentImage
    residual: ResidualLatent
    trace: List[TraceRow] = field(default_factory=list)


def combined_latent(x0: LatentImage, h: ResidualLatent) -> LatentImage:
    if h.h.shape != x0.data.shape:
        raise ShapeError(f"residual {tuple(h.h.shape)} does not match latent {tuple(x0.data.shape)}")
    return LatentImage(x0.data + h.h.detach(), scale=x0.scale, source_view=x0.source_view)


def vsd_loss(eps_frozen: torch.Tensor, eps_finetuned: torch.Tensor, t: int, config: VSDConfig, sched: NoiseSchedule) -> torch.Tensor:
    """w(t) * mean |eps_frozen - eps_finetuned|."""
    if eps_frozen.shape != eps_finetuned.shape:
        raise ShapeError(f"prediction shapes differ: {tuple(eps_frozen.shape)} vs {tuple(eps_finetuned.shape)}")
    w = weighting(t, sched, config.weighting, config.omega_scale)
    return w * (eps_frozen - eps_finetuned).abs().mean()


def _check_finite(grad: torch.Tensor, stage: str, t: int, step: int, view: Optional[int]) -> None:
    if not torch.isfinite(grad).all():
        record_abort(stage)
        raise NumericalAbort("non-finite residual gradient", stage=stage, iteration=step, t=t, view=view)


def residual_gradient(
    x0: torch.Tensor,
    h: torch.Tensor,
    t: int,
    eps: torch.Tensor,
    predict_frozen: Predictor,
    predict_finetuned: Predictor,
    sched: NoiseSchedule,
    config: VSDConfig,
) -> Tuple[torch.Tensor, float]:
    """Gradient of the VSD loss with respect to ``h`` and the loss value.

    score_shortcut: w(t) sqrt(alpha_bar_t) sign(eps_frozen - eps_finetuned), network outputs held fixed.
    literal_l1: autograd of the loss through the frozen network; the adapted prediction is held fixed.
    """
    ab = float(sched.alpha_bar[sched.check_t(t)])
    w = weighting(t, sched, config.weighting, config.omega_scale)
    if config.loss_mode == LossMode.score_shortcut:
        with torch.no_grad():
            x_t = add_noise(x0 + h, t, eps, sched)
            diff = predict_frozen(x_t, t) - predict_finetuned(x_t, t)
            loss = w * diff.abs().mean()
            grad = w * math.sqrt(ab) * torch.sign(diff)
        return grad, float(loss)

    h_var = h.detach().clone().requires_grad_(True)
    with torch.enable_grad():
        x_t = add_noise(x0.detach() + h_var, t, eps, sched)
        with torch.no_grad():
            target = predict_finetuned(x_t.detach(), t)
        loss = w * (predict_frozen(x_t, t) - target).abs().mean()
        (grad,) = torch.autograd.grad(loss, h_var)
    return grad.detach(), float(loss.detach())


def sds_gradient(
    x0: torch.Tensor, h: torch.Tensor, t: int, eps: torch.Tensor, predict_frozen: Predictor, sched: NoiseSchedule, config: VSDConfig,
) -> Tuple[torch.Tensor, float]:
    """w(t) sqrt(alpha_bar_t) (eps_frozen - eps); reports the mean squared noise residual."""
    ab = float(sched.alpha_bar[sched.check_t(t)])
    w = weighting(t, sched, config.weighting, config.omega_scale)
    with torch.no_grad():
        x_t = add_noise(x0 + h, t, eps, sched)
        diff = predict_frozen(x_t, t) - eps
        grad = w * math.sqrt(ab) * diff
        loss = float((diff ** 2).mean())
    return grad, loss


def _draw(x0: torch.Tensor, config: VSDConfig, generator: torch.Generator) -> Tuple[int, torch.Tensor]:
    t = int(torch.randint(config.t_min, config.t_max + 1, (1,), generator=generator))
    eps = torch.randn(x0.shape, generator=generator, dtype=x0.dtype)
    return t, eps


def _frozen(denoiser: Denoiser, cond: Conditioning) -> Predictor:
    return lambda x_t, t: predict_noise_frozen(denoiser, x_t, cond.with_t(t))


def _finetuned(denoiser: Denoiser, adapters: AttachedAdapters, cond: Conditioning) -> Predictor:
    return lambda x_t, t: predict_noise_finetuned(denoiser, adapters, x_t, cond.with_t(t))


def _apply(h: ResidualLatent, grad: torch.Tensor, config: VSDConfig, optimizer: Optional[torch.optim.Optimizer]) -> None:
    if config.lr_residual == 0:
        return
    if optimizer is None:
        h.h = h.h - config.lr_residual * grad
    else:
        h.h.grad = grad.to(h.h.dtype)
        optimizer.step()
        h.h.grad = None


def residual_step(
    h: ResidualLatent,
    x0: LatentImage,
    cond: Conditioning,
    denoiser: Denoiser,
    adapters: AttachedAdapters,
    sched: NoiseSchedule,
    config: VSDConfig,
    generator: torch.Generator,
    *,
    optimizer: Optional[torch.optim.Optimizer] = None,
) -> Tuple[ResidualLatent, float, int]:
    """One descent step on ``h``; returns (h, loss, t).

    Shortcut mode uses plain sign descent; literal mode hands the gradient to
    ``optimizer`` (Adam over ``h.h``) when one is given.
    """
    t, eps = _draw(x0.data, config, generator)
    grad, loss = residual_gradient(
        x0.data, h.h.detach(), t, eps, _frozen(denoiser, cond), _finetuned(denoiser, adapters, cond), sched, config,
    )
    _check_finite(grad, "residual", t, h.step, h.view_id)
    _apply(h, grad, config, optimizer if config.loss_mode == LossMode.literal_l1 else None)
    h.step += 1
    record_step("residual", loss)
    return h, loss, t


def sds_step(
    h: ResidualLatent,
    x0: LatentImage,
    cond: Conditioning,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    config: VSDConfig,
    generator: torch.Generator,
) -> Tuple[ResidualLatent, float, int]:
    t, eps = _draw(x0.data, config, generator)
    grad, loss = sds_gradient(x0.data, h.h.detach(), t, eps, _frozen(denoiser, cond), sched, config)
    _check_finite(grad, "sds", t, h.step, h.view_id)
    _apply(h, grad, config, None)
    h.step += 1
    record_step("sds", loss)
    return h, loss, t


def make_lora_optimizer(adapters: AttachedAdapters, lr: float) -> torch.optim.Optimizer:
    return torch.optim.Adam(adapters.parameters(), lr=lr)


def lora_step(
    adapters: AttachedAdapters,
    x0_prime: LatentImage | torch.Tensor,
    cond: Conditioning,
    denoiser: Denoiser,
    sched: NoiseSchedule,
    optimizer: torch.optim.Optimizer,
    generator: torch.Generator | None = None,
    *,
    config: VSDConfig | None = None,
    t: int | None = None,
    eps: torch.Tensor | None = None,
) -> Tuple[float, int]:
    """One optimizer step on the adapters for mean |eps_finetuned - eps|^2; returns (pre-step loss, t).

    ``x0_prime`` is treated as a constant. Passing ``t`` and ``eps`` fixes the draw.
    """
    config = config or VSDConfig()
    x0 = (x0_prime.data if isinstance(x0_prime, LatentImage) else x0_prime).detach()
    if t is None or eps is None:
        t_draw, eps_draw = _draw(x0, config, generator)
        t = t_draw if t is None else t
        eps = eps_draw if eps is None else eps
    x_t = add_noise(x0, t, eps, sched)
    optimizer.zero_grad(set_to_none=True)
    with torch.enable_grad():
        if config.lora_autocast:
            with torch.autocast(device_type="cpu", dtype=torch.bfloat16):
                pred = predict_noise_finetuned(denoiser, adapters, x_t, cond.with_t(t))
            loss = F.mse_loss(pred.float(), eps.float())
        else:
            loss = F.mse_loss(predict_noise_finetuned(denoiser, adapters, x_t, cond.with_t(t)), eps)
        if not torch.isfinite(loss):
            record_abort("lora")
            raise NumericalAbort("non-finite LoRA loss", stage="lora", t=t)
        loss.backward()
    if any(group["lr"] > 0 for group in optimizer.param_groups):
        optimizer.step()
    value = float(loss.detach())
    record_step("lora", value)
    return value, t


def vsd_upscale(
    x0: LatentImage,
    lr_image: torch.Tensor,
    prompt_id: int,
    class_id: int,
    denoiser: Denoiser,
    codec: LatentCodec,
    config: VSDConfig,
    generator: torch.Generator,
    *,
    sched: NoiseSchedule,
    adapters: AttachedAdapters | None = None,
    lora_optimizer: torch.optim.Optimizer | None = None,
) -> VSDResult:
    """Runs ``max_steps`` refinement iterations and returns x0 + h.

    The adapters are trained every ``lora_interval``-th iteration on the
    current x0 + h. ``config.sds`` switches to SDS steps without adapters.
    Pass ``lora_optimizer`` to keep its moments across views; one is created otherwise.
    """
    h = ResidualLatent.zeros_like(x0)
    result = VSDResult(latent=x0, residual=h)
    if config.max_steps == 0:
        return result
    uses_lora = not config.sds
    if uses_lora and adapters is None:
        raise ShapeError("VSD needs attached LoRA adapters; use the sds preset to run without them")
    lr_latent = encode(upsample_x4(lr_image), codec)
    cond = Conditioning(0, prompt_id, class_id, lr_latent, T=sched.T)
    h_optimizer = None
    if uses_lora and config.loss_mode == LossMode.literal_l1:
        h.h.requires_grad_(True)
        h_optimizer = torch.optim.Adam([h.h], lr=config.lr_residual)
    if not (uses_lora and config.use_lora):
        lora_optimizer = None
    elif lora_optimizer is None:
        lora_optimizer = make_lora_optimizer(adapters, config.lr_lora)

    for step in range(config.max_steps):
        if config.sds:
            _, loss, t = sds_step(h, x0, cond, denoiser, sched, config, generator)
        else:
            _, loss, t = residual_step(h, x0, cond, denoiser, adapters, sched, config, generator, optimizer=h_optimizer)
        row = TraceRow(view=x0.source_view, step=step, t=t, loss_vsd=loss)
        if lora_optimizer is not None and step % config.lora_interval == 0:
            row.loss_diff, _ = lora_step(adapters, combined_latent(x0, h), cond, denoiser, sched, lora_optimizer, generator, config=config)
        result.trace.append(row)
        logger.debug("vsd view=%s step=%d t=%d loss=%.6f diff=%.6f", x0.source_view, step, t, loss, row.loss_diff)
    h.h = h.h.detach()
    result.latent = combined_latent(x0, h)
    result.residual = h
    return result
