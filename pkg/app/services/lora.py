"""Low-rank adapters: W' = W + scale * A @ B for designated denoiser layers.

Convolution kernels are adapted as matrices of shape
``out_channels x (in_channels * kh * kw)``. Base weights are never written;
the adapted forward substitutes effective weights through
``torch.func.functional_call``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Tuple

import torch
from torch import nn
from torch.func import functional_call

from app.core.checkpoint import load_container, save_container, tensor_hash
from app.core.errors import LoRAError
from app.schemas import LoRAConfig

logger = logging.getLogger(__name__)

ADAPTABLE = (nn.Linear, nn.Conv2d)


@dataclass
class LoRAAdapter:
    layer_id: str
    A: torch.Tensor  # m x r
    B: torch.Tensor  # r x n
    scale: float = 1.0

    def __post_init__(self):
        if self.A.ndim != 2 or self.B.ndim != 2 or self.A.shape[1] != self.B.shape[0]:
            raise LoRAError(f"{self.layer_id}: A {tuple(self.A.shape)} and B {tuple(self.B.shape)} are not conformable")
        if not (torch.isfinite(self.A).all() and torch.isfinite(self.B).all()):
            raise LoRAError(f"{self.layer_id}: adapter holds non-finite entries")

    @property
    def rank(self) -> int:
        return int(self.A.shape[1])

    @property
    def shape(self) -> Tuple[int, int]:
        return int(self.A.shape[0]), int(self.B.shape[1])

    @property
    def n_params(self) -> int:
        return self.A.numel() + self.B.numel()

    def parameters(self) -> List[torch.Tensor]:
        return [self.A, self.B]

    def delta(self) -> torch.Tensor:
        return self.scale * (self.A @ self.B)


def _as_matrix(t: torch.Tensor, m: int, n: int, what: str, layer_id: str) -> torch.Tensor:
    if t.ndim < 2 or t.shape[0] != m or math.prod(t.shape[1:]) != n:
        raise LoRAError(f"{layer_id}: {what} of shape {tuple(t.shape)} does not match adapter {m}x{n}")
    return t.reshape(m, n)


def effective_weight(W: torch.Tensor, adapter: LoRAAdapter) -> torch.Tensor:
    m, n = adapter.shape
    _as_matrix(W, m, n, "weight", adapter.layer_id)
    return W + adapter.delta().reshape(W.shape).to(W.dtype)


def lora_grads(dL_dWp: torch.Tensor, adapter: LoRAAdapter) -> Tuple[torch.Tensor, torch.Tensor]:
    """(dL/dA, dL/dB) from the upstream gradient dL/dW'."""
    m, n = adapter.shape
    g = _as_matrix(dL_dWp, m, n, "upstream gradient", adapter.layer_id)
    return adapter.scale * (g @ adapter.B.T), adapter.scale * (adapter.A.T @ g)


def _layer(denoiser: nn.Module, layer_id: str) -> nn.Module:
    try:
        layer = denoiser.get_submodule(layer_id)
    except AttributeError as e:
        raise LoRAError(f"unknown layer_id '{layer_id}'") from e
    if not isinstance(layer, ADAPTABLE):
        raise LoRAError(f"layer '{layer_id}' ({type(layer).__name__}) is not a linear or conv layer")
    return layer


def init_adapters(
    denoiser: nn.Module, config: LoRAConfig, generator: torch.Generator, *, dtype: torch.dtype | None = None,
) -> Dict[str, LoRAAdapter]:
    """A ~ N(0, init_std^2), B = 0 for every configured layer."""
    adapters: Dict[str, LoRAAdapter] = {}
    for layer_id in config.layers:
        weight = _layer(denoiser, layer_id).weight
        m, n = int(weight.shape[0]), math.prod(weight.shape[1:])
        dt = dtype or weight.dtype
        A = (torch.randn((m, config.rank), generator=generator, dtype=dt) * config.init_std).requires_grad_(True)
        B = torch.zeros((config.rank, n), dtype=dt, requires_grad=True)
        adapters[layer_id] = LoRAAdapter(layer_id, A, B, config.scale)
    return adapters


def adapter_parameters(adapters: Mapping[str, LoRAAdapter]) -> List[torch.Tensor]:
    return [p for a in adapters.values() for p in a.parameters()]


def adapters_hash(adapters: Mapping[str, LoRAAdapter]) -> str:
    items: List[Tuple[str, torch.Tensor]] = []
    for layer_id, a in adapters.items():
        items += [(f"{layer_id}.A", a.A), (f"{layer_id}.B", a.B)]
    return tensor_hash(items)


class AttachedAdapters:
    """Adapted forward of a denoiser; created by :func:`attach`."""

    def __init__(self, denoiser: nn.Module, adapters: Dict[str, LoRAAdapter]):
        self.denoiser = denoiser
        self.adapters = adapters
        self.active = True

    def check_owner(self, denoiser: nn.Module) -> None:
        if not self.active:
            raise LoRAError("adapters have been detached")
        if denoiser is not self.denoiser:
            raise LoRAError("adapters are attached to a different denoiser")

    def overrides(self) -> Dict[str, torch.Tensor]:
        return {
            f"{layer_id}.weight": effective_weight(_layer(self.denoiser, layer_id).weight, adapter)
            for layer_id, adapter in self.adapters.items()
        }

    def parameters(self) -> List[torch.Tensor]:
        return adapter_parameters(self.adapters)

    def __call__(self, *args, **kwargs):
        if not self.active:
            raise LoRAError("adapters have been detached")
        return functional_call(self.denoiser, self.overrides(), args, kwargs)


def attach(adapters: Dict[str, LoRAAdapter], denoiser: nn.Module, *, max_param_fraction: float = 0.1) -> AttachedAdapters:
    attached = getattr(denoiser, "lora_attached", None)
    if attached is None:
        attached = set()
        denoiser.lora_attached = attached
    for layer_id, adapter in adapters.items():
        if layer_id in attached:
            raise LoRAError(f"layer '{layer_id}' already carries an adapter")
        weight = _layer(denoiser, layer_id).weight
        m, n = adapter.shape
        _as_matrix(weight, m, n, "weight", layer_id)
        if adapter.rank >= min(m, n):
            raise LoRAError(f"{layer_id}: rank {adapter.rank} must be below min({m}, {n})")
        fraction = adapter.n_params / weight.numel()
        if fraction >= max_param_fraction:
            raise LoRAError(f"{layer_id}: adapter holds {fraction:.1%} of the base parameters (limit {max_param_fraction:.0%})")
    attached.update(adapters)
    logger.debug("Attached LoRA adapters to %s", sorted(adapters))
    return AttachedAdapters(denoiser, adapters)


def detach(handle: AttachedAdapters) -> None:
    attached = getattr(handle.denoiser, "lora_attached", set())
    attached.difference_update(handle.adapters)
    handle.active = False


def save_adapters(path: str | Path, adapters: Mapping[str, LoRAAdapter], generator: torch.Generator | None = None) -> Path:
    payload = {
        "layers": {
            layer_id: {"A": a.A.detach(), "B": a.B.detach(), "rank": a.rank, "scale": a.scale}
            for layer_id, a in adapters.items()
        },
        "rng_state": generator.get_state() if generator is not None else None,
    }
    return save_container(path, "adapters", payload, meta={"layers": sorted(adapters), "hash": adapters_hash(adapters)})


def load_adapters(path: str | Path) -> Tuple[Dict[str, LoRAAdapter], Optional[torch.Tensor]]:
    payload, _ = load_container(path, "adapters")
    adapters = {
        layer_id: LoRAAdapter(layer_id, d["A"].clone().requires_grad_(True), d["B"].clone().requires_grad_(True), float(d["scale"]))
        for layer_id, d in payload["layers"].items()
    }
    return adapters, payload.get("rng_state")


def count_parameters(adapters: Iterable[LoRAAdapter]) -> int:
    return sum(a.n_params for a in adapters)
