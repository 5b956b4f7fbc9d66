"""Low-rank adapters on linear layers, with merging back into the base weight."""

from __future__ import annotations

from typing import Iterable

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ConfigError, ContractError

DEFAULT_TARGETS = ("q_proj", "v_proj")


class LoraLinear(nn.Module):
    """``W x + b + (alpha / r) * B (A x)`` with ``W`` and ``b`` frozen."""

    def __init__(self, base: nn.Linear, r: int, alpha: float, g: torch.Generator):
        super().__init__()
        d_out, d_in = base.weight.shape
        if not 1 <= r <= min(d_in, d_out):
            raise ConfigError(f"LoRA rank {r} outside 1..{min(d_in, d_out)}")
        if alpha <= 0:
            raise ConfigError(f"LoRA alpha must be positive, got {alpha}")
        self.base = base
        for p in base.parameters():
            p.requires_grad_(False)
        self.r, self.alpha = r, alpha
        dtype = base.weight.dtype
        self.lora_A = nn.Parameter(torch.empty(r, d_in, dtype=dtype))
        nn.init.normal_(self.lora_A, 0.0, 1.0 / d_in**0.5, generator=g)
        self.lora_B = nn.Parameter(torch.zeros(d_out, r, dtype=dtype))

    @property
    def scaling(self) -> float:
        return self.alpha / self.r

    def forward(self, x):
        return self.base(x) + self.scaling * ((x @ self.lora_A.T) @ self.lora_B.T)

    def merged_weight(self) -> torch.Tensor:
        return self.base.weight + self.scaling * (self.lora_B @ self.lora_A)


def _targets(model: nn.Module, names: Iterable[str]):
    names = tuple(names)
    found = []
    for path, mod in model.named_modules():
        leaf = path.rsplit(".", 1)[-1]
        if leaf in names and isinstance(mod, nn.Linear):
            found.append(path)
    missing = [n for n in names if not any(p.rsplit(".", 1)[-1] == n for p in found)]
    if missing:
        raise ConfigError(f"no linear layers named {missing} in {type(model).__name__}")
    return found


def _set_module(model: nn.Module, path: str, new: nn.Module):
    parent, _, leaf = path.rpartition(".")
    setattr(model.get_submodule(parent) if parent else model, leaf, new)


def adapters(model: nn.Module) -> dict[str, LoraLinear]:
    return {p: m for p, m in model.named_modules() if isinstance(m, LoraLinear)}


def apply_lora(
    model: nn.Module,
    targets: Iterable[str] = DEFAULT_TARGETS,
    r: int = 8,
    alpha: float = 16.0,
    seed: int = 0,
) -> nn.Module:
    """Freeze every model parameter and wrap the named linear layers in adapters."""
    paths = _targets(model, targets)
    for p in model.parameters():
        p.requires_grad_(False)
    g = nx.generator(seed, "lora")
    for path in paths:
        _set_module(model, path, LoraLinear(model.get_submodule(path), r, alpha, g))
    return model


def merge_lora(model: nn.Module) -> nn.Module:
    found = adapters(model)
    if not found:
        raise ContractError("model has no LoRA adapters to merge")
    for path, mod in found.items():
        with torch.no_grad():
            mod.base.weight.copy_(mod.merged_weight())
        _set_module(model, path, mod.base)
    return model


def lora_parameters(model: nn.Module) -> list[nn.Parameter]:
    return [p for m in adapters(model).values() for p in (m.lora_A, m.lora_B)]
