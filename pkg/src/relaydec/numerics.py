"""Tensor primitives, the warmup learning-rate schedule and Adam.

Tensors, autograd and the Adam moment bookkeeping come from torch. This
module pins the contracts the rest of the package relies on: explicit shape
errors, max-subtracted softmax, the layer-norm formula, scalar-only backward
and a warmup-scheduled Adam step that refuses to run on missing gradients.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import torch

from .errors import ContractError, ShapeError

ParameterTensor = torch.nn.Parameter

DEFAULT_DTYPE = torch.float32


def substream_seed(seed: int, name: str) -> int:
    """Derive an independent 63-bit seed for a named random stream."""
    digest = hashlib.sha256(f"{seed}:{name}".encode()).digest()
    return int.from_bytes(digest[:8], "little") & ((1 << 63) - 1)


def generator(seed: int, name: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(substream_seed(seed, name))
    return g


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.dim() < 1 or b.dim() < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(
            f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}"
        )
    return a @ b


def softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ShapeError(f"softmax over empty axis, shape {tuple(v.shape)}")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=dim, keepdim=True)


def log_softmax(v: torch.Tensor, dim: int = -1) -> torch.Tensor:
    if v.numel() == 0 or v.shape[dim] == 0:
        raise ShapeError(f"log_softmax over empty axis, shape {tuple(v.shape)}")
    shifted = v - v.amax(dim=dim, keepdim=True).detach()
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def layer_norm(
    v: torch.Tensor,
    gain: torch.Tensor | None = None,
    bias: torch.Tensor | None = None,
    eps: float = 1e-5,
) -> torch.Tensor:
    """Normalize the last axis: ``gain * (v - mean) / sqrt(var + eps) + bias``.

    The variance is the biased (population) variance.
    """
    n = v.shape[-1] if v.dim() else 0
    if n < 2:
        raise ShapeError(f"layer_norm needs at least 2 features, got {n}")
    mean = v.mean(dim=-1, keepdim=True)
    centered = v - mean
    var = (centered * centered).mean(dim=-1, keepdim=True)
    out = centered / torch.sqrt(var + eps)
    if gain is not None:
        out = out * gain
    if bias is not None:
        out = out + bias
    return out


def backward(loss: torch.Tensor) -> None:
    """Populate ``.grad`` on every parameter reachable from a scalar loss."""
    if loss.dim() != 0 and loss.numel() != 1:
        raise ContractError(
            f"backward needs a scalar loss, got shape {tuple(loss.shape)}"
        )
    loss.reshape(()).backward()


def lr_schedule(step: int, base_lr: float, warmup_steps: int) -> float:
    """Linear ramp from 0 at step 0 to ``base_lr`` at ``warmup_steps``, then flat."""
    if step < 0:
        raise ContractError(f"negative step {step}")
    if warmup_steps < 0:
        raise ContractError(f"negative warmup_steps {warmup_steps}")
    if warmup_steps == 0 or step >= warmup_steps:
        return base_lr
    return base_lr * step / warmup_steps


@dataclass
class OptimizerState:
    base_lr: float = 1e-5
    warmup_steps: int = 2000
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float | None = None
    weight_decay: float = 0.0
    step: int = 0
    last_lr: float = field(default=0.0, repr=False)


class Adam:
    """Adam with bias correction and a linearly warmed-up step size.

    The ``t``-th update (``t`` counting from 1) uses ``lr_schedule(t)``, so the
    first update already moves the parameters.
    """

    def __init__(self, params: Iterable[torch.Tensor], state: OptimizerState | None = None):
        self.params = [p for p in params if p.requires_grad]
        self.state = state or OptimizerState()
        s = self.state
        # weight_decay > 0 switches to the decoupled (AdamW) form.
        cls = torch.optim.AdamW if s.weight_decay else torch.optim.Adam
        self._opt = cls(
            self.params,
            lr=s.base_lr,
            betas=(s.beta1, s.beta2),
            eps=s.eps,
            weight_decay=s.weight_decay,
            foreach=False,
        )

    def moments(self, p: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        st = self._opt.state.get(p)
        if not st:
            return torch.zeros_like(p), torch.zeros_like(p)
        return st["exp_avg"], st["exp_avg_sq"]

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> float:
        for i, p in enumerate(self.params):
            if p.grad is None:
                raise ContractError(
                    f"trainable parameter #{i} {tuple(p.shape)} has no gradient"
                )
        s = self.state
        if s.clip_norm is not None:
            torch.nn.utils.clip_grad_norm_(self.params, s.clip_norm)
        s.step += 1
        lr = lr_schedule(s.step, s.base_lr, s.warmup_steps)
        for group in self._opt.param_groups:
            group["lr"] = lr
        self._opt.step()
        s.last_lr = lr
        return lr


def adam_step(optimizer: Adam, clear: bool = True) -> float:
    """Apply one Adam update; returns the learning rate used."""
    lr = optimizer.step()
    if clear:
        optimizer.zero_grad()
    return lr


def count_parameters(params: Sequence[torch.Tensor]) -> int:
    return sum(p.numel() for p in params)
