"""Mapping layers from the source model's hidden space into the target model's
embedding space.

``fc`` is a per-row affine map. ``ca`` cross-attends from target-model
embeddings of the source sentence into the hidden states. ``caq`` does the same
from a learned, fixed-size query table.
"""

from __future__ import annotations

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import ConfigError, ContractError, ShapeError
from .transformer import INIT_STD, _linear, attention

VARIANTS = ("fc", "ca", "caq")


class Bridge(nn.Module):
    def __init__(
        self,
        variant: str,
        d_h: int,
        d_e: int,
        n_heads: int = 4,
        n_queries: int = 32,
        seed: int = 0,
    ):
        super().__init__()
        variant = variant.lower().replace("-", "")
        if variant not in VARIANTS:
            raise ConfigError(f"unknown bridge variant {variant!r}; expected one of {VARIANTS}")
        if variant != "fc" and d_e % n_heads:
            raise ConfigError(f"D_e {d_e} not divisible by bridge n_heads {n_heads}")
        self.variant, self.d_h, self.d_e = variant, d_h, d_e
        self.n_heads, self.n_queries = n_heads, n_queries
        g = nx.generator(seed, "bridge")
        if variant == "fc":
            self.proj = _linear(d_h, d_e, g)
            return
        self.q_proj = _linear(d_e, d_e, g)
        self.k_proj = _linear(d_h, d_e, g)
        self.v_proj = _linear(d_h, d_e, g)
        self.o_proj = _linear(d_e, d_e, g)
        if variant == "caq":
            self.queries = nn.Parameter(torch.empty(n_queries, d_e))
            nn.init.normal_(self.queries, 0.0, INIT_STD, generator=g)

    def config(self) -> dict:
        return {
            "variant": self.variant, "d_h": self.d_h, "d_e": self.d_e,
            "n_heads": self.n_heads, "n_queries": self.n_queries,
        }

    @property
    def needs_queries(self) -> bool:
        return self.variant == "ca"

    def _check_h(self, h: torch.Tensor):
        if h.shape[-1] != self.d_h:
            raise ShapeError(f"hidden width {h.shape[-1]} != bridge D_h {self.d_h}")
        if h.shape[-2] == 0:
            raise ContractError("bridge input has no rows")

    def map_fc(self, h: torch.Tensor) -> torch.Tensor:
        self._check_h(h)
        return self.proj(h)

    def map_ca(self, h: torch.Tensor, queries: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        """Multi-head cross-attention, no residual; ``key_mask`` [B, K] marks real rows."""
        self._check_h(h)
        if queries.shape[-1] != self.d_e:
            raise ShapeError(f"query width {queries.shape[-1]} != bridge D_e {self.d_e}")
        if queries.shape[-2] == 0:
            raise ContractError("cross-attention needs at least one query")
        single = h.dim() == 2
        if single:
            h = h.unsqueeze(0)
        if queries.dim() == 2:
            queries = queries.unsqueeze(0).expand(h.shape[0], -1, -1)
        b, k, _ = h.shape
        nh, hd = self.n_heads, self.d_e // self.n_heads

        def heads(x):
            return x.view(b, x.shape[1], nh, hd).transpose(1, 2)

        q = heads(self.q_proj(queries))
        kk, v = heads(self.k_proj(h)), heads(self.v_proj(h))
        allowed = None if key_mask is None else key_mask[:, None, None, :]
        out = attention(q, kk, v, allowed).transpose(1, 2).reshape(b, -1, self.d_e)
        out = self.o_proj(out)
        return out[0] if single else out

    def map_caq(self, h: torch.Tensor, key_mask: torch.Tensor | None = None) -> torch.Tensor:
        return self.map_ca(h, self.queries, key_mask)

    def forward(self, h, queries=None, key_mask=None):
        if self.variant == "fc":
            return self.map_fc(h)
        if self.variant == "caq":
            return self.map_caq(h, key_mask)
        if queries is None:
            raise ContractError("the ca bridge needs query embeddings")
        return self.map_ca(h, queries, key_mask)
