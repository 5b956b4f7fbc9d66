"""Decoder-only transformer LM used for both the source and target models.

Pre-norm blocks, learned absolute positions, untied output projection without
bias. Inputs are either token ids or already-positioned embeddings (see
``TransformerLM.embed``); the second form is how a soft prefix conditions the
target model.
"""

from __future__ import annotations

import math
import random
import time
from dataclasses import asdict, dataclass, field
from typing import Sequence

import torch
import torch.nn as nn

from . import numerics as nx
from .errors import CapacityError, ConfigError, ContractError, DataError, ShapeError
from .tokenization import BOS_ID, EOS_ID, PAD_ID, Vocabulary

INIT_STD = 0.02

# One (keys, values) pair per layer, each [B, heads, L, head_dim].
KVCache = list


@dataclass
class TransformerConfig:
    vocab_size: int
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64
    positional: str = "learned-absolute"

    def __post_init__(self):
        for name in ("vocab_size", "d_model", "n_layers", "n_heads", "d_ff", "max_seq_len"):
            if getattr(self, name) <= 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} not divisible by n_heads {self.n_heads}")
        if self.max_seq_len < 2:
            raise ConfigError("max_seq_len must be at least 2")
        if self.positional != "learned-absolute":
            raise ConfigError(f"unsupported positional encoding {self.positional!r}")

    def to_dict(self) -> dict:
        return asdict(self)

    def parameter_count(self) -> int:
        v, d, t, f, n = self.vocab_size, self.d_model, self.max_seq_len, self.d_ff, self.n_layers
        per_layer = 4 * (d * d + d) + 2 * d * f + f + d + 4 * d
        return 2 * v * d + t * d + 2 * d + n * per_layer


class LayerNorm(nn.Module):
    def __init__(self, d: int, eps: float = 1e-5):
        super().__init__()
        self.gain = nn.Parameter(torch.ones(d))
        self.bias = nn.Parameter(torch.zeros(d))
        self.eps = eps

    def forward(self, x):
        return nx.layer_norm(x, self.gain, self.bias, self.eps)


def _linear(d_in: int, d_out: int, g: torch.Generator, bias: bool = True) -> nn.Linear:
    lin = nn.Linear(d_in, d_out, bias=bias)
    nn.init.normal_(lin.weight, 0.0, INIT_STD, generator=g)
    if bias:
        nn.init.zeros_(lin.bias)
    return lin


def causal_mask(n_new: int, n_past: int, device=None) -> torch.Tensor:
    """Boolean [n_new, n_past + n_new]; True where attention is allowed."""
    q = torch.arange(n_new, device=device)[:, None] + n_past
    k = torch.arange(n_past + n_new, device=device)[None, :]
    return k <= q


def attention(q, k, v, allowed: torch.Tensor | None = None):
    """Scaled dot-product attention over [..., L, d] tensors."""
    scores = nx.matmul(q, k.transpose(-2, -1)) / math.sqrt(q.shape[-1])
    if allowed is not None:
        scores = scores.masked_fill(~allowed, float("-inf"))
    return nx.matmul(nx.softmax(scores, dim=-1), v)


class SelfAttention(nn.Module):
    def __init__(self, d: int, n_heads: int, g: torch.Generator):
        super().__init__()
        self.n_heads = n_heads
        self.q_proj = _linear(d, d, g)
        self.k_proj = _linear(d, d, g)
        self.v_proj = _linear(d, d, g)
        self.o_proj = _linear(d, d, g)

    def _heads(self, x):
        b, l, d = x.shape
        return x.view(b, l, self.n_heads, d // self.n_heads).transpose(1, 2)

    def forward(self, x, cache: list | None = None):
        b, l, d = x.shape
        q, k, v = self._heads(self.q_proj(x)), self._heads(self.k_proj(x)), self._heads(self.v_proj(x))
        n_past = 0
        if cache is not None:
            if cache:
                pk, pv = cache
                n_past = pk.shape[2]
                k = torch.cat([pk, k], dim=2)
                v = torch.cat([pv, v], dim=2)
            cache[:] = [k, v]
        out = attention(q, k, v, causal_mask(l, n_past, x.device))
        return self.o_proj(out.transpose(1, 2).reshape(b, l, d))


class Block(nn.Module):
    def __init__(self, cfg: TransformerConfig, g: torch.Generator):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads, g)
        self.ln2 = LayerNorm(cfg.d_model)
        self.ff_in = _linear(cfg.d_model, cfg.d_ff, g)
        self.ff_out = _linear(cfg.d_ff, cfg.d_model, g)

    def forward(self, x, cache=None):
        x = x + self.attn(self.ln1(x), cache)
        return x + self.ff_out(torch.nn.functional.gelu(self.ff_in(self.ln2(x))))


class TransformerLM(nn.Module):
    def __init__(self, cfg: TransformerConfig, seed: int = 0):
        super().__init__()
        self.cfg = cfg
        g = nx.generator(seed, "init")
        self.tok_emb = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.pos_emb = nn.Parameter(torch.empty(cfg.max_seq_len, cfg.d_model))
        nn.init.normal_(self.tok_emb, 0.0, INIT_STD, generator=g)
        nn.init.normal_(self.pos_emb, 0.0, INIT_STD, generator=g)
        self.blocks = nn.ModuleList(Block(cfg, g) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_model)
        self.lm_head = _linear(cfg.d_model, cfg.vocab_size, g, bias=False)

    @property
    def d_model(self) -> int:
        return self.cfg.d_model

    def _check_ids(self, ids: torch.Tensor):
        if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= self.cfg.vocab_size):
            raise ShapeError(f"token ids outside [0, {self.cfg.vocab_size})")

    def embed(self, ids, offset: int = 0) -> torch.Tensor:
        """Token embeddings plus positional embeddings starting at ``offset``.

        Accepts ``[K]`` or ``[B, K]`` ids and returns ``[K, d]`` / ``[B, K, d]``.
        """
        ids = torch.as_tensor(ids, dtype=torch.long)
        k = ids.shape[-1]
        if offset < 0 or offset + k > self.cfg.max_seq_len:
            raise CapacityError(
                f"positions {offset}..{offset + k - 1} exceed max_seq_len {self.cfg.max_seq_len}"
            )
        self._check_ids(ids)
        return self.tok_emb[ids] + self.pos_emb[offset:offset + k]

    def run(self, x: torch.Tensor, cache: KVCache | None = None) -> torch.Tensor:
        """Blocks plus final norm over positioned embeddings ``[B, L, d]``.

        With a cache, ``x`` holds only the new positions; the cache is extended in place.
        """
        if x.shape[-1] != self.cfg.d_model:
            raise ShapeError(f"input width {x.shape[-1]} != d_model {self.cfg.d_model}")
        n_past = cache[0][0].shape[2] if cache and cache[0] else 0
        if n_past + x.shape[1] > self.cfg.max_seq_len:
            raise CapacityError(
                f"sequence length {n_past + x.shape[1]} exceeds max_seq_len {self.cfg.max_seq_len}"
            )
        if cache is not None and not cache:
            cache.extend([] for _ in self.blocks)
        for i, block in enumerate(self.blocks):
            x = block(x, None if cache is None else cache[i])
        return self.ln_f(x)

    def _as_batch(self, inp):
        """Returns (positioned embeddings [B, L, d], squeezed?)."""
        if isinstance(inp, torch.Tensor) and inp.is_floating_point():
            x = inp
            if x.dim() == 2:
                return x.unsqueeze(0), True
            return x, False
        ids = torch.as_tensor(inp, dtype=torch.long)
        single = ids.dim() == 1
        x = self.embed(ids.unsqueeze(0) if single else ids)
        return x, single

    def forward_hidden(self, inp) -> torch.Tensor:
        """Last-layer hidden states (after the final norm), one row per input position."""
        x, single = self._as_batch(inp)
        if x.shape[1] == 0:
            raise ContractError("forward_hidden needs at least one position")
        h = self.run(x)
        return h[0] if single else h

    def forward_logits(self, inp) -> torch.Tensor:
        """Next-token logits ``[K, V]`` (or ``[B, K, V]``) from ids or embeddings."""
        x, single = self._as_batch(inp)
        logits = self.lm_head(self.run(x))
        return logits[0] if single else logits

    def forward(self, inp):
        return self.forward_logits(inp)


def frame(ids: Sequence[int]) -> list[int]:
    return [BOS_ID, *ids, EOS_ID]


def pad_batch(seqs: Sequence[Sequence[int]], pad: int = PAD_ID) -> torch.Tensor:
    n = max(len(s) for s in seqs)
    out = torch.full((len(seqs), n), pad, dtype=torch.long)
    for i, s in enumerate(seqs):
        out[i, : len(s)] = torch.as_tensor(list(s), dtype=torch.long)
    return out


@dataclass
class TrainSettings:
    steps: int = 1000
    batch_size: int = 16
    lr: float = 3e-4
    warmup: int = 200
    clip_norm: float | None = None
    weight_decay: float = 0.0
    seed: int = 0
    log_every: int = 1
    eval_every: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def batches(lengths: Sequence[int], batch_size: int, g: torch.Generator, bucket: int = 50):
    """Endless stream of length-bucketed, shuffled index batches."""
    n = len(lengths)
    while True:
        perm = torch.randperm(n, generator=g).tolist()
        chunk = batch_size * bucket
        out = []
        for s in range(0, n, chunk):
            part = sorted(perm[s:s + chunk], key=lambda i: lengths[i])
            out.extend(part[j:j + batch_size] for j in range(0, len(part), batch_size))
        order = torch.randperm(len(out), generator=g).tolist()
        for i in order:
            yield out[i]


def lm_loss(model: TransformerLM, ids: torch.Tensor) -> torch.Tensor:
    """Mean next-token cross-entropy over non-pad targets of framed id rows."""
    logits = model.forward_logits(ids[:, :-1])
    targets = ids[:, 1:]
    logp = nx.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    mask = targets != PAD_ID
    return -(logp * mask).sum() / mask.sum()


@dataclass
class PretrainResult:
    model: TransformerLM
    losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    seconds: float = 0.0


def encode_corpus(vocab: Vocabulary, sentences: Sequence[str], max_seq_len: int) -> list[list[int]]:
    rows = []
    for lineno, s in enumerate(sentences, 1):
        ids = frame(vocab.encode(s))
        if len(ids) > max_seq_len:
            raise DataError(
                f"line {lineno}: {len(ids)} framed tokens exceed max_seq_len {max_seq_len}"
            )
        rows.append(ids)
    return rows


@dataclass
class PackingSettings:
    """Short multi-sentence documents built from a monolingual corpus.

    Each document holds 1..max_sentences framed sentences; after the first,
    each one repeats an earlier sentence of the same document with probability
    ``repeat_prob``. With probability ``header_prob`` a sentence is preceded by
    one of ``headers`` (e.g. the prompt-template markers), and a second header
    follows with probability ``0.3 * header_prob``. Documents are cut at the
    model's ``max_seq_len``. A model trained this way has seen "copy what came
    before" and the template markers in its own language, which is what a soft
    prefix later has to exploit.
    """

    max_sentences: int = 3
    repeat_prob: float = 0.7
    header_prob: float = 0.5
    n_documents: int = 30000
    headers: tuple[str, ...] = ()

    def __post_init__(self):
        if self.max_sentences < 1 or self.n_documents < 1:
            raise ConfigError("packing needs max_sentences >= 1 and n_documents >= 1")
        for name in ("repeat_prob", "header_prob"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"packing {name} must lie in [0, 1]")


def pack_documents(rows: Sequence[Sequence[int]], vocab: Vocabulary, packing: PackingSettings, seed: int, max_len: int) -> list[list[int]]:
    rng = random.Random(nx.substream_seed(seed, "packing"))
    heads = [vocab.encode(h) for h in packing.headers]
    docs = []
    for _ in range(packing.n_documents):
        chosen: list[Sequence[int]] = []
        ids: list[int] = []
        for _ in range(rng.randint(1, packing.max_sentences)):
            if chosen and rng.random() < packing.repeat_prob:
                row = rng.choice(chosen)
            else:
                row = rng.choice(rows)
            chosen.append(row)
            if heads and rng.random() < packing.header_prob:
                ids += rng.choice(heads)
            if heads and rng.random() < 0.3 * packing.header_prob:
                ids += rng.choice(heads)
            ids += row
        docs.append(ids[:max_len])
    return docs


def pretrain_lm(
    model: TransformerLM,
    vocab: Vocabulary,
    sentences: Sequence[str],
    settings: TrainSettings,
    progress=None,
    packing: PackingSettings | None = None,
) -> PretrainResult:
    """Next-token training on BOS/EOS-framed monolingual sentences.

    With ``packing`` the training rows are packed documents instead of single
    sentences.
    """
    rows = encode_corpus(vocab, sentences, model.cfg.max_seq_len)
    if packing is not None:
        rows = pack_documents(rows, vocab, packing, settings.seed, model.cfg.max_seq_len)
    opt = nx.Adam(
        model.parameters(),
        nx.OptimizerState(
            base_lr=settings.lr, warmup_steps=settings.warmup,
            clip_norm=settings.clip_norm, weight_decay=settings.weight_decay,
        ),
    )
    stream = batches([len(r) for r in rows], settings.batch_size, nx.generator(settings.seed, "shuffle"))
    result = PretrainResult(model)
    start = time.perf_counter()
    model.train()
    for step in range(1, settings.steps + 1):
        idx = next(stream)
        loss = lm_loss(model, pad_batch([rows[i] for i in idx]))
        nx.backward(loss)
        lr = nx.adam_step(opt)
        result.losses.append(loss.item())
        result.lrs.append(lr)
        if progress is not None and (step % max(settings.log_every, 1) == 0 or step == settings.steps):
            progress(step, lr, result.losses[-1])
    result.seconds = time.perf_counter() - start
    model.eval()
    return result


def corpus_cross_entropy(model: TransformerLM, vocab: Vocabulary, sentences: Sequence[str], batch_size: int = 64) -> float:
    """Per-token cross-entropy (nats) of the corpus, EOS included."""
    rows = encode_corpus(vocab, sentences, model.cfg.max_seq_len)
    total, count = 0.0, 0
    with torch.no_grad():
        for s in range(0, len(rows), batch_size):
            ids = pad_batch(rows[s:s + batch_size])
            n = int((ids[:, 1:] != PAD_ID).sum())
            total += float(lm_loss(model, ids)) * n
            count += n
    return total / count


def save_lm(path, model: TransformerLM, vocab: Vocabulary, extra: dict | None = None) -> None:
    from .checkpoint import save_checkpoint

    config = {"kind": "lm", "model": model.cfg.to_dict(), "tokenizer": vocab.kind, "vocab": vocab.tokens}
    config.update(extra or {})
    save_checkpoint(path, config, model.state_dict())


def load_lm(path) -> tuple[TransformerLM, Vocabulary, dict]:
    from .checkpoint import load_checkpoint

    config, tensors = load_checkpoint(path)
    if config.get("kind") != "lm":
        raise DataError(f"{path}: not a language-model checkpoint (kind={config.get('kind')!r})")
    model = TransformerLM(TransformerConfig(**config["model"]))
    model.load_state_dict(tensors)
    model.eval()
    return model, Vocabulary(config["vocab"], config["tokenizer"]), config
