"""Greedy and beam-search generation from a relay model, with a KV cache."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import torch

from . import numerics as nx
from .errors import ConfigError
from .relay import RelayModel
from .tokenization import BOS_ID, EOS_ID, PAD_ID

STRATEGIES = ("greedy", "beam")


@dataclass
class DecodeSettings:
    strategy: str = "greedy"
    beam_width: int = 4
    max_new_tokens: int | None = None
    length_penalty: float = 0.0

    def __post_init__(self):
        if self.strategy not in STRATEGIES:
            raise ConfigError(f"unknown decoding strategy {self.strategy!r}")
        if self.beam_width < 1:
            raise ConfigError(f"beam_width must be >= 1, got {self.beam_width}")
        if self.max_new_tokens is not None and self.max_new_tokens < 1:
            raise ConfigError(f"max_new_tokens must be >= 1, got {self.max_new_tokens}")

    def budget(self, n_source_tokens: int) -> int:
        return self.max_new_tokens or 2 * n_source_tokens + 16


@dataclass
class Hypothesis:
    text: str
    ids: list[int]
    score: float
    finished: bool = True
    truncated: bool = False
    beams: list[tuple[str, float]] = field(default_factory=list)


class _Stepper:
    """Incremental target-model evaluation over [prefix ; prompt ; BOS ; generated]."""

    def __init__(self, relay: RelayModel, source: str):
        self.relay = relay
        self.model = relay.model_b
        inp = relay.build_input(source)
        bos = self.model.embed([BOS_ID], len(inp))
        self.cache: list = []
        self.pos = len(inp) + 1
        h = self.model.run(torch.cat([inp.embeds, bos])[None], self.cache)
        self.logits = self.model.lm_head(h[:, -1])

    @property
    def room(self) -> bool:
        return self.pos < self.model.cfg.max_seq_len

    def log_probs(self) -> torch.Tensor:
        logp = nx.log_softmax(self.logits, dim=-1)
        logp[:, PAD_ID] = float("-inf")
        logp[:, BOS_ID] = float("-inf")
        return logp

    def reorder(self, rows: torch.Tensor) -> None:
        self.cache = [[k.index_select(0, rows), v.index_select(0, rows)] for k, v in self.cache]
        self.logits = self.logits.index_select(0, rows)

    def advance(self, tokens: Sequence[int]) -> None:
        x = self.model.embed(torch.tensor(list(tokens))[:, None], self.pos)
        h = self.model.run(x, self.cache)
        self.pos += 1
        self.logits = self.model.lm_head(h[:, -1])


def _n_source_tokens(relay: RelayModel, source: str) -> int:
    return len(relay.vocab_a.encode(source))


@torch.no_grad()
def greedy_generate(relay: RelayModel, source: str, settings: DecodeSettings | None = None) -> Hypothesis:
    settings = settings or DecodeSettings()
    st = _Stepper(relay, source)
    ids: list[int] = []
    score, finished, truncated = 0.0, False, False
    for _ in range(settings.budget(_n_source_tokens(relay, source))):
        logp = st.log_probs()[0]
        tok = int(torch.argmax(logp))
        score += float(logp[tok])
        if tok == EOS_ID:
            finished = True
            break
        ids.append(tok)
        if not st.room:
            truncated = True
            break
        st.advance([tok])
    return Hypothesis(relay.vocab_b.decode(ids), ids, score, finished, truncated)


def _normalized(score: float, length: int, penalty: float) -> float:
    return score / (max(length, 1) ** penalty) if penalty else score


@torch.no_grad()
def beam_generate(relay: RelayModel, source: str, settings: DecodeSettings | None = None) -> Hypothesis:
    settings = settings or DecodeSettings(strategy="beam")
    width, lp = settings.beam_width, settings.length_penalty
    st = _Stepper(relay, source)
    alive: list[tuple[list[int], float]] = [([], 0.0)]
    done: list[tuple[list[int], float, bool]] = []
    truncated = False
    for _ in range(settings.budget(_n_source_tokens(relay, source))):
        logp = st.log_probs()
        # float64 accumulation, the same arithmetic as greedy's Python floats
        base = torch.tensor([s for _, s in alive], dtype=torch.float64)
        cand = (base[:, None] + logp.double()).reshape(-1)
        vocab = logp.shape[1]
        order = torch.sort(cand, descending=True, stable=True).indices[: 2 * width].tolist()
        nxt_rows, nxt = [], []
        for flat in order:
            row, tok = divmod(flat, vocab)
            score = float(cand[flat])
            if score == float("-inf"):
                break
            ids = alive[row][0] + [tok]
            if tok == EOS_ID:
                done.append((ids[:-1], score, True))
            else:
                nxt_rows.append(row)
                nxt.append((ids, score))
            if len(nxt) == width:
                break
        if len(done) >= width or not nxt:
            break
        if not lp and done and max(s for _, s, _ in done) >= nxt[0][1]:
            break
        if not st.room:
            truncated = True
            alive = nxt
            break
        alive = nxt
        st.reorder(torch.tensor(nxt_rows))
        st.advance([ids[-1] for ids, _ in nxt])
    pool = done if done else [(ids, s, False) for ids, s in alive]
    ranked = sorted(pool, key=lambda h: _normalized(h[1], len(h[0]) + h[2], lp), reverse=True)
    ids, score, finished = ranked[0]
    beams = [(relay.vocab_b.decode(i), _normalized(s, len(i) + f, lp)) for i, s, f in ranked]
    return Hypothesis(relay.vocab_b.decode(ids), ids, score, finished, truncated and not finished, beams)


def generate(relay: RelayModel, source: str, settings: DecodeSettings | None = None) -> Hypothesis:
    settings = settings or DecodeSettings()
    if settings.strategy == "beam":
        return beam_generate(relay, source, settings)
    return greedy_generate(relay, source, settings)


def translate(relay: RelayModel, sources: Sequence[str], settings: DecodeSettings | None = None) -> list[str]:
    return [generate(relay, s, settings).text for s in sources]


@torch.no_grad()
def score_ids(relay: RelayModel, source: str, ids: Sequence[int], finished: bool = True) -> float:
    """Teacher-forced log-probability of ``ids`` (plus EOS when finished)."""
    inp = relay.build_input(source, list(ids))
    logits, targets, mask = relay.batch_logits([inp])
    logp = nx.log_softmax(logits[0], dim=-1).gather(-1, targets[0][:, None])[:, 0]
    picked = logp[mask[0]]
    return float(picked.sum() if finished else picked[:-1].sum())
