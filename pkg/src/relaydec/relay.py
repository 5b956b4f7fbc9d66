"""Source model + bridge + target model, the translation objective and bridge training.

The target model sees one positional axis across three segments::

    [ bridge(H) + pos[0:P1] ; embed(prompt, P1) ; embed(BOS y_1..y_T, P1+P2) ]

and the loss reads only the positions predicting ``y_1..y_T, EOS``.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import torch
import torch.nn as nn
from torch.nn.utils.rnn import pad_sequence

from . import numerics as nx
from .bridge import Bridge
from .checkpoint import load_checkpoint, save_checkpoint
from .data import ParallelCorpus
from .errors import CapacityError, ConfigError, ContractError, DataError
from .lora import DEFAULT_TARGETS, apply_lora, lora_parameters
from .tokenization import BOS_ID, EOS_ID, PAD_ID, PromptTemplate, Vocabulary
from .transformer import TrainSettings, TransformerConfig, TransformerLM, batches, frame, pad_batch


@dataclass
class LoraSettings:
    r: int = 8
    alpha: float = 16.0
    targets: tuple[str, ...] = DEFAULT_TARGETS

    def to_dict(self) -> dict:
        d = asdict(self)
        d["targets"] = list(self.targets)
        return d


@dataclass
class RelayInput:
    embeds: torch.Tensor      # [L, D_e], positions already added
    targets: torch.Tensor     # [L], PAD where nothing is predicted
    loss_mask: torch.Tensor   # [L] bool
    segments: tuple[int, int, int]  # prefix, prompt, target-side inputs

    def __len__(self) -> int:
        return self.embeds.shape[0]


class RelayModel(nn.Module):
    """Relay decoder. ``bridge=None`` gives the prompt-only baseline with no prefix."""

    def __init__(
        self,
        model_a: TransformerLM,
        vocab_a: Vocabulary,
        bridge: Bridge | None,
        model_b: TransformerLM,
        vocab_b: Vocabulary,
        template: PromptTemplate | None = None,
        finetune_a: bool = False,
        finetune_b: bool = False,
        lora: LoraSettings | None = None,
        seed: int = 0,
    ):
        super().__init__()
        if bridge is not None and (bridge.d_h, bridge.d_e) != (model_a.d_model, model_b.d_model):
            raise ConfigError(
                f"bridge maps {bridge.d_h} -> {bridge.d_e} but D_h={model_a.d_model}, D_e={model_b.d_model}"
            )
        if model_a.cfg.vocab_size != len(vocab_a) or model_b.cfg.vocab_size != len(vocab_b):
            raise ConfigError("vocabulary sizes do not match model embedding tables")
        self.model_a, self.model_b, self.bridge = model_a, model_b, bridge
        self.vocab_a, self.vocab_b = vocab_a, vocab_b
        self.template = template or PromptTemplate()
        self.finetune_a, self.finetune_b = finetune_a, finetune_b
        self.lora = lora or LoraSettings()
        for p in self.model_a.parameters():
            p.requires_grad_(False)
        for p in self.model_b.parameters():
            p.requires_grad_(False)
        if finetune_a:
            apply_lora(model_a, self.lora.targets, self.lora.r, self.lora.alpha, nx.substream_seed(seed, "lora_a"))
        if finetune_b:
            apply_lora(model_b, self.lora.targets, self.lora.r, self.lora.alpha, nx.substream_seed(seed, "lora_b"))
        self.eval()

    @property
    def d_e(self) -> int:
        return self.model_b.d_model

    def trainable_parameters(self) -> list[nn.Parameter]:
        params = list(self.bridge.parameters()) if self.bridge is not None else []
        if self.finetune_a:
            params += lora_parameters(self.model_a)
        if self.finetune_b:
            params += lora_parameters(self.model_b)
        return params

    # -- input construction -------------------------------------------------

    def source_ids(self, source: str) -> list[int]:
        ids = frame(self.vocab_a.encode(source))
        if len(ids) > self.model_a.cfg.max_seq_len:
            raise CapacityError(
                f"source of {len(ids)} framed tokens exceeds M_a max_seq_len {self.model_a.cfg.max_seq_len}"
            )
        return ids

    def prompt_ids(self, source: str) -> list[int]:
        return self.vocab_b.encode(self.template.render(source))

    def source_hidden(self, sources: Sequence[str]) -> list[torch.Tensor]:
        """H for each source: one teacher-forced pass over BOS + X + EOS."""
        ids = [self.source_ids(s) for s in sources]
        with torch.set_grad_enabled(self.finetune_a and torch.is_grad_enabled()):
            h = self.model_a.forward_hidden(pad_batch(ids))
        return [h[i, : len(x)] for i, x in enumerate(ids)]

    def prefixes(self, sources: Sequence[str], hidden: Sequence[torch.Tensor]) -> list[torch.Tensor]:
        """Bridge outputs per sentence, without positional embeddings."""
        if self.bridge is None:
            empty = self.model_b.tok_emb.new_zeros(0, self.d_e)
            return [empty for _ in sources]
        lens = torch.tensor([h.shape[0] for h in hidden])
        h = pad_sequence(list(hidden), batch_first=True)
        if self.bridge.variant == "fc":
            out = self.bridge.map_fc(h)
            return [out[i, :n] for i, n in enumerate(lens.tolist())]
        key_mask = torch.arange(h.shape[1])[None, :] < lens[:, None]
        if self.bridge.variant == "caq":
            out = self.bridge.map_caq(h, key_mask)
            return list(out)
        q_ids = [self.vocab_b.encode(s) for s in sources]
        queries = pad_sequence([self.model_b.embed(q) for q in q_ids], batch_first=True)
        out = self.bridge.map_ca(h, queries, key_mask)
        return [out[i, : len(q)] for i, q in enumerate(q_ids)]

    def assemble(self, prefix: torch.Tensor, source: str, target_ids: Sequence[int] | None = None) -> RelayInput:
        p1 = prefix.shape[0]
        prompt = self.prompt_ids(source)
        p2 = len(prompt)
        tgt_in = [BOS_ID, *target_ids] if target_ids is not None else []
        total = p1 + p2 + len(tgt_in)
        limit = self.model_b.cfg.max_seq_len
        if total > limit:
            raise CapacityError(
                f"relay input of {total} positions exceeds M_b max_seq_len {limit} "
                f"(prefix {p1}, prompt {p2}, target {len(tgt_in)})"
            )
        parts = [prefix + self.model_b.pos_emb[:p1], self.model_b.embed(prompt, p1)]
        if tgt_in:
            parts.append(self.model_b.embed(tgt_in, p1 + p2))
        targets = torch.full((total,), PAD_ID, dtype=torch.long)
        mask = torch.zeros(total, dtype=torch.bool)
        if tgt_in:
            targets[p1 + p2:] = torch.tensor([*target_ids, EOS_ID])
            mask[p1 + p2:] = True
        return RelayInput(torch.cat(parts), targets, mask, (p1, p2, len(tgt_in)))

    def build_inputs(
        self,
        sources: Sequence[str],
        target_ids: Sequence[Sequence[int]] | None = None,
        hidden: Sequence[torch.Tensor] | None = None,
    ) -> list[RelayInput]:
        if hidden is None:
            hidden = self.source_hidden(sources) if self.bridge is not None else [None] * len(sources)
        prefixes = self.prefixes(sources, hidden)
        tids = target_ids if target_ids is not None else [None] * len(sources)
        return [self.assemble(p, s, t) for p, s, t in zip(prefixes, sources, tids)]

    def build_input(self, source: str, target: str | Sequence[int] | None = None) -> RelayInput:
        if isinstance(target, str):
            target = self.vocab_b.encode(target)
        return self.build_inputs([source], None if target is None else [target])[0]

    # -- objective ------------------------------------------------------------

    def batch_logits(self, inputs: Sequence[RelayInput]):
        embeds = pad_sequence([x.embeds for x in inputs], batch_first=True)
        targets = pad_sequence([x.targets for x in inputs], batch_first=True, padding_value=PAD_ID)
        mask = pad_sequence([x.loss_mask for x in inputs], batch_first=True, padding_value=False)
        return self.model_b.forward_logits(embeds), targets, mask

    def sentence_log_likelihoods(
        self,
        sources: Sequence[str],
        target_ids: Sequence[Sequence[int]],
        hidden: Sequence[torch.Tensor] | None = None,
    ) -> torch.Tensor:
        for i, t in enumerate(target_ids):
            if len(t) == 0:
                raise ContractError(f"target sentence {i} is empty")
        logits, targets, mask = self.batch_logits(self.build_inputs(sources, target_ids, hidden))
        return masked_log_likelihood(logits, targets, mask)

    def sentence_log_likelihood(self, source: str, target: str | Sequence[int]) -> torch.Tensor:
        """``l(X, Y)``: summed log-probability of ``Y`` and EOS given the relay prefix."""
        if isinstance(target, str):
            target = self.vocab_b.encode(target)
        return self.sentence_log_likelihoods([source], [target])[0]

    def batch_loss(self, pairs: Sequence[tuple[str, str]], hidden=None) -> torch.Tensor:
        """``L = -(1/N) sum_i l(X_i, Y_i)``."""
        if not pairs:
            raise ContractError("batch_loss needs at least one pair")
        sources = [s for s, _ in pairs]
        tids = [self.vocab_b.encode(t) for _, t in pairs]
        return -self.sentence_log_likelihoods(sources, tids, hidden).mean()

    # -- persistence ------------------------------------------------------------

    def config(self) -> dict:
        return {
            "kind": "relay",
            "model_a": self.model_a.cfg.to_dict(),
            "vocab_a": self.vocab_a.tokens,
            "tokenizer_a": self.vocab_a.kind,
            "model_b": self.model_b.cfg.to_dict(),
            "vocab_b": self.vocab_b.tokens,
            "tokenizer_b": self.vocab_b.kind,
            "bridge": None if self.bridge is None else self.bridge.config(),
            "template": asdict(self.template),
            "finetune_a": self.finetune_a,
            "finetune_b": self.finetune_b,
            "lora": self.lora.to_dict(),
        }

    def named_tensors(self) -> dict[str, torch.Tensor]:
        out = {}
        for prefix, model in (("model_a", self.model_a), ("model_b", self.model_b)):
            for name, t in model.state_dict().items():
                if name.endswith((".lora_A", ".lora_B")):
                    out[f"lora.{prefix}.{name}"] = t
                else:
                    out[f"{prefix}.{name.replace('.base.', '.')}"] = t
        if self.bridge is not None:
            for name, t in self.bridge.state_dict().items():
                out[f"bridge.{name}"] = t
        return out

    def save(self, path: str | Path) -> None:
        save_checkpoint(path, self.config(), self.named_tensors())


def masked_log_likelihood(logits: torch.Tensor, targets: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Per-row sum of target log-probabilities over mask-true positions."""
    logp = nx.log_softmax(logits, dim=-1).gather(-1, targets.unsqueeze(-1)).squeeze(-1)
    return torch.where(mask, logp, torch.zeros_like(logp)).sum(dim=-1)


def load_relay(path: str | Path) -> RelayModel:
    config, tensors = load_checkpoint(path)
    if config.get("kind") != "relay":
        raise DataError(f"{path}: not a relay checkpoint (kind={config.get('kind')!r})")
    models = {}
    for side in ("a", "b"):
        m = TransformerLM(TransformerConfig(**config[f"model_{side}"]))
        prefix = f"model_{side}."
        m.load_state_dict({k[len(prefix):]: v for k, v in tensors.items() if k.startswith(prefix)})
        models[side] = m
    bridge = None
    if config["bridge"] is not None:
        bc = config["bridge"]
        bridge = Bridge(bc["variant"], bc["d_h"], bc["d_e"], bc["n_heads"], bc["n_queries"])
        bridge.load_state_dict({k[7:]: v for k, v in tensors.items() if k.startswith("bridge.")})
    lo = config["lora"]
    relay = RelayModel(
        models["a"], Vocabulary(config["vocab_a"], config["tokenizer_a"]), bridge,
        models["b"], Vocabulary(config["vocab_b"], config["tokenizer_b"]),
        PromptTemplate(**config["template"]), config["finetune_a"], config["finetune_b"],
        LoraSettings(lo["r"], lo["alpha"], tuple(lo["targets"])),
    )
    with torch.no_grad():
        for name, t in tensors.items():
            if name.startswith("lora."):
                _, side, rest = name.split(".", 2)
                getattr(relay, side).get_parameter(rest).copy_(t)
    return relay


# -- training -------------------------------------------------------------------


@dataclass
class BridgeTrainResult:
    log: list[dict] = field(default_factory=list)
    seconds: float = 0.0

    @property
    def losses(self) -> list[float]:
        return [row["train_loss"] for row in self.log]


def train_bridge(
    relay: RelayModel,
    corpus: ParallelCorpus,
    settings: TrainSettings,
    heldout: ParallelCorpus | None = None,
    evaluate_fn: Callable[[RelayModel, ParallelCorpus], float] | None = None,
    progress: Callable[[dict], None] | None = None,
) -> BridgeTrainResult:
    """Minimize the batch loss over shuffled mini-batches.

    Only the bridge and the enabled LoRA adapters move. ``evaluate_fn`` scores
    ``heldout`` every ``settings.eval_every`` steps and after the last step.
    """
    params = relay.trainable_parameters()
    if not params:
        raise ConfigError("relay has no trainable parameters")
    sources, targets = corpus.sources, [relay.vocab_b.encode(t) for t in corpus.targets]
    hidden = None
    if not relay.finetune_a and relay.bridge is not None:
        hidden = []
        with torch.no_grad():
            for s in range(0, len(sources), 256):
                hidden.extend(relay.source_hidden(sources[s:s + 256]))
    opt = nx.Adam(params, nx.OptimizerState(
        base_lr=settings.lr, warmup_steps=settings.warmup, clip_norm=settings.clip_norm
    ))
    lengths = [len(relay.source_ids(s)) + len(t) for s, t in zip(sources, targets)]
    stream = batches(lengths, settings.batch_size, nx.generator(settings.seed, "shuffle"))
    result = BridgeTrainResult()
    start = time.perf_counter()
    for step in range(1, settings.steps + 1):
        idx = next(stream)
        ll = relay.sentence_log_likelihoods(
            [sources[i] for i in idx], [targets[i] for i in idx],
            None if hidden is None else [hidden[i] for i in idx],
        )
        loss = -ll.mean()
        nx.backward(loss)
        lr = nx.adam_step(opt)
        row = {"step": step, "lr": lr, "train_loss": loss.item(), "heldout_bleu": None}
        last = step == settings.steps
        if heldout is not None and evaluate_fn is not None and (
            last or (settings.eval_every and step % settings.eval_every == 0)
        ):
            with torch.no_grad():
                row["heldout_bleu"] = evaluate_fn(relay, heldout)
        result.log.append(row)
        if progress is not None and (last or step % max(settings.log_every, 1) == 0 or row["heldout_bleu"] is not None):
            progress(row)
    result.seconds = time.perf_counter() - start
    return result
