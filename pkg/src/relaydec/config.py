"""Run configuration: nested dataclasses loaded from JSON with unknown keys rejected."""

from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import dataclass, field
from pathlib import Path

from .checkpoint import canonical_json
from .errors import ConfigError


@dataclass
class SyntheticConfig:
    n_symbols: int = 50
    reorder: str = "swap-adjacent-pairs"
    min_len: int = 3
    max_len: int = 12
    # Successors per latent symbol (a sparse Markov grammar); 0 draws symbols iid.
    branching: int = 5


@dataclass
class DataConfig:
    # Directory with train/heldout/test .src/.tgt and mono.a/mono.b; synthetic data when null.
    dir: str | None = None
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    n_train: int = 5000
    n_heldout: int = 500
    n_test: int = 500
    n_mono: int = 10000
    tokenizer: str = "word"


@dataclass
class ModelConfig:
    d_model: int = 64
    n_layers: int = 2
    n_heads: int = 4
    d_ff: int = 256
    max_seq_len: int = 64


@dataclass
class PackingConfig:
    max_sentences: int = 3
    repeat_prob: float = 0.7
    header_prob: float = 0.5
    n_documents: int = 30000


@dataclass
class PretrainConfig:
    corpus: str | None = None
    steps: int = 8000
    batch_size: int = 32
    lr: float = 1e-3
    warmup: int = 100
    clip_norm: float | None = None
    weight_decay: float = 0.0
    log_every: int = 100
    packing: PackingConfig | None = field(default_factory=PackingConfig)


@dataclass
class BridgeConfig:
    variant: str = "fc"
    n_heads: int = 4
    n_queries: int = 32


@dataclass
class LoraConfig:
    r: int = 8
    alpha: float = 16.0
    targets: list[str] = field(default_factory=lambda: ["q_proj", "v_proj"])


@dataclass
class BridgeTrainConfig:
    steps: int = 3000
    batch_size: int = 16
    lr: float = 1e-3
    warmup: int = 200
    clip_norm: float | None = 1.0
    log_every: int = 50
    eval_every: int = 0
    eval_size: int = 500


@dataclass
class PromptConfig:
    src_name: str = "LangA"
    tgt_name: str = "LangB"
    include_source_text: bool = False


@dataclass
class DecodeConfig:
    strategy: str = "greedy"
    beam_width: int = 4
    max_new_tokens: int | None = None
    length_penalty: float = 0.0


@dataclass
class AblateConfig:
    # Data-size rows: null trains every row for train.steps; a number gives each
    # row the same count of passes over its own subset instead.
    epochs: float | None = 6.0
    sizes: list[int] = field(default_factory=lambda: [1000, 2000, 4000, 8000])
    variants: list[str] = field(default_factory=lambda: ["fc", "ca", "caq"])


@dataclass
class RunConfig:
    seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    model_a: ModelConfig = field(default_factory=ModelConfig)
    model_b: ModelConfig = field(default_factory=ModelConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    checkpoint_a: str | None = None
    checkpoint_b: str | None = None
    relay: str | None = None
    bridge: BridgeConfig = field(default_factory=BridgeConfig)
    lora: LoraConfig = field(default_factory=LoraConfig)
    finetune_a: bool = False
    finetune_b: bool = False
    train: BridgeTrainConfig = field(default_factory=BridgeTrainConfig)
    prompt: PromptConfig = field(default_factory=PromptConfig)
    decode: DecodeConfig = field(default_factory=DecodeConfig)
    ablate: AblateConfig = field(default_factory=AblateConfig)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return canonical_json(self.to_dict())

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n", encoding="utf-8")


def _dataclass_of(tp):
    """The dataclass inside ``tp`` (handles ``X | None``), else None."""
    if dataclasses.is_dataclass(tp):
        return tp
    for arg in typing.get_args(tp):
        if dataclasses.is_dataclass(arg):
            return arg
    return None


def from_dict(cls, raw, where: str = "config"):
    if not isinstance(raw, dict):
        raise ConfigError(f"{where}: expected an object, got {type(raw).__name__}")
    hints = typing.get_type_hints(cls)
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(raw) - names)
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {unknown}")
    kwargs = {}
    for key, value in raw.items():
        sub = _dataclass_of(hints[key])
        if sub is not None and value is not None:
            value = from_dict(sub, value, f"{where}.{key}")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except TypeError as e:
        raise ConfigError(f"{where}: {e}") from None


def load_config(path: str | Path | None) -> RunConfig:
    if path is None:
        return RunConfig()
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    try:
        raw = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise ConfigError(f"{path}: invalid JSON ({e})") from None
    return from_dict(RunConfig, raw)
