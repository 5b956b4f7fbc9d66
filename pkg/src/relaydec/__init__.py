"""Relay decoding: a source-language LM's hidden states, mapped by a small
bridge, condition a target-language LM that generates the translation."""

from .bridge import Bridge
from .data import ParallelCorpus, SyntheticLangSpec, gen_synthetic_pair, load_parallel, subset
from .decoding import DecodeSettings, beam_generate, generate, greedy_generate, translate
from .errors import CapacityError, ConfigError, ContractError, DataError, RelayError, ShapeError, VocabRangeError
from .lora import apply_lora, merge_lora
from .metrics import EvalReport, bleu, chrf, score_corpus
from .relay import RelayModel, load_relay, train_bridge
from .tokenization import PromptTemplate, Vocabulary, build_vocab
from .transformer import TrainSettings, TransformerConfig, TransformerLM, load_lm, pretrain_lm, save_lm

__version__ = "0.1.0"
