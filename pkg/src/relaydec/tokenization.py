"""Vocabularies, tokenizers and the relay prompt template."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

from .errors import DataError, VocabRangeError

PAD, BOS, EOS, UNK = "<PAD>", "<BOS>", "<EOS>", "<UNK>"
RESERVED = (PAD, BOS, EOS, UNK)
PAD_ID, BOS_ID, EOS_ID, UNK_ID = 0, 1, 2, 3

TOKENIZER_KINDS = ("word", "char")


def split_tokens(text: str, kind: str) -> list[str]:
    if kind == "word":
        return text.split()
    if kind == "char":
        return list(text)
    raise DataError(f"unknown tokenizer kind {kind!r}; expected one of {TOKENIZER_KINDS}")


def join_tokens(tokens: Sequence[str], kind: str) -> str:
    return " ".join(tokens) if kind == "word" else "".join(tokens)


class Vocabulary:
    """Bidirectional token/id map with the four reserved ids fixed at 0..3."""

    def __init__(self, tokens: Sequence[str], kind: str = "word"):
        if tuple(tokens[:4]) != RESERVED:
            raise DataError(f"vocabulary must start with {RESERVED}, got {tuple(tokens[:4])}")
        if len(set(tokens)) != len(tokens):
            raise DataError("vocabulary contains duplicate tokens")
        if len(tokens) < 5:
            raise DataError("vocabulary needs at least one non-reserved token")
        split_tokens("", kind)
        self.kind = kind
        self.tokens = list(tokens)
        self.index = {t: i for i, t in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __eq__(self, other: object) -> bool:
        return isinstance(other, Vocabulary) and (self.kind, self.tokens) == (other.kind, other.tokens)

    def __repr__(self) -> str:
        return f"Vocabulary(kind={self.kind!r}, size={len(self)})"

    def encode(self, text: str) -> list[int]:
        return [self.index.get(t, UNK_ID) for t in split_tokens(text, self.kind)]

    def decode(self, ids: Iterable[int], strip_special: bool = True) -> str:
        out = []
        for i in ids:
            i = int(i)
            if not 0 <= i < len(self.tokens):
                raise VocabRangeError(f"token id {i} outside vocabulary of size {len(self.tokens)}")
            if strip_special and i in (PAD_ID, BOS_ID, EOS_ID):
                continue
            out.append(self.tokens[i])
        return join_tokens(out, self.kind)

    def save(self, path: str | Path) -> None:
        Path(path).write_text("".join(t + "\n" for t in self.tokens), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, kind: str = "word") -> "Vocabulary":
        text = Path(path).read_text(encoding="utf-8")
        return cls(text.split("\n")[:-1] if text.endswith("\n") else text.split("\n"), kind)


def build_vocab(
    corpus: Sequence[str], kind: str = "word", extra: Iterable[str] = ()
) -> Vocabulary:
    """Collect tokens in first-appearance order; ``extra`` tokens go last."""
    if not corpus:
        raise DataError("cannot build a vocabulary from an empty corpus")
    seen = dict.fromkeys(RESERVED)
    for line in corpus:
        for tok in split_tokens(line, kind):
            seen.setdefault(tok)
    for tok in extra:
        seen.setdefault(tok)
    return Vocabulary(list(seen), kind)


@dataclass(frozen=True)
class PromptTemplate:
    src_name: str = "LangA"
    tgt_name: str = "LangB"
    include_source_text: bool = False

    def render(self, source_text: str = "") -> str:
        if self.include_source_text:
            return f"### [{self.src_name}]: {source_text} ### [{self.tgt_name}]: "
        return f"### [{self.src_name}]: ### [{self.tgt_name}]: "

    def marker_tokens(self, kind: str = "word") -> list[str]:
        """Tokens of the fixed template text; the target vocabulary must hold them."""
        return split_tokens(PromptTemplate(self.src_name, self.tgt_name).render(), kind)


def render_prompt(template: PromptTemplate, source_text: str) -> str:
    return template.render(source_text)
