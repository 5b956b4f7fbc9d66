"""Parallel corpora: file I/O, nested subsets and the synthetic substitution task.

The synthetic task renders latent symbol ``i`` as ``a<i>`` in the source
language and ``b<perm[i]>`` in the target language, optionally swapping
adjacent pairs on the target side. Its exact oracle makes translation quality
checkable without references from people.
"""

from __future__ import annotations

import json
import random
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Sequence

from .errors import ConfigError, DataError
from .numerics import substream_seed

REORDER_RULES = ("none", "swap-adjacent-pairs")

Pair = tuple[str, str]


@dataclass
class ParallelCorpus:
    pairs: list[Pair]
    split: str = "train"
    provenance: str = ""

    def __post_init__(self):
        for i, (s, t) in enumerate(self.pairs, 1):
            if not s.strip() or not t.strip():
                raise DataError(f"{self.split} pair {i} has an empty side")

    def __len__(self) -> int:
        return len(self.pairs)

    @property
    def sources(self) -> list[str]:
        return [s for s, _ in self.pairs]

    @property
    def targets(self) -> list[str]:
        return [t for _, t in self.pairs]


def _read_lines(path: Path) -> list[str]:
    raw = path.read_bytes()
    try:
        text = raw.decode("utf-8")
    except UnicodeDecodeError as e:
        raise DataError(f"{path}: invalid UTF-8 at byte offset {e.start}") from None
    lines = text.split("\n")
    if lines and lines[-1] == "":
        lines.pop()
    return [ln.rstrip() for ln in lines]


def read_lines(path: str | Path, allow_empty: bool = False) -> list[str]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"no such file: {path}")
    lines = _read_lines(path)
    for i, ln in enumerate(lines, 1):
        if not ln and not allow_empty:
            raise DataError(f"{path}: line {i} is empty")
    return lines


def write_lines(path: str | Path, lines: Sequence[str]) -> None:
    Path(path).write_text("".join(ln + "\n" for ln in lines), encoding="utf-8", newline="\n")


def load_parallel(src_path: str | Path, tgt_path: str | Path, split: str = "train") -> ParallelCorpus:
    src, tgt = read_lines(src_path), read_lines(tgt_path)
    if len(src) != len(tgt):
        raise DataError(
            f"line-count mismatch: {src_path} has {len(src)} lines, {tgt_path} has {len(tgt)}"
        )
    return ParallelCorpus(list(zip(src, tgt)), split, provenance=f"{src_path}|{tgt_path}")


def save_parallel(corpus: ParallelCorpus, src_path: str | Path, tgt_path: str | Path) -> None:
    write_lines(src_path, corpus.sources)
    write_lines(tgt_path, corpus.targets)


def subset(corpus: ParallelCorpus, n: int, seed: int) -> ParallelCorpus:
    """Seeded sample without replacement; larger ``n`` under one seed gives a superset."""
    if not 1 <= n <= len(corpus):
        raise DataError(f"subset size {n} outside 1..{len(corpus)}")
    order = list(range(len(corpus)))
    random.Random(substream_seed(seed, "subset")).shuffle(order)
    keep = sorted(order[:n])
    return ParallelCorpus(
        [corpus.pairs[i] for i in keep], corpus.split, f"{corpus.provenance}[subset {n} seed {seed}]"
    )


@dataclass
class SyntheticLangSpec:
    n_symbols: int = 50
    reorder: str = "swap-adjacent-pairs"
    min_len: int = 3
    max_len: int = 12
    seed: int = 0
    permutation: list[int] | None = None
    # Latent successors per symbol; 0 samples every position uniformly.
    branching: int = 0
    successors: list[list[int]] | None = None

    def __post_init__(self):
        if self.n_symbols < 2:
            raise ConfigError(f"n_symbols must be >= 2, got {self.n_symbols}")
        if self.reorder not in REORDER_RULES:
            raise ConfigError(f"reorder must be one of {REORDER_RULES}, got {self.reorder!r}")
        if not 1 <= self.min_len <= self.max_len:
            raise ConfigError(f"length range [{self.min_len}, {self.max_len}] is invalid")
        if self.permutation is None:
            perm = list(range(self.n_symbols))
            random.Random(substream_seed(self.seed, "permutation")).shuffle(perm)
            self.permutation = perm
        if sorted(self.permutation) != list(range(self.n_symbols)):
            raise ConfigError("permutation is not a bijection on 0..n_symbols-1")
        if not 0 <= self.branching <= self.n_symbols:
            raise ConfigError(f"branching must lie in 0..{self.n_symbols}, got {self.branching}")
        if self.branching and self.successors is None:
            rng = random.Random(substream_seed(self.seed, "successors"))
            self.successors = [sorted(rng.sample(range(self.n_symbols), self.branching)) for _ in range(self.n_symbols)]

    def sample_latent(self, rng: random.Random) -> tuple[int, ...]:
        k = rng.randint(self.min_len, self.max_len)
        if not self.branching:
            return tuple(rng.randrange(self.n_symbols) for _ in range(k))
        out = [rng.randrange(self.n_symbols)]
        while len(out) < k:
            out.append(rng.choice(self.successors[out[-1]]))
        return tuple(out)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))

    def render_source(self, latent: Sequence[int]) -> str:
        return " ".join(f"a{i}" for i in latent)

    def target_latent(self, latent: Sequence[int]) -> list[int]:
        out = [self.permutation[i] for i in latent]
        if self.reorder == "swap-adjacent-pairs":
            for j in range(0, len(out) - 1, 2):
                out[j], out[j + 1] = out[j + 1], out[j]
        return out

    def render_target(self, latent: Sequence[int]) -> str:
        return " ".join(f"b{i}" for i in self.target_latent(latent))

    def parse_source(self, text: str) -> list[int]:
        try:
            latent = [int(tok[1:]) for tok in text.split() if tok[0] == "a"]
        except (ValueError, IndexError):
            raise DataError(f"not a synthetic source sentence: {text!r}") from None
        if len(latent) != len(text.split()) or any(not 0 <= i < self.n_symbols for i in latent):
            raise DataError(f"not a synthetic source sentence: {text!r}")
        return latent

    def oracle(self, source: str) -> str:
        return self.render_target(self.parse_source(source))


@dataclass
class SyntheticTask:
    spec: SyntheticLangSpec
    train: ParallelCorpus
    heldout: ParallelCorpus
    test: ParallelCorpus
    mono_a: list[str]
    mono_b: list[str]
    latents: dict[str, list[tuple[int, ...]]] = field(default_factory=dict, repr=False)

    @property
    def oracle(self) -> Callable[[str], str]:
        return self.spec.oracle

    def save(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for c in (self.train, self.heldout, self.test):
            save_parallel(c, out / f"{c.split}.src", out / f"{c.split}.tgt")
        write_lines(out / "mono.a", self.mono_a)
        write_lines(out / "mono.b", self.mono_b)
        (out / "spec.json").write_text(self.spec.to_json() + "\n", encoding="utf-8")


def gen_synthetic_pair(
    spec: SyntheticLangSpec, n_train: int, n_heldout: int, n_test: int, n_mono: int = 0
) -> SyntheticTask:
    """Sample distinct latent sentences for every split and both monolingual corpora.

    All draws are distinct, so monolingual and parallel data never share a
    latent sentence. ``n_mono`` defaults to ``n_train``.
    """
    n_mono = n_mono or n_train
    for name, n in (("n_train", n_train), ("n_heldout", n_heldout), ("n_test", n_test), ("n_mono", n_mono)):
        if n < 1:
            raise ConfigError(f"{name} must be >= 1, got {n}")
    rng = random.Random(substream_seed(spec.seed, "sampling"))
    seen: set[tuple[int, ...]] = set()
    capacity = sum(spec.n_symbols ** k for k in range(spec.min_len, spec.max_len + 1))
    needed = n_train + n_heldout + n_test + 2 * n_mono
    if needed > capacity // 2:
        raise ConfigError(f"{needed} distinct sentences requested but the language has only {capacity}")

    def draw(n: int) -> list[tuple[int, ...]]:
        out = []
        while len(out) < n:
            s = spec.sample_latent(rng)
            if s not in seen:
                seen.add(s)
                out.append(s)
        return out

    latents = {name: draw(n) for name, n in (
        ("train", n_train), ("heldout", n_heldout), ("test", n_test), ("mono_a", n_mono), ("mono_b", n_mono)
    )}

    def corpus(split: str) -> ParallelCorpus:
        pairs = [(spec.render_source(s), spec.render_target(s)) for s in latents[split]]
        return ParallelCorpus(pairs, split, provenance=f"synthetic seed={spec.seed}")

    return SyntheticTask(
        spec,
        corpus("train"),
        corpus("heldout"),
        corpus("test"),
        [spec.render_source(s) for s in latents["mono_a"]],
        [spec.render_target(s) for s in latents["mono_b"]],
        latents,
    )


def load_synthetic_spec(path: str | Path) -> SyntheticLangSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        return SyntheticLangSpec(**raw)
    except (OSError, json.JSONDecodeError, TypeError) as e:
        raise DataError(f"cannot read synthetic spec {path}: {e}") from None
