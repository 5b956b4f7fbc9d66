"""Corpus BLEU (multi-bleu semantics) and chrF, plus relay evaluation."""

from __future__ import annotations

import json
import math
from collections import Counter
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Sequence

from .errors import DataError

BLEU_ORDER = 4
CHRF_ORDER = 6
CHRF_BETA = 2.0


@dataclass
class EvalReport:
    bleu: float
    chrf: float
    n_sentences: int
    precisions: tuple[float, ...]
    bp: float

    def to_dict(self) -> dict:
        d = {"bleu": self.bleu, "chrf": self.chrf, "n_sentences": self.n_sentences, "bp": self.bp}
        for i, p in enumerate(self.precisions, 1):
            d[f"p{i}"] = p
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n"


@dataclass
class BleuResult:
    bleu: float
    precisions: tuple[float, ...]
    bp: float
    hyp_len: int
    ref_len: int


def _tokens(x) -> list[str]:
    return x.split() if isinstance(x, str) else list(x)


def _check(hyps: Sequence, refs: Sequence) -> None:
    if len(hyps) != len(refs):
        raise DataError(f"{len(hyps)} hypotheses but {len(refs)} references")
    if not hyps:
        raise DataError("cannot score an empty corpus")


def _ngrams(seq, n: int) -> Counter:
    return Counter(tuple(seq[i:i + n]) for i in range(len(seq) - n + 1))


def bleu(hypotheses: Sequence, references: Sequence, max_order: int = BLEU_ORDER) -> BleuResult:
    """Corpus BLEU: clipped n-gram counts summed over the corpus, no smoothing.

    Strings are whitespace-split; token lists are used as given. Any zero
    precision makes the score 0.
    """
    _check(hypotheses, references)
    matches = [0] * max_order
    totals = [0] * max_order
    c = r = 0
    for h, ref in zip(hypotheses, references):
        h, ref = _tokens(h), _tokens(ref)
        c += len(h)
        r += len(ref)
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(ref, n)
            matches[n - 1] += sum(min(k, rc[g]) for g, k in hc.items())
            totals[n - 1] += max(len(h) - n + 1, 0)
    precisions = tuple(m / t if t else 0.0 for m, t in zip(matches, totals))
    bp = 1.0 if c > r else (math.exp(1 - r / c) if c else 0.0)
    if min(precisions) == 0.0:
        score = 0.0
    else:
        score = 100.0 * bp * math.exp(sum(math.log(p) for p in precisions) / max_order)
    return BleuResult(min(score, 100.0), precisions, bp, c, r)


def chrf(hypotheses: Sequence[str], references: Sequence[str], max_order: int = CHRF_ORDER, beta: float = CHRF_BETA) -> float:
    """Character n-gram F-beta averaged over orders 1..max_order.

    Whitespace is removed first. Orders with no n-grams on either side of the
    whole corpus are left out of the average.
    """
    _check(hypotheses, references)
    b2 = beta * beta
    stats = [[0, 0, 0] for _ in range(max_order)]
    for h, ref in zip(hypotheses, references):
        h, ref = "".join(h.split()), "".join(ref.split())
        for n in range(1, max_order + 1):
            hc, rc = _ngrams(h, n), _ngrams(ref, n)
            s = stats[n - 1]
            s[0] += sum((hc & rc).values())
            s[1] += sum(hc.values())
            s[2] += sum(rc.values())
    scores = []
    for match, hyp_total, ref_total in stats:
        if not hyp_total and not ref_total:
            continue
        if not match:
            scores.append(0.0)
            continue
        prec, rec = match / hyp_total, match / ref_total
        scores.append((1 + b2) * prec * rec / (b2 * prec + rec))
    return 100.0 * sum(scores) / len(scores) if scores else 0.0


def score_corpus(hypotheses: Sequence[str], references: Sequence[str]) -> EvalReport:
    b = bleu(hypotheses, references)
    return EvalReport(b.bleu, chrf(hypotheses, references), len(hypotheses), b.precisions, b.bp)


def write_report(report: EvalReport, path: str | Path) -> None:
    Path(path).write_text(report.to_json(), encoding="utf-8")


def evaluate(relay, corpus, settings=None, out_dir: str | Path | None = None, name: str = "eval") -> EvalReport:
    """Translate every source, score against the references, optionally write files."""
    from .data import write_lines
    from .decoding import translate

    hyps = translate(relay, corpus.sources, settings)
    report = score_corpus(hyps, corpus.targets)
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        write_lines(out / f"{name}.hyp", hyps)
        write_report(report, out / f"{name}.json")
    return report
