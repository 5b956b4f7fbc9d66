"""``relaydec`` command line: data generation, pretraining, bridge training,
translation, evaluation and the ablation sweeps.

Every command writes the fully resolved ``config.json`` into its ``--out``
directory, so ``relaydec <cmd> --config <out>/config.json`` repeats the run.
Exit status is 0 on success, 2 for configuration or data errors and 1 for any
other failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import torch

from . import numerics as nx
from .bridge import Bridge
from .config import RunConfig, load_config
from .data import (
    ParallelCorpus,
    SyntheticLangSpec,
    gen_synthetic_pair,
    load_parallel,
    read_lines,
    subset,
    write_lines,
)
from .decoding import DecodeSettings, translate
from .errors import ConfigError, DataError
from .metrics import EvalReport, evaluate, score_corpus, write_report
from .relay import LoraSettings, RelayModel, load_relay, train_bridge
from .tokenization import PromptTemplate, build_vocab
from .transformer import (
    PackingSettings,
    TrainSettings,
    TransformerConfig,
    TransformerLM,
    corpus_cross_entropy,
    load_lm,
    pretrain_lm,
    save_lm,
)

log = logging.getLogger("relaydec")

AXES = ("finetune-grid", "data-size", "mapping-variant")
VARIANT_LABELS = {"fc": "FC", "ca": "CA", "caq": "CA-Q", None: "prompt-only"}


@dataclass
class Task:
    train: ParallelCorpus
    heldout: ParallelCorpus
    test: ParallelCorpus
    mono_a: list[str]
    mono_b: list[str]
    spec: SyntheticLangSpec | None = None


# -- helpers ----------------------------------------------------------------------


def write_tsv(path: Path, header: Sequence[str], rows: Sequence[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="") as f:
        w = csv.writer(f, delimiter="\t", lineterminator="\n")
        w.writerow(header)
        for row in rows:
            w.writerow(["" if row.get(k) is None else _fmt(row[k]) for k in header])


def _fmt(x) -> str:
    if isinstance(x, float):
        return f"{x:.6g}"
    return str(x)


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n", encoding="utf-8")


def template_of(cfg: RunConfig) -> PromptTemplate:
    p = cfg.prompt
    return PromptTemplate(p.src_name, p.tgt_name, p.include_source_text)


def decode_settings(cfg: RunConfig) -> DecodeSettings:
    d = cfg.decode
    return DecodeSettings(d.strategy, d.beam_width, d.max_new_tokens, d.length_penalty)


def load_task(cfg: RunConfig, n_train: int | None = None) -> Task:
    """Corpora from ``data.dir`` or, when it is null, the seeded synthetic pair."""
    d = cfg.data
    if d.dir is not None:
        root = Path(d.dir)
        if not root.is_dir():
            raise DataError(f"data directory not found: {root}")
        splits = {s: load_parallel(root / f"{s}.src", root / f"{s}.tgt", s) for s in ("train", "heldout", "test")}
        mono = {}
        for side in ("a", "b"):
            path = root / f"mono.{side}"
            mono[side] = read_lines(path) if path.is_file() else []
        return Task(splits["train"], splits["heldout"], splits["test"], mono["a"], mono["b"])
    s = d.synthetic
    spec = SyntheticLangSpec(s.n_symbols, s.reorder, s.min_len, s.max_len, cfg.seed, branching=s.branching)
    t = gen_synthetic_pair(spec, n_train or d.n_train, d.n_heldout, d.n_test, d.n_mono)
    return Task(t.train, t.heldout, t.test, t.mono_a, t.mono_b, spec)


def _head(corpus: ParallelCorpus, n: int) -> ParallelCorpus:
    return ParallelCorpus(corpus.pairs[:n], corpus.split, corpus.provenance)


# -- pretraining --------------------------------------------------------------------


def pretrain_side(cfg: RunConfig, side: str, sentences: list[str], out: Path) -> Path:
    """Train the side-``a`` or side-``b`` LM; writes ``lm_<side>.ckpt`` plus log and curve."""
    from .plots import plot_loss_curve

    if not sentences:
        raise DataError(f"no monolingual corpus for side {side}")
    mc = cfg.model_a if side == "a" else cfg.model_b
    tpl = template_of(cfg)
    vocab = build_vocab(sentences, cfg.data.tokenizer, extra=tpl.marker_tokens(cfg.data.tokenizer))
    model = TransformerLM(
        TransformerConfig(len(vocab), mc.d_model, mc.n_layers, mc.n_heads, mc.d_ff, mc.max_seq_len),
        seed=nx.substream_seed(cfg.seed, f"init_{side}"),
    )
    pc = cfg.pretrain
    settings = TrainSettings(
        steps=pc.steps, batch_size=pc.batch_size, lr=pc.lr, warmup=pc.warmup, clip_norm=pc.clip_norm,
        weight_decay=pc.weight_decay, seed=nx.substream_seed(cfg.seed, f"pretrain_{side}"), log_every=pc.log_every,
    )
    packing = None
    if pc.packing is not None:
        k = pc.packing
        headers = (f"### [{tpl.src_name}]:", f"### [{tpl.tgt_name}]:")
        packing = PackingSettings(k.max_sentences, k.repeat_prob, k.header_prob, k.n_documents, headers)
    result = pretrain_lm(
        model, vocab, sentences, settings,
        progress=lambda step, lr, loss: log.info("pretrain %s step %d lr %.3g loss %.4f", side, step, lr, loss),
        packing=packing,
    )
    ce = corpus_cross_entropy(model, vocab, sentences[:1000])
    ckpt = out / f"lm_{side}.ckpt"
    save_lm(ckpt, model, vocab)
    rows = [{"step": i, "lr": lr, "loss": l} for i, (lr, l) in enumerate(zip(result.lrs, result.losses), 1)]
    write_tsv(out / f"pretrain_{side}.tsv", ["step", "lr", "loss"], rows)
    write_json(out / f"pretrain_{side}.json", {
        "final_loss": result.losses[-1], "sentence_cross_entropy": ce,
        "parameters": model.cfg.parameter_count(), "vocab_size": len(vocab),
    })
    plot_loss_curve(result.losses, out / f"pretrain_{side}.png", f"pretraining, side {side}", "cross-entropy (nats)")
    log.info("side %s: sentence cross-entropy %.4f, %.1fs", side, ce, result.seconds)
    return ckpt


def cmd_pretrain(cfg: RunConfig, out: Path, args) -> int:
    sides = ("a", "b") if args.side == "both" else (args.side,)
    corpus = args.corpus or cfg.pretrain.corpus
    if corpus is not None and len(sides) != 1:
        raise ConfigError("an explicit pretraining corpus needs --side a or --side b")
    task = None
    for side in sides:
        if corpus is not None:
            sentences = read_lines(corpus)
        else:
            task = task or load_task(cfg)
            sentences = task.mono_a if side == "a" else task.mono_b
        pretrain_side(cfg, side, sentences, out)
    return 0


def ensure_lms(cfg: RunConfig, out: Path, task: Task) -> tuple[str, str]:
    """Checkpoint paths for both LMs, pretraining whichever the config leaves unset."""
    paths = []
    for side, given in (("a", cfg.checkpoint_a), ("b", cfg.checkpoint_b)):
        if given is not None:
            if not Path(given).is_file():
                raise DataError(f"checkpoint not found: {given}")
            paths.append(given)
        else:
            log.info("no checkpoint_%s given; pretraining it into %s", side, out)
            paths.append(str(pretrain_side(cfg, side, task.mono_a if side == "a" else task.mono_b, out)))
    return paths[0], paths[1]


# -- bridge training -----------------------------------------------------------------


def build_relay(cfg: RunConfig, ckpt_a: str, ckpt_b: str, variant: str | None, fa: bool, fb: bool) -> RelayModel:
    ma, va, _ = load_lm(ckpt_a)
    mb, vb, _ = load_lm(ckpt_b)
    bridge = None
    if variant is not None:
        b = cfg.bridge
        bridge = Bridge(variant, ma.d_model, mb.d_model, b.n_heads, b.n_queries, seed=nx.substream_seed(cfg.seed, "bridge"))
    lo = cfg.lora
    return RelayModel(
        ma, va, bridge, mb, vb, template_of(cfg), fa, fb,
        LoraSettings(lo.r, lo.alpha, tuple(lo.targets)), seed=cfg.seed,
    )


def train_and_evaluate(
    cfg: RunConfig,
    relay: RelayModel,
    train: ParallelCorpus,
    heldout: ParallelCorpus,
    out: Path,
    steps: int | None = None,
) -> tuple[EvalReport, list[dict]]:
    """Train (when anything is trainable), save, and score the held-out pairs."""
    from .plots import plot_loss_curve

    out.mkdir(parents=True, exist_ok=True)
    tc = cfg.train
    dec = decode_settings(cfg)
    log_rows: list[dict] = []
    if relay.trainable_parameters():
        settings = TrainSettings(
            steps=steps or tc.steps, batch_size=tc.batch_size, lr=tc.lr, warmup=tc.warmup, clip_norm=tc.clip_norm,
            seed=nx.substream_seed(cfg.seed, "train"), log_every=tc.log_every, eval_every=tc.eval_every,
        )
        result = train_bridge(
            relay, train, settings, heldout if tc.eval_every else None,
            (lambda r, c: evaluate(r, c, dec).bleu) if tc.eval_every else None,
            progress=lambda row: log.info(
                "step %d lr %.3g loss %.4f%s", row["step"], row["lr"], row["train_loss"],
                "" if row["heldout_bleu"] is None else f" heldout BLEU {row['heldout_bleu']:.2f}",
            ),
        )
        log_rows = result.log
        plot_loss_curve(result.losses, out / "train_loss.png", "relay training", "batch loss L")
    else:
        log.info("nothing to train (prompt-only baseline with frozen models)")
    report = evaluate(relay, heldout, dec, out, "heldout")
    if log_rows:
        log_rows[-1]["heldout_bleu"] = report.bleu
    write_tsv(out / "train_log.tsv", ["step", "lr", "train_loss", "heldout_bleu"], log_rows)
    relay.save(out / "relay.ckpt")
    log.info("held-out BLEU %.2f chrF %.2f", report.bleu, report.chrf)
    return report, log_rows


def cmd_train_bridge(cfg: RunConfig, out: Path, args) -> int:
    task = load_task(cfg)
    ckpt_a, ckpt_b = ensure_lms(cfg, out, task)
    relay = build_relay(cfg, ckpt_a, ckpt_b, _variant(cfg), cfg.finetune_a, cfg.finetune_b)
    train_and_evaluate(cfg, relay, task.train, _head(task.heldout, cfg.train.eval_size), out)
    return 0


def _variant(cfg: RunConfig) -> str | None:
    return None if cfg.bridge.variant == "none" else cfg.bridge.variant


# -- translation and evaluation ----------------------------------------------------------


def _relay_path(cfg: RunConfig, args) -> str:
    path = args.relay or cfg.relay
    if path is None:
        raise ConfigError("no relay checkpoint: pass --relay or set 'relay' in the config")
    if not Path(path).is_file():
        raise DataError(f"relay checkpoint not found: {path}")
    return path


def cmd_translate(cfg: RunConfig, out: Path, args) -> int:
    relay = load_relay(_relay_path(cfg, args))
    sources = read_lines(args.input)
    hyps = translate(relay, sources, decode_settings(cfg))
    target = Path(args.output) if args.output else out / "translations.txt"
    write_lines(target, hyps)
    log.info("translated %d lines into %s", len(hyps), target)
    return 0


def cmd_evaluate(cfg: RunConfig, out: Path, args) -> int:
    refs = read_lines(args.ref)
    if args.hyp is not None:
        report = score_corpus(read_lines(args.hyp, allow_empty=True), refs)
        write_report(report, out / "report.json")
    else:
        if args.src is None:
            raise ConfigError("evaluate needs --hyp, or --src with a relay checkpoint")
        sources = read_lines(args.src)
        if len(sources) != len(refs):
            raise DataError(f"line-count mismatch: {args.src} has {len(sources)} lines, {args.ref} has {len(refs)}")
        relay = load_relay(_relay_path(cfg, args))
        corpus = ParallelCorpus(list(zip(sources, refs)), "eval", args.src)
        report = evaluate(relay, corpus, decode_settings(cfg), out, "report")
    print(report.to_json(), end="")
    return 0


def cmd_gen_data(cfg: RunConfig, out: Path, args) -> int:
    if cfg.data.dir is not None:
        raise ConfigError("gen-data generates synthetic data; data.dir must be null")
    task = load_task(cfg)
    from .data import SyntheticTask

    SyntheticTask(task.spec, task.train, task.heldout, task.test, task.mono_a, task.mono_b).save(out)
    log.info("wrote synthetic corpora to %s", out)
    return 0


# -- ablations ----------------------------------------------------------------------


def ablation_rows(cfg: RunConfig, axis: str) -> list[dict]:
    """The settings of one sweep; each row differs from the base config only on ``axis``."""
    base = {"variant": _variant(cfg), "finetune_a": cfg.finetune_a, "finetune_b": cfg.finetune_b, "size": None}
    if axis == "finetune-grid":
        grid = [(False, False), (True, False), (False, True), (True, True)]
        return [
            dict(base, finetune_a=fa, finetune_b=fb,
                 setting=f"A {'finetune' if fa else 'frozen'} / B {'finetune' if fb else 'frozen'}")
            for fa, fb in grid
        ]
    if axis == "data-size":
        return [dict(base, size=n, setting=n) for n in sorted(cfg.ablate.sizes)]
    if axis == "mapping-variant":
        return [dict(base, variant=v, setting=VARIANT_LABELS[v]) for v in cfg.ablate.variants]
    raise ConfigError(f"unknown ablation axis {axis!r}; choose from {', '.join(AXES)}")


def cmd_ablate(cfg: RunConfig, out: Path, args) -> int:
    from .plots import plot_ablation

    axis = args.axis
    rows = ablation_rows(cfg, axis)
    sizes = [r["size"] for r in rows if r["size"] is not None]
    task = load_task(cfg, max([cfg.data.n_train, *sizes]))
    if sizes and max(sizes) > len(task.train):
        raise DataError(f"data-size row {max(sizes)} exceeds the {len(task.train)} training pairs")
    ckpt_a, ckpt_b = ensure_lms(cfg, out, task)
    heldout = _head(task.heldout, cfg.train.eval_size)
    results = []
    for i, row in enumerate(rows, 1):
        log.info("ablation %s row %d/%d: %s", axis, i, len(rows), row["setting"])
        train = task.train if row["size"] is None else subset(task.train, row["size"], cfg.seed)
        steps = None
        if row["size"] is not None and cfg.ablate.epochs is not None:
            steps = max(1, math.ceil(cfg.ablate.epochs * row["size"] / cfg.train.batch_size))
        relay = build_relay(cfg, ckpt_a, ckpt_b, row["variant"], row["finetune_a"], row["finetune_b"])
        report, log_rows = train_and_evaluate(cfg, relay, train, heldout, out / f"row{i}", steps)
        results.append({
            "setting": row["setting"],
            "bridge": VARIANT_LABELS[row["variant"]],
            "finetune_a": row["finetune_a"],
            "finetune_b": row["finetune_b"],
            "train_pairs": len(train),
            "steps": len(log_rows),
            "final_loss": log_rows[-1]["train_loss"] if log_rows else None,
            "bleu": report.bleu,
            "chrf": report.chrf,
        })
    header = ["setting", "bridge", "finetune_a", "finetune_b", "train_pairs", "steps", "final_loss", "bleu", "chrf"]
    write_tsv(out / "ablation.tsv", header, results)
    plot_ablation(results, out / "ablation.png", axis)
    for r in results:
        print(f"{r['setting']}\tBLEU {r['bleu']:.2f}\tchrF {r['chrf']:.2f}")
    return 0


# -- entry point -------------------------------------------------------------------


COMMANDS = {
    "gen-data": cmd_gen_data,
    "pretrain": cmd_pretrain,
    "train-bridge": cmd_train_bridge,
    "translate": cmd_translate,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (unknown keys are rejected)")
    common.add_argument("--seed", type=int, help="global seed; overrides the config")
    common.add_argument("--out", default="runs/latest", help="output directory (default: %(default)s)")
    common.add_argument("--bridge", choices=["fc", "ca", "caq", "none"], help="mapping layer; 'none' is the prompt-only baseline")
    common.add_argument("--finetune-a", action="store_true", help="LoRA-finetune the source model")
    common.add_argument("--finetune-b", action="store_true", help="LoRA-finetune the target model")
    common.add_argument("--beam", type=int, help="beam width (switches decoding to beam search)")
    common.add_argument("-q", "--quiet", action="store_true", help="only warnings and errors on stderr")

    parser = argparse.ArgumentParser(prog="relaydec", description="Relay decoding between two small language models.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen-data", parents=[common], help="write the synthetic language pair")
    p = sub.add_parser("pretrain", parents=[common], help="pretrain monolingual LMs")
    p.add_argument("--side", choices=["a", "b", "both"], default="both")
    p.add_argument("--corpus", help="monolingual corpus file (one sentence per line)")
    sub.add_parser("train-bridge", parents=[common], help="train the bridge (and LoRA adapters)")
    p = sub.add_parser("translate", parents=[common], help="translate a file line by line")
    p.add_argument("input")
    p.add_argument("--relay", help="relay checkpoint")
    p.add_argument("--output", help="output file (default: <out>/translations.txt)")
    p = sub.add_parser("evaluate", parents=[common], help="BLEU/chrF of hypotheses or of a relay checkpoint")
    p.add_argument("--ref", required=True)
    p.add_argument("--hyp")
    p.add_argument("--src")
    p.add_argument("--relay")
    p = sub.add_parser("ablate", parents=[common], help="run one ablation sweep")
    p.add_argument("--axis", required=True, help=f"one of: {', '.join(AXES)}")
    return parser


def resolve_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.bridge is not None:
        cfg.bridge.variant = args.bridge
    if args.finetune_a:
        cfg.finetune_a = True
    if args.finetune_b:
        cfg.finetune_b = True
    if args.beam is not None:
        cfg.decode.strategy, cfg.decode.beam_width = "beam", args.beam
    if cfg.bridge.variant not in ("fc", "ca", "caq", "none"):
        raise ConfigError(f"unknown bridge variant {cfg.bridge.variant!r}")
    decode_settings(cfg)  # validates
    return cfg


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO,
        format="%(levelname)s %(message)s", stream=sys.stderr, force=True,
    )
    torch.set_num_threads(1)
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / "config.json")
        return COMMANDS[args.command](cfg, out, args)
    except (ConfigError, DataError) as e:
        log.error("%s", e)
        return 2
    except Exception as e:  # noqa: BLE001 - map everything else to status 1
        log.error("%s: %s", type(e).__name__, e)
        return 1


if __name__ == "__main__":
    sys.exit(main())
