import pytest
import torch

from relaydec.bridge import Bridge
from relaydec.relay import RelayModel
from relaydec.tokenization import PromptTemplate, build_vocab
from relaydec.transformer import TransformerConfig, TransformerLM

torch.set_num_threads(1)

SOURCES = ["a1 a2 a3", "a3 a1", "a2 a2 a4 a1", "a4"]
TARGETS = ["b2 b1 b3", "b1 b3", "b2 b2 b1 b4", "b4"]


def tiny_vocabs():
    tpl = PromptTemplate()
    va = build_vocab(SOURCES, extra=tpl.marker_tokens())
    vb = build_vocab(TARGETS, extra=tpl.marker_tokens())
    return va, vb


def tiny_relay(variant="fc", d=16, layers=1, seed=0, finetune_a=False, finetune_b=False, dtype=torch.float32, template=None):
    va, vb = tiny_vocabs()
    ma = TransformerLM(TransformerConfig(len(va), d, layers, 2, 2 * d, 48), seed=seed + 1)
    mb = TransformerLM(TransformerConfig(len(vb), d, layers, 2, 2 * d, 48), seed=seed + 2)
    bridge = None if variant is None else Bridge(variant, d, d, n_heads=2, n_queries=5, seed=seed + 3)
    relay = RelayModel(ma, va, bridge, mb, vb, template, finetune_a, finetune_b, seed=seed)
    return relay.to(dtype)


@pytest.fixture
def relay():
    return tiny_relay()


@pytest.fixture
def pairs():
    return list(zip(SOURCES, TARGETS))


# -- desk-scale runs shared by the acceptance suite and the slow tests -----------------

ACCEPTANCE_LINES: list[str] = []


def record_criterion(number: int, title: str, ok: bool, detail: str) -> None:
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split("criterion")[1].split(":")[0])):
            terminalreporter.write_line(line)


def run_cli(*argv: str) -> int:
    from relaydec.cli import main

    return main([*argv, "-q"])


@pytest.fixture(scope="session")
def desk(tmp_path_factory):
    """Both monolingual LMs pretrained with the default run config (seed 0)."""
    import json
    import time

    root = tmp_path_factory.mktemp("desk")
    start = time.perf_counter()
    assert run_cli("pretrain", "--out", str(root / "lms")) == 0
    seconds = time.perf_counter() - start
    cfg = json.loads((root / "lms" / "config.json").read_text())
    cfg["checkpoint_a"] = str(root / "lms" / "lm_a.ckpt")
    cfg["checkpoint_b"] = str(root / "lms" / "lm_b.ckpt")
    (root / "run.json").write_text(json.dumps(cfg))
    return {"root": root, "config": str(root / "run.json"), "pretrain_seconds": seconds}


@pytest.fixture(scope="session")
def lora_b_run(desk):
    """FC bridge + LoRA on the target model, trained on the 5,000 default pairs."""
    import time

    out = desk["root"] / "lora_b"
    start = time.perf_counter()
    assert run_cli("train-bridge", "--config", desk["config"], "--finetune-b", "--out", str(out)) == 0
    return {"out": out, "seconds": time.perf_counter() - start}
