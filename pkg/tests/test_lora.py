import numpy as np
import pytest
import torch

from relaydec import numerics as nx
from relaydec.errors import ConfigError, ContractError
from relaydec.lora import LoraLinear, adapters, apply_lora, lora_parameters, merge_lora
from relaydec.transformer import TransformerConfig, TransformerLM


def model(seed=0):
    return TransformerLM(TransformerConfig(20, 16, 2, 4, 32, 16), seed=seed)


def test_zero_init_is_bit_exact():
    m = model()
    ids = torch.tensor([[1, 5, 9, 12, 2]])
    before = m.forward_logits(ids)
    apply_lora(m, seed=3)
    assert torch.equal(m.forward_logits(ids), before)


def test_trainable_count():
    m = apply_lora(model(), r=8)
    n = sum(p.numel() for p in m.parameters() if p.requires_grad)
    assert n == 2 * 2 * 8 * (16 + 16)
    assert n == nx.count_parameters(lora_parameters(m))
    assert set(p.rsplit(".", 1)[-1] for p in adapters(m)) == {"q_proj", "v_proj"}


def test_scripted_forward_on_4x4():
    rng = np.random.default_rng(1)
    base = torch.nn.Linear(4, 4).double()
    lo = LoraLinear(base, r=2, alpha=3.0, g=torch.Generator().manual_seed(0))
    with torch.no_grad():
        lo.lora_A.copy_(torch.from_numpy(rng.normal(size=(2, 4))))
        lo.lora_B.copy_(torch.from_numpy(rng.normal(size=(4, 2))))
    W, b = base.weight.detach().numpy(), base.bias.detach().numpy()
    A, B = lo.lora_A.detach().numpy(), lo.lora_B.detach().numpy()
    x = rng.normal(size=(5, 4))
    expect = x @ W.T + b + (3.0 / 2) * (x @ A.T @ B.T)
    assert np.max(np.abs(lo(torch.from_numpy(x)).detach().numpy() - expect)) < 1e-6
    merged = W + 1.5 * B @ A
    assert np.max(np.abs(lo.merged_weight().detach().numpy() - merged)) < 1e-6


def test_merge_with_zero_b_keeps_weights():
    m = model()
    w = m.blocks[0].attn.q_proj.weight.detach().clone()
    merge_lora(apply_lora(m))
    assert torch.equal(m.blocks[0].attn.q_proj.weight, w)
    assert not adapters(m)


def test_merge_equivalence_on_random_inputs():
    m = apply_lora(model(seed=2), seed=4)
    with torch.no_grad():
        for p in lora_parameters(m):
            p.normal_(0, 0.3)
    x = torch.randn(100, 8, 16, generator=torch.Generator().manual_seed(0))
    unmerged = m.run(x)
    merge_lora(m)
    assert torch.allclose(m.run(x), unmerged, atol=1e-5)


def test_base_weights_bit_identical_after_adapter_training():
    m = model(seed=5)
    frozen = {k: v.clone() for k, v in m.state_dict().items()}
    apply_lora(m, seed=1)
    opt = nx.Adam(lora_parameters(m), nx.OptimizerState(base_lr=1e-2, warmup_steps=0))
    ids = torch.randint(4, 20, (4, 10), generator=torch.Generator().manual_seed(2))
    for _ in range(5):
        nx.backward(m.forward_logits(ids).logsumexp(-1).mean())
        nx.adam_step(opt)
    after = {k.replace(".base.", "."): v for k, v in m.state_dict().items() if "lora_" not in k}
    assert after.keys() == frozen.keys()
    assert all(torch.equal(after[k], frozen[k]) for k in frozen)
    assert any(p.abs().sum() > 0 for p in lora_parameters(m) if p.shape[1] == 8)


def test_errors():
    with pytest.raises(ConfigError):
        apply_lora(model(), targets=("w_proj",))
    with pytest.raises(ConfigError):
        apply_lora(model(), r=17)
    with pytest.raises(ContractError):
        merge_lora(model())
