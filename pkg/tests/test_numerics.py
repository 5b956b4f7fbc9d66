import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from relaydec import numerics as nx
from relaydec.errors import ContractError, ShapeError


def finite_vectors(n_min=2, n_max=32, bound=1e4):
    return st.integers(n_min, n_max).flatmap(
        lambda n: arrays(np.float64, n, elements=st.floats(-bound, bound, allow_nan=False, width=64))
    )


# -- matmul ------------------------------------------------------------------


def test_matmul_hand_product():
    a = torch.tensor([[1.0, 2.0], [3.0, 4.0]])
    b = torch.tensor([[5.0, 6.0], [7.0, 8.0]])
    assert torch.equal(nx.matmul(a, b), torch.tensor([[19.0, 22.0], [43.0, 50.0]]))


def test_matmul_identity_and_zero():
    a = torch.randn(3, 4, generator=torch.Generator().manual_seed(0))
    assert torch.equal(nx.matmul(a, torch.eye(4)), a)
    assert torch.equal(nx.matmul(torch.zeros(2, 3), a), torch.zeros(2, 4))


def test_matmul_shape_error_names_both_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(4, 5\)"):
        nx.matmul(torch.zeros(2, 3), torch.zeros(4, 5))


# -- softmax / log_softmax ------------------------------------------------------


@pytest.mark.parametrize("c", [0.0, -7.5, 1e4])
def test_softmax_constant_is_uniform(c):
    out = nx.softmax(torch.full((4,), c, dtype=torch.float64))
    assert torch.allclose(out, torch.full((4,), 0.25, dtype=torch.float64), atol=1e-12)


def test_softmax_analytic_pair():
    out = nx.softmax(torch.tensor([0.0, math.log(3.0)], dtype=torch.float64))
    assert torch.allclose(out, torch.tensor([0.25, 0.75], dtype=torch.float64), atol=1e-12)


def test_softmax_large_inputs_do_not_overflow():
    out = nx.softmax(torch.tensor([1000.0, 1001.0, -1e4]))
    assert torch.isfinite(out).all()
    assert abs(float(out.sum()) - 1.0) < 1e-6


def test_softmax_empty_axis():
    with pytest.raises(ShapeError):
        nx.softmax(torch.zeros(0))


@settings(max_examples=60, deadline=None)
@given(finite_vectors(), st.floats(-100, 100))
def test_softmax_sums_to_one_and_shift_invariant(v, c):
    t = torch.from_numpy(v)
    p = nx.softmax(t)
    assert torch.isfinite(p).all()
    assert abs(float(p.sum()) - 1.0) < 1e-6
    assert torch.allclose(nx.softmax(t + c), p, atol=1e-6)
    assert torch.allclose(nx.log_softmax(t).exp(), p, atol=1e-6)


# -- layer norm ------------------------------------------------------------------


def test_layer_norm_constant_vector_is_zero():
    out = nx.layer_norm(torch.full((5,), 3.25), torch.ones(5), torch.zeros(5))
    assert torch.equal(out, torch.zeros(5))


def test_layer_norm_already_normalized():
    out = nx.layer_norm(torch.tensor([1.0, -1.0], dtype=torch.float64), eps=0.0)
    assert torch.allclose(out, torch.tensor([1.0, -1.0], dtype=torch.float64), atol=1e-12)


def test_layer_norm_matches_scripted_statistics():
    rng = np.random.default_rng(3)
    v, gain, bias = rng.normal(size=(6, 11)), rng.normal(size=11), rng.normal(size=11)
    mean = v.sum(axis=1, keepdims=True) / 11
    var = ((v - mean) ** 2).sum(axis=1, keepdims=True) / 11
    expect = gain * (v - mean) / np.sqrt(var + 1e-5) + bias
    got = nx.layer_norm(torch.from_numpy(v), torch.from_numpy(gain), torch.from_numpy(bias))
    assert np.max(np.abs(got.numpy() - expect)) < 1e-6


def test_layer_norm_needs_two_features():
    with pytest.raises(ShapeError):
        nx.layer_norm(torch.zeros(3, 1))


# -- backward ---------------------------------------------------------------------


def test_backward_sum_of_squares():
    x = torch.tensor([1.0, -2.0, 0.5], requires_grad=True)
    nx.backward((x * x).sum())
    assert torch.equal(x.grad, 2 * x.detach())


def test_backward_constant_loss_gives_zero_grad():
    x = torch.tensor([1.0, 2.0], requires_grad=True)
    nx.backward((x * 0.0).sum() + 3.0)
    assert torch.equal(x.grad, torch.zeros(2))


def test_backward_rejects_non_scalar():
    x = torch.ones(3, requires_grad=True)
    with pytest.raises(ContractError):
        nx.backward(x * 2)


def _central_differences(f, x: torch.Tensor, h: float = 1e-4) -> torch.Tensor:
    grad = torch.zeros_like(x)
    flat, gflat = x.view(-1), grad.view(-1)
    for i in range(flat.numel()):
        old = float(flat[i])
        flat[i] = old + h
        up = float(f(x))
        flat[i] = old - h
        down = float(f(x))
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return grad


def _rel_err(a: torch.Tensor, b: torch.Tensor) -> float:
    return float(((a - b).abs() / torch.clamp(torch.maximum(a.abs(), b.abs()), min=1e-8)).max())


@pytest.mark.parametrize("seed", [0, 1, 2])
def test_matmul_softmax_cross_entropy_gradient_matches_fd(seed):
    g = torch.Generator().manual_seed(seed)
    w = torch.randn(6, 5, generator=g, dtype=torch.float64)
    x = torch.randn(4, 6, generator=g, dtype=torch.float64)
    y = torch.randint(5, (4,), generator=g)

    def loss(w_):
        logp = nx.log_softmax(nx.matmul(x, w_))
        return -logp[torch.arange(4), y].mean()

    wg = w.clone().requires_grad_(True)
    nx.backward(loss(wg))
    fd = _central_differences(loss, w.clone())
    assert torch.allclose(wg.grad, fd, rtol=1e-5, atol=1e-8), _rel_err(wg.grad, fd)


@settings(max_examples=25, deadline=None)
@given(st.integers(2, 32), st.integers(0, 10_000))
def test_layer_norm_gradient_matches_fd(n, seed):
    g = torch.Generator().manual_seed(seed)
    v = torch.randn(n, generator=g, dtype=torch.float64) * 3
    gain = torch.randn(n, generator=g, dtype=torch.float64)
    proj = torch.randn(n, generator=g, dtype=torch.float64)

    def f(v_):
        return (nx.layer_norm(v_, gain, None) * proj).sum()

    vg = v.clone().requires_grad_(True)
    nx.backward(f(vg))
    fd = _central_differences(f, v.clone())
    err = (vg.grad - fd).abs() - 1e-5 * torch.maximum(vg.grad.abs(), fd.abs())
    assert float(err.max()) <= 1e-8


# -- learning-rate schedule --------------------------------------------------------


@pytest.mark.parametrize(
    "step, expect",
    [(2000, 1e-5), (1000, 5e-6), (4000, 1e-5), (0, 0.0), (1, 5e-9)],
)
def test_lr_schedule_examples(step, expect):
    assert nx.lr_schedule(step, 1e-5, 2000) == pytest.approx(expect, rel=1e-12, abs=0)


def test_lr_schedule_no_warmup():
    assert nx.lr_schedule(0, 3e-4, 0) == 3e-4


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000), st.integers(1, 5000))
def test_lr_schedule_monotone_and_bounded(step, warmup):
    a, b = nx.lr_schedule(step, 1.0, warmup), nx.lr_schedule(step + 1, 1.0, warmup)
    assert 0.0 <= a <= b <= 1.0


def test_lr_schedule_rejects_negative():
    with pytest.raises(ContractError):
        nx.lr_schedule(-1, 1.0, 10)


# -- Adam --------------------------------------------------------------------------


def test_adam_zero_gradients_are_a_fixed_point():
    p = torch.nn.Parameter(torch.tensor([1.0, -2.0, 3.0]))
    before = p.detach().clone()
    opt = nx.Adam([p], nx.OptimizerState(base_lr=0.1, warmup_steps=0))
    for _ in range(3):
        p.grad = torch.zeros_like(p)
        nx.adam_step(opt)
    assert torch.equal(p.detach(), before)
    assert opt.state.step == 3


def test_adam_first_step_is_lr_times_sign():
    p = torch.nn.Parameter(torch.zeros(4, dtype=torch.float64))
    opt = nx.Adam([p], nx.OptimizerState(base_lr=0.01, warmup_steps=0))
    g = torch.tensor([3.0, -0.5, 200.0, -1e-2], dtype=torch.float64)
    p.grad = g.clone()
    nx.adam_step(opt)
    assert torch.allclose(p.detach(), -0.01 * torch.sign(g), atol=1e-8)


def _scripted_adam(p0, grad_fn, steps, lr, warmup, b1=0.9, b2=0.999, eps=1e-8):
    p = p0.copy()
    m, v = np.zeros_like(p), np.zeros_like(p)
    traj = []
    for t in range(1, steps + 1):
        g = grad_fn(p)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        m_hat, v_hat = m / (1 - b1**t), v / (1 - b2**t)
        rate = lr * min(t, warmup) / warmup if warmup else lr
        p = p - rate * m_hat / (np.sqrt(v_hat) + eps)
        traj.append(p.copy())
    return traj


def test_adam_matches_scripted_reference_on_quadratic_bowl():
    curv = np.array([1.0, 4.0, 0.25, 9.0])
    centre = np.array([0.5, -1.0, 2.0, 0.0])
    p0 = np.array([3.0, 3.0, -3.0, 1.0])
    expect = _scripted_adam(p0, lambda p: 2 * curv * (p - centre), 10, lr=0.1, warmup=4)

    p = torch.nn.Parameter(torch.from_numpy(p0.copy()))
    opt = nx.Adam([p], nx.OptimizerState(base_lr=0.1, warmup_steps=4))
    c, ctr = torch.from_numpy(curv), torch.from_numpy(centre)
    for t in range(10):
        nx.backward((c * (p - ctr) ** 2).sum())
        nx.adam_step(opt)
        assert np.max(np.abs(p.detach().numpy() - expect[t])) < 1e-6
        m, v = opt.moments(p)
        assert torch.isfinite(m).all() and torch.isfinite(v).all()


def test_adam_step_counter_and_lr():
    p = torch.nn.Parameter(torch.ones(2))
    opt = nx.Adam([p], nx.OptimizerState(base_lr=1e-5, warmup_steps=2000))
    p.grad = torch.ones(2)
    lr = opt.step()
    assert opt.state.step == 1 and lr == pytest.approx(1e-5 / 2000)


def test_adam_refuses_missing_gradient():
    p, q = torch.nn.Parameter(torch.ones(2)), torch.nn.Parameter(torch.ones(3))
    opt = nx.Adam([p, q])
    p.grad = torch.ones(2)
    with pytest.raises(ContractError, match="#1"):
        opt.step()


def test_adam_clip_norm_limits_update_direction():
    p = torch.nn.Parameter(torch.zeros(2, dtype=torch.float64))
    opt = nx.Adam([p], nx.OptimizerState(base_lr=1.0, warmup_steps=0, clip_norm=1.0))
    p.grad = torch.tensor([30.0, 40.0], dtype=torch.float64)
    opt.step()
    assert torch.allclose(p.grad, torch.tensor([0.6, 0.8], dtype=torch.float64))


def test_adam_skips_frozen_parameters():
    p, frozen = torch.nn.Parameter(torch.ones(2)), torch.nn.Parameter(torch.ones(2), requires_grad=False)
    opt = nx.Adam([p, frozen])
    assert opt.params == [p]


# -- seeds ----------------------------------------------------------------------------


def test_substreams_are_deterministic_and_distinct():
    assert nx.substream_seed(7, "init") == nx.substream_seed(7, "init")
    assert len({nx.substream_seed(7, n) for n in ("init", "shuffle", "sampling")}) == 3
    assert nx.substream_seed(7, "init") != nx.substream_seed(8, "init")
    a = torch.rand(3, generator=nx.generator(1, "x"))
    assert torch.equal(a, torch.rand(3, generator=nx.generator(1, "x")))
