import numpy as np
import pytest

from conftest import finite_diff_check, rel_err

from dpsumm.autodiff import PerExampleCaptures, Tensor, backward, parameter
from dpsumm.dp_optim import (init_optim_state, dp_adam_step,
                             per_example_norms_ghost, per_example_norms_naive)
from dpsumm.lora import (AdapterConfigError, lora_forward, make_adapter,
                         trainable_fraction)
from dpsumm.model import CausalLM, ModelConfig


def frozen_base(rng, d, p):
    w = parameter(rng.standard_normal((d, p)), "base.w")
    w.requires_grad = False
    return w


def test_fresh_adapter_equals_base(np_rng):
    w = frozen_base(np_rng, 6, 5)
    adapter = make_adapter("base.w", 6, 5, rank=3, seed=1)
    x = Tensor(np_rng.standard_normal((2, 4, 6)))
    base = x.data @ w.data
    out = lora_forward(x, w, adapter)
    assert np.max(np.abs(out.data - base)) < 1e-15


def test_rank_validation():
    with pytest.raises(AdapterConfigError):
        make_adapter("l", 6, 5, rank=0)
    with pytest.raises(AdapterConfigError):
        make_adapter("l", 6, 5, rank=6)
    make_adapter("l", 6, 5, rank=5)   # rank == min(d, p) allowed


def test_adapter_shape_mismatch_error(np_rng):
    w = frozen_base(np_rng, 6, 5)
    adapter = make_adapter("other", 4, 5, rank=2)
    with pytest.raises(AdapterConfigError):
        lora_forward(Tensor(np.zeros((1, 2, 6))), w, adapter)


def test_gradient_flows_only_to_adapter(np_rng):
    w = frozen_base(np_rng, 5, 4)
    adapter = make_adapter("base.w", 5, 4, rank=2, seed=3)
    # move the adapter off its zero init so gradients are generic
    adapter.up.data += 0.1 * np_rng.standard_normal(adapter.up.shape)
    x = Tensor(np_rng.standard_normal((2, 3, 5)))
    out = lora_forward(x, w, adapter)
    grads = backward(out, seed=np_rng.standard_normal(out.shape))
    assert "base.w" not in grads
    assert set(grads) == {"base.w.lora_down", "base.w.lora_up"}

    # the frozen weight still affects the output even though it gets no grad
    w2 = parameter(w.data + 1e-3, "base.w2")
    w2.requires_grad = False
    out2 = lora_forward(x, w2, adapter)
    assert np.max(np.abs(out2.data - out.data)) > 0


def test_adapter_gradients_match_finite_differences(np_rng):
    base = np_rng.standard_normal((4, 3))

    def build(t):
        w = parameter(base, "w")
        w.requires_grad = False
        from dpsumm.lora import LoraAdapter
        adapter = LoraAdapter(layer_name="w", down=t["down"], up=t["up"],
                              rank=2, scaling=8.0)
        return lora_forward(t["x"], w, adapter)

    finite_diff_check(build, {
        "x": np_rng.standard_normal((2, 3, 4)),
        "down": np_rng.standard_normal((4, 2)),
        "up": np_rng.standard_normal((2, 3)),
    }, np_rng)


def test_ghost_norms_on_adapters_match_naive(np_rng):
    w = frozen_base(np_rng, 6, 6)
    adapter = make_adapter("base.w", 6, 6, rank=3, seed=5)
    adapter.up.data += 0.2 * np_rng.standard_normal(adapter.up.shape)
    caps = PerExampleCaptures()
    x = Tensor(np_rng.standard_normal((4, 3, 6)))
    out = lora_forward(x, w, adapter, captures=caps)
    from dpsumm.autodiff import cross_entropy_per_example
    losses = cross_entropy_per_example(out, np_rng.integers(0, 6, (4, 3)),
                                       np.ones((4, 3)))
    caps.recording = True
    backward(losses, param_grads=False)
    caps.recording = False
    assert {c.name for c in caps.affine} == {"base.w.lora_down", "base.w.lora_up"}
    ghost = per_example_norms_ghost(caps)
    naive = per_example_norms_naive(
        [backward(losses, seed=np.eye(4)[i]) for i in range(4)])
    assert rel_err(ghost, naive) < 1e-6


def test_trainable_fraction_cases(np_rng):
    model = CausalLM(ModelConfig(vocab_size=32, context_length=16, d_model=8,
                                 n_layers=1, n_heads=2), seed=0)
    assert trainable_fraction(model.params.values(), []) == 1.0
    adapters = model.attach_adapters(rank=2, seed=0)
    frac = trainable_fraction(model.params.values(), adapters)
    base_count = sum(p.data.size for p in model.params.values())
    adapter_count = 2 * (2 * (8 * 2))   # 2 adapters, down [8,2] + up [2,8]
    assert frac == pytest.approx(adapter_count / (base_count + adapter_count))
    assert 0 < frac < 1


def test_default_config_fraction_below_15_percent():
    model = CausalLM(ModelConfig(vocab_size=256, context_length=512, d_model=64,
                                 n_layers=2, n_heads=4), seed=0)
    adapters = model.attach_adapters(rank=8)
    assert trainable_fraction(model.params.values(), adapters) < 0.15


def test_full_rank_adapter_fits_any_linear_delta(np_rng):
    # with rank = min(d, p) the low-rank term can represent any matrix:
    # fit y = x @ target starting from a zero base weight
    d = p = r = 3
    w = parameter(np.zeros((d, p)), "base.w")
    w.requires_grad = False
    adapter = make_adapter("base.w", d, p, rank=r, alpha=float(r), seed=7)
    target = np_rng.standard_normal((d, p))
    x = Tensor(np_rng.standard_normal((1, 32, d)))
    want = x.data @ target
    params = {adapter.down.name: adapter.down.data,
              adapter.up.name: adapter.up.data}
    state = init_optim_state(params, lr=0.05)
    for _ in range(400):
        out = lora_forward(x, w, adapter)
        resid = out.data - want
        loss_grad = 2 * resid / resid.size
        # gradient of mean squared residual via the tape
        from dpsumm.autodiff import backward as bwd
        grads = bwd(out, seed=loss_grad)
        dp_adam_step(params, grads, state)
    final = np.mean((lora_forward(x, w, adapter).data - want) ** 2)
    assert final < 1e-4
