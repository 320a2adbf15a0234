import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from blockmae.autodiff import Tensor
from blockmae.optim import AdamW, AdamWState, adamw_step, cosine_lr


def _param(vals):
    return Tensor(np.asarray(vals, dtype=np.float32), requires_grad=True)


def test_zero_grad_zero_decay_is_identity():
    p = _param([1.0, -2.0, 3.0])
    state = AdamWState([p])
    adamw_step([p], [np.zeros(3, dtype=np.float32)], state, lr=0.1)
    assert np.array_equal(p.data, np.array([1.0, -2.0, 3.0], dtype=np.float32))


def test_first_step_closed_form():
    # hand-evaluated bias-corrected first step:
    # m=0.1 -> mhat=1;  v=1e-3 -> vhat=1;  theta' = -lr * 1/(1+eps)
    lr, eps = 0.1, 1e-8
    expected = -lr * (1.0 / (1.0 + eps))
    p = _param([0.0])
    adamw_step([p], [np.ones(1, dtype=np.float32)], AdamWState([p]),
               lr=lr, beta1=0.9, beta2=0.999, eps=eps, weight_decay=0.0)
    assert p.data[0] == pytest.approx(expected, rel=1e-6)


def test_pure_decay_term():
    p = _param([1.0])
    adamw_step([p], [np.zeros(1, dtype=np.float32)], AdamWState([p]),
               lr=0.1, weight_decay=0.05)
    assert p.data[0] == pytest.approx(0.995, abs=1e-7)


def test_zero_betas_reduce_to_normalized_sgd():
    g = np.array([0.3, -2.0, 5.0], dtype=np.float32)
    p = _param([0.0, 0.0, 0.0])
    eps = 1e-8
    adamw_step([p], [g], AdamWState([p]), lr=1.0, beta1=0.0, beta2=0.0, eps=eps)
    expected = -g / (np.abs(g) + eps)
    np.testing.assert_allclose(p.data, expected, rtol=1e-6)


def test_nan_grad_rejected_before_any_update():
    p1, p2 = _param([1.0]), _param([2.0])
    state = AdamWState([p1, p2])
    bad = np.array([np.nan], dtype=np.float32)
    with pytest.raises(ValueError, match="non-finite"):
        adamw_step([p1, p2], [np.ones(1, dtype=np.float32), bad], state, lr=0.1)
    assert p1.data[0] == 1.0 and p2.data[0] == 2.0
    assert state.t == 0


def test_step_counter_increments():
    p = _param([0.0])
    state = AdamWState([p])
    for i in range(3):
        adamw_step([p], [np.ones(1, dtype=np.float32)], state, lr=0.01)
        assert state.t == i + 1


def test_adamw_wrapper_decay_mask_default():
    w = Tensor(np.ones((2, 2), dtype=np.float32), requires_grad=True)
    b = Tensor(np.ones(2, dtype=np.float32), requires_grad=True)
    opt = AdamW([w, b], lr=0.1, weight_decay=0.5)
    opt.step()  # grads are all zero
    assert np.all(w.data < 1.0)   # decayed
    assert np.all(b.data == 1.0)  # bias exempt


def test_cosine_lr_endpoints_and_midpoint():
    base = 3e-4
    assert cosine_lr(100, 1000, base, warmup_steps=100) == pytest.approx(base)
    assert cosine_lr(1000, 1000, base, warmup_steps=100) == pytest.approx(0.0, abs=1e-12)
    assert cosine_lr(550, 1000, base, warmup_steps=100) == pytest.approx(base / 2)


def test_cosine_lr_warmup_is_linear():
    base = 1.0
    assert cosine_lr(0, 100, base, warmup_steps=10) == 0.0
    assert cosine_lr(5, 100, base, warmup_steps=10) == pytest.approx(0.5)


def test_cosine_lr_rejects_zero_total():
    with pytest.raises(ValueError):
        cosine_lr(0, 0, 1e-4)


@given(st.integers(1, 10_000), st.integers(0, 10_000), st.integers(0, 2_000))
def test_cosine_lr_bounded(total, step, warmup):
    step = min(step, total)
    warmup = min(warmup, total)
    lr = cosine_lr(step, total, 1.0, warmup)
    assert 0.0 <= lr <= 1.0 + 1e-12
    assert math.isfinite(lr)
