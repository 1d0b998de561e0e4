"""AdamW against hand-computed updates."""
import math

import numpy as np
import pytest

from fedselectkd.autodiff import Tensor
from fedselectkd.optim import AdamWState, adamw_step


def _param(value, grad):
    p = Tensor(np.array(value, dtype=float), requires_grad=True)
    p.grad = np.array(grad, dtype=float)
    return p


def test_zero_grad_zero_decay_is_noop():
    p = _param([1.0, -2.0], [0.0, 0.0])
    adamw_step({"p": p}, AdamWState(lr=0.1, weight_decay=0.0))
    assert np.array_equal(p.data, [1.0, -2.0])


def test_single_step_scalar():
    p = _param(1.0, 1.0)
    adamw_step({"p": p}, AdamWState(lr=0.1, weight_decay=0.0))
    # m_hat = 1, v_hat = 1 -> p - lr * 1 / (1 + eps)
    assert float(p.data) == pytest.approx(1.0 - 0.1 / (1.0 + 1e-8), abs=1e-12)
    assert float(p.data) == pytest.approx(0.9, abs=1e-6)


def test_pure_decay_with_zero_grad():
    p = _param(2.0, 0.0)
    adamw_step({"p": p}, AdamWState(lr=0.1, weight_decay=0.5))
    assert float(p.data) == pytest.approx(2.0 * (1 - 0.1 * 0.5), abs=1e-15)


def test_two_steps_match_reference():
    lr, wd, b1, b2, eps = 0.05, 0.01, 0.9, 0.999, 1e-8
    grads = [0.3, -0.7]
    p_ref, m, v = 0.4, 0.0, 0.0
    p = _param(0.4, grads[0])
    state = AdamWState(lr=lr, weight_decay=wd)
    for t, g in enumerate(grads, start=1):
        p.grad = np.array(g)
        adamw_step({"p": p}, state)
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p_ref = p_ref * (1 - lr * wd) - lr * (m / (1 - b1 ** t)) / (math.sqrt(v / (1 - b2 ** t)) + eps)
    assert float(p.data) == pytest.approx(p_ref, abs=1e-14)


def test_missing_grad_names_parameter():
    a = _param(1.0, 1.0)
    b = Tensor(np.array(1.0), requires_grad=True)
    with pytest.raises(ValueError, match="'b'"):
        adamw_step({"a": a, "b": b}, AdamWState())


def test_grads_cleared_after_step():
    p = _param([1.0], [1.0])
    adamw_step({"p": p}, AdamWState())
    assert p.grad is None
