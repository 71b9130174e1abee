import numpy as np
import pytest

from seqkd import autodiff as ad
from seqkd.optim import AdamState, adam_step


def make_params(values):
    return {name: ad.parameter(np.array(data, dtype=float), name)
            for name, data in values.items()}


def test_zero_gradient_no_decay_leaves_params_unchanged():
    params = make_params({"w": [1.0, -2.0, 3.0]})
    state = AdamState()
    adam_step(params, {"w": np.zeros(3)}, state)
    np.testing.assert_array_equal(params["w"].data, [1.0, -2.0, 3.0])
    assert state.step == 1


def test_first_step_matches_closed_form():
    # After one step: m_hat = g, v_hat = g^2, so the update is
    # lr * g / (|g| + eps) ~= lr * sign(g) per coordinate.
    g = np.array([0.3, -1.7, 4.0])
    params = make_params({"w": [0.0, 0.0, 0.0]})
    state = AdamState(lr=0.001)
    adam_step(params, {"w": g}, state)
    expected = -state.lr * g / (np.abs(g) + state.eps)
    np.testing.assert_allclose(params["w"].data, expected, rtol=1e-12)
    np.testing.assert_allclose(params["w"].data, -0.001 * np.sign(g), rtol=1e-6)


def test_two_steps_vs_replayed_state_bit_identical():
    rng = np.random.default_rng(0)
    g1, g2 = rng.standard_normal(4), rng.standard_normal(4)
    w0 = rng.standard_normal(4)

    a = make_params({"w": w0.copy()})
    sa = AdamState(lr=0.01, weight_decay=1e-4)
    adam_step(a, {"w": g1}, sa)
    adam_step(a, {"w": g2}, sa)

    b = make_params({"w": w0.copy()})
    sb = AdamState(lr=0.01, weight_decay=1e-4)
    adam_step(b, {"w": g1}, sb)
    # serialize / deserialize the state mid-run
    sb2 = AdamState(lr=sb.lr, beta1=sb.beta1, beta2=sb.beta2, eps=sb.eps,
                    weight_decay=sb.weight_decay, step=sb.step,
                    m={k: v.copy() for k, v in sb.m.items()},
                    v={k: v.copy() for k, v in sb.v.items()})
    adam_step(b, {"w": g2}, sb2)
    assert np.array_equal(a["w"].data, b["w"].data)


def test_nan_gradient_rejected_before_mutation():
    params = make_params({"w": [1.0], "u": [2.0]})
    state = AdamState()
    with pytest.raises(ValueError, match="non-finite"):
        adam_step(params, {"w": np.array([np.nan]), "u": np.array([1.0])}, state)
    np.testing.assert_array_equal(params["w"].data, [1.0])
    np.testing.assert_array_equal(params["u"].data, [2.0])
    assert state.step == 0


def test_decoupled_weight_decay_shrinks_without_gradient():
    params = make_params({"w": [10.0]})
    state = AdamState(lr=0.1, weight_decay=0.5)
    adam_step(params, {"w": np.zeros(1)}, state)
    np.testing.assert_allclose(params["w"].data, [10.0 * (1 - 0.1 * 0.5)])
