"""Adam update contract: bias correction, frozen params, grad lifecycle."""

import numpy as np
import pytest

from echogen.optim import Adam, AdamState, Parameter, adam_step


def test_zero_gradient_leaves_data_unchanged():
    p = Parameter(np.array([1.0, 2.0], dtype=np.float32), name="p")
    p.tensor.grad = np.zeros(2, dtype=np.float32)
    state = AdamState(lr=0.1)
    adam_step([p], state)
    np.testing.assert_array_equal(p.data, [1.0, 2.0])
    assert state.step_count == 1


def test_first_step_bias_corrected_delta():
    # m_hat = g, v_hat = g^2 on step 1, so delta = -lr * g / (|g| + eps_hat)
    p = Parameter(np.array([0.0], dtype=np.float32), name="w")
    p.tensor.grad = np.array([1.0], dtype=np.float32)
    state = AdamState(lr=0.1)
    adam_step([p], state)
    expected = -0.1 * (1.0 / (1.0 + state.eps_hat))
    assert abs(float(p.data[0]) - expected) <= 1e-7


def test_frozen_param_byte_identical():
    p = Parameter(np.array([1.5, -2.5], dtype=np.float32), name="frozen")
    p.freeze()
    before = p.data.tobytes()
    p.tensor.grad = np.array([10.0, 10.0], dtype=np.float32)
    state = AdamState(lr=1.0)
    adam_step([p], state)
    assert p.data.tobytes() == before


def test_missing_gradient_errors():
    p = Parameter(np.zeros(2, dtype=np.float32), name="nograd")
    with pytest.raises(ValueError, match="missing gradient"):
        adam_step([p], AdamState())


def test_grads_zeroed_after_step():
    p = Parameter(np.zeros(2, dtype=np.float32), name="p")
    p.tensor.grad = np.ones(2, dtype=np.float32)
    adam_step([p], AdamState())
    assert p.grad is None


def test_step_count_increments_once_per_call():
    p = Parameter(np.zeros(1, dtype=np.float32), name="p")
    opt = Adam([p], lr=0.01)
    for expected in (1, 2, 3):
        p.tensor.grad = np.ones(1, dtype=np.float32)
        opt.step()
        assert opt.state.step_count == expected


def test_state_blob_roundtrip():
    p = Parameter(np.ones(3, dtype=np.float32), name="layer.w")
    opt = Adam([p], lr=0.05)
    p.tensor.grad = np.full(3, 0.5, dtype=np.float32)
    opt.step()
    blobs = opt.state_blobs()
    opt2 = Adam([Parameter(np.ones(3, dtype=np.float32), name="layer.w")], lr=0.05)
    opt2.load_state_blobs(blobs, step_count=1)
    assert opt2.state.step_count == 1
    np.testing.assert_array_equal(opt2.state.m["layer.w"], opt.state.m["layer.w"])
    np.testing.assert_array_equal(opt2.state.v["layer.w"], opt.state.v["layer.w"])
