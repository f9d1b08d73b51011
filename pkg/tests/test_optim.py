import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from rimap.errors import ShapeError
from rimap.optim import adam_step


def scalar_adam(p, grads, lr, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    out = []
    for t, g in enumerate(grads, start=1):
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        p = p - lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
        out.append(p)
    return out


def test_first_step_is_lr():
    p = np.zeros(1)
    m, v = np.zeros(1), np.zeros(1)
    adam_step(p, np.ones(1), m, v, 1, 0.01)
    assert p[0] == pytest.approx(-0.01 / (1 + 1e-8), abs=1e-15)


def test_zero_grad_zero_state_no_change():
    p = np.array([0.3, -2.0])
    m, v = np.zeros(2), np.zeros(2)
    adam_step(p, np.zeros(2), m, v, 1, 0.01)
    assert np.array_equal(p, [0.3, -2.0])


@settings(max_examples=50, deadline=None)
@given(st.floats(-5, 5), st.lists(st.floats(-10, 10), min_size=5, max_size=5),
       st.floats(1e-4, 0.1))
def test_five_steps_match_scalar_oracle(p0, grads, lr):
    p = np.array([p0])
    m, v = np.zeros(1), np.zeros(1)
    expect = scalar_adam(p0, grads, lr)
    for t, g in enumerate(grads, start=1):
        adam_step(p, np.array([g]), m, v, t, lr)
        assert abs(p[0] - expect[t - 1]) <= 1e-12


def test_per_voxel_step_counts():
    # two entries with different histories step independently
    p = np.zeros((2, 1))
    m, v = np.zeros((2, 1)), np.zeros((2, 1))
    adam_step(p, np.ones((2, 1)), m, v, np.array([[1], [3]]), 0.01)
    a = scalar_adam(0.0, [1.0], 0.01)[0]
    assert p[0, 0] == pytest.approx(a, abs=1e-15)
    assert p[1, 0] != p[0, 0]


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        adam_step(np.zeros(2), np.zeros(3), np.zeros(2), np.zeros(2), 1, 0.01)
