import numpy as np
import pytest

from cispgm.integrators import StepSizeUnderflowError, solve_rk45


def _exp_rhs(t, y):
    return y


def _circle_rhs(t, y):
    out = np.empty_like(y)
    out[..., 0] = -y[..., 1]
    out[..., 1] = y[..., 0]
    return out


def test_exponential_accuracy():
    y = solve_rk45(_exp_rhs, np.array([1.0]), 1.0, rtol=1e-12, atol=1e-12)
    assert abs(y[0] - np.e) < 1e-10


def test_zero_dt_identity_bitwise():
    y0 = np.array([0.1234567891234567, -3.5, 2.0])
    out = solve_rk45(_exp_rhs, y0, 0.0)
    assert np.array_equal(out, y0)


def test_backward_integration():
    y = solve_rk45(_exp_rhs, np.array([1.0]), -1.0, rtol=1e-12, atol=1e-12)
    assert abs(y[0] - 1.0 / np.e) < 1e-10


def test_batch_matches_single_bitwise():
    rng = np.random.default_rng(3)
    batch = rng.normal(size=(17, 2))
    joint = solve_rk45(_circle_rhs, batch, 2.5, rtol=1e-10, atol=1e-10)
    for i in range(batch.shape[0]):
        single = solve_rk45(_circle_rhs, batch[i], 2.5, rtol=1e-10, atol=1e-10)
        assert np.array_equal(joint[i], single)


def test_mixed_dt_batch():
    batch = np.ones((3, 1))
    dts = np.array([0.0, 1.0, -1.0])
    out = solve_rk45(_exp_rhs, batch, dts, rtol=1e-12, atol=1e-12)
    assert out[0, 0] == 1.0
    assert abs(out[1, 0] - np.e) < 1e-10
    assert abs(out[2, 0] - 1.0 / np.e) < 1e-10


def test_step_underflow_reports_time():
    # 1/(1-t) blows up at t=1; the controller must refuse, not loop forever.
    def blowup(t, y):
        return y * y

    with pytest.raises((StepSizeUnderflowError, RuntimeError)):
        solve_rk45(blowup, np.array([1.0]), 2.0, rtol=1e-10, atol=1e-10,
                   max_steps=100_000)
