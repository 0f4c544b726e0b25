import numpy as np
import pytest

from gcnet.ode import DenseOutput, StiffnessError, integrate_batch, integrate_ode


def test_linear_decay_matches_closed_form():
    res = integrate_ode(lambda t, y: -y, (0.0, 2.0), [1.0], rtol=1e-10, atol=1e-12)
    assert abs(res.y[-1, 0] - np.exp(-2.0)) < 1e-9
    # dense output agrees in the interior
    tq = np.linspace(0, 2, 37)
    assert np.max(np.abs(res.dense(tq)[:, 0] - np.exp(-tq))) < 1e-8


def test_rotation_dense_output_and_backward():
    def rhs(t, y):
        return np.array([y[1], -y[0]])

    fwd = integrate_ode(rhs, (0.0, np.pi / 2), [1.0, 0.0], rtol=1e-11, atol=1e-13)
    assert np.allclose(fwd.y[-1], [0.0, -1.0], atol=1e-9)
    back = integrate_ode(rhs, (np.pi / 2, 0.0), fwd.y[-1], rtol=1e-11, atol=1e-13)
    assert np.allclose(back.y[-1], [1.0, 0.0], atol=1e-8)


def test_event_detection_bisects_crossing():
    res = integrate_ode(
        lambda t, y: np.array([1.0]),
        (0.0, 5.0),
        [-1.3],
        events=[lambda t, y: y[0]],
    )
    assert res.status == "event"
    assert abs(res.event_time - 1.3) < 1e-10
    assert abs(res.t[-1] - 1.3) < 1e-10


def test_step_budget_guard():
    with pytest.raises(StiffnessError):
        integrate_ode(lambda t, y: -1e8 * y + np.sin(t), (0.0, 10.0), [1.0], max_steps=50)


def test_batch_matches_single_rows():
    def rhs_single(t, y):
        return np.array([-y[0], y[1] * 0.5])

    def rhs_batch(t, Y):
        return np.stack([-Y[:, 0], 0.5 * Y[:, 1]], axis=1)

    Y0 = np.array([[1.0, 1.0], [2.0, -1.0], [0.5, 3.0]])
    batch = integrate_batch(rhs_batch, (0.0, 1.5), Y0, rtol=1e-10, atol=1e-12)
    for b in range(3):
        single = integrate_ode(rhs_single, (0.0, 1.5), Y0[b], rtol=1e-10, atol=1e-12)
        assert np.allclose(batch.y[-1, b], single.y[-1], atol=1e-8)


def test_dense_output_queries_any_order():
    # cubic Hermite between accepted steps: expect ~h^4/384 interpolation error
    res = integrate_ode(lambda t, y: np.array([np.cos(t)]), (0.0, 3.0), [0.0], rtol=1e-10, atol=1e-12)
    h4 = np.max(np.diff(res.t)) ** 4 / 384.0
    tq = np.array([2.9, 0.1, 1.7, 1.7, 0.0, 3.0])
    vals = res.dense(tq)[:, 0]
    assert np.max(np.abs(vals - np.sin(tq))) < 5.0 * h4
    # node values themselves carry the integration tolerance
    assert np.max(np.abs(res.y[:, 0] - np.sin(res.t))) < 1e-9


def test_zero_span_is_constant():
    res = integrate_ode(lambda t, y: -y, (1.0, 1.0), [4.0])
    assert res.y[-1, 0] == 4.0


def test_dense_output_hermite_exact_for_cubics():
    # a cubic is reproduced exactly by cubic Hermite interpolation
    ts = np.array([0.0, 1.0])
    ys = np.array([[0.0], [1.0]])
    fs = np.array([[0.0], [3.0]])  # y = t^3
    dense = DenseOutput(ts, ys, fs)
    tq = np.linspace(0, 1, 11)
    assert np.allclose(dense(tq)[:, 0], tq**3, atol=1e-14)
