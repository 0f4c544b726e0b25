import numpy as np
import pytest

from gcnet.models import (
    ControlBounds,
    DisturbanceSpec,
    Lander2dParams,
    ModelId,
    PrecessionParams,
    QuadPlanarParams,
    Trajectory,
    default_bounds,
    default_params,
    eval_dynamics,
    eval_jacobians,
    integrate,
)

MODELS = [ModelId.PRECESSION, ModelId.QUADPLANAR, ModelId.LANDER2D]


def _random_xu(model, rng, n=1):
    """Admissible random states/controls for finite-difference sweeps."""
    if model is ModelId.PRECESSION:
        x = rng.uniform(-2, 2, (n, 2))
        u = rng.uniform(-1, 1, (n, 1))
    elif model is ModelId.QUADPLANAR:
        p = QuadPlanarParams()
        x = np.column_stack(
            [
                rng.uniform(-5, 5, n),
                rng.uniform(-5, 5, n),
                rng.uniform(-3, 3, n),
                rng.uniform(-3, 3, n),
                rng.uniform(-1.2, 1.2, n),
            ]
        )
        u = np.column_stack([rng.uniform(0, p.t_max, n), rng.uniform(-p.q_max, p.q_max, n)])
    else:
        p = Lander2dParams()
        x = np.column_stack(
            [
                rng.uniform(-500, 500, n),
                rng.uniform(50, 1000, n),
                rng.uniform(-80, 80, n),
                rng.uniform(-80, 80, n),
                rng.uniform(p.dry_mass + 50, p.m0, n),
            ]
        )
        u = np.column_stack([rng.uniform(0, p.t_max, n), rng.uniform(-np.pi, np.pi, n)])
    return x, u


# ---------------------------------------------------------------------------
# dynamics

def test_quadplanar_hover_force_balance():
    p = QuadPlanarParams()
    x = np.array([1.0, 2.0, 0.5, -0.3, 0.0])
    u = np.array([p.mass * p.gravity, 0.0])
    dx = eval_dynamics(ModelId.QUADPLANAR, p, x, u)
    assert np.allclose(dx, [0.5, -0.3, 0.0, 0.0, 0.0], atol=1e-14)


def test_precession_origin_equilibrium():
    p = PrecessionParams()
    dx = eval_dynamics(ModelId.PRECESSION, p, np.zeros(2), np.zeros(1))
    assert np.all(dx == 0.0)


def test_lander_free_fall():
    p = Lander2dParams()
    x = np.array([0.0, 500.0, 10.0, -5.0, 800.0])
    dx = eval_dynamics(ModelId.LANDER2D, p, x, np.array([0.0, 0.3]))
    assert dx[3] == -p.gravity
    assert dx[4] == 0.0


def test_dimension_mismatch_rejected():
    p = PrecessionParams()
    with pytest.raises(ValueError):
        eval_dynamics(ModelId.PRECESSION, p, np.zeros(3), np.zeros(1))
    with pytest.raises(ValueError):
        eval_dynamics(ModelId.PRECESSION, p, np.zeros(2), np.zeros(2))


def test_non_finite_input_rejected():
    p = PrecessionParams()
    with pytest.raises(ValueError):
        eval_dynamics(ModelId.PRECESSION, p, np.array([np.nan, 0.0]), np.zeros(1))


def test_disturbance_activation_time():
    p = QuadPlanarParams()
    d = DisturbanceSpec(force=(0.4, 0.0), t_on=2.0)
    x = np.array([0, 0, 0, 0, 0.0])
    u = np.array([p.mass * p.gravity, 0.0])
    early = eval_dynamics(ModelId.QUADPLANAR, p, x, u, d, t=1.0)
    late = eval_dynamics(ModelId.QUADPLANAR, p, x, u, d, t=3.0)
    assert early[2] == 0.0
    assert abs(late[2] - 0.4 / p.mass) < 1e-14


# ---------------------------------------------------------------------------
# jacobians

def test_precession_state_jacobian_constant():
    p = PrecessionParams(rho=1.3)
    fx, fu = eval_jacobians(ModelId.PRECESSION, p, np.array([0.4, -0.2]), np.array([0.5]))
    assert np.allclose(fx, [[0, 1.3], [-1.3, 0]])
    assert np.allclose(fu, [[0.0], [1.0]])


def test_quadplanar_pitch_sensitivity_at_zero():
    p = QuadPlanarParams()
    T = 3.0
    fx, _ = eval_jacobians(ModelId.QUADPLANAR, p, np.zeros(5), np.array([T, 0.0]))
    assert abs(fx[2, 4] - T / p.mass) < 1e-14


@pytest.mark.parametrize("model", MODELS)
def test_jacobians_match_finite_differences(model):
    rng = np.random.default_rng(11)
    params = default_params(model)
    x, u = _random_xu(model, rng, n=1000)
    fx, fu = eval_jacobians(model, params, x, u)
    n, m = x.shape[1], u.shape[1]
    h = 1e-6
    for j in range(n):
        dx = np.zeros(n)
        dx[j] = h
        fd = (
            eval_dynamics(model, params, x + dx, u) - eval_dynamics(model, params, x - dx, u)
        ) / (2 * h)
        err = np.abs(fd - fx[..., j]) / (1.0 + np.abs(fx[..., j]))
        assert np.max(err) < 1e-6
    for j in range(m):
        du = np.zeros(m)
        du[j] = h
        fd = (
            eval_dynamics(model, params, x, u + du) - eval_dynamics(model, params, x, u - du)
        ) / (2 * h)
        err = np.abs(fd - fu[..., j]) / (1.0 + np.abs(fu[..., j]))
        assert np.max(err) < 1e-6


# ---------------------------------------------------------------------------
# integration

def test_zero_field_constant_trajectory():
    p = QuadPlanarParams()
    x0 = np.array([1.0, 2.0, 0.0, 0.0, 0.0])
    traj = integrate(
        ModelId.QUADPLANAR,
        p,
        x0,
        lambda t, x: np.array([p.mass * p.gravity, 0.0]),
        None,
        (0.0, 3.0),
    )
    assert np.max(np.abs(traj.x - x0)) < 1e-9


def test_precession_rotation_period():
    p = PrecessionParams(rho=1.0)
    x0 = np.array([0.7, -0.2])
    traj = integrate(
        ModelId.PRECESSION, p, x0, lambda t, x: np.zeros(1), None,
        (0.0, 2 * np.pi), rtol=1e-11, atol=1e-13,
    )
    assert np.max(np.abs(traj.x[-1] - x0)) < 1e-8


def test_forward_backward_roundtrip():
    p = QuadPlanarParams()
    x0 = np.array([0.0, 1.0, 0.5, 0.0, 0.1])

    def law(t, x):
        return np.array([p.mass * p.gravity * 1.1, 0.3 * np.sin(t)])

    fwd = integrate(ModelId.QUADPLANAR, p, x0, law, None, (0.0, 2.0), rtol=1e-10, atol=1e-12)
    back = integrate(
        ModelId.QUADPLANAR, p, fwd.x[-1], law, None, (2.0, 0.0), rtol=1e-10, atol=1e-12
    )
    assert np.max(np.abs(back.x[-1] - x0)) < 1e-7


def test_tolerance_scaling_on_rotation():
    """Endpoint error decreases consistently as the tolerance is tightened."""
    p = PrecessionParams()
    x0 = np.array([1.0, 0.0])
    errs = []
    for tol in (1e-6, 1e-8, 1e-10):
        traj = integrate(
            ModelId.PRECESSION, p, x0, lambda t, x: np.zeros(1), None,
            (0.0, 2 * np.pi), rtol=tol, atol=tol * 1e-2,
        )
        errs.append(np.max(np.abs(traj.x[-1] - x0)))
    assert errs[1] < errs[0] and errs[2] < errs[1]
    assert errs[2] < 1e-2 * errs[0]


def test_ballistic_energy_consistency():
    p = QuadPlanarParams()
    x0 = np.array([0.0, 10.0, 1.5, 0.5, 0.2])
    traj = integrate(
        ModelId.QUADPLANAR, p, x0, lambda t, x: np.zeros(2), None, (0.0, 1.2),
        rtol=1e-10, atol=1e-12,
    )
    t = traj.t
    assert np.max(np.abs(traj.x[:, 2] - 1.5)) < 1e-9  # vx conserved
    z_exact = 10.0 + 0.5 * t - 0.5 * p.gravity * t**2
    assert np.max(np.abs(traj.x[:, 1] - z_exact)) < 1e-9


def test_disturbance_linearity():
    p = QuadPlanarParams()
    x0 = np.zeros(5)

    def law(t, x):
        return np.array([p.mass * p.gravity, 0.0])

    def endpoint(scale):
        d = DisturbanceSpec(force=(0.01 * scale, -0.02 * scale))
        traj = integrate(ModelId.QUADPLANAR, p, x0, law, d, (0.0, 1.0), rtol=1e-11, atol=1e-13)
        return traj.x[-1]

    base = endpoint(0.0)
    d1 = endpoint(1.0) - base
    d2 = endpoint(2.0) - base
    assert np.allclose(d2, 2.0 * d1, rtol=1e-5, atol=1e-10)


def test_lander_ground_contact_event():
    p = Lander2dParams()
    x0 = np.array([0.0, 50.0, 0.0, -20.0, 900.0])
    traj = integrate(ModelId.LANDER2D, p, x0, lambda t, x: np.zeros(2), None, (0.0, 30.0))
    assert traj.stopped_by == "ground_contact"
    assert abs(traj.x[-1, 1]) < 1e-6


def test_lander_mass_floor_event():
    p = Lander2dParams(m0=320.0, dry_mass=300.0)
    x0 = np.array([0.0, 5000.0, 0.0, 0.0, 320.0])
    traj = integrate(
        ModelId.LANDER2D, p, x0, lambda t, x: np.array([p.t_max, 0.0]), None, (0.0, 60.0)
    )
    assert traj.stopped_by == "mass_floor"
    assert abs(traj.x[-1, 4] - p.dry_mass) < 1e-6


def test_dense_output_sampling():
    p = PrecessionParams()
    traj = integrate(
        ModelId.PRECESSION, p, np.array([1.0, 0.0]), lambda t, x: np.zeros(1), None,
        (0.0, 1.0), rtol=1e-10, atol=1e-12,
    )
    got = traj.sample(0.5)
    assert np.allclose(got, [np.cos(0.5), -np.sin(0.5)], atol=1e-8)


# ---------------------------------------------------------------------------
# bounds and trajectory invariants

def test_control_bounds_validation():
    with pytest.raises(ValueError):
        ControlBounds((1.0,), (0.5,))
    with pytest.raises(ValueError):
        ControlBounds((0.0,), (2.0,), t_sat=3.0)
    b = ControlBounds((0.0, -3.0), (7.848, 3.0), t_sat=5.0)
    assert b.effective_upper()[0] == 5.0
    assert b.contains([4.9, 0.0])
    assert not b.contains([6.0, 0.0])


def test_default_bounds_thrust_ceiling():
    b = default_bounds(ModelId.QUADPLANAR, QuadPlanarParams())
    assert abs(b.hi[0] - 2 * 0.4 * 9.81) < 1e-12


def test_trajectory_grid_invariants():
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0]), np.zeros((1, 2)), np.zeros((1, 1)))
    with pytest.raises(ValueError):
        Trajectory(np.array([0.0, 1.0, 0.5]), np.zeros((3, 2)), np.zeros((3, 1)))
