"""Benchmark dynamical systems: spinning-satellite precession, planar
quadcopter, and planar lunar-style lander.

All dynamics kernels broadcast over leading axes (states live on the last
axis), so the same code serves single evaluations, trajectory grids and
batched shooting clouds.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

from .ode import OdeResult, integrate_ode


class ModelId(enum.Enum):
    PRECESSION = "precession"
    QUADPLANAR = "quadplanar"
    LANDER2D = "lander2d"


@dataclass(frozen=True)
class PrecessionParams:
    """Normalized transverse angular velocity model: w1' = rho*w2, w2' = -rho*w1 + u."""

    rho: float = 1.0
    u_max: float = 1.0


@dataclass(frozen=True)
class QuadPlanarParams:
    """Planar quadcopter: state (x, z, vx, vz, theta), controls (T, q)."""

    mass: float = 0.4
    gravity: float = 9.81
    q_max: float = 3.0
    t_min: float = 0.0
    t_max: float = -1.0  # sentinel, resolved to 2*m*g in __post_init__

    def __post_init__(self):
        if self.t_max <= 0:
            object.__setattr__(self, "t_max", 2.0 * self.mass * self.gravity)


@dataclass(frozen=True)
class Lander2dParams:
    """Planar lander: state (x, z, vx, vz, m), controls (T, alpha)."""

    m0: float = 1000.0
    dry_mass: float = 300.0
    t_max: float = 4000.0
    isp: float = 200.0
    gravity: float = 1.62
    g0: float = 9.80665

    @property
    def exhaust_velocity(self) -> float:
        return self.isp * self.g0


STATE_DIM = {ModelId.PRECESSION: 2, ModelId.QUADPLANAR: 5, ModelId.LANDER2D: 5}
CONTROL_DIM = {ModelId.PRECESSION: 1, ModelId.QUADPLANAR: 2, ModelId.LANDER2D: 2}

STATE_NAMES = {
    ModelId.PRECESSION: ("w1", "w2"),
    ModelId.QUADPLANAR: ("x", "z", "vx", "vz", "theta"),
    ModelId.LANDER2D: ("x", "z", "vx", "vz", "m"),
}
CONTROL_NAMES = {
    ModelId.PRECESSION: ("u",),
    ModelId.QUADPLANAR: ("T", "q"),
    ModelId.LANDER2D: ("T", "alpha"),
}


def default_params(model: ModelId):
    return {
        ModelId.PRECESSION: PrecessionParams,
        ModelId.QUADPLANAR: QuadPlanarParams,
        ModelId.LANDER2D: Lander2dParams,
    }[model]()


@dataclass(frozen=True)
class ControlBounds:
    """Box bounds per control component, plus an effective thrust ceiling.

    ``t_sat`` models an actuator saturation below the nominal maximum of the
    first (thrust) component; it shrinks the effective upper bound without
    changing the nominal normalization range.
    """

    lower: tuple
    upper: tuple
    t_sat: float | None = None

    def __post_init__(self):
        lo, hi = np.asarray(self.lower, float), np.asarray(self.upper, float)
        if lo.shape != hi.shape or np.any(lo >= hi):
            raise ValueError("control bounds need lower < upper componentwise")
        if self.t_sat is not None and not (0.0 < self.t_sat <= hi[0]):
            raise ValueError("need 0 < t_sat <= nominal upper thrust bound")

    @property
    def lo(self) -> np.ndarray:
        return np.asarray(self.lower, float)

    @property
    def hi(self) -> np.ndarray:
        return np.asarray(self.upper, float)

    def effective_upper(self) -> np.ndarray:
        hi = self.hi.copy()
        if self.t_sat is not None:
            hi[0] = min(hi[0], self.t_sat)
        return hi

    @property
    def mid(self) -> np.ndarray:
        return 0.5 * (self.lo + self.hi)

    @property
    def halfwidth(self) -> np.ndarray:
        return 0.5 * (self.hi - self.lo)

    def clip(self, u: np.ndarray) -> np.ndarray:
        return np.clip(u, self.lo, self.effective_upper())

    def contains(self, u: np.ndarray, tol: float = 1e-9) -> bool:
        u = np.asarray(u, float)
        return bool(np.all(u >= self.lo - tol) and np.all(u <= self.effective_upper() + tol))


def default_bounds(model: ModelId, params=None, t_sat: float | None = None) -> ControlBounds:
    params = params or default_params(model)
    if model is ModelId.PRECESSION:
        return ControlBounds((-params.u_max,), (params.u_max,), None)
    if model is ModelId.QUADPLANAR:
        return ControlBounds(
            (params.t_min, -params.q_max), (params.t_max, params.q_max), t_sat
        )
    return ControlBounds((0.0, -np.pi), (params.t_max, np.pi), t_sat)


@dataclass(frozen=True)
class DisturbanceSpec:
    """Constant external force [N] and/or torque [normalized], switched on at t_on."""

    force: tuple = (0.0, 0.0)
    torque: float = 0.0
    t_on: float = 0.0

    def __post_init__(self):
        if not (np.all(np.isfinite(self.force)) and np.isfinite(self.torque)):
            raise ValueError("disturbance must be finite")

    def is_zero(self) -> bool:
        return self.torque == 0.0 and not np.any(np.asarray(self.force))

    def active(self, t: float):
        """(force, torque) applied at time t."""
        if t >= self.t_on:
            return np.asarray(self.force, float), self.torque
        return np.zeros(2), 0.0


ZERO_DISTURBANCE = DisturbanceSpec()


def _check_xu(model: ModelId, x, u):
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    if x.shape[-1] != STATE_DIM[model]:
        raise ValueError(f"{model.name} expects {STATE_DIM[model]} states, got {x.shape[-1]}")
    if u.shape[-1] != CONTROL_DIM[model]:
        raise ValueError(f"{model.name} expects {CONTROL_DIM[model]} controls, got {u.shape[-1]}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or control")
    return x, u


def dynamics_raw(model: ModelId, params, x, u, d_force=None, d_torque=0.0):
    """Unvalidated dynamics kernel; broadcasts over leading axes.

    d_force / d_torque are the disturbance terms that are currently active
    (callers resolve activation times).
    """
    out = np.empty(np.broadcast_shapes(x.shape[:-1], u.shape[:-1]) + (x.shape[-1],))
    if model is ModelId.PRECESSION:
        w1, w2 = x[..., 0], x[..., 1]
        out[..., 0] = params.rho * w2
        out[..., 1] = -params.rho * w1 + u[..., 0] + d_torque
        return out
    if model is ModelId.QUADPLANAR:
        m = params.mass
        T, q = u[..., 0], u[..., 1]
        th = x[..., 4]
        out[..., 0] = x[..., 2]
        out[..., 1] = x[..., 3]
        out[..., 2] = (T / m) * np.sin(th)
        out[..., 3] = (T / m) * np.cos(th) - params.gravity
        out[..., 4] = q
        if d_force is not None:
            out[..., 2] += d_force[..., 0] / m
            out[..., 3] += d_force[..., 1] / m
        return out
    # LANDER2D
    T, alpha = u[..., 0], u[..., 1]
    m = x[..., 4]
    out[..., 0] = x[..., 2]
    out[..., 1] = x[..., 3]
    out[..., 2] = (T / m) * np.sin(alpha)
    out[..., 3] = (T / m) * np.cos(alpha) - params.gravity
    out[..., 4] = -T / params.exhaust_velocity
    if d_force is not None:
        out[..., 2] += d_force[..., 0] / m
        out[..., 3] += d_force[..., 1] / m
    return out


def eval_dynamics(model: ModelId, params, x, u, d: DisturbanceSpec | None = None, t: float = 0.0):
    """State derivative f(x, u) with an optional disturbance active at time t."""
    x, u = _check_xu(model, x, u)
    d_force, d_torque = (None, 0.0)
    if d is not None and not d.is_zero():
        f, tq = d.active(t)
        d_force, d_torque = f, tq
    if model is ModelId.LANDER2D and np.any(x[..., 4] <= 0):
        raise ValueError("lander mass must stay positive")
    return dynamics_raw(model, params, x, u, d_force, d_torque)


def eval_jacobians(model: ModelId, params, x, u):
    """Analytic (df/dx, df/du); broadcasts over leading axes."""
    x, u = _check_xu(model, x, u)
    batch = np.broadcast_shapes(x.shape[:-1], u.shape[:-1])
    n, mdim = STATE_DIM[model], CONTROL_DIM[model]
    fx = np.zeros(batch + (n, n))
    fu = np.zeros(batch + (n, mdim))
    if model is ModelId.PRECESSION:
        fx[..., 0, 1] = params.rho
        fx[..., 1, 0] = -params.rho
        fu[..., 1, 0] = 1.0
        return fx, fu
    if model is ModelId.QUADPLANAR:
        m = params.mass
        T = u[..., 0]
        th = x[..., 4]
        fx[..., 0, 2] = 1.0
        fx[..., 1, 3] = 1.0
        fx[..., 2, 4] = (T / m) * np.cos(th)
        fx[..., 3, 4] = -(T / m) * np.sin(th)
        fu[..., 2, 0] = np.sin(th) / m
        fu[..., 3, 0] = np.cos(th) / m
        fu[..., 4, 1] = 1.0
        return fx, fu
    T, alpha = u[..., 0], u[..., 1]
    m = x[..., 4]
    sa, ca = np.sin(alpha), np.cos(alpha)
    fx[..., 0, 2] = 1.0
    fx[..., 1, 3] = 1.0
    fx[..., 2, 4] = -(T / m**2) * sa
    fx[..., 3, 4] = -(T / m**2) * ca
    fu[..., 2, 0] = sa / m
    fu[..., 3, 0] = ca / m
    fu[..., 2, 1] = (T / m) * ca
    fu[..., 3, 1] = -(T / m) * sa
    fu[..., 4, 0] = -1.0 / params.exhaust_velocity
    return fx, fu


@dataclass
class Trajectory:
    """Time grid with state and control samples plus integrator statistics."""

    t: np.ndarray
    x: np.ndarray
    u: np.ndarray
    stats: dict = field(default_factory=dict)
    stopped_by: str | None = None  # None, "mass_floor", "ground_contact"
    dense: object = None

    def __post_init__(self):
        if len(self.t) < 2:
            raise ValueError("trajectory needs at least two grid nodes")
        dt = np.diff(self.t)
        if not (np.all(dt > 0) or np.all(dt < 0)):
            raise ValueError("trajectory time grid must be strictly monotone")

    def sample(self, tq):
        """Dense-output state at arbitrary times inside the span."""
        if self.dense is None:
            raise ValueError("trajectory carries no dense output")
        return self.dense(tq)


def integrate(
    model: ModelId,
    params,
    x0,
    control_law,
    d: DisturbanceSpec | None,
    t_span,
    rtol=1e-9,
    atol=1e-11,
    max_step=np.inf,
) -> Trajectory:
    """Integrate the model under control_law(t, x) with dense output.

    Stops early (with a flag) on lander events: mass at the dry-mass floor or
    ground contact z <= 0.
    """
    x0 = np.asarray(x0, float)
    d = d or ZERO_DISTURBANCE

    def rhs(t, x):
        u = np.asarray(control_law(t, x), float)
        f_force, f_torque = d.active(t)
        return dynamics_raw(model, params, x, u, f_force if not d.is_zero() else None, f_torque)

    events = []
    names = []
    if model is ModelId.LANDER2D:
        events.append(lambda t, x: x[4] - params.dry_mass)
        names.append("mass_floor")
        events.append(lambda t, x: x[1])
        names.append("ground_contact")

    res: OdeResult = integrate_ode(
        rhs, t_span, x0, rtol=rtol, atol=atol, max_step=max_step, events=events or None
    )
    u_nodes = np.array([np.atleast_1d(control_law(t, x)) for t, x in zip(res.t, res.y)])
    stats = {
        "n_steps": res.n_steps,
        "n_rejected": res.n_rejected,
        "n_rhs": res.n_rhs,
    }
    stopped = names[res.event_index] if res.status == "event" else None
    return Trajectory(res.t, res.y, u_nodes, stats, stopped, res.dense)
