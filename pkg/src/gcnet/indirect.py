"""Pontryagin indirect solver.

Hamiltonian machinery, pointwise minimizing controls, single-shooting with a
damped Newton iteration on the boundary residual, and homotopy continuation
from smooth (energy-like) to hard (time/mass-optimal) cost settings.

Shooting runs in scaled time s in [0, 1] with the final time as an explicit
unknown; the finite-difference Jacobian of the shooting map is obtained from
one batched integration of the perturbation cloud.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from . import models
from .models import (
    CONTROL_DIM,
    STATE_DIM,
    ControlBounds,
    ModelId,
    dynamics_raw,
)
from .ode import StiffnessError, integrate_batch

EPS_HOM_MIN = 0.05


class TpbvpFailure(RuntimeError):
    """Shooting did not converge; carries the last residual and diagnostics."""

    def __init__(self, message, residual_norm=np.inf, iterations=0, condition=None):
        super().__init__(message)
        self.residual_norm = residual_norm
        self.iterations = iterations
        self.condition = condition


class ContinuationStall(RuntimeError):
    """Continuation could not pass a path node even after bisecting the step."""

    def __init__(self, message, partial, failed_param, last_error=None):
        super().__init__(message)
        self.partial = partial
        self.failed_param = failed_param
        self.last_error = last_error


@dataclass(frozen=True)
class CostSpec:
    """Running-cost specification.

    eps_hom blends constant (time) and quadratic (energy) running cost for
    the precession and quadcopter models: L = eps + (1-eps)*||u_norm||^2.
    The lander is mass-optimal (Mayer cost -m(tf)) with a quadratic thrust
    smoothing term of weight ``smoothing`` that continuation drives to zero.
    """

    eps_hom: float = 0.5
    smoothing: float = 0.0

    def __post_init__(self):
        if not (EPS_HOM_MIN <= self.eps_hom <= 1.0):
            raise ValueError(f"eps_hom must lie in [{EPS_HOM_MIN}, 1]")
        if self.smoothing < 0:
            raise ValueError("smoothing weight must be >= 0")


@dataclass(frozen=True)
class BoundaryConditions:
    x0: tuple
    xf: tuple
    fixed_mask: tuple
    tf_free: bool = True
    waypoint_offset: tuple = (0.0, 0.0)
    d_hat: tuple = (0.0, 0.0)  # precession: (torque,); others: force estimate [N]
    lam_terminal: tuple | None = None  # required lambda(tf) on free components

    def __post_init__(self):
        x0 = np.asarray(self.x0, float)
        mask = np.asarray(self.fixed_mask, bool)
        if x0.shape != np.asarray(self.xf, float).shape or x0.shape != mask.shape:
            raise ValueError("x0, xf and fixed_mask must share one shape")


@dataclass(frozen=True)
class OcpDefinition:
    model: ModelId
    params: object
    cost: CostSpec
    bounds: ControlBounds
    bc: BoundaryConditions

    def __post_init__(self):
        n = STATE_DIM[self.model]
        if len(self.bc.x0) != n:
            raise ValueError("boundary conditions do not match the model dimension")
        if len(self.bounds.lo) != CONTROL_DIM[self.model]:
            raise ValueError("control bounds do not match the model dimension")

    @property
    def n(self) -> int:
        return STATE_DIM[self.model]

    @property
    def m(self) -> int:
        return CONTROL_DIM[self.model]

    def min_time_like(self) -> bool:
        """True when the control law is bang-bang (no quadratic interior)."""
        if self.model is ModelId.LANDER2D:
            return self.cost.smoothing == 0.0
        return self.cost.eps_hom == 1.0

    def d_hat_terms(self):
        """(force, torque) the solver model applies permanently."""
        d = np.asarray(self.bc.d_hat, float)
        if self.model is ModelId.PRECESSION:
            return None, float(d[0]) if d.size else 0.0
        force = np.zeros(2)
        force[: d.size] = d
        return (force if np.any(force) else None), 0.0

    def task_vector(self) -> np.ndarray:
        """Task-parameter vector p fed to the network alongside the state."""
        t_sat = self.bounds.t_sat
        t_frac = 1.0 if t_sat is None else t_sat / self.bounds.hi[0]
        off = np.asarray(self.bc.waypoint_offset, float)
        d = np.zeros(2)
        dd = np.asarray(self.bc.d_hat, float)
        d[: dd.size] = dd
        if self.model is ModelId.PRECESSION:
            return np.array([self.cost.eps_hom])
        lead = self.cost.smoothing if self.model is ModelId.LANDER2D else self.cost.eps_hom
        return np.concatenate(([lead], off[:2], d, [t_frac]))

    def x_scale(self) -> np.ndarray:
        if self.model is ModelId.LANDER2D:
            return np.array([100.0, 100.0, 10.0, 10.0, 100.0])
        return np.ones(self.n)


def task_vector_dim(model: ModelId) -> int:
    return 1 if model is ModelId.PRECESSION else 6


# ---------------------------------------------------------------------------
# builders

def make_precession_ocp(x0, params=None, eps_hom=1.0, d_hat_torque=0.0) -> OcpDefinition:
    params = params or models.PrecessionParams()
    bounds = models.default_bounds(ModelId.PRECESSION, params)
    bc = BoundaryConditions(
        x0=tuple(np.asarray(x0, float)),
        xf=(0.0, 0.0),
        fixed_mask=(True, True),
        d_hat=(d_hat_torque,),
        waypoint_offset=(),
    )
    return OcpDefinition(ModelId.PRECESSION, params, CostSpec(eps_hom=eps_hom), bounds, bc)


def make_quadplanar_ocp(
    x0,
    target,
    params=None,
    eps_hom=0.5,
    waypoint_offset=(0.0, 0.0),
    d_hat=(0.0, 0.0),
    t_sat=None,
) -> OcpDefinition:
    """Hover-to-hover transfer; the waypoint offset displaces the target position."""
    params = params or models.QuadPlanarParams()
    bounds = models.default_bounds(ModelId.QUADPLANAR, params, t_sat)
    xf = np.asarray(target, float).copy()
    xf[0] += waypoint_offset[0]
    xf[1] += waypoint_offset[1]
    bc = BoundaryConditions(
        x0=tuple(np.asarray(x0, float)),
        xf=tuple(xf),
        fixed_mask=(True,) * 5,
        waypoint_offset=tuple(waypoint_offset),
        d_hat=tuple(d_hat),
    )
    return OcpDefinition(ModelId.QUADPLANAR, params, CostSpec(eps_hom=eps_hom), bounds, bc)


def make_lander_ocp(
    x0,
    target_pos=(0.0, 0.0),
    params=None,
    smoothing=0.0,
    d_hat=(0.0, 0.0),
    t_sat=None,
) -> OcpDefinition:
    """Soft landing at target_pos with zero velocity; final mass free."""
    params = params or models.Lander2dParams()
    bounds = models.default_bounds(ModelId.LANDER2D, params, t_sat)
    xf = (target_pos[0], target_pos[1], 0.0, 0.0, 0.0)
    bc = BoundaryConditions(
        x0=tuple(np.asarray(x0, float)),
        xf=xf,
        fixed_mask=(True, True, True, True, False),
        d_hat=tuple(d_hat),
        lam_terminal=(0.0, 0.0, 0.0, 0.0, -1.0),
    )
    return OcpDefinition(
        ModelId.LANDER2D, params, CostSpec(eps_hom=1.0, smoothing=smoothing), bounds, bc
    )


def replace_cost_param(ocp: OcpDefinition, value: float) -> OcpDefinition:
    """New OCP with the continuation parameter replaced (eps_hom, or smoothing for the lander)."""
    if ocp.model is ModelId.LANDER2D:
        cost = dataclasses.replace(ocp.cost, smoothing=float(value))
    else:
        cost = dataclasses.replace(ocp.cost, eps_hom=float(value))
    return dataclasses.replace(ocp, cost=cost)


# ---------------------------------------------------------------------------
# Hamiltonian machinery (raw kernels broadcast over leading axes)

def running_cost_raw(ocp: OcpDefinition, u):
    if ocp.model is ModelId.LANDER2D:
        if ocp.cost.smoothing == 0.0:
            return np.zeros(u.shape[:-1])
        return ocp.cost.smoothing * (u[..., 0] / ocp.bounds.hi[0]) ** 2
    eps = ocp.cost.eps_hom
    un = (u - ocp.bounds.mid) / ocp.bounds.halfwidth
    return eps + (1.0 - eps) * np.sum(un**2, axis=-1)


def _solver_dynamics(ocp: OcpDefinition, x, u):
    d_force, d_torque = ocp.d_hat_terms()
    return dynamics_raw(ocp.model, ocp.params, x, u, d_force, d_torque)


def hamiltonian(ocp: OcpDefinition, x, lam, u):
    """H = L(u) + lambda . f(x, u); broadcasts over leading axes."""
    x = np.asarray(x, float)
    lam = np.asarray(lam, float)
    u = np.asarray(u, float)
    f = _solver_dynamics(ocp, x, u)
    return running_cost_raw(ocp, u) + np.sum(lam * f, axis=-1)


def pmp_control_raw(ocp: OcpDefinition, x, lam):
    """Pointwise argmin of H over the admissible control box (no validation)."""
    x = np.asarray(x, float)
    lam = np.asarray(lam, float)
    lo = ocp.bounds.lo
    hi_eff = ocp.bounds.effective_upper()
    batch = np.broadcast_shapes(x.shape[:-1], lam.shape[:-1])
    u = np.empty(batch + (ocp.m,))

    if ocp.model is ModelId.PRECESSION:
        U = ocp.params.u_max
        s = lam[..., 1]
        if ocp.cost.eps_hom == 1.0:
            u[..., 0] = np.where(s > 0, -U, U)  # tie at s=0 resolved to the upper bound
        else:
            u[..., 0] = np.clip(-s * U * U / (2.0 * (1.0 - ocp.cost.eps_hom)), lo[0], hi_eff[0])
        return np.broadcast_to(u, batch + (1,)).copy() if u.shape[:-1] != batch else u

    if ocp.model is ModelId.QUADPLANAR:
        m = ocp.params.mass
        th = x[..., 4]
        cT = (lam[..., 2] * np.sin(th) + lam[..., 3] * np.cos(th)) / m
        cq = lam[..., 4]
        mid, hw = ocp.bounds.mid, ocp.bounds.halfwidth
        eps = ocp.cost.eps_hom
        if eps == 1.0:
            unT = np.where(cT > 0, -1.0, 1.0)
            unq = np.where(cq > 0, -1.0, 1.0)
        else:
            unT = np.clip(-cT * hw[0] / (2.0 * (1.0 - eps)), -1.0, 1.0)
            unq = np.clip(-cq * hw[1] / (2.0 * (1.0 - eps)), -1.0, 1.0)
        u[..., 0] = np.clip(mid[0] + hw[0] * unT, lo[0], hi_eff[0])
        u[..., 1] = np.clip(mid[1] + hw[1] * unq, lo[1], hi_eff[1])
        return u

    # LANDER2D: max-thrust direction opposes the velocity costate.
    lv = lam[..., 2:4]
    nv = np.sqrt(np.sum(lv**2, axis=-1))
    m = x[..., 4]
    safe = nv > 1e-300
    alpha = np.where(
        safe,
        np.arctan2(-lam[..., 2], np.where(safe, -lam[..., 3], 1.0)),
        0.0,
    )
    c = -(nv / m + lam[..., 4] / ocp.params.exhaust_velocity)
    if ocp.cost.smoothing > 0.0:
        T = np.clip(-c * ocp.bounds.hi[0] ** 2 / (2.0 * ocp.cost.smoothing), lo[0], hi_eff[0])
    else:
        T = np.where(c > 0, lo[0], hi_eff[0])  # tie at c=0 resolved to the upper bound
    u[..., 0] = T
    u[..., 1] = alpha
    return u


def pmp_control(ocp: OcpDefinition, x, lam):
    """Validated pointwise optimal control u*(x, lambda)."""
    x = np.asarray(x, float)
    lam = np.asarray(lam, float)
    if x.shape[-1] != ocp.n or lam.shape[-1] != ocp.n:
        raise ValueError("state/costate dimension mismatch")
    if ocp.min_time_like() and not np.any(lam):
        raise ValueError("identically zero costate is rejected for min-time problems")
    return pmp_control_raw(ocp, x, lam)


def costate_rate_raw(ocp: OcpDefinition, x, lam, u):
    """lambda' = -dH/dx in closed form; broadcasts over leading axes."""
    out = np.empty(np.broadcast_shapes(x.shape[:-1], lam.shape[:-1]) + (ocp.n,))
    if ocp.model is ModelId.PRECESSION:
        rho = ocp.params.rho
        out[..., 0] = rho * lam[..., 1]
        out[..., 1] = -rho * lam[..., 0]
        return out
    if ocp.model is ModelId.QUADPLANAR:
        m = ocp.params.mass
        th = x[..., 4]
        T = u[..., 0]
        out[..., 0] = 0.0
        out[..., 1] = 0.0
        out[..., 2] = -lam[..., 0]
        out[..., 3] = -lam[..., 1]
        out[..., 4] = -(T / m) * (lam[..., 2] * np.cos(th) - lam[..., 3] * np.sin(th))
        return out
    T, alpha = u[..., 0], u[..., 1]
    m = x[..., 4]
    out[..., 0] = 0.0
    out[..., 1] = 0.0
    out[..., 2] = -lam[..., 0]
    out[..., 3] = -lam[..., 1]
    out[..., 4] = (T / m**2) * (lam[..., 2] * np.sin(alpha) + lam[..., 3] * np.cos(alpha))
    return out


def costate_dynamics(ocp: OcpDefinition, x, lam, u):
    """Validated adjoint rate lambda' = -dH/dx."""
    x = np.asarray(x, float)
    lam = np.asarray(lam, float)
    u = np.asarray(u, float)
    if x.shape[-1] != ocp.n or lam.shape[-1] != ocp.n or u.shape[-1] != ocp.m:
        raise ValueError("dimension mismatch in costate dynamics")
    return costate_rate_raw(ocp, x, lam, u)


def augmented_rhs(ocp: OcpDefinition):
    """RHS of (x, lambda, J) under the pointwise optimal control, (B, 2n+1) -> (B, 2n+1)."""
    n = ocp.n
    d_force, d_torque = ocp.d_hat_terms()

    def rhs(_s, Z):
        x = Z[..., :n]
        lam = Z[..., n : 2 * n]
        u = pmp_control_raw(ocp, x, lam)
        f = dynamics_raw(ocp.model, ocp.params, x, u, d_force, d_torque)
        ld = costate_rate_raw(ocp, x, lam, u)
        out = np.empty_like(Z)
        out[..., :n] = f
        out[..., n : 2 * n] = ld
        out[..., 2 * n] = running_cost_raw(ocp, u)
        return out

    return rhs


# ---------------------------------------------------------------------------
# extremal solutions

@dataclass
class ExtremalSolution:
    """One converged Pontryagin extremal on a uniform time grid."""

    ocp: OcpDefinition
    t: np.ndarray
    x: np.ndarray
    lam: np.ndarray
    u: np.ndarray
    tf: float
    cost: float
    lam0: np.ndarray
    diagnostics: dict = field(default_factory=dict)

    @property
    def x0(self) -> np.ndarray:
        return self.x[0]

    def hamiltonian_series(self) -> np.ndarray:
        return hamiltonian(self.ocp, self.x, self.lam, self.u)

    def max_abs_hamiltonian(self) -> float:
        return float(np.max(np.abs(self.hamiltonian_series())))


def saturation_fraction(sol: ExtremalSolution, rel_tol: float = 0.01) -> float:
    """Fraction of grid time with any control component within rel_tol of a bound."""
    lo = sol.ocp.bounds.lo
    hi = sol.ocp.bounds.effective_upper()
    width = sol.ocp.bounds.hi - sol.ocp.bounds.lo
    at_bound = (sol.u - lo <= rel_tol * width) | (hi - sol.u <= rel_tol * width)
    if sol.ocp.model is ModelId.LANDER2D:
        at_bound = at_bound[:, :1]  # thrust only; the angle is effectively unconstrained
    return float(np.mean(np.any(at_bound, axis=-1)))


def _cost_from_terminal(ocp: OcpDefinition, xT, running_integral):
    if ocp.model is ModelId.LANDER2D:
        propellant = ocp.bc.x0[4] - xT[4]
        return propellant + running_integral, propellant
    return running_integral, None


def _extract_solution(ocp, payload, tf, lam0, n_nodes, diagnostics) -> ExtremalSolution:
    n = ocp.n
    s_nodes = np.linspace(0.0, 1.0, n_nodes)
    if payload is None:  # exact precession bang-bang flow
        x, lam = _precession_bang_path(ocp, lam0, tf, s_nodes * tf)
        running = tf
        xT = x[-1]
    else:
        Z = payload.dense(s_nodes)[:, 0, :]  # batch row 0
        x = Z[:, :n]
        lam = Z[:, n : 2 * n]
        running = Z[-1, 2 * n]
        xT = Z[-1, :n]
    u = pmp_control_raw(ocp, x, lam)
    cost, propellant = _cost_from_terminal(ocp, xT, running)
    sol = ExtremalSolution(
        ocp=ocp,
        t=s_nodes * tf,
        x=x,
        lam=lam,
        u=u,
        tf=float(tf),
        cost=float(cost),
        lam0=np.asarray(lam0, float).copy(),
        diagnostics=dict(diagnostics),
    )
    sol.diagnostics["max_abs_h"] = sol.max_abs_hamiltonian()
    sol.diagnostics["running_cost"] = float(running)
    if propellant is not None:
        sol.diagnostics["propellant"] = float(propellant)
    sol.diagnostics["saturation_fraction"] = saturation_fraction(sol)
    return sol


# ---------------------------------------------------------------------------
# shooting

@dataclass
class SolverSettings:
    tol: float = 1e-8
    max_iter: int = 40
    max_restarts: int = 20
    rtol: float = 1e-10
    atol: float = 1e-12
    fd_eps: float = 1e-6
    tf_min: float = 1e-6
    n_nodes: int = 201
    seed: int = 2024


def _terminal_lam_targets(ocp: OcpDefinition):
    if ocp.bc.lam_terminal is not None:
        return np.asarray(ocp.bc.lam_terminal, float)
    return np.zeros(ocp.n)


# -- exact flow for the min-time precession problem -------------------------
#
# The costate rotates independently of the state, so switch times are the
# zeros of lam2(t) in closed form and every bang arc is an exact rotation
# about (u/rho, 0).  The resulting shooting map is smooth in (lam0, tf),
# which a finite-difference Jacobian of the discontinuous ODE flow is not.

def _precession_switch_times(lam0, rho, tf):
    if lam0[0] == 0.0 and lam0[1] == 0.0:
        return []
    base = np.arctan2(lam0[1], lam0[0])
    k0 = int(np.ceil((-base) / np.pi + 1e-12))
    times = []
    k = k0
    while True:
        t = (base + k * np.pi) / rho
        if t >= tf - 1e-15:
            break
        if t > 1e-15:
            times.append(t)
        k += 1
    return times


def _precession_lam(lam0, rho, t):
    c, s = np.cos(rho * t), np.sin(rho * t)
    return np.array([c * lam0[0] + s * lam0[1], -s * lam0[0] + c * lam0[1]])


def _precession_arc(x, u, rho, dt):
    c = np.array([u / rho, 0.0])
    y = x - c
    co, si = np.cos(rho * dt), np.sin(rho * dt)
    return c + np.array([co * y[0] + si * y[1], -si * y[0] + co * y[1]])


def _precession_bang_terminal(ocp, lam0, tf):
    rho, U = ocp.params.rho, ocp.params.u_max
    x = np.asarray(ocp.bc.x0, float).copy()
    nodes = [0.0] + _precession_switch_times(lam0, rho, tf) + [tf]
    for a, b in zip(nodes[:-1], nodes[1:]):
        lam_mid = _precession_lam(lam0, rho, 0.5 * (a + b))
        u = U if lam_mid[1] <= 0 else -U
        x = _precession_arc(x, u, rho, b - a)
    return x


def _precession_bang_path(ocp, lam0, tf, ts):
    rho, U = ocp.params.rho, ocp.params.u_max
    xs = np.empty((len(ts), 2))
    lams = np.empty((len(ts), 2))
    nodes = [0.0] + _precession_switch_times(lam0, rho, tf) + [tf]
    x = np.asarray(ocp.bc.x0, float).copy()
    seg = 0
    x_seg_start = x.copy()
    for i, t in enumerate(ts):
        while seg + 1 < len(nodes) - 1 and t > nodes[seg + 1]:
            lam_mid = _precession_lam(lam0, rho, 0.5 * (nodes[seg] + nodes[seg + 1]))
            u = U if lam_mid[1] <= 0 else -U
            x_seg_start = _precession_arc(x_seg_start, u, rho, nodes[seg + 1] - nodes[seg])
            seg += 1
        lam_mid = _precession_lam(lam0, rho, 0.5 * (nodes[seg] + nodes[seg + 1]))
        u = U if lam_mid[1] <= 0 else -U
        xs[i] = _precession_arc(x_seg_start, u, rho, t - nodes[seg])
        lams[i] = _precession_lam(lam0, rho, t)
    return xs, lams


def _uses_exact_flow(ocp: OcpDefinition) -> bool:
    return ocp.model is ModelId.PRECESSION and ocp.cost.eps_hom == 1.0


def _shoot_batch(ocp, lam0s, tfs, settings):
    """Integrate the augmented system for B (lam0, tf) rows over s in [0,1]."""
    n = ocp.n
    B = lam0s.shape[0]
    x0 = np.asarray(ocp.bc.x0, float)
    Z0 = np.concatenate(
        [np.tile(x0, (B, 1)), lam0s, np.zeros((B, 1))], axis=1
    )
    base = augmented_rhs(ocp)
    scale = np.asarray(tfs, float)[:, None]

    def rhs(s, Z):
        return scale * base(s, Z)

    return integrate_batch(rhs, (0.0, 1.0), Z0, rtol=settings.rtol, atol=settings.atol)


def _terminal_batch(ocp, lam_rows, tf_rows, settings):
    """Terminal augmented states (B, 2n+1) plus the extraction payload."""
    if _uses_exact_flow(ocp):
        rho = ocp.params.rho
        B = len(tf_rows)
        ZT = np.empty((B, 2 * ocp.n + 1))
        for b in range(B):
            ZT[b, : ocp.n] = _precession_bang_terminal(ocp, lam_rows[b], tf_rows[b])
            ZT[b, ocp.n : 2 * ocp.n] = _precession_lam(lam_rows[b], rho, tf_rows[b])
            ZT[b, 2 * ocp.n] = tf_rows[b]  # running cost integral: L = 1
        return ZT, None
    res = _shoot_batch(ocp, lam_rows, np.asarray(tf_rows, float), settings)
    return res.y[-1], res


def _residuals_from_terminal(ocp, ZT, lam0s):
    """Scaled residual rows for terminal batch states ZT (B, 2n+1)."""
    n = ocp.n
    fixed = np.asarray(ocp.bc.fixed_mask, bool)
    free = ~fixed
    xf = np.asarray(ocp.bc.xf, float)
    xs = ocp.x_scale()
    lam_t = _terminal_lam_targets(ocp)
    parts = [(ZT[:, :n] - xf)[:, fixed] / xs[fixed]]
    if np.any(free):
        parts.append((ZT[:, n : 2 * n] - lam_t)[:, free])
    if ocp.bc.tf_free:
        x0 = np.asarray(ocp.bc.x0, float)
        u0 = pmp_control_raw(ocp, x0, lam0s)
        H0 = hamiltonian(ocp, x0, lam0s, u0)
        parts.append(H0[:, None])
    return np.concatenate(parts, axis=1)


def _unpack(ocp, zeta):
    """zeta = (lam0, log tf): the log keeps tf positive and steps multiplicative."""
    n = ocp.n
    lam0 = zeta[:n]
    tf = float(np.exp(zeta[n])) if ocp.bc.tf_free else None
    return lam0, tf


def default_tf_guess(ocp: OcpDefinition) -> float:
    x0 = np.asarray(ocp.bc.x0, float)
    xf = np.asarray(ocp.bc.xf, float)
    if ocp.model is ModelId.PRECESSION:
        return float(np.linalg.norm(x0) / ocp.params.u_max * 2.0 + 1.0 / ocp.params.rho)
    if ocp.model is ModelId.QUADPLANAR:
        return float(np.linalg.norm((xf - x0)[:2]) / 1.5 + 1.0)
    return float(np.linalg.norm((xf - x0)[:2]) / 25.0 + 20.0)


def _guess_lam_scale(ocp: OcpDefinition) -> np.ndarray:
    if ocp.model is ModelId.LANDER2D:
        return np.array([1e-3, 1e-3, 0.3, 0.3, 1.0])
    return np.ones(ocp.n)


def default_guess(ocp: OcpDefinition, rng: np.random.Generator, attempt: int = 0):
    """Initial (lam0, tf): near-zero costates first for smooth costs, random sphere after.

    The first smooth guess is small but not exactly zero: at hover-like
    starts u*(0) makes f(x0, u0) = 0 and the H(0) residual row would lose its
    entire gradient.
    """
    n = ocp.n
    v = rng.normal(size=n)
    v /= np.linalg.norm(v)
    if attempt == 0 and not ocp.min_time_like():
        lam0 = 1e-2 * v * _guess_lam_scale(ocp)
    else:
        lam0 = v * _guess_lam_scale(ocp)
        if ocp.model is ModelId.LANDER2D:
            lam0[4] = -abs(lam0[4])  # mass costate ends at -1; start negative
    tf = default_tf_guess(ocp)
    if attempt > 0:
        tf *= float(rng.uniform(0.6, 1.6))
    return lam0, tf


def _degenerate_solution(ocp, settings) -> ExtremalSolution:
    """x0 already satisfies the fixed boundary components: zero-length transfer."""
    x0 = np.asarray(ocp.bc.x0, float)
    lam0 = np.zeros(ocp.n)
    if ocp.bc.tf_free:
        rng = np.random.default_rng(settings.seed)
        for _ in range(32):
            d = rng.normal(size=ocp.n)
            d /= np.linalg.norm(d)

            def h_of(s, d=d):
                lam = s * d
                u = pmp_control_raw(ocp, x0, lam)
                return float(hamiltonian(ocp, x0, lam, u))

            try:
                lim = 1.0
                for _ in range(40):
                    if h_of(lim) < 0:
                        break
                    lim *= 2.0
                else:
                    continue
                s_root = brentq(h_of, 0.0, lim, xtol=1e-14)
            except ValueError:
                continue
            lam0 = s_root * d
            break
    tf = settings.tf_min
    lam_t = _terminal_lam_targets(ocp)
    free = ~np.asarray(ocp.bc.fixed_mask, bool)
    lam0[free] = lam_t[free]
    ZT, payload = _terminal_batch(ocp, lam0[None, :], np.array([tf]), settings)
    rnorm = float(np.linalg.norm(_residuals_from_terminal(ocp, ZT, lam0[None, :])))
    return _extract_solution(
        ocp, payload, tf, lam0, settings.n_nodes,
        {"boundary_residual": rnorm, "newton_iters": 0, "restarts": 0, "degenerate": True},
    )


def solve_tpbvp(
    ocp: OcpDefinition,
    guess=None,
    settings: SolverSettings | None = None,
    rng: np.random.Generator | None = None,
) -> ExtremalSolution:
    """Single shooting with damped Newton on (lambda0[, tf]).

    guess: optional (lam0, tf). Raises TpbvpFailure after the restart budget
    is exhausted; re-feeding a converged solution terminates without Newton
    steps (the residual is checked before iterating).
    """
    settings = settings or SolverSettings()
    rng = rng or np.random.default_rng(settings.seed)
    n = ocp.n
    fixed = np.asarray(ocp.bc.fixed_mask, bool)
    x0 = np.asarray(ocp.bc.x0, float)
    xf = np.asarray(ocp.bc.xf, float)
    xs = ocp.x_scale()
    if np.linalg.norm(((x0 - xf) / xs)[fixed]) <= 1e-12 and ocp.bc.tf_free:
        return _degenerate_solution(ocp, settings)

    n_unknown = n + (1 if ocp.bc.tf_free else 0)
    last_error = None
    best_residual = np.inf
    last_condition = None
    total_iters = 0

    log_tf_lo = np.log(settings.tf_min)
    log_tf_hi = np.log(1e4 * default_tf_guess(ocp))

    def residual_of(zeta):
        lam0_, tf_ = _unpack(ocp, zeta)
        tf_eff = tf_ if ocp.bc.tf_free else default_tf_guess(ocp)
        ZT, payload = _terminal_batch(ocp, lam0_[None, :], np.array([tf_eff]), settings)
        R = _residuals_from_terminal(ocp, ZT, lam0_[None, :])[0]
        return R, payload

    for attempt in range(settings.max_restarts + 1):
        if attempt == 0 and guess is not None:
            lam0 = np.asarray(guess[0], float).copy()
            tf = float(guess[1])
        else:
            lam0, tf = default_guess(ocp, rng, attempt)
        tf = max(tf, settings.tf_min)
        zeta = np.concatenate([lam0, [np.log(tf)]]) if ocp.bc.tf_free else lam0.copy()

        try:
            R, ode_res = residual_of(zeta)
        except (StiffnessError, ValueError) as exc:
            last_error = exc
            continue
        rnorm = np.linalg.norm(R)

        converged = rnorm <= settings.tol
        iters = 0
        failed = False
        while not converged and iters < settings.max_iter:
            iters += 1
            total_iters += 1
            # batched forward-difference Jacobian: base row + one row per unknown
            deltas = settings.fd_eps * np.maximum(np.abs(zeta), 1.0)
            rows = np.tile(zeta, (n_unknown + 1, 1))
            for k in range(n_unknown):
                rows[k + 1, k] += deltas[k]
            lam_rows = rows[:, :n]
            tf_rows = (
                np.exp(rows[:, n])
                if ocp.bc.tf_free
                else np.full(n_unknown + 1, default_tf_guess(ocp))
            )
            try:
                ZTb, _ = _terminal_batch(ocp, lam_rows, tf_rows, settings)
            except (StiffnessError, ValueError) as exc:
                last_error = exc
                failed = True
                break
            Rb = _residuals_from_terminal(ocp, ZTb, lam_rows)
            J = (Rb[1:] - Rb[0]).T / deltas
            cond = np.linalg.cond(J)
            last_condition = cond
            if np.isfinite(cond) and cond < 1e12:
                step = np.linalg.solve(J, -Rb[0])
            else:
                # rank-deficient map (e.g. hover-start degeneracy): damped
                # least-squares step makes progress in the range space
                step = np.linalg.lstsq(J, -Rb[0], rcond=1e-12)[0]
            if not np.all(np.isfinite(step)):
                last_error = TpbvpFailure(
                    "singular shooting Jacobian",
                    residual_norm=rnorm,
                    iterations=iters,
                    condition=cond,
                )
                failed = True
                break

            # trust-region caps: at most x2 on tf, bounded costate move
            shrink = 1.0
            if ocp.bc.tf_free and abs(step[n]) > 0.7:
                shrink = min(shrink, 0.7 / abs(step[n]))
            lam_step = np.linalg.norm(step[:n])
            lam_cap = 10.0 * max(1.0, np.linalg.norm(zeta[:n]))
            if lam_step > lam_cap:
                shrink = min(shrink, lam_cap / lam_step)
            step = step * shrink

            # damped line search on the residual norm
            alpha = 1.0
            accepted = False
            for _ in range(10):
                zeta_try = zeta + alpha * step
                if ocp.bc.tf_free:
                    zeta_try[n] = np.clip(zeta_try[n], log_tf_lo, log_tf_hi)
                try:
                    R_try, ode_try = residual_of(zeta_try)
                except (StiffnessError, ValueError):
                    alpha *= 0.5
                    continue
                rnorm_try = np.linalg.norm(R_try)
                if rnorm_try < (1.0 - 1e-4 * alpha) * rnorm or rnorm_try <= settings.tol:
                    zeta, R, rnorm, ode_res = zeta_try, R_try, rnorm_try, ode_try
                    accepted = True
                    break
                alpha *= 0.5
            if not accepted:
                failed = True
                break
            converged = rnorm <= settings.tol

        best_residual = min(best_residual, rnorm)
        if converged and not failed:
            lam0_, tf_ = _unpack(ocp, zeta)
            tf_eff = tf_ if ocp.bc.tf_free else default_tf_guess(ocp)
            return _extract_solution(
                ocp,
                ode_res,
                tf_eff,
                lam0_,
                settings.n_nodes,
                {
                    "boundary_residual": float(rnorm),
                    "newton_iters": iters,
                    "restarts": attempt,
                },
            )

    raise TpbvpFailure(
        f"shooting failed after {settings.max_restarts + 1} attempts "
        f"(best residual {best_residual:.3e}; last error: {last_error})",
        residual_norm=best_residual,
        iterations=total_iters,
        condition=last_condition,
    )


def continuation_solve(
    ocp: OcpDefinition,
    eps_path,
    seed_guess=None,
    settings: SolverSettings | None = None,
    rng: np.random.Generator | None = None,
    min_step: float = 1e-3,
):
    """Warm-started solves along a monotone cost-parameter path.

    The parameter is eps_hom (precession/quadcopter) or the smoothing weight
    (lander).  A failing node is approached by bisecting the parameter step;
    below min_step the continuation stalls and reports partial results.
    """
    settings = settings or SolverSettings()
    rng = rng or np.random.default_rng(settings.seed)
    path = [float(p) for p in eps_path]
    if len(path) == 0:
        raise ValueError("empty continuation path")
    d = np.diff(path)
    if len(path) > 1 and not (np.all(d > 0) or np.all(d < 0)):
        raise ValueError("continuation path must be strictly monotone")

    solutions = []
    guess = seed_guess
    prev_param = None
    work = [(p, True) for p in path]
    i = 0
    while i < len(work):
        param, is_node = work[i]
        sub = replace_cost_param(ocp, param)
        try:
            sol = solve_tpbvp(sub, guess=guess, settings=settings, rng=rng)
        except TpbvpFailure as exc:
            if prev_param is None or abs(param - prev_param) <= min_step:
                raise ContinuationStall(
                    f"continuation stalled at parameter {param:.6g}: {exc}",
                    partial=solutions,
                    failed_param=param,
                    last_error=exc,
                ) from exc
            work.insert(i, (0.5 * (param + prev_param), False))
            continue
        guess = (sol.lam0, sol.tf)
        prev_param = param
        if is_node:
            solutions.append(sol)
        i += 1
    return solutions


# ---------------------------------------------------------------------------
# switching structure

@dataclass
class SwitchingSeries:
    t: np.ndarray
    values: np.ndarray  # (K, n_comp)
    labels: tuple
    sign_changes: tuple
    singular: tuple  # per component: |S| below band over a sustained window


def _count_sign_changes(series, band):
    s = series[np.abs(series) > band]
    if s.size < 2:
        return 0
    signs = np.sign(s)
    return int(np.sum(signs[1:] != signs[:-1]))


def switching_function(sol: ExtremalSolution, band_rel: float = 1e-6, window: int = 9) -> SwitchingSeries:
    """Switching function(s) along a converged extremal.

    Sign convention: the associated control sits at its upper bound where
    S < -band and at its lower bound where S > band.  A sustained |S| <= band
    stretch flags a (potential) singular arc.
    """
    ocp = sol.ocp
    if not np.any(sol.lam):
        raise ValueError("identically zero costates: abnormal extremals are out of scope")
    if ocp.model is ModelId.PRECESSION:
        vals = sol.lam[:, 1:2]
        labels = ("u",)
    elif ocp.model is ModelId.QUADPLANAR:
        th = sol.x[:, 4]
        sT = (sol.lam[:, 2] * np.sin(th) + sol.lam[:, 3] * np.cos(th)) / ocp.params.mass
        vals = np.stack([sT, sol.lam[:, 4]], axis=1)
        labels = ("T", "q")
    else:
        nv = np.linalg.norm(sol.lam[:, 2:4], axis=1)
        vex = ocp.params.exhaust_velocity
        vals = (-(sol.lam[:, 4] + nv * vex / sol.x[:, 4]))[:, None]
        labels = ("T",)
    band = band_rel * max(1.0, float(np.max(np.abs(vals))))
    changes = tuple(_count_sign_changes(vals[:, j], band) for j in range(vals.shape[1]))
    singular = []
    for j in range(vals.shape[1]):
        below = np.abs(vals[:, j]) <= band
        run = 0
        flag = False
        for b in below:
            run = run + 1 if b else 0
            if run >= window:
                flag = True
                break
        singular.append(flag)
    return SwitchingSeries(sol.t.copy(), vals, labels, changes, tuple(singular))


# ---------------------------------------------------------------------------
# serialization

def ocp_to_dict(ocp: OcpDefinition) -> dict:
    return {
        "model": ocp.model.value,
        "params": dataclasses.asdict(ocp.params),
        "cost": dataclasses.asdict(ocp.cost),
        "bounds": {
            "lower": list(ocp.bounds.lo),
            "upper": list(ocp.bounds.hi),
            "t_sat": ocp.bounds.t_sat,
        },
        "bc": {
            "x0": list(ocp.bc.x0),
            "xf": list(ocp.bc.xf),
            "fixed_mask": [bool(b) for b in ocp.bc.fixed_mask],
            "tf_free": ocp.bc.tf_free,
            "waypoint_offset": list(ocp.bc.waypoint_offset),
            "d_hat": list(ocp.bc.d_hat),
            "lam_terminal": None
            if ocp.bc.lam_terminal is None
            else list(ocp.bc.lam_terminal),
        },
    }


def ocp_from_dict(d: dict) -> OcpDefinition:
    model = ModelId(d["model"])
    params_cls = {
        ModelId.PRECESSION: models.PrecessionParams,
        ModelId.QUADPLANAR: models.QuadPlanarParams,
        ModelId.LANDER2D: models.Lander2dParams,
    }[model]
    params = params_cls(**d["params"])
    cost = CostSpec(**d["cost"])
    b = d["bounds"]
    bounds = ControlBounds(tuple(b["lower"]), tuple(b["upper"]), b["t_sat"])
    bc_d = d["bc"]
    bc = BoundaryConditions(
        x0=tuple(bc_d["x0"]),
        xf=tuple(bc_d["xf"]),
        fixed_mask=tuple(bc_d["fixed_mask"]),
        tf_free=bc_d["tf_free"],
        waypoint_offset=tuple(bc_d["waypoint_offset"]),
        d_hat=tuple(bc_d["d_hat"]),
        lam_terminal=None if bc_d["lam_terminal"] is None else tuple(bc_d["lam_terminal"]),
    )
    return OcpDefinition(model, params, cost, bounds, bc)


def solution_to_record(sol: ExtremalSolution) -> dict:
    return {
        "ocp": ocp_to_dict(sol.ocp),
        "tf": sol.tf,
        "cost": sol.cost,
        "lam0": sol.lam0.tolist(),
        "t": sol.t.tolist(),
        "x": sol.x.tolist(),
        "lam": sol.lam.tolist(),
        "u": sol.u.tolist(),
        "diagnostics": {
            k: (bool(v) if isinstance(v, (bool, np.bool_)) else float(v))
            for k, v in sol.diagnostics.items()
        },
    }


def solution_from_record(d: dict) -> ExtremalSolution:
    return ExtremalSolution(
        ocp=ocp_from_dict(d["ocp"]),
        t=np.asarray(d["t"], float),
        x=np.asarray(d["x"], float),
        lam=np.asarray(d["lam"], float),
        u=np.asarray(d["u"], float),
        tf=float(d["tf"]),
        cost=float(d["cost"]),
        lam0=np.asarray(d["lam0"], float),
        diagnostics=dict(d["diagnostics"]),
    )


def save_solutions_jsonl(path, sols):
    with open(path, "w") as fh:
        for sol in sols:
            fh.write(json.dumps(solution_to_record(sol), sort_keys=True) + "\n")


def load_solutions_jsonl(path):
    out = []
    with open(path) as fh:
        for i, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(solution_from_record(json.loads(line)))
            except (json.JSONDecodeError, KeyError) as exc:
                raise ValueError(f"{path}: corrupt solution record at line {i}: {exc}") from exc
    return out


def export_solution_csv(sol: ExtremalSolution, path):
    """Delimited (t, x, u, lambda, S) table for external plotting."""
    sw = switching_function(sol)
    n, m = sol.ocp.n, sol.ocp.m
    state_names = models.STATE_NAMES[sol.ocp.model]
    ctrl_names = models.CONTROL_NAMES[sol.ocp.model]
    header = (
        ["t"]
        + list(state_names)
        + list(ctrl_names)
        + [f"lam_{s}" for s in state_names]
        + [f"S_{c}" for c in sw.labels]
    )
    data = np.column_stack([sol.t, sol.x, sol.u, sol.lam, sw.values])
    with open(path, "w") as fh:
        fh.write(",".join(header) + "\n")
        for row in data:
            fh.write(",".join(repr(float(v)) for v in row) + "\n")
