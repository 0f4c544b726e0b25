"""Independent oracles for the 2-state precession model.

Two routes to the minimum time and the optimal feedback, with no shared
machinery with the indirect solver:

* the classical bang-bang synthesis (the switching curve is a chain of
  semicircles of radius u_max/rho centered at odd multiples of u_max/rho on
  the w1 axis), evaluated with exact circle geometry;
* a semi-Lagrangian value-iteration solver on a rectangular grid.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .models import ModelId, PrecessionParams, dynamics_raw

_TWO_PI = 2.0 * np.pi


# ---------------------------------------------------------------------------
# analytic synthesis (unit problem: rho = u_max = 1; general case rescales)

def _gamma_unit(x):
    """Switching curve height at abscissa x: scalloped chain of unit semicircles."""
    x = np.asarray(x, dtype=float)
    xi = np.mod(np.abs(x), 2.0)
    g = np.sqrt(np.maximum(xi * (2.0 - xi), 0.0))
    return -np.sign(x) * g


def _feedback_unit(x, y):
    """Synthesis control in {-1, +1}; on-curve points get the post-switch/riding value."""
    d = y - _gamma_unit(x)
    if d > 0.0:
        return -1.0
    if d < 0.0:
        return 1.0
    if x == 0.0 and y == 0.0:
        return 0.0
    # on the curve: final arcs ride, outer scallops take the post-switch sign
    return 1.0 if x > 0.0 else -1.0


def _rotate_cw(dx, dy, theta):
    c, s = np.cos(theta), np.sin(theta)
    return dx * c + dy * s, -dx * s + dy * c


def _first_hit(x, y, u0, n_scan=4096):
    """First clockwise angle at which the arc around (u0, 0) meets the curve."""
    dx, dy = x - u0, y
    thetas = np.linspace(0.0, _TWO_PI, n_scan + 1)
    px, py = _rotate_cw(dx, dy, thetas)
    g = (py) - _gamma_unit(px + u0)
    s0 = np.sign(g[0])
    flips = np.nonzero(np.sign(g[1:]) != s0)[0]
    if flips.size == 0:
        raise RuntimeError("synthesis arc failed to meet the switching curve")
    k = flips[0]
    lo, hi = thetas[k], thetas[k + 1]
    glo = g[k]
    for _ in range(80):
        mid = 0.5 * (lo + hi)
        mx, my = _rotate_cw(dx, dy, mid)
        gm = my - _gamma_unit(mx + u0)
        if np.sign(gm) == np.sign(glo) and gm != 0.0:
            lo, glo = mid, gm
        else:
            hi = mid
    theta = 0.5 * (lo + hi)
    hx, hy = _rotate_cw(dx, dy, theta)
    return theta, hx + u0, hy


def _ride_time(px, py, tol=1e-9):
    """Remaining time if (px, py) lies on a final arc, else None."""
    if 0.0 < px <= 2.0 + tol and py <= tol:
        return np.arctan2(min(py, 0.0), px - 1.0) + np.pi
    if -2.0 - tol <= px < 0.0 and py >= -tol:
        return np.arctan2(max(py, 0.0), px + 1.0)
    return None


def _chain(px, py):
    """(time, switches) for the synthesis tail starting at an on-curve point."""
    t = 0.0
    switches = 0
    for _ in range(64):
        ride = _ride_time(px, py)
        if ride is not None:
            return t + ride, switches
        u_new = 1.0 if px > 0 else -1.0  # lower scallops switch to +1, upper to -1
        px, py = 2.0 * u_new - px, -py
        t += np.pi
        switches += 1
    raise RuntimeError("synthesis scallop chain did not terminate")


def _min_time_unit_full(x, y):
    """(time, switches, first_switch_time, first_control) for the unit problem."""
    if x * x + y * y <= 1e-24:
        return 0.0, 0, None, 0.0
    d = y - _gamma_unit(x)
    if d == 0.0:
        ride = _ride_time(x, y)
        if ride is not None:
            return ride, 0, None, (1.0 if x > 0 else -1.0)
        tail_t, tail_sw = _chain(x, y)
        return tail_t, tail_sw + 1, 0.0, _feedback_unit(x, y)
    u0 = -1.0 if d > 0.0 else 1.0
    theta, px, py = _first_hit(x, y, u0)
    tail_t, tail_sw = _chain(px, py)
    return theta + tail_t, tail_sw + 1, theta, u0


def analytic_min_time(x, params: PrecessionParams | None = None) -> float:
    """Minimum time to the origin from state x under |u| <= u_max."""
    params = params or PrecessionParams()
    z = np.asarray(x, float) * (params.rho / params.u_max)
    t_unit, _, _, _ = _min_time_unit_full(z[0], z[1])
    return float(t_unit / params.rho)


def analytic_switch_count(x, params: PrecessionParams | None = None) -> int:
    """Number of control switches along the time-optimal trajectory from x."""
    params = params or PrecessionParams()
    z = np.asarray(x, float) * (params.rho / params.u_max)
    _, sw, _, _ = _min_time_unit_full(z[0], z[1])
    return int(sw)


def analytic_min_time_feedback(x, params: PrecessionParams | None = None) -> float:
    """Time-optimal feedback in {-u_max, +u_max} (0 exactly at the target)."""
    params = params or PrecessionParams()
    z = np.asarray(x, float) * (params.rho / params.u_max)
    return float(_feedback_unit(z[0], z[1]) * params.u_max)


def switching_curve_height(w1, params: PrecessionParams | None = None):
    """Physical-units switching curve w2 = Gamma(w1)."""
    params = params or PrecessionParams()
    scale = params.u_max / params.rho
    return _gamma_unit(np.asarray(w1, float) / scale) * scale


def switching_curve_points(params: PrecessionParams | None = None, w1_max=2.0, n=4001):
    """Dense polyline of the switching curve over |w1| <= w1_max."""
    params = params or PrecessionParams()
    w1 = np.linspace(-w1_max, w1_max, n)
    return np.column_stack([w1, switching_curve_height(w1, params)])


def precession_min_time_guess(ocp) -> tuple:
    """Shooting seed (lam0, tf) for the min-time precession problem.

    Reconstructs the rotating costate whose zeros sit at the synthesis switch
    times and scales it so H(0) = 0.
    """
    params = ocp.params
    x0 = np.asarray(ocp.bc.x0, float)
    rho, U = params.rho, params.u_max
    z = x0 * (rho / U)
    t_unit, _, t1_unit, u0_unit = _min_time_unit_full(z[0], z[1])
    tf = t_unit / rho
    u0 = u0_unit * U
    if t1_unit is None:
        t1 = tf  # no interior switch: place the costate zero at the far end
    else:
        t1 = min(t1_unit, np.pi - 1e-9) / rho
    w1, w2 = x0
    denom = np.cos(rho * t1) * rho * w2 + np.sin(rho * t1) * (-rho * w1 + u0)
    B = 1.0 / denom if abs(denom) > 1e-12 else (u0 / U if u0 else 1.0)
    lam0 = np.array([-B * np.cos(rho * t1), -B * np.sin(rho * t1)])
    return lam0, max(tf, 1e-3)


def closed_loop_arrival_times(
    params: PrecessionParams,
    states,
    dt=2e-4,
    t_max=30.0,
    arrive_radius=1e-3,
):
    """Fixed-step RK4 rollout of the analytic feedback for a batch of states.

    Control is held over each step (zero-order hold).  Returns arrival times
    (np.nan where the radius was not reached before t_max).
    """
    X = np.atleast_2d(np.asarray(states, float)).copy()
    B = X.shape[0]
    times = np.full(B, np.nan)
    active = np.ones(B, bool)
    scale = params.rho / params.u_max
    n_steps = int(np.ceil(t_max / dt))
    for k in range(n_steps):
        r2 = np.sum(X**2, axis=1)
        arrived = active & (r2 <= arrive_radius**2)
        times[arrived] = k * dt
        active &= ~arrived
        if not np.any(active):
            break
        Z = X[active] * scale
        d = Z[:, 1] - _gamma_unit(Z[:, 0])
        u = np.where(d > 0, -params.u_max, params.u_max)
        u = np.where(d == 0, np.where(Z[:, 0] > 0, params.u_max, -params.u_max), u)
        u2 = u[:, None]

        def f(x):
            return dynamics_raw(ModelId.PRECESSION, params, x, u2)

        x = X[active]
        k1 = f(x)
        k2 = f(x + 0.5 * dt * k1)
        k3 = f(x + 0.5 * dt * k2)
        k4 = f(x + dt * k3)
        X[active] = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return times


# ---------------------------------------------------------------------------
# semi-Lagrangian value iteration

BIG_VALUE = 100.0


@dataclass(frozen=True)
class GridSpec:
    """Rectangular grid for the 2-state HJB solve."""

    bounds: tuple = ((-2.0, 2.0), (-2.0, 2.0))
    nodes: int = 201
    n_controls: int = 3
    tol: float = 1e-9
    max_sweeps: int = 30000

    def __post_init__(self):
        if self.nodes < 51:
            raise ValueError("grid needs at least 51 nodes per axis")
        for lo, hi in self.bounds:
            if not (lo < 0.0 < hi):
                raise ValueError("grid domain must contain the target (origin)")
        if self.n_controls < 2:
            raise ValueError("need at least the two bang controls")

    def axes(self):
        return (
            np.linspace(self.bounds[0][0], self.bounds[0][1], self.nodes),
            np.linspace(self.bounds[1][0], self.bounds[1][1], self.nodes),
        )


class ValueIterationError(RuntimeError):
    def __init__(self, message, residual_history):
        super().__init__(message)
        self.residual_history = residual_history


@dataclass
class ValueField:
    """Converged minimum-time value v and greedy feedback on the grid."""

    spec: GridSpec
    params: PrecessionParams
    v: np.ndarray  # (N, N), axis 0 = w1
    u_star: np.ndarray
    flagged: np.ndarray  # nodes whose lookups were clamped at the domain edge
    h: float
    sweeps: int
    residual_history: list = field(default_factory=list)

    def value_at(self, points):
        """Bilinear value at query points (..., 2) inside the domain."""
        pts = np.asarray(points, float)
        ax1, ax2 = self.spec.axes()
        q = np.atleast_2d(pts)
        if np.any(q[:, 0] < ax1[0]) or np.any(q[:, 0] > ax1[-1]) or np.any(
            q[:, 1] < ax2[0]
        ) or np.any(q[:, 1] > ax2[-1]):
            raise ValueError("query outside the value grid domain")
        out = _bilinear(self.v, ax1, ax2, q[:, 0], q[:, 1])
        return float(out[0]) if pts.ndim == 1 else out.reshape(pts.shape[:-1])

    def to_dict(self) -> dict:
        return {
            "bounds": [list(b) for b in self.spec.bounds],
            "nodes": self.spec.nodes,
            "n_controls": self.spec.n_controls,
            "tol": self.spec.tol,
            "rho": self.params.rho,
            "u_max": self.params.u_max,
            "h": self.h,
            "sweeps": self.sweeps,
            "v": self.v.ravel().tolist(),
            "u_star": self.u_star.ravel().tolist(),
            "flagged": self.flagged.ravel().astype(int).tolist(),
        }


def value_field_from_dict(d: dict) -> ValueField:
    spec = GridSpec(
        bounds=tuple(tuple(b) for b in d["bounds"]),
        nodes=d["nodes"],
        n_controls=d["n_controls"],
        tol=d["tol"],
    )
    n = spec.nodes
    return ValueField(
        spec=spec,
        params=PrecessionParams(rho=d["rho"], u_max=d["u_max"]),
        v=np.asarray(d["v"], float).reshape(n, n),
        u_star=np.asarray(d["u_star"], float).reshape(n, n),
        flagged=np.asarray(d["flagged"], bool).reshape(n, n),
        h=d["h"],
        sweeps=d["sweeps"],
    )


def _bilinear(v, ax1, ax2, qx, qy):
    dx = ax1[1] - ax1[0]
    dy = ax2[1] - ax2[0]
    fx = np.clip((qx - ax1[0]) / dx, 0.0, len(ax1) - 1.000001)
    fy = np.clip((qy - ax2[0]) / dy, 0.0, len(ax2) - 1.000001)
    i0 = fx.astype(int)
    j0 = fy.astype(int)
    wx = fx - i0
    wy = fy - j0
    v00 = v[i0, j0]
    v10 = v[i0 + 1, j0]
    v01 = v[i0, j0 + 1]
    v11 = v[i0 + 1, j0 + 1]
    return (
        v00 * (1 - wx) * (1 - wy)
        + v10 * wx * (1 - wy)
        + v01 * (1 - wx) * wy
        + v11 * wx * wy
    )


def value_iteration(params: PrecessionParams, grid: GridSpec) -> ValueField:
    """Fixed-point sweeps of v(x) = min_u [h + v(x + h f(x, u))] with bilinear lookups.

    Initialization is the big-value supersolution clamped at BIG_VALUE, which
    keeps every sweep monotone non-increasing node-wise.
    """
    ax1, ax2 = grid.axes()
    N = grid.nodes
    X1, X2 = np.meshgrid(ax1, ax2, indexing="ij")
    controls = np.linspace(-params.u_max, params.u_max, grid.n_controls)

    # CFL-like time step: half the min cell traversal time at max speed
    speeds = []
    for u in (-params.u_max, params.u_max):
        f = dynamics_raw(
            ModelId.PRECESSION,
            params,
            np.stack([X1, X2], axis=-1),
            np.full(X1.shape + (1,), u),
        )
        speeds.append(np.sqrt(np.sum(f**2, axis=-1)))
    vmax = float(np.max(speeds))
    cell = min(ax1[1] - ax1[0], ax2[1] - ax2[0])
    h = 0.5 * cell / vmax

    # precompute foot-point interpolation stencils per control
    stencils = []
    flagged = np.zeros((N, N), dtype=bool)
    for u in controls:
        f = dynamics_raw(
            ModelId.PRECESSION,
            params,
            np.stack([X1, X2], axis=-1),
            np.full(X1.shape + (1,), u),
        )
        qx = X1 + h * f[..., 0]
        qy = X2 + h * f[..., 1]
        out = (qx < ax1[0]) | (qx > ax1[-1]) | (qy < ax2[0]) | (qy > ax2[-1])
        flagged |= out
        dx = ax1[1] - ax1[0]
        dy = ax2[1] - ax2[0]
        fx = np.clip((qx - ax1[0]) / dx, 0.0, N - 1.000001)
        fy = np.clip((qy - ax2[0]) / dy, 0.0, N - 1.000001)
        i0 = fx.astype(np.int64)
        j0 = fy.astype(np.int64)
        wx = (fx - i0).ravel()
        wy = (fy - j0).ravel()
        base = (i0 * N + j0).ravel()
        stencils.append(
            (
                base,
                base + N,
                base + 1,
                base + N + 1,
                (1 - wx) * (1 - wy),
                wx * (1 - wy),
                (1 - wx) * wy,
                wx * wy,
            )
        )

    # target: the node cell containing the origin (half cell diagonal)
    r_tgt = 0.5 * np.hypot(ax1[1] - ax1[0], ax2[1] - ax2[0])
    target = (X1**2 + X2**2) <= r_tgt**2

    v = np.full((N, N), BIG_VALUE)
    v[target] = 0.0
    history = []
    sweeps = 0
    for sweeps in range(1, grid.max_sweeps + 1):
        flat = v.ravel()
        best = None
        for (b00, b10, b01, b11, w00, w10, w01, w11) in stencils:
            cand = h + (
                flat[b00] * w00 + flat[b10] * w10 + flat[b01] * w01 + flat[b11] * w11
            )
            best = cand if best is None else np.minimum(best, cand)
        v_new = np.minimum(best.reshape(N, N), BIG_VALUE)
        v_new[target] = 0.0
        resid = float(np.max(np.abs(v_new - v)))
        history.append(resid)
        v = v_new
        if resid <= grid.tol:
            break
    else:
        raise ValueIterationError(
            f"value iteration did not converge in {grid.max_sweeps} sweeps "
            f"(last residual {history[-1]:.3e})",
            history,
        )

    # greedy feedback; ties resolve to the larger control (upper bound)
    flat = v.ravel()
    u_star = np.zeros((N, N))
    best = np.full(N * N, np.inf)
    for u, (b00, b10, b01, b11, w00, w10, w01, w11) in zip(controls, stencils):
        cand = h + (
            flat[b00] * w00 + flat[b10] * w10 + flat[b01] * w01 + flat[b11] * w11
        )
        take = cand <= best
        best = np.where(take, cand, best)
        u_star.ravel()[take] = u
    u_star[target] = 0.0

    return ValueField(grid, params, v, u_star, flagged, h, sweeps, history)


def dp_residual(field: ValueField) -> float:
    """Max |v - min_u(h + interp v at foot)| over interior unflagged nodes."""
    params, grid = field.params, field.spec
    ax1, ax2 = grid.axes()
    N = grid.nodes
    X1, X2 = np.meshgrid(ax1, ax2, indexing="ij")
    controls = np.linspace(-params.u_max, params.u_max, grid.n_controls)
    best = None
    for u in controls:
        f = dynamics_raw(
            ModelId.PRECESSION,
            params,
            np.stack([X1, X2], axis=-1),
            np.full(X1.shape + (1,), u),
        )
        qx = np.clip(X1 + field.h * f[..., 0], ax1[0], ax1[-1])
        qy = np.clip(X2 + field.h * f[..., 1], ax2[0], ax2[-1])
        cand = field.h + _bilinear(field.v, ax1, ax2, qx.ravel(), qy.ravel()).reshape(N, N)
        best = cand if best is None else np.minimum(best, cand)
    best = np.minimum(best, BIG_VALUE)
    r_tgt = 0.5 * np.hypot(ax1[1] - ax1[0], ax2[1] - ax2[0])
    interior = ~field.flagged & ((X1**2 + X2**2) > r_tgt**2)
    return float(np.max(np.abs(best - field.v)[interior]))


def export_switching_atlas(field: ValueField, path) -> int:
    """One (w1, w2, u_star, v) row per grid node; returns the row count."""
    ax1, ax2 = field.spec.axes()
    try:
        with open(path, "w") as fh:
            fh.write("w1,w2,u_star,v\n")
            for i, w1 in enumerate(ax1):
                for j, w2 in enumerate(ax2):
                    fh.write(
                        f"{w1!r},{w2!r},{field.u_star[i, j]!r},{field.v[i, j]!r}\n"
                    )
    except OSError as exc:
        raise OSError(f"failed to write switching atlas to {path}: {exc}") from exc
    return field.spec.nodes**2


def atlas_boundary_points(field: ValueField):
    """Midpoints of grid edges where the greedy feedback changes sign.

    Target-cell and flagged nodes are excluded; these are the points the
    analytic curve should thread within one grid cell.
    """
    ax1, ax2 = field.spec.axes()
    s = np.sign(field.u_star)
    X1, X2 = np.meshgrid(ax1, ax2, indexing="ij")
    r_tgt = 1.5 * np.hypot(ax1[1] - ax1[0], ax2[1] - ax2[0])
    ok = (~field.flagged) & (s != 0) & (X1**2 + X2**2 > r_tgt**2)
    pts = []
    flip_h = (s[1:, :] * s[:-1, :] < 0) & ok[1:, :] & ok[:-1, :]
    ii, jj = np.nonzero(flip_h)
    pts.append(np.column_stack([0.5 * (ax1[ii] + ax1[ii + 1]), ax2[jj]]))
    flip_v = (s[:, 1:] * s[:, :-1] < 0) & ok[:, 1:] & ok[:, :-1]
    ii, jj = np.nonzero(flip_v)
    pts.append(np.column_stack([ax1[ii], 0.5 * (ax2[jj] + ax2[jj + 1])]))
    return np.vstack(pts) if pts else np.zeros((0, 2))
