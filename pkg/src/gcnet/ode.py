"""Adaptive Dormand-Prince 5(4) integration with cubic Hermite dense output.

Two drivers share the tableau:

* :func:`integrate_ode` advances a single trajectory with event detection
  (used for closed-loop simulation and the public model integrator).
* :func:`integrate_batch` advances B independent copies of a system on one
  shared adaptive grid, controlling the error on the worst row.  Shooting
  Jacobians and backward bundle generation run on it, which amortizes the
  Python overhead of small right-hand sides.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

# Dormand-Prince 5(4) extended Butcher tableau.
_C = np.array([0.0, 1 / 5, 3 / 10, 4 / 5, 8 / 9, 1.0, 1.0])
_A = (
    (),
    (1 / 5,),
    (3 / 40, 9 / 40),
    (44 / 45, -56 / 15, 32 / 9),
    (19372 / 6561, -25360 / 2187, 64448 / 6561, -212 / 729),
    (9017 / 3168, -355 / 33, 46732 / 5247, 49 / 176, -5103 / 18656),
    (35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84),
)
_B5 = np.array([35 / 384, 0.0, 500 / 1113, 125 / 192, -2187 / 6784, 11 / 84, 0.0])
_B4 = np.array(
    [5179 / 57600, 0.0, 7571 / 16695, 393 / 640, -92097 / 339200, 187 / 2100, 1 / 40]
)
_ERR = _B5 - _B4

_SAFETY = 0.9
_MIN_FACTOR = 0.2
_MAX_FACTOR = 5.0
_ORDER_EXP = -0.2  # 1/(order of the embedded pair)


class StiffnessError(RuntimeError):
    """Step size underflowed; the problem looks stiff at the requested tolerance."""


@dataclass
class DenseOutput:
    """Piecewise cubic Hermite interpolant over the accepted steps.

    Stores node times, states and derivatives; supports trajectories of any
    trailing shape (single: (n,), batch: (B, n)).
    """

    ts: np.ndarray  # (K+1,)
    ys: np.ndarray  # (K+1, ...) states at nodes
    fs: np.ndarray  # (K+1, ...) derivatives at nodes

    def __call__(self, t):
        t = np.asarray(t, dtype=float)
        scalar = t.ndim == 0
        tq = np.atleast_1d(t)
        ts = self.ts
        forward = ts[-1] >= ts[0]
        # locate segment for each query point
        if forward:
            idx = np.clip(np.searchsorted(ts, tq, side="right") - 1, 0, len(ts) - 2)
        else:
            idx = np.clip(len(ts) - 1 - np.searchsorted(ts[::-1], tq, side="left"), 0, len(ts) - 2)
            idx = np.clip(idx, 0, len(ts) - 2)
        h = ts[idx + 1] - ts[idx]
        s = (tq - ts[idx]) / h
        s = s.reshape(s.shape + (1,) * (self.ys.ndim - 1))
        hh = h.reshape(s.shape)
        y0, y1 = self.ys[idx], self.ys[idx + 1]
        f0, f1 = self.fs[idx], self.fs[idx + 1]
        s2 = s * s
        s3 = s2 * s
        out = (
            (2 * s3 - 3 * s2 + 1) * y0
            + (s3 - 2 * s2 + s) * hh * f0
            + (-2 * s3 + 3 * s2) * y1
            + (s3 - s2) * hh * f1
        )
        return out[0] if scalar else out

    @property
    def t_min(self):
        return min(self.ts[0], self.ts[-1])

    @property
    def t_max(self):
        return max(self.ts[0], self.ts[-1])


@dataclass
class OdeResult:
    t: np.ndarray
    y: np.ndarray
    dense: DenseOutput
    n_steps: int
    n_rejected: int
    n_rhs: int
    status: str = "finished"  # finished | event
    event_index: int | None = None
    event_time: float | None = None
    extra: dict = field(default_factory=dict)


def _initial_step(rhs, t0, y0, f0, direction, rtol, atol, span):
    scale = atol + rtol * np.abs(y0)
    d0 = np.sqrt(np.mean((y0 / scale) ** 2))
    d1 = np.sqrt(np.mean((f0 / scale) ** 2))
    h0 = 1e-6 if d0 < 1e-5 or d1 < 1e-5 else 0.01 * d0 / d1
    h0 = min(h0, 0.1 * span)
    y1 = y0 + direction * h0 * f0
    f1 = rhs(t0 + direction * h0, y1)
    d2 = np.sqrt(np.mean(((f1 - f0) / scale) ** 2)) / h0
    if max(d1, d2) <= 1e-15:
        h1 = max(1e-6, h0 * 1e-3)
    else:
        h1 = (0.01 / max(d1, d2)) ** 0.2
    return min(100 * h0, h1, span)


def integrate_ode(
    rhs,
    t_span,
    y0,
    rtol=1e-9,
    atol=1e-11,
    max_step=np.inf,
    events=None,
    max_steps=200_000,
):
    """Integrate y' = rhs(t, y) over t_span (forward or backward).

    events: optional list of callables g(t, y); a sign change of g over an
    accepted step is refined by bisection on the dense output and stops the
    integration there ("event" status, the event node is appended).
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    y0 = np.asarray(y0, dtype=float)
    if not np.all(np.isfinite(y0)):
        raise ValueError("non-finite initial state")
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)

    n_rhs = 0

    def f(t, y):
        nonlocal n_rhs
        n_rhs += 1
        return np.asarray(rhs(t, y), dtype=float)

    ts = [t0]
    ys = [y0.copy()]
    k1 = f(t0, y0)
    fs = [k1.copy()]
    if span == 0.0:
        ts.append(t0)
        ys.append(y0.copy())
        fs.append(k1.copy())
        dense = DenseOutput(np.array(ts), np.array(ys), np.array(fs))
        return OdeResult(np.array(ts), np.array(ys), dense, 0, 0, n_rhs)

    h = min(_initial_step(f, t0, y0, k1, direction, rtol, atol, span), max_step)
    t = t0
    y = y0.copy()
    g_prev = [ev(t, y) for ev in events] if events else None

    n_steps = 0
    n_rejected = 0
    status = "finished"
    event_index = None
    event_time = None
    K = np.empty((7,) + y0.shape)

    while (t1 - t) * direction > 0:
        if n_steps + n_rejected >= max_steps:
            raise StiffnessError(f"step budget {max_steps} exhausted at t={t:.6g}")
        h = min(h, abs(t1 - t), max_step)
        if h < 1e-14 * max(1.0, abs(t)):
            raise StiffnessError(f"step size underflow at t={t:.6g}")
        K[0] = k1
        for i in range(1, 7):
            dy = h * direction * sum(a * K[j] for j, a in enumerate(_A[i]))
            K[i] = f(t + _C[i] * h * direction, y + dy)
        y_new = y + h * direction * np.tensordot(_B5, K, axes=1)
        err_vec = h * np.tensordot(_ERR, K, axes=1)
        scale = atol + rtol * np.maximum(np.abs(y), np.abs(y_new))
        err = np.sqrt(np.mean((err_vec / scale) ** 2))
        if err > 1.0:
            n_rejected += 1
            h *= max(_MIN_FACTOR, _SAFETY * err**_ORDER_EXP)
            continue
        t_new = t + h * direction
        k1_new = K[6]  # FSAL

        ts.append(t_new)
        ys.append(y_new.copy())
        fs.append(k1_new.copy())
        n_steps += 1

        if events:
            g_new = [ev(t_new, y_new) for ev in events]
            hit = None
            for i, (ga, gb) in enumerate(zip(g_prev, g_new)):
                if ga == 0.0:
                    continue
                if ga * gb <= 0.0 and gb != ga:
                    hit = i
                    break
            if hit is not None:
                seg = DenseOutput(
                    np.array([t, t_new]),
                    np.array([y, y_new]),
                    np.array([K[0], k1_new]),
                )
                a, b = t, t_new
                ga = g_prev[hit]
                for _ in range(80):
                    m = 0.5 * (a + b)
                    gm = events[hit](m, seg(m))
                    if ga * gm <= 0:
                        b = m
                    else:
                        a, ga = m, gm
                te = 0.5 * (a + b)
                ts[-1] = te
                ys[-1] = seg(te)
                fs[-1] = f(te, ys[-1])
                status = "event"
                event_index = hit
                event_time = te
                break
            g_prev = g_new

        t, y, k1 = t_new, y_new, k1_new
        if err == 0.0:
            factor = _MAX_FACTOR
        else:
            factor = min(_MAX_FACTOR, _SAFETY * err**_ORDER_EXP)
        h *= max(_MIN_FACTOR, factor)

    ts_a = np.array(ts)
    ys_a = np.array(ys)
    fs_a = np.array(fs)
    dense = DenseOutput(ts_a, ys_a, fs_a)
    return OdeResult(
        ts_a, ys_a, dense, n_steps, n_rejected, n_rhs, status, event_index, event_time
    )


def integrate_batch(
    rhs,
    t_span,
    y0,
    rtol=1e-9,
    atol=1e-11,
    max_steps=200_000,
):
    """Advance a (B, n) batch on one shared adaptive grid.

    rhs(t, Y) must map a (B, n) array to (B, n).  The step is controlled on
    the worst row, so rows should be variations of one problem (finite
    difference clouds, perturbed terminal conditions); dense output is per
    row.  No events: callers post-process the dense output.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    Y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    if not np.all(np.isfinite(Y0)):
        raise ValueError("non-finite initial state in batch")
    direction = 1.0 if t1 >= t0 else -1.0
    span = abs(t1 - t0)

    n_rhs = 0

    def f(t, Y):
        nonlocal n_rhs
        n_rhs += 1
        return np.asarray(rhs(t, Y), dtype=float)

    k1 = f(t0, Y0)
    ts = [t0]
    ys = [Y0.copy()]
    fs = [k1.copy()]
    if span == 0.0:
        ts.append(t0)
        ys.append(Y0.copy())
        fs.append(k1.copy())
        dense = DenseOutput(np.array(ts), np.array(ys), np.array(fs))
        return OdeResult(np.array(ts), np.array(ys), dense, 0, 0, n_rhs)

    h = min(_initial_step(f, t0, Y0, k1, direction, rtol, atol, span), span)
    t = t0
    Y = Y0.copy()
    n_steps = 0
    n_rejected = 0
    K = np.empty((7,) + Y0.shape)

    while (t1 - t) * direction > 0:
        if n_steps + n_rejected >= max_steps:
            raise StiffnessError(f"batch step budget exhausted at t={t:.6g}")
        h = min(h, abs(t1 - t))
        if h < 1e-14 * max(1.0, abs(t)):
            raise StiffnessError(f"batch step size underflow at t={t:.6g}")
        K[0] = k1
        for i in range(1, 7):
            dy = h * direction * sum(a * K[j] for j, a in enumerate(_A[i]))
            K[i] = f(t + _C[i] * h * direction, Y + dy)
        Y_new = Y + h * direction * np.tensordot(_B5, K, axes=1)
        err_vec = h * np.tensordot(_ERR, K, axes=1)
        scale = atol + rtol * np.maximum(np.abs(Y), np.abs(Y_new))
        # worst row decides acceptance
        err = np.sqrt(np.max(np.mean((err_vec / scale) ** 2, axis=-1)))
        if err > 1.0:
            n_rejected += 1
            h *= max(_MIN_FACTOR, _SAFETY * err**_ORDER_EXP)
            continue
        t += h * direction
        Y = Y_new
        k1 = K[6]
        ts.append(t)
        ys.append(Y.copy())
        fs.append(k1.copy())
        n_steps += 1
        factor = _MAX_FACTOR if err == 0.0 else min(_MAX_FACTOR, _SAFETY * err**_ORDER_EXP)
        h *= max(_MIN_FACTOR, factor)

    ts_a = np.array(ts)
    ys_a = np.array(ys)
    fs_a = np.array(fs)
    dense = DenseOutput(ts_a, ys_a, fs_a)
    return OdeResult(ts_a, ys_a, dense, n_steps, n_rejected, n_rhs)
