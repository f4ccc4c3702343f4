"""Characteristics of the contact Hamilton-Jacobi equation.

The contact vector field is

    x' = H_p,   p' = -H_x - H_u p,   u' = p.H_p - H,

integrated with classic fixed-step RK4. Positions are kept wrapped to
[0, period) after every step and whole turns are counted in ``windings``.
"""

from __future__ import annotations

import csv
import io
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from .hamiltonian import HamiltonianModel, _vec


class BlowUp(RuntimeError):
    def __init__(self, t_detect: float, state=None):
        self.t_detect = t_detect
        self.state = state
        super().__init__(f"trajectory left the ceiling at t = {t_detect:.6g} (incomplete flow)")


@dataclass(frozen=True)
class ContactState:
    x: np.ndarray
    p: np.ndarray
    u: float

    @classmethod
    def of(cls, x, p, u, dim: int | None = None) -> "ContactState":
        x = np.atleast_1d(np.asarray(x, dtype=float))
        p = np.atleast_1d(np.asarray(p, dtype=float))
        if dim is not None and (x.shape != (dim,) or p.shape != (dim,)):
            raise ValueError(f"state needs {dim}-vectors")
        return cls(x, p, float(u))


@dataclass(frozen=True)
class StepControl:
    h: float = 1e-3
    adaptive: bool = False
    tol: float = 1e-8  # energy-identity residual target in adaptive mode
    max_halvings: int = 8  # tightenings of the per-step target in adaptive mode
    ceiling: float = 1e8
    max_steps: int = 10_000_000


@dataclass
class Trajectory:
    times: np.ndarray
    x: np.ndarray  # (n, d), wrapped
    p: np.ndarray  # (n, d)
    u: np.ndarray  # (n,)
    windings: np.ndarray  # (n, d), cumulative
    energies: np.ndarray  # (n,)
    period: np.ndarray
    h: float = 0.0
    backward: bool = False

    def __len__(self):
        return len(self.times)

    @property
    def signed_times(self) -> np.ndarray:
        """Flow time: elapsed time, negated for backward runs."""
        return -self.times if self.backward else self.times

    @property
    def dim(self) -> int:
        return self.x.shape[1]

    @property
    def unwrapped_x(self) -> np.ndarray:
        return self.x + self.period * self.windings

    @property
    def states(self) -> list[ContactState]:
        return [ContactState(self.x[k], self.p[k], float(self.u[k])) for k in range(len(self))]

    @property
    def final(self) -> ContactState:
        return ContactState(self.x[-1], self.p[-1], float(self.u[-1]))

    def to_csv(self) -> str:
        d = self.dim
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["t"] + [f"x{i + 1}" for i in range(d)] + [f"p{i + 1}" for i in range(d)]
                   + ["u", "H"] + [f"winding{i + 1}" for i in range(d)])
        for k in range(len(self)):
            w.writerow([repr(float(self.times[k]))] + [repr(float(v)) for v in self.x[k]]
                       + [repr(float(v)) for v in self.p[k]] + [repr(float(self.u[k])), repr(float(self.energies[k]))]
                       + [str(int(v)) for v in self.windings[k]])
        return buf.getvalue()


def vector_field(model: HamiltonianModel, x, p, u):
    """(dx, dp, du) of the contact vector field; vectorized over leading axes."""
    fast = getattr(model, "vector_field", None)
    if fast is not None:
        out = fast(x, p, u)
        if out is not None:
            return out
    j = model.jet(x, p, u)
    p = _vec(p, model.dim)
    dx = j.d_p
    dp = -j.d_x - j.d_u[..., None] * p
    du = np.einsum("...i,...i->...", p, j.d_p) - j.value
    return dx, dp, du


def _rk4_step(model, x, p, u, h, sign):
    """One RK4 step; ``h`` is a scalar or broadcastable per-sample step."""
    hx = h if np.ndim(h) == 0 else h[:, None]
    k1 = vector_field(model, x, p, u)
    k2 = vector_field(model, x + 0.5 * sign * hx * k1[0], p + 0.5 * sign * hx * k1[1], u + 0.5 * sign * h * k1[2])
    k3 = vector_field(model, x + 0.5 * sign * hx * k2[0], p + 0.5 * sign * hx * k2[1], u + 0.5 * sign * h * k2[2])
    k4 = vector_field(model, x + sign * hx * k3[0], p + sign * hx * k3[1], u + sign * h * k3[2])
    c = sign / 6.0
    x = x + c * hx * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0])
    p = p + c * hx * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1])
    u = u + c * h * (k1[2] + 2 * k2[2] + 2 * k3[2] + k4[2])
    return x, p, u


def _wrap(x, windings, period):
    turns = np.floor(x / period)
    r = x - turns * period
    # rounding can land exactly on `period`
    over = r >= period
    if over.any():
        r = np.where(over, r - period, r)
        turns = turns + over
    return r, windings + turns.astype(np.int64)


def _step_sizes(T: float, h: float) -> np.ndarray:
    n_full = int(math.floor(T / h * (1 + 1e-12)))
    times = np.arange(n_full + 1) * h
    if T - times[-1] > 1e-12 * max(T, 1.0):
        times = np.append(times, T)
    else:
        times[-1] = T
    return times


def _packed_field(model, d: int):
    """Vector field on packed states z = (x, p, u) of shape (1, 2d + 1)."""
    def field(z):
        dx, dp, du = vector_field(model, z[:, :d], z[:, d:2 * d], z[:, 2 * d])
        out = np.empty_like(z)
        out[:, :d] = dx
        out[:, d:2 * d] = dp
        out[:, 2 * d] = du
        return out
    return field


def _rk4_packed(field, y, hs):
    k1 = field(y)
    k2 = field(y + (0.5 * hs) * k1)
    k3 = field(y + (0.5 * hs) * k2)
    k4 = field(y + hs * k3)
    return y + (hs / 6.0) * (k1 + 2.0 * (k2 + k3) + k4)


def _check_ceiling(y, t, d, ceiling):
    # NaN fails the comparison
    if not np.abs(y[0, d:]).max() <= ceiling:
        raise BlowUp(float(t), ContactState(y[0, :d], y[0, d:2 * d], float(y[0, 2 * d])))


def _wrap_packed(y, w, d, period):
    xs = y[:, :d]
    if xs.min() < 0.0 or (xs >= period).any():
        xw, w = _wrap(xs, w, period)
        y[:, :d] = xw
    return y, w


def _start(s0: ContactState, d: int, period):
    x0, w = _wrap(s0.x.reshape(1, d), np.zeros((1, d), dtype=np.int64), period)
    return np.concatenate([x0[0], s0.p, [s0.u]])[None, :], w


def _finish(model, times, Y, W, d, period, h, backward) -> Trajectory:
    n = len(times)
    X, P, U = Y[:, :d].copy(), Y[:, d:2 * d].copy(), Y[:, 2 * d].copy()
    energies = np.asarray(model.value(X, P, U), dtype=float).reshape(n)
    return Trajectory(times, X, P, U, W, energies, period, h, backward)


def _integrate_fixed(model, s0: ContactState, T: float, h: float, period, ceiling, max_steps, backward):
    d = model.dim
    times = _step_sizes(T, h) if T > 0 else np.zeros(1)
    n = len(times)
    if n - 1 > max_steps:
        raise ValueError(f"{n - 1} steps exceed max_steps={max_steps}")
    sign = -1.0 if backward else 1.0
    # packed state (x, p, u) keeps the per-step numpy call count low
    Y = np.empty((n, 2 * d + 1))
    W = np.zeros((n, d), dtype=np.int64)
    y, w = _start(s0, d, period)
    Y[0], W[0] = y[0], w[0]
    field = _packed_field(model, d)
    hs = sign * np.diff(times)
    lo, hi = 0.0, float(period.min())
    # hot loop: the ceiling and wrap checks stay inline
    for k in range(1, n):
        y = _rk4_packed(field, y, hs[k - 1])
        row = y[0]
        if not abs(row[d:]).max() <= ceiling:
            _check_ceiling(y, times[k], d, ceiling)
        xs = row[:d]
        if xs.min() < lo or xs.max() >= hi:
            y, w = _wrap_packed(y, w, d, period)
        Y[k] = y[0]
        W[k] = w[0]
    return _finish(model, times, Y, W, d, period, h, backward)


def _energy(model, y, d):
    j = model.jet(y[:, :d], y[:, d:2 * d], y[:, 2 * d])
    return float(np.ravel(j.value)[0]), float(np.ravel(j.d_u)[0])


def _integrate_adaptive(model, s0: ContactState, T: float, step: "StepControl", tol: float, period, backward):
    """RK4 with PI step-size control on the per-step defect of dH/dt = -H_u H.

    The defect is the trapezoid residual |(H1 - H0)/dt + (H_u H)_0/2 + (H_u H)_1/2|,
    second order in the step like :func:`energy_residual`.
    """
    d = model.dim
    sign = -1.0 if backward else 1.0
    field = _packed_field(model, d)
    y, w = _start(s0, d, period)
    times, Ys, Ws = [0.0], [y[0].copy()], [w[0].copy()]
    if T == 0:
        return _finish(model, np.array(times), np.array(Ys), np.array(Ws), d, period, step.h, backward)
    E0, hu0 = _energy(model, y, d)
    t, h, err_prev = 0.0, min(step.h, T), tol
    h_min = step.h * 2.0 ** -30
    kI, kP, safety = 0.7 / 3.0, 0.4 / 3.0, 0.9
    h_used = h
    while T - t > 1e-13 * T:
        last = h >= T - t
        if last:
            h = T - t
        yn = _rk4_packed(field, y, sign * h)
        _check_ceiling(yn, t + h, d, step.ceiling)
        E1, hu1 = _energy(model, yn, d)
        err = max(abs((E1 - E0) / (sign * h) + 0.5 * (hu0 * E0 + hu1 * E1)), 1e-300)
        if err <= tol or h <= h_min:
            t = T if last else t + h
            y, w = _wrap_packed(yn, w, d, period)
            times.append(t)
            Ys.append(y[0].copy())
            Ws.append(w[0].copy())
            if len(times) - 1 > step.max_steps:
                raise ValueError(f"adaptive run exceeds max_steps={step.max_steps}")
            E0, hu0 = E1, hu1
            h_used = min(h_used, h)
            fac = safety * (tol / err) ** kI * (err_prev / err) ** kP
            err_prev = err
        else:
            fac = safety * (tol / err) ** (1.0 / 3.0)
        h = h * min(5.0, max(0.2, fac))
    return _finish(model, np.array(times), np.array(Ys), np.array(Ws), d, period, h_used, backward)


def integrate(model: HamiltonianModel, s0: ContactState, T: float, step: StepControl = StepControl(),
              period=1.0, backward: bool = False) -> Trajectory:
    """Integrate the contact flow from ``s0`` for time ``T`` (negated field if ``backward``).

    Fixed-step RK4 by default. With ``step.adaptive`` a PI controller picks the
    steps so that :func:`energy_residual` stays below ``step.tol``; the per-step
    target is tightened if the whole-trajectory residual misses it. ``h`` on
    the result is the smallest accepted step. Raises BlowUp when |p| or |u|
    exceeds ``step.ceiling``.
    """
    if not (T >= 0 and math.isfinite(T)):
        raise ValueError(f"T must be finite and >= 0, got {T}")
    if not step.h > 0:
        raise ValueError("step size must be positive")
    period = np.broadcast_to(np.asarray(period, dtype=float), (model.dim,)).copy()
    if not step.adaptive:
        return _integrate_fixed(model, s0, T, step.h, period, step.ceiling, step.max_steps, backward)
    tol = step.tol
    for _ in range(step.max_halvings + 1):
        traj = _integrate_adaptive(model, s0, T, step, tol, period, backward)
        if len(traj) < 3 or energy_residual(model, traj) <= step.tol:
            break
        tol *= 0.5
    return traj


def energy_residual(model: HamiltonianModel, traj: Trajectory) -> float:
    """max |dH/dt + H_u H| over interior samples, dH/dt by centered differences."""
    if len(traj) < 3:
        raise ValueError("energy residual needs at least 3 samples")
    E = traj.energies
    dEdt = np.gradient(E, traj.signed_times)
    hu = np.asarray(model.jet(traj.x, traj.p, traj.u).d_u).reshape(-1)
    res = np.abs(dEdt + hu * E)[1:-1]
    return float(res.max())


def energy_envelope_violation(model: HamiltonianModel, traj: Trajectory) -> float:
    """max of |H(t)| - e^{lambda |t|}|H(0)|; non-positive when the decay bound holds."""
    bound = np.exp(model.lambda_bound * traj.times) * abs(traj.energies[0])
    return float(np.max(np.abs(traj.energies) - bound))


@dataclass
class EnsembleResult:
    x: np.ndarray  # (n, d) wrapped
    windings: np.ndarray  # (n, d)
    p: np.ndarray
    u: np.ndarray
    alive: np.ndarray  # False where the ceiling was crossed
    t_blow: np.ndarray  # detection time, nan for completed samples
    period: np.ndarray = field(repr=False, default=None)

    @property
    def unwrapped_x(self) -> np.ndarray:
        return self.x + self.period * self.windings


def integrate_ensemble(model: HamiltonianModel, x0, p0, u0, T, h: float = 1e-3, period=1.0,
                       backward: bool = False, ceiling: float = 1e8, windings=None) -> EnsembleResult:
    """Flow many initial states at once.

    ``T`` may be per-sample; sample i takes ``n_i = ceil(T_i / h)`` uniform
    steps of size ``T_i / n_i``, so its result does not depend on the rest of
    the batch. Samples crossing the ceiling are frozen and flagged rather than
    raising.
    """
    d = model.dim
    x = _vec(x0, d).reshape(-1, d).astype(float)
    p = _vec(p0, d).reshape(-1, d).astype(float)
    u = np.asarray(u0, dtype=float).reshape(-1)
    n = max(len(x), len(p), len(u))
    x, p, u = np.broadcast_to(x, (n, d)).copy(), np.broadcast_to(p, (n, d)).copy(), np.broadcast_to(u, (n,)).copy()
    period = np.broadcast_to(np.asarray(period, dtype=float), (d,)).copy()
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,))
    w0 = np.zeros((n, d), dtype=np.int64) if windings is None else np.asarray(windings, dtype=np.int64).copy()
    x, w = _wrap(x, w0, period)
    alive = np.ones(n, dtype=bool)
    t_blow = np.full(n, np.nan)
    n_steps = np.where(T > 0, np.ceil(T / h - 1e-9), 0).astype(np.int64)
    steps = int(n_steps.max()) if n else 0
    if steps == 0:
        return EnsembleResult(x, w, p, u, alive, t_blow, period)
    hs = np.where(n_steps > 0, T / np.maximum(n_steps, 1), 0.0)
    sign = -1.0 if backward else 1.0
    with np.errstate(all="ignore"):
        for k in range(1, steps + 1):
            xn, pn, un = _rk4_step(model, x, p, u, hs, sign)
            bad = ~(np.all(np.isfinite(pn), axis=1) & np.isfinite(un)
                    & (np.max(np.abs(pn), axis=1) <= ceiling) & (np.abs(un) <= ceiling))
            running = k <= n_steps
            newly = bad & alive & running
            if newly.any():
                t_blow[newly] = k * hs[newly]
                alive &= ~newly
            keep = alive & running
            x = np.where(keep[:, None], xn, x)
            p = np.where(keep[:, None], pn, p)
            u = np.where(keep, un, u)
            x, w = _wrap(x, w, period)
    return EnsembleResult(x, w, p, u, alive, t_blow, period)


def parallel_ensemble(model, x0, p0, u0, T, h=1e-3, period=1.0, backward=False, ceiling=1e8,
                      workers: int = 1) -> EnsembleResult:
    """Chunked :func:`integrate_ensemble`; results are concatenated in input order."""
    d = model.dim
    x0 = _vec(x0, d).reshape(-1, d)
    n = len(x0)
    p0 = np.broadcast_to(_vec(p0, d).reshape(-1, d), (n, d))
    u0 = np.broadcast_to(np.asarray(u0, dtype=float).reshape(-1), (n,))
    T = np.broadcast_to(np.asarray(T, dtype=float), (n,))
    if workers <= 1 or n < 2 * workers:
        return integrate_ensemble(model, x0, p0, u0, T, h, period, backward, ceiling)
    bounds = np.linspace(0, n, workers + 1).astype(int)

    def run(i):
        sl = slice(bounds[i], bounds[i + 1])
        return integrate_ensemble(model, x0[sl], p0[sl], u0[sl], T[sl], h, period, backward, ceiling)

    with ThreadPoolExecutor(workers) as pool:
        parts = list(pool.map(run, range(workers)))
    return EnsembleResult(*(np.concatenate([getattr(r, f) for r in parts])
                            for f in ("x", "windings", "p", "u", "alive", "t_blow")),
                          parts[0].period)

