"""Discrete implicit Lax-Oleinik evolution on torus grids.

One backward step of size dt solves, at every node x, the scalar fixed point

    w = min_v { f(x - v dt) + dt L(x, v, w) }

and one forward step

    w = max_v { f(x + v dt) - dt L(x, v, w) },

with f read by periodic multilinear interpolation, L evaluated at the
arrival node, and w found by Picard iteration from w0 = f(x). The iteration
contracts with factor dt * lambda, so dt * lambda < 1 is required.

The minimization over v is a uniform velocity grid followed by golden-section
refinement around the discrete argmin.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import GridFunction, interpolate_values
from .hamiltonian import HamiltonianModel, QuadraticContact

_GOLD = (math.sqrt(5.0) - 1.0) / 2.0


class EvolutionConfigError(ValueError):
    pass


class PicardDivergence(RuntimeError):
    def __init__(self, step_index: int, residual: float, iterations: int):
        self.step_index = step_index
        self.residual = residual
        self.iterations = iterations
        super().__init__(
            f"Picard iteration did not converge at step {step_index} "
            f"(residual {residual:.3e} after {iterations} iterations); check dt*lambda < 1"
        )


@dataclass(frozen=True)
class EvolutionConfig:
    dt: float = 1e-3
    v_max: float = 6.0
    v_res: int = 129
    picard_tol: float = 1e-12
    picard_max: int = 50
    snapshot_every: int = 0
    snapshot_times: tuple[float, ...] = ()
    golden_iters: int = 14

    def validate(self, model: HamiltonianModel, spec) -> None:
        if not self.dt > 0:
            raise EvolutionConfigError(f"dt must be positive, got {self.dt}")
        if not self.dt * model.lambda_bound < 1:
            raise EvolutionConfigError(
                f"dt * lambda = {self.dt * model.lambda_bound:g} must be < 1 for the implicit step to contract")
        if not self.v_max > 0 or self.v_res < 2:
            raise EvolutionConfigError("need v_max > 0 and v_res >= 2")
        if not all(self.v_max * self.dt < P / 2 for P in spec.period):
            raise EvolutionConfigError("v_max * dt must stay below half a period")

    def as_dict(self) -> dict:
        return {k: (list(v) if isinstance(v, tuple) else v) for k, v in self.__dict__.items()}


@dataclass
class EvolutionResult:
    final: GridFunction
    snapshots: list[tuple[float, GridFunction]] = field(default_factory=list)
    picard_iters: int = 0
    monotone_flag: bool = False
    steps: int = 0
    t: float = 0.0

    def at(self, t: float, tol: float = 1e-9) -> GridFunction:
        """Snapshot (or final field) recorded at time ``t``."""
        if abs(t - self.t) <= tol:
            return self.final
        for ts, g in self.snapshots:
            if abs(ts - t) <= tol:
                return g
        if abs(t) <= tol:
            raise KeyError("time 0 is the initial datum, which is not stored")
        raise KeyError(f"no snapshot at t = {t}")


def velocity_grid(dim: int, v_max: float, v_res: int) -> np.ndarray:
    """Uniform velocities in lexicographic order, shape (v_res**dim, dim)."""
    axis = np.linspace(-v_max, v_max, v_res)
    return np.array(list(itertools.product(axis, repeat=dim)))


class _Stencil:
    """Interpolation indices/weights for all (node, velocity) departure points at one dt."""

    def __init__(self, spec, X, V, shift_sign: float, dt: float):
        d = spec.dim
        n = spec.resolution
        N, nv = X.shape[0], V.shape[0]
        pts = X[:, None, :] - shift_sign * dt * V[None, :, :]
        i0, wt = [], []
        for a in range(d):
            s = np.mod(pts[..., a], spec.period[a]) / spec.spacing[a]
            fl = np.floor(s)
            i0.append(fl.astype(np.int64) % n[a])
            wt.append(s - fl)
        self.corners = []
        for corner in itertools.product((0, 1), repeat=d):
            w = np.ones((N, nv))
            flat = np.zeros((N, nv), dtype=np.int64)
            stride = 1
            for a, c in enumerate(corner):
                w = w * (wt[a] if c else 1.0 - wt[a])
                flat += ((i0[a] + c) % n[a]) * stride
                stride *= n[a]
            self.corners.append((flat, w))

    def gather(self, flat_values: np.ndarray) -> np.ndarray:
        out = None
        for idx, w in self.corners:
            term = w * flat_values[idx]
            out = term if out is None else out + term
        return out


class _Stepper:
    def __init__(self, model: HamiltonianModel, spec, cfg: EvolutionConfig, sign: float):
        self.model = model
        self.spec = spec
        self.cfg = cfg
        self.sign = sign  # +1 backward (min, departure x - v dt), -1 forward (max, x + v dt)
        self.X = spec.nodes()
        self.V = velocity_grid(spec.dim, cfg.v_max, cfg.v_res)
        self.dv = 2.0 * cfg.v_max / (cfg.v_res - 1)
        self.separable = isinstance(model, QuadraticContact)
        self._cache = {}

    def _prepared(self, dt):
        key = round(dt, 15)
        if key not in self._cache:
            st = _Stencil(self.spec, self.X, self.V, self.sign, dt)
            K = None
            if self.separable:
                L0, _ = self.model.kinetic_lagrangian(self.X[:, None, :], self.V[None, :, :])
                K = dt * L0
            self._cache[key] = (st, K)
        return self._cache[key]

    # objective for node-wise velocities v (N, d) at values w (N,)
    def _phi(self, values, v, w, dt):
        pts = self.X - self.sign * dt * v
        I = interpolate_values(values, self.spec, pts)
        if self.separable:
            L0, _ = self.model.kinetic_lagrangian(self.X, v)
            return self.sign * I + dt * L0
        return self.sign * I + dt * self.model.lagrangian(self.X, v, w).value

    def _refine(self, values, v_best, obj_best, w, dt):
        """Golden-section refinement around the discrete argmin, axis by axis."""
        cfg = self.cfg
        v = v_best.copy()
        for a in range(self.spec.dim):
            lo = np.maximum(v[:, a] - self.dv, -cfg.v_max)
            hi = np.minimum(v[:, a] + self.dv, cfg.v_max)

            def phi(s, a=a):
                vv = v.copy()
                vv[:, a] = s
                return self._phi(values, vv, w, dt)

            c = hi - _GOLD * (hi - lo)
            e = lo + _GOLD * (hi - lo)
            fc, fe = phi(c), phi(e)
            for _ in range(cfg.golden_iters):
                left = fc < fe
                hi = np.where(left, e, hi)
                lo = np.where(left, lo, c)
                new = np.where(left, hi - _GOLD * (hi - lo), lo + _GOLD * (hi - lo))
                fn = phi(new)
                e, fe, c, fc = (np.where(left, c, new), np.where(left, fc, fn),
                                np.where(left, new, e), np.where(left, fn, fe))
            mid = np.where(fc < fe, c, e)
            fm = np.minimum(fc, fe)
            better = fm < obj_best
            v[:, a] = np.where(better, mid, v[:, a])
            obj_best = np.where(better, fm, obj_best)
        return v, obj_best

    def _minimize(self, values, flat, w, dt):
        st, K = self._prepared(dt)
        I = st.gather(flat)
        if K is not None:
            obj = self.sign * I + K
        else:
            L = self.model.lagrangian(self.X[:, None, :], self.V[None, :, :], w[:, None]).value
            obj = self.sign * I + dt * L
        j = np.argmin(obj, axis=1)  # first occurrence: lexicographically smallest v
        rows = np.arange(len(j))
        v, best = self._refine(values, self.V[j], obj[rows, j], w, dt)
        return best, v

    def step(self, f: GridFunction, dt: float, step_index: int = 0) -> tuple[GridFunction, int]:
        cfg = self.cfg
        values, flat = f.values, f.flat
        s = self.sign
        w = flat.copy()
        if self.separable:
            # argmin over v does not depend on w: minimize once, iterate the scalar map
            m, _ = self._minimize(values, flat, w, dt)
            g = self.model.g_value
            for it in range(1, cfg.picard_max + 1):
                w_new = s * (m - dt * g(w))
                res = float(np.max(np.abs(w_new - w)))
                w = w_new
                if res <= cfg.picard_tol * (1.0 + float(np.max(np.abs(w)))):
                    return GridFunction.from_flat(f.spec, w), it
        else:
            for it in range(1, cfg.picard_max + 1):
                m, _ = self._minimize(values, flat, w, dt)
                w_new = s * m
                res = float(np.max(np.abs(w_new - w)))
                w = w_new
                if res <= cfg.picard_tol * (1.0 + float(np.max(np.abs(w)))):
                    return GridFunction.from_flat(f.spec, w), it
        raise PicardDivergence(step_index, res, cfg.picard_max)


def _schedule(t: float, dt: float, marks) -> list[float]:
    """Step sizes reaching every mark in ``marks`` and ``t`` exactly (last step shortened)."""
    stops = sorted({float(m) for m in marks if 0 < m < t} | {float(t)})
    sizes = []
    now = 0.0
    for stop in stops:
        span = stop - now
        n_full = int(math.floor(span / dt * (1 + 1e-12)))
        rem = span - n_full * dt
        sizes.extend([dt] * n_full)
        if rem > 1e-12 * max(1.0, stop):
            sizes.append(rem)
        elif n_full == 0:
            continue
        now = stop
    return sizes


def _evolve(model, f: GridFunction, t: float, cfg: EvolutionConfig, sign: float) -> EvolutionResult:
    if not t >= 0:
        raise ValueError(f"t must be >= 0, got {t}")
    cfg.validate(model, f.spec)
    if t == 0:
        return EvolutionResult(f, [], 0, True, 0, 0.0)
    stepper = _Stepper(model, f.spec, cfg, sign)
    sizes = _schedule(t, cfg.dt, cfg.snapshot_times)
    marks = [float(m) for m in cfg.snapshot_times if 0 < m <= t]
    snaps = []
    g = f
    now = 0.0
    max_it = 0
    for k, dt in enumerate(sizes, start=1):
        g, it = stepper.step(g, dt, k)
        max_it = max(max_it, it)
        now = now + dt
        exact = [m for m in marks if abs(m - now) <= 1e-9 * max(1.0, m)]
        if exact:
            now = exact[0]
        if (cfg.snapshot_every and k % cfg.snapshot_every == 0) or exact:
            snaps.append((now, g))
    tol = 1e-9
    monotone = bool(np.min(g.values - f.values) >= -tol) if sign > 0 else bool(np.max(g.values - f.values) <= tol)
    return EvolutionResult(g, snaps, max_it, monotone, len(sizes), float(t))


def step_backward(model: HamiltonianModel, f: GridFunction, cfg: EvolutionConfig = EvolutionConfig()) -> GridFunction:
    cfg.validate(model, f.spec)
    return _Stepper(model, f.spec, cfg, 1.0).step(f, cfg.dt, 1)[0]


def step_forward(model: HamiltonianModel, f: GridFunction, cfg: EvolutionConfig = EvolutionConfig()) -> GridFunction:
    cfg.validate(model, f.spec)
    return _Stepper(model, f.spec, cfg, -1.0).step(f, cfg.dt, 1)[0]


def evolve_backward(model: HamiltonianModel, f: GridFunction, t: float,
                    cfg: EvolutionConfig = EvolutionConfig()) -> EvolutionResult:
    """Approximate T_t^- f. ``monotone_flag`` reports min(final - f) >= -1e-9."""
    return _evolve(model, f, t, cfg, 1.0)


def evolve_forward(model: HamiltonianModel, f: GridFunction, t: float,
                   cfg: EvolutionConfig = EvolutionConfig()) -> EvolutionResult:
    """Approximate T_t^+ f. ``monotone_flag`` reports max(final - f) <= 1e-9."""
    return _evolve(model, f, t, cfg, -1.0)


@dataclass
class RepresentationCheck:
    residual: float
    probes: np.ndarray
    semigroup_values: np.ndarray
    representation_values: np.ndarray
    argmin_source: np.ndarray


def compare_representation(model: HamiltonianModel, f: GridFunction, t: float, probes=None,
                           cfg: EvolutionConfig = EvolutionConfig(), action_cfg=None,
                           evolution: EvolutionResult | None = None) -> RepresentationCheck:
    """max over probes of |T_t^- f(x) - min_y h_{y, f(y)}(x, t)|, sources y on the grid of ``f``."""
    from .action import ShootingConfig, action_table

    if f.spec.dim != 1:
        raise ValueError("the shooting side of the representation check is one-dimensional")
    if probes is None:
        n = f.spec.resolution[0]
        probes = f.spec.nodes()[:: max(1, n // 64), 0]
    probes = np.asarray(probes, dtype=float).reshape(-1)
    action_cfg = action_cfg or ShootingConfig()
    if evolution is None:
        evolution = evolve_backward(model, f, t, cfg)
    lhs = np.asarray(interpolate_values(evolution.final.values, f.spec, probes[:, None]))
    sources = f.spec.nodes()[:, 0]
    table = action_table(model, sources, f.flat, np.broadcast_to(probes, (len(sources), len(probes))), t,
                         direction="backward", cfg=action_cfg, period=f.spec.period[0])
    vals = np.where(table.found, table.values, np.inf)
    j = np.argmin(vals, axis=0)
    rhs = vals[j, np.arange(len(probes))]
    if not np.all(np.isfinite(rhs)):
        raise RuntimeError("no characteristic found for some probe from any source")
    return RepresentationCheck(float(np.max(np.abs(lhs - rhs))), probes, lhs, rhs, sources[j])
