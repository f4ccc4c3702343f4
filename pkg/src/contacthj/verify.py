"""Numerical checks of subsolution properties on torus grids.

Each battery returns a :class:`VerificationReport` whose verdicts mean "no
violation found at this resolution and tolerance", nothing stronger. Random
epigraph samples come from a seeded generator recorded in the report, so
identical inputs give byte-identical per-sample CSVs.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from .flow import integrate_ensemble
from .geometry import (GridFunction, TorusSpec, central_gradient, interpolate_values, one_sided_quotients,
                       second_difference_bound)
from .hamiltonian import ExpressionModel, HamiltonianModel, SamplingPlan, check_assumptions
from .semigroup import EvolutionConfig, evolve_backward, evolve_forward


@dataclass(frozen=True)
class VerifyConfig:
    horizons: tuple[float, ...] = (0.25, 0.5, 1.0)
    n_samples: int = 500
    p_cap: float = 3.0
    u_cap: float = 2.0
    seed: int = 0
    flow_h: float = 1e-3
    evolution: EvolutionConfig = EvolutionConfig()
    tol: float | None = None
    small_t: tuple[float, float] = (1e-2, 5e-3)
    boundary_probes: bool = True

    def as_dict(self) -> dict:
        out = {k: getattr(self, k) for k in self.__dataclass_fields__ if k != "evolution"}
        out["horizons"] = list(self.horizons)
        out["small_t"] = list(self.small_t)
        out["evolution"] = self.evolution.as_dict()
        return out


@dataclass
class SubsolutionReport:
    mode: str
    worst_margin: float
    witness: dict
    tolerance_used: float
    lipschitz_bound: float
    constrained_nodes: int

    @property
    def passed(self) -> bool:
        return self.worst_margin <= self.tolerance_used

    def to_dict(self) -> dict:
        return {"mode": self.mode, "passed": self.passed, "worst_margin": self.worst_margin,
                "witness": self.witness, "tolerance_used": self.tolerance_used,
                "lipschitz_bound": self.lipschitz_bound, "constrained_nodes": self.constrained_nodes}


@dataclass
class VerificationReport:
    battery: str
    passed: bool
    checks: dict[str, bool]
    margins: dict[str, float]
    witnesses: list[dict]
    parameters: dict
    samples_csv: str = field(default="", repr=False)
    unanimous: bool | None = None

    def to_dict(self) -> dict:
        out = {"battery": self.battery, "passed": self.passed, "checks": self.checks,
               "margins": self.margins, "witnesses": self.witnesses, "parameters": self.parameters}
        if self.unanimous is not None:
            out["unanimous"] = self.unanimous
        return out


# -- helpers -----------------------------------------------------------------

def _node_data(model, phi: GridFunction):
    X = phi.spec.nodes()
    P = central_gradient(phi)
    U = phi.flat
    return X, P, U, model.jet(X, P, U)


def mesh_tolerance(model: HamiltonianModel, phi: GridFunction, dt: float = 0.0) -> float:
    """C (h + dt) with C = 1 + max|H_p| max|phi''| + max|H| sampled at (x, grad phi, phi)."""
    _, _, _, jet = _node_data(model, phi)
    C = (1.0 + float(np.max(np.abs(jet.d_p))) * second_difference_bound(phi)
         + float(np.max(np.abs(jet.value))))
    return C * (float(np.max(phi.spec.spacing)) + dt)


def _velocity_cap(model, phi: GridFunction, cfg: VerifyConfig) -> EvolutionConfig:
    # the velocity search box must contain the optimal velocities, which scale with H_p along grad phi
    _, _, _, jet = _node_data(model, phi)
    need = 1.5 * float(np.max(np.abs(jet.d_p))) + 1.0
    ev = cfg.evolution
    if need > ev.v_max:
        cap = 0.49 * min(phi.spec.period) / ev.dt
        ev = replace(ev, v_max=min(need, cap))
    return ev


def random_fourier(spec: TorusSpec, seed: int = 0, modes: int = 3, amplitude: float = 0.2) -> GridFunction:
    """amplitude * sum_k (a_k cos 2 pi k x + b_k sin 2 pi k x), coefficients uniform in [-1, 1] (d = 1)."""
    if spec.dim != 1:
        raise ValueError("random_fourier is one-dimensional")
    rng = np.random.default_rng(seed)
    a = rng.uniform(-1, 1, modes)
    b = rng.uniform(-1, 1, modes)
    k = np.arange(1, modes + 1)
    P = spec.period[0]

    def f(X):
        arg = 2 * np.pi * np.outer(X[:, 0] / P, k)
        return amplitude * (np.cos(arg) @ a + np.sin(arg) @ b)

    return GridFunction.sample(spec, f)


@dataclass
class EpigraphSamples:
    x: np.ndarray  # (n, d)
    p: np.ndarray
    u: np.ndarray
    gap: np.ndarray  # u - phi(x) at start
    boundary: np.ndarray  # started on u = phi(x)


def epigraph_samples(model, phi: GridFunction, cfg: VerifyConfig, on_boundary: bool = False) -> EpigraphSamples:
    """Random samples in the epigraph plus, optionally, one probe (x, grad phi, phi) per node."""
    spec = phi.spec
    d = spec.dim
    rng = np.random.default_rng(cfg.seed)
    nodes = spec.nodes()
    idx = rng.integers(0, spec.size, cfg.n_samples)
    p = rng.uniform(-cfg.p_cap, cfg.p_cap, (cfg.n_samples, d))
    gap = rng.uniform(0.0, cfg.u_cap, cfg.n_samples)
    if on_boundary:
        gap = np.zeros(cfg.n_samples)
    x = nodes[idx]
    u = phi.flat[idx] + gap
    boundary = gap == 0
    if cfg.boundary_probes:
        x = np.vstack([x, nodes])
        p = np.vstack([p, central_gradient(phi)])
        u = np.concatenate([u, phi.flat])
        gap = np.concatenate([gap, np.zeros(spec.size)])
        boundary = np.concatenate([boundary, np.ones(spec.size, dtype=bool)])
    return EpigraphSamples(x, p, u, gap, boundary)


def _flow_samples(model, s: EpigraphSamples, horizons, h, period):
    """Flow every sample through the sorted horizons; returns [(t, x, p, u, alive)]."""
    out = []
    x, p, u = s.x, s.p, s.u
    w = None
    alive = np.ones(len(u), dtype=bool)
    prev = 0.0
    for t in sorted(horizons):
        res = integrate_ensemble(model, x, p, u, t - prev, h, period, windings=w)
        x, p, u, w = res.x, res.p, res.u, res.windings
        alive &= res.alive
        out.append((t, x.copy(), p.copy(), u.copy(), alive.copy()))
        prev = t
    return out


def _fmt(v) -> str:
    return repr(float(v))


def _samples_csv(s: EpigraphSamples, flows, extra_name: str, extra) -> str:
    d = s.x.shape[1]
    head = (["sample", "boundary"] + [f"x0_{a + 1}" for a in range(d)] + [f"p0_{a + 1}" for a in range(d)]
            + ["u0", "t"] + [f"x_{a + 1}" for a in range(d)] + [f"p_{a + 1}" for a in range(d)]
            + ["u", "alive", extra_name])
    rows = [",".join(head)]
    for j, (t, x, p, u, alive) in enumerate(flows):
        for i in range(len(s.u)):
            vals = ([str(i), str(int(s.boundary[i]))] + [_fmt(v) for v in s.x[i]] + [_fmt(v) for v in s.p[i]]
                    + [_fmt(s.u[i]), _fmt(t)] + [_fmt(v) for v in x[i]] + [_fmt(v) for v in p[i]]
                    + [_fmt(u[i]), str(int(alive[i])), _fmt(extra[j][i])])
            rows.append(",".join(vals))
    return "\n".join(rows) + "\n"


def _argmin_witness(values, X, label, **extra):
    i = int(np.argmin(values))
    w = {"check": label, "node": i, "x": X[i].tolist(), "margin": float(values[i])}
    w.update({k: (float(v[i]) if np.ndim(v) else v) for k, v in extra.items()})
    return w


# -- subsolution -------------------------------------------------------------

def check_subsolution(model: HamiltonianModel, phi: GridFunction, mode: str = "ae",
                      tol: float | None = None) -> SubsolutionReport:
    """Largest H(x, p, phi(x)) over nodes, with p from central differences (``ae``) or from the
    one-sided quotient interval (``superdifferential``)."""
    if tol is None:
        tol = mesh_tolerance(model, phi)
    lower, upper = one_sided_quotients(phi)
    lip = float(max(np.max(np.abs(lower)), np.max(np.abs(upper))))
    X = phi.spec.nodes()
    U = phi.flat
    d = phi.spec.dim
    if mode == "ae":
        P = central_gradient(phi)
        H = model.value(X, P, U)
        i = int(np.argmax(H))
        wit = {"node": i, "x": X[i].tolist(), "p": P[i].tolist(), "u": float(U[i]), "H": float(H[i])}
        return SubsolutionReport(mode, float(H[i]), wit, float(tol), lip, phi.spec.size)
    if mode != "superdifferential":
        raise ValueError(f"mode must be 'ae' or 'superdifferential', got {mode!r}")
    if isinstance(model, ExpressionModel):
        h1 = check_assumptions(model, SamplingPlan(n_x=8, n_p=11, n_u=11, period=phi.spec.period[0])).checks["H1"]
        if not h1.passed:
            raise ValueError("superdifferential mode needs H convex in p; the model fails the convexity "
                             "check, use mode='ae'")
    lo = np.stack([lower[a].ravel(order="F") for a in range(d)], -1)  # backward quotients d-
    up = np.stack([upper[a].ravel(order="F") for a in range(d)], -1)  # forward quotients d+
    constrained = np.all(up <= lo, axis=1)
    best = np.full(len(U), -np.inf)
    best_p = np.zeros((len(U), d))
    corners = [np.array(c) for c in np.ndindex(*(2,) * d)]
    for c in corners:
        P = np.where(c.astype(bool), lo, up)
        H = model.value(X, P, U)
        better = H > best
        best = np.where(better, H, best)
        best_p = np.where(better[:, None], P, best_p)
    best = np.where(constrained, best, -np.inf)
    if not constrained.any():
        return SubsolutionReport(mode, -math.inf, {}, float(tol), lip, 0)
    i = int(np.argmax(best))
    wit = {"node": i, "x": X[i].tolist(), "p": best_p[i].tolist(), "u": float(U[i]), "H": float(best[i])}
    return SubsolutionReport(mode, float(best[i]), wit, float(tol), lip, int(constrained.sum()))


# -- batteries ---------------------------------------------------------------

def _tolerance(model, phi, cfg):
    return float(cfg.tol) if cfg.tol is not None else mesh_tolerance(model, phi, cfg.evolution.dt)


def _parameters(model, phi, cfg, tol, ev, **extra):
    out = {"model": model.describe(), "grid": {"dim": phi.spec.dim, "period": list(phi.spec.period),
                                               "resolution": list(phi.spec.resolution)},
           "config": cfg.as_dict(), "tolerance": tol, "v_max_used": ev.v_max}
    out.update(extra)
    return out


def battery_theorem_A(model: HamiltonianModel, phi: GridFunction, cfg: VerifyConfig = VerifyConfig()
                      ) -> VerificationReport:
    """Four independent subsolution tests; they should agree."""
    tol = _tolerance(model, phi, cfg)
    ev = _velocity_cap(model, phi, cfg)
    horizons = tuple(sorted(cfg.horizons))
    X = phi.spec.nodes()
    witnesses = []

    sub = check_subsolution(model, phi, "ae", tol)
    witnesses.append({"check": "subsolution", **sub.witness})

    ev = replace(ev, snapshot_times=horizons)
    back = evolve_backward(model, phi, horizons[-1], ev)
    fwd = evolve_forward(model, phi, horizons[-1], ev)
    bdiff = np.stack([back.at(t).flat - phi.flat for t in horizons])
    fdiff = np.stack([fwd.at(t).flat - phi.flat for t in horizons])
    jb = np.unravel_index(int(np.argmin(bdiff)), bdiff.shape)
    jf = np.unravel_index(int(np.argmax(fdiff)), fdiff.shape)
    witnesses.append({"check": "backward_monotone", "t": horizons[jb[0]], "node": int(jb[1]),
                      "x": X[jb[1]].tolist(), "margin": float(bdiff[jb])})
    witnesses.append({"check": "forward_monotone", "t": horizons[jf[0]], "node": int(jf[1]),
                      "x": X[jf[1]].tolist(), "margin": float(fdiff[jf])})

    s = epigraph_samples(model, phi, cfg)
    flows = _flow_samples(model, s, horizons, cfg.flow_h, phi.spec.period)
    gaps = []
    for t, x, p, u, alive in flows:
        g = u - interpolate_values(phi.values, phi.spec, x)
        gaps.append(np.where(alive, g, np.inf))
    G = np.stack(gaps)
    jg = np.unravel_index(int(np.argmin(G)), G.shape)
    witnesses.append({"check": "epigraph_invariant", "t": horizons[jg[0]], "sample": int(jg[1]),
                      "x0": s.x[jg[1]].tolist(), "p0": s.p[jg[1]].tolist(), "u0": float(s.u[jg[1]]),
                      "final_gap": float(G[jg])})
    n_dead = int(np.sum(~flows[-1][4]))

    margins = {"subsolution": sub.worst_margin, "backward_monotone": float(bdiff[jb]),
               "forward_monotone": float(fdiff[jf]), "epigraph_invariant": float(G[jg])}
    checks = {"subsolution": sub.passed, "backward_monotone": bool(bdiff[jb] >= -tol),
              "forward_monotone": bool(fdiff[jf] <= tol), "epigraph_invariant": bool(G[jg] >= -tol)}
    verdicts = set(checks.values())
    params = _parameters(model, phi, cfg, tol, ev, picard_iters=max(back.picard_iters, fwd.picard_iters),
                         incomplete_samples=n_dead, n_flowed=len(s.u))
    return VerificationReport("theorem-a", all(checks.values()), checks, margins, witnesses, params,
                              _samples_csv(s, flows, "final_gap", gaps), unanimous=len(verdicts) == 1)


def rate_constant(model, phi: GridFunction, ev: EvolutionConfig, small_t=(1e-2, 5e-3)):
    """Richardson-extrapolated small-t quotients, minimized over nodes.

    Returns (c_backward, c_forward) with c_backward = min_x lim (T_t^- phi - phi)/t and
    c_forward = min_x lim (phi - T_t^+ phi)/t.
    """
    t1, t2 = sorted(small_t, reverse=True)
    r = t1 / t2
    ev = replace(ev, snapshot_times=(t2,))
    out = []
    for evolve, s in ((evolve_backward, 1.0), (evolve_forward, -1.0)):
        res = evolve(model, phi, t1, ev)
        q1 = s * (res.final.flat - phi.flat) / t1
        q2 = s * (res.at(t2).flat - phi.flat) / t2
        # first-order error model q(t) = q0 + a t
        q0 = (r * q2 - q1) / (r - 1.0)
        out.append(float(np.min(q0)))
    return out[0], out[1]


def _rate_floor(c, lam, t):
    return c * (1.0 - math.exp(-lam * t)) / lam if lam > 0 else c * t


def battery_theorem_B(model: HamiltonianModel, phi: GridFunction, cfg: VerifyConfig = VerifyConfig()
                      ) -> VerificationReport:
    """Strict subsolution tests: a positive small-t rate and the exponential lower bound it implies."""
    tol = _tolerance(model, phi, cfg)
    ev = _velocity_cap(model, phi, cfg)
    lam = model.lambda_bound
    horizons = tuple(sorted(cfg.horizons))
    X = phi.spec.nodes()
    c_b, c_f = rate_constant(model, phi, ev, cfg.small_t)

    ev_h = replace(ev, snapshot_times=horizons)
    back = evolve_backward(model, phi, horizons[-1], ev_h)
    fwd = evolve_forward(model, phi, horizons[-1], ev_h)
    margins = {"c_hat": c_b, "c_hat_forward": c_f}
    witnesses = []
    rate_min, strict_b, strict_f, fwd_rate = math.inf, math.inf, -math.inf, math.inf
    for t in horizons:
        gain = back.at(t).flat - phi.flat
        m = gain - _rate_floor(c_b, lam, t)
        margins[f"rate_margin_t={t:g}"] = float(np.min(m))
        if np.min(m) < rate_min:
            rate_min = float(np.min(m))
            witnesses.append(_argmin_witness(m, X, "rate_bound", t=t))
        strict_b = min(strict_b, float(np.min(gain)))
        drop = fwd.at(t).flat - phi.flat
        strict_f = max(strict_f, float(np.max(drop)))
        fwd_rate = min(fwd_rate, float(np.min(-drop - _rate_floor(c_f, lam, t))))
    margins.update({"rate_margin": rate_min, "strict_backward": strict_b, "strict_forward": strict_f,
                    "forward_rate_margin": fwd_rate})
    checks = {"strict_rate": c_b > tol, "rate_bound": rate_min >= -tol, "strict_backward": strict_b > 0,
              "strict_rate_forward": c_f > tol, "strict_forward": strict_f < 0}
    t1, t2 = sorted(cfg.small_t, reverse=True)
    params = _parameters(model, phi, cfg, tol, ev, **{"lambda": lam, "extrapolation": {
        "order": 1, "nodes": [t1, t2], "formula": "(r q(t2) - q(t1)) / (r - 1), r = t1/t2"}})
    return VerificationReport("theorem-b", all(checks.values()), checks, margins, witnesses, params)


def battery_corollary_C(model: HamiltonianModel, phi: GridFunction, cfg: VerifyConfig = VerifyConfig(),
                        c_hat: float | None = None) -> VerificationReport:
    """Flowed epigraph samples end strictly inside the epigraph; boundary starts clear the rate floor."""
    tol = _tolerance(model, phi, cfg)
    ev = _velocity_cap(model, phi, cfg)
    lam = model.lambda_bound
    horizons = tuple(sorted(cfg.horizons))
    if c_hat is None:
        c_hat, _ = rate_constant(model, phi, ev, cfg.small_t)
    interior = epigraph_samples(model, phi, cfg)
    bound = epigraph_samples(model, phi, replace(cfg, seed=cfg.seed + 1, boundary_probes=False), on_boundary=True)
    s = EpigraphSamples(*(np.concatenate([getattr(interior, k), getattr(bound, k)])
                          for k in ("x", "p", "u", "gap", "boundary")))
    flows = _flow_samples(model, s, horizons, cfg.flow_h, phi.spec.period)
    gaps, floors = [], []
    floor_min, gap_min, wit_floor, wit_gap = math.inf, math.inf, None, None
    for t, x, p, u, alive in flows:
        g = np.where(alive, u - interpolate_values(phi.values, phi.spec, x), np.inf)
        gaps.append(g)
        fm = np.where(s.boundary, g - _rate_floor(c_hat, lam, t), np.inf)
        floors.append(fm)
        i = int(np.argmin(fm))
        if fm[i] < floor_min:
            floor_min = float(fm[i])
            wit_floor = {"check": "gap_floor", "t": t, "sample": i, "x0": s.x[i].tolist(), "p0": s.p[i].tolist(),
                         "u0": float(s.u[i]), "margin": floor_min}
        i = int(np.argmin(g))
        if g[i] < gap_min:
            gap_min = float(g[i])
            wit_gap = {"check": "interior", "t": t, "sample": i, "x0": s.x[i].tolist(), "p0": s.p[i].tolist(),
                       "u0": float(s.u[i]), "final_gap": gap_min}
    margins = {"c_hat": c_hat, "floor_margin": floor_min, "min_final_gap": gap_min}
    checks = {"strict_rate": c_hat > tol, "gap_floor": floor_min >= -tol, "interior": gap_min > 0}
    params = _parameters(model, phi, cfg, tol, ev, **{"lambda": lam, "n_flowed": len(s.u)})
    csv = _samples_csv(s, flows, "final_gap", gaps)
    return VerificationReport("corollary-c", all(checks.values()), checks, margins, [wit_floor, wit_gap],
                              params, csv)


def check_lemma_flow_inclusion(model: HamiltonianModel, phi: GridFunction, cfg: VerifyConfig = VerifyConfig(),
                               tol: float | None = None) -> VerificationReport:
    """u(t) >= T_t^- phi (x(t)) - tol for flowed epigraph samples; holds for any continuous phi."""
    if tol is None:
        tol = _tolerance(model, phi, cfg)
    ev = _velocity_cap(model, phi, cfg)
    horizons = tuple(sorted(cfg.horizons))
    back = evolve_backward(model, phi, horizons[-1], replace(ev, snapshot_times=horizons))
    s = epigraph_samples(model, phi, cfg)
    flows = _flow_samples(model, s, horizons, cfg.flow_h, phi.spec.period)
    margins_t = []
    worst, wit, violations = math.inf, None, 0
    for t, x, p, u, alive in flows:
        T = back.at(t)
        m = np.where(alive, u - interpolate_values(T.values, T.spec, x), np.inf)
        margins_t.append(m)
        violations += int(np.sum(m < -tol))
        i = int(np.argmin(m))
        if m[i] < worst:
            worst = float(m[i])
            wit = {"check": "inclusion", "t": t, "sample": i, "x0": s.x[i].tolist(), "p0": s.p[i].tolist(),
                   "u0": float(s.u[i]), "x_t": x[i].tolist(), "u_t": float(u[i]), "margin": worst}
    checks = {"inclusion": violations == 0}
    margins = {"min_margin": worst, "violations": violations}
    params = _parameters(model, phi, cfg, float(tol), ev, n_flowed=len(s.u))
    return VerificationReport("lemma-inclusion", violations == 0, checks, margins, [wit], params,
                              _samples_csv(s, flows, "inclusion_margin", margins_t))


def subsolution_report(model: HamiltonianModel, phi: GridFunction, cfg: VerifyConfig = VerifyConfig(),
                       mode: str = "ae") -> VerificationReport:
    """:func:`check_subsolution` wrapped as a battery report."""
    tol = cfg.tol if cfg.tol is not None else mesh_tolerance(model, phi)
    r = check_subsolution(model, phi, mode, tol)
    params = {"model": model.describe(), "mode": mode, "tolerance": tol, "lipschitz_bound": r.lipschitz_bound,
              "constrained_nodes": r.constrained_nodes}
    return VerificationReport("subsolution", r.passed, {"subsolution": r.passed},
                              {"worst_margin": r.worst_margin}, [r.witness], params)
