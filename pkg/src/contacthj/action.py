"""Implicit action functions on the circle by characteristic shooting.

``h_backward`` gives the least terminal value u(t) over characteristics
running from (x0, u0) to x in time t. ``h_forward`` gives the largest initial
value u(0) over characteristics with x(0) = x that end at (x0, u0) at time t;
it shoots from (x0, u0) along the reversed field.

Initial momenta are scanned on a uniform grid. Cells where the shooting map
p0 -> x(t) folds (a discrete local extremum) or bends sharply (near-separatrix
passages) are subdivided a few times, so that nearby roots are not lost
between two scan points. Sign changes of x(t) - (x + k P) are then bracketed for every winding
|k| <= k_max, and each bracket is refined by the Illinois variant of regula
falsi. All brackets of a batch are refined together as one ensemble.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .flow import integrate_ensemble
from .hamiltonian import HamiltonianModel, legendre


class NoCharacteristicFound(RuntimeError):
    def __init__(self, message: str, sweep=None):
        self.sweep = sweep
        super().__init__(message)


@dataclass(frozen=True)
class ShootingConfig:
    p_shoot: float = 20.0
    n_scan: int = 512
    k_max: int = 3
    h: float = 1e-2
    hit_tol: float = 1e-10
    t_min: float = 1e-2
    max_refine: int = 100
    tie_tol: float = 1e-9
    fold_levels: int = 4
    fold_points: int = 8
    bend_tol: float = 0.05  # fraction of the period

    def scan(self) -> np.ndarray:
        return np.linspace(-self.p_shoot, self.p_shoot, self.n_scan)


@dataclass(frozen=True)
class ActionQuery:
    x0: float
    u0: float
    x: float
    t: float
    direction: str = "backward"

    def __post_init__(self):
        if not self.t > 0:
            raise ValueError(f"action functions need t > 0, got {self.t}")
        if self.direction not in ("backward", "forward"):
            raise ValueError(f"direction must be 'backward' or 'forward', got {self.direction!r}")


@dataclass
class Sweep:
    p0: np.ndarray
    displacement: np.ndarray  # unwrapped endpoint minus start
    u: np.ndarray

    def to_csv(self) -> str:
        rows = ["p0,displacement,u"]
        rows += [f"{p!r},{d!r},{u!r}" for p, d, u in zip(self.p0.tolist(), self.displacement.tolist(),
                                                         self.u.tolist())]
        return "\n".join(rows) + "\n"


@dataclass
class ActionResult:
    value: float
    attaining_p0: np.ndarray
    winding: np.ndarray
    candidates_scanned: int
    hits_p0: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    hits_value: np.ndarray = field(default_factory=lambda: np.empty(0), repr=False)
    hits_winding: np.ndarray = field(default_factory=lambda: np.empty(0, dtype=int), repr=False)
    sweep: Sweep | None = field(default=None, repr=False)


@dataclass
class ActionTable:
    values: np.ndarray  # (S, Q), nan where nothing was hit
    found: np.ndarray
    p0: np.ndarray
    winding: np.ndarray
    n_hits: np.ndarray


def _check_model(model):
    if model.dim != 1:
        raise ValueError("characteristic shooting is implemented for d = 1 only")


def _shoot(model, x0, p0, u0, T, cfg, period, sign):
    res = integrate_ensemble(model, x0, p0, u0, T, cfg.h, period, backward=sign < 0)
    disp = res.unwrapped_x[:, 0] - x0
    u = res.u
    disp = np.where(res.alive, disp, np.nan)
    return disp, np.where(res.alive, u, np.nan)


def _flag_cells(p, d, bend):
    """Scan cells next to a discrete extremum, or whose increment departs from the
    neighbouring slopes by more than ``bend``."""
    dp, dd = np.diff(p), np.diff(d)
    flag = np.zeros(len(dd), dtype=bool)
    with np.errstate(invalid="ignore"):
        ext = dd[:-1] * dd[1:] < 0
        flag[:-1] |= ext
        flag[1:] |= ext
        slope = dd / dp
        left = np.concatenate([[np.nan], slope[:-1]])
        right = np.concatenate([slope[1:], [np.nan]])
        guess = np.where(np.isnan(left), right, np.where(np.isnan(right), left, 0.5 * (left + right)))
        flag |= np.abs(dd - guess * dp) > bend
    return np.nonzero(flag)[0]


def _scan(model, x0, u0, t, cfg: ShootingConfig, period: float, sign: float):
    """Per-source scans (p0, displacement, u) with cells next to folds subdivided."""
    S = len(x0)
    scan = cfg.scan()
    m = len(scan)
    disp, uend = _shoot(model, np.repeat(x0, m), np.tile(scan, S), np.repeat(u0, m), np.repeat(t, m),
                        cfg, period, sign)
    P = [scan.copy() for _ in range(S)]
    D = list(disp.reshape(S, m))
    U = list(uend.reshape(S, m))
    frac = np.arange(1, cfg.fold_points + 1) / (cfg.fold_points + 1)
    for _ in range(cfg.fold_levels):
        new_src, new_p = [], []
        for s in range(S):
            cells = _flag_cells(P[s], D[s], cfg.bend_tol * period)
            if len(cells) == 0:
                continue
            pts = (P[s][cells, None] + frac[None, :] * (P[s][cells + 1] - P[s][cells])[:, None]).ravel()
            new_src.append(np.full(len(pts), s))
            new_p.append(pts)
        if not new_src:
            break
        ns, npts = np.concatenate(new_src), np.concatenate(new_p)
        d_new, u_new = _shoot(model, x0[ns], npts, u0[ns], t[ns], cfg, period, sign)
        for s in np.unique(ns):
            sel = ns == s
            p_all = np.concatenate([P[s], npts[sel]])
            order = np.argsort(p_all, kind="stable")
            P[s] = p_all[order]
            D[s] = np.concatenate([D[s], d_new[sel]])[order]
            U[s] = np.concatenate([U[s], u_new[sel]])[order]
    return P, D, U


def _solve(model, x0, u0, t, xs, cfg: ShootingConfig, period: float, sign: float, keep_sweep=False):
    """Shoot from S sources to Q targets each. ``t`` is per source."""
    S, Q = xs.shape
    x0 = np.mod(x0, period)
    ks = np.arange(-cfg.k_max, cfg.k_max + 1)
    P, D, U = _scan(model, x0, u0, t, cfg, period, sign)
    base = xs - x0[:, None]
    base = base - period * np.floor(base / period + 0.5)

    src, tgt, kk, lo, hi, flo, fhi, tar = [], [], [], [], [], [], [], []
    for s in range(S):
        scan = P[s]
        targets = base[s][:, None] + ks[None, :] * period  # (Q, K)
        F = D[s][None, None, :] - targets[:, :, None]
        F0, F1 = F[..., :-1], F[..., 1:]
        with np.errstate(invalid="ignore"):
            br = np.isfinite(F0) & np.isfinite(F1) & ((F0 == 0) | (F0 * F1 < 0))
            last = F[..., -1] == 0
        qi, ki, ji = np.nonzero(br)
        src.append(np.full(len(qi), s))
        tgt.append(qi)
        kk.append(ks[ki])
        lo.append(scan[ji])
        hi.append(scan[ji + 1])
        flo.append(F0[qi, ki, ji])
        fhi.append(F1[qi, ki, ji])
        tar.append(targets[qi, ki])
        ql, kl = np.nonzero(last)
        if len(ql):
            src.append(np.full(len(ql), s))
            tgt.append(ql)
            kk.append(ks[kl])
            lo.append(np.full(len(ql), scan[-1]))
            hi.append(np.full(len(ql), scan[-1]))
            flo.append(np.zeros(len(ql)))
            fhi.append(np.zeros(len(ql)))
            tar.append(targets[ql, kl])
    src, tgt, kk = (np.concatenate(a).astype(np.int64) for a in (src, tgt, kk))
    a, b, fa, fb, tar = (np.concatenate(v).astype(float) for v in (lo, hi, flo, fhi, tar))

    n = len(src)
    p_hit = np.full(n, np.nan)
    u_hit = np.full(n, np.nan)
    # endpoints that already land on the target
    for pe, fe in ((a, fa), (b, fb)):
        exact = np.isnan(p_hit) & (np.abs(fe) <= cfg.hit_tol)
        p_hit[exact] = pe[exact]
    active = np.isnan(p_hit)
    for _ in range(cfg.max_refine):
        idx = np.nonzero(active)[0]
        if len(idx) == 0:
            break
        A, B, FA, FB = a[idx], b[idx], fa[idx], fb[idx]
        c = B - FB * (B - A) / (FB - FA)
        c = np.where(np.isfinite(c) & (c > np.minimum(A, B)) & (c < np.maximum(A, B)), c, 0.5 * (A + B))
        d, _ = _shoot(model, x0[src[idx]], c, u0[src[idx]], t[src[idx]], cfg, period, sign)
        fc = d - tar[idx]
        ok = np.abs(fc) <= cfg.hit_tol
        p_hit[idx[ok]] = c[ok]
        flip = fc * FB < 0
        a[idx] = np.where(flip, B, A)
        fa[idx] = np.where(flip, FB, 0.5 * FA)
        b[idx] = c
        fb[idx] = fc
        active[idx[ok]] = False
        # a lost bracket (non-finite endpoint) is dropped
        active[idx[~np.isfinite(fc)]] = False
    found = ~np.isnan(p_hit)
    if found.any():
        i = np.nonzero(found)[0]
        _, u_hit[i] = _shoot(model, x0[src[i]], p_hit[i], u0[src[i]], t[src[i]], cfg, period, sign)
    found &= np.isfinite(u_hit)

    values = np.full((S, Q), np.nan)
    p_best = np.full((S, Q), np.nan)
    k_best = np.zeros((S, Q), dtype=np.int64)
    n_hits = np.zeros((S, Q), dtype=np.int64)
    i = np.nonzero(found)[0]
    np.add.at(n_hits, (src[i], tgt[i]), 1)
    # objective to minimize: u for backward, -u for forward; ties to lowest p0
    obj = sign * u_hit[i]
    order = np.lexsort((p_hit[i], obj, tgt[i], src[i]))
    i = i[order]
    obj = obj[order]
    cell = src[i] * Q + tgt[i]
    first = np.ones(len(i), dtype=bool)
    first[1:] = cell[1:] != cell[:-1]
    best_obj = np.repeat(obj[first], np.diff(np.append(np.nonzero(first)[0], len(i))))
    tied = obj <= best_obj + cfg.tie_tol * (1.0 + np.abs(best_obj))
    # among tied hits keep the lowest p0
    cand = i[tied]
    cand = cand[np.lexsort((p_hit[cand], tgt[cand], src[cand]))]
    cc = src[cand] * Q + tgt[cand]
    keep = np.ones(len(cand), dtype=bool)
    keep[1:] = cc[1:] != cc[:-1]
    pick = cand[keep]
    first_of_cell = i[first]
    values[src[first_of_cell], tgt[first_of_cell]] = u_hit[first_of_cell]
    p_best[src[pick], tgt[pick]] = p_hit[pick]
    k_best[src[pick], tgt[pick]] = kk[pick]
    table = ActionTable(values, ~np.isnan(values), p_best, k_best, n_hits)
    hits = (src[found], tgt[found], p_hit[found], u_hit[found], kk[found])
    sweep = Sweep(P[0].copy(), D[0].copy(), U[0].copy()) if keep_sweep else None
    return table, hits, sweep


def action_table(model: HamiltonianModel, x0s, u0s, xs, t, direction: str = "backward",
                 cfg: ShootingConfig = ShootingConfig(), period: float = 1.0) -> ActionTable:
    """Action values for S sources (x0s, u0s) against targets ``xs`` of shape (S, Q).

    ``t`` is a scalar or one horizon per source; all must be >= cfg.t_min.
    """
    _check_model(model)
    x0s = np.asarray(x0s, dtype=float).reshape(-1)
    u0s = np.broadcast_to(np.asarray(u0s, dtype=float).reshape(-1), x0s.shape)
    xs = np.asarray(xs, dtype=float).reshape(len(x0s), -1)
    t = np.broadcast_to(np.asarray(t, dtype=float), x0s.shape)
    if np.any(t < cfg.t_min):
        raise ValueError(f"shooting needs t >= t_min = {cfg.t_min}")
    sign = 1.0 if direction == "backward" else -1.0
    table, _, _ = _solve(model, x0s, u0s.copy(), t.copy(), xs, cfg, period, sign)
    return table


def _one_step(model, q: ActionQuery, period: float, iters: int = 200, tol: float = 1e-13) -> ActionResult:
    """Short-time action from a single implicit Lax-Oleinik step along the straight segment."""
    d = float(np.mod(q.x - q.x0 + 0.5 * period, period) - 0.5 * period)
    sign = 1.0 if q.direction == "backward" else -1.0
    v = sign * d / q.t
    w = q.u0
    for _ in range(iters):
        L = legendre(model, np.array([q.x]), np.array([v]), w)
        w_new = q.u0 + sign * q.t * float(np.asarray(L.value).reshape(-1)[0])
        if abs(w_new - w) <= tol * (1 + abs(w)):
            w = w_new
            break
        w = w_new
    p = np.asarray(L.argmax_p, dtype=float).reshape(-1)[:1]
    return ActionResult(w, p, np.zeros(1, dtype=int), 0)


def _query(model, q: ActionQuery, cfg: ShootingConfig, period: float) -> ActionResult:
    _check_model(model)
    if q.t < cfg.t_min:
        return _one_step(model, q, period)
    sign = 1.0 if q.direction == "backward" else -1.0
    table, hits, sweep = _solve(model, np.array([float(q.x0)]), np.array([float(q.u0)]), np.array([float(q.t)]),
                                np.array([[float(q.x)]]), cfg, period, sign, keep_sweep=True)
    if not table.found[0, 0]:
        raise NoCharacteristicFound(
            f"no characteristic from x0={q.x0} reaches x={q.x} in t={q.t} within |p0| <= {cfg.p_shoot}, "
            f"|winding| <= {cfg.k_max}", sweep)
    _, _, p_hit, u_hit, k_hit = hits
    return ActionResult(float(table.values[0, 0]), np.array([table.p0[0, 0]]), np.array([table.winding[0, 0]]),
                        len(sweep.p0), p_hit, u_hit, k_hit, sweep)


def h_backward(model: HamiltonianModel, q: ActionQuery, cfg: ShootingConfig = ShootingConfig(),
               period: float = 1.0) -> ActionResult:
    """h_{x0,u0}(x, t): least u(t) over characteristics from (x0, u0) reaching x at time t."""
    if q.direction != "backward":
        q = ActionQuery(q.x0, q.u0, q.x, q.t, "backward")
    return _query(model, q, cfg, period)


def h_forward(model: HamiltonianModel, q: ActionQuery, cfg: ShootingConfig = ShootingConfig(),
              period: float = 1.0) -> ActionResult:
    """h^{x0,u0}(x, t): largest u(0) over characteristics from x at time 0 ending at (x0, u0) at time t."""
    if q.direction != "forward":
        q = ActionQuery(q.x0, q.u0, q.x, q.t, "forward")
    return _query(model, q, cfg, period)


def check_equivalence(model: HamiltonianModel, x0, u0, x, t, cfg: ShootingConfig = ShootingConfig(),
                      period: float = 1.0) -> float:
    """|h^{x,u}(x0, t) - u0| where u = h_{x0,u0}(x, t)."""
    u = h_backward(model, ActionQuery(x0, u0, x, t), cfg, period).value
    back = h_forward(model, ActionQuery(x, u, x0, t, "forward"), cfg, period).value
    return abs(back - u0)


def check_equivalence_batch(model: HamiltonianModel, x0, u0, x, t, cfg: ShootingConfig = ShootingConfig(),
                            period: float = 1.0) -> np.ndarray:
    """Round-trip residuals for a batch of queries, shooting every leg as one ensemble."""
    x0, u0, x, t = (np.asarray(a, dtype=float).reshape(-1) for a in np.broadcast_arrays(x0, u0, x, t))
    fwd = action_table(model, x0, u0, x[:, None], t, "backward", cfg, period)
    if not fwd.found.all():
        raise NoCharacteristicFound(f"{int((~fwd.found).sum())} backward legs found no characteristic")
    u = fwd.values[:, 0]
    back = action_table(model, x, u, x0[:, None], t, "forward", cfg, period)
    if not back.found.all():
        raise NoCharacteristicFound(f"{int((~back.found).sum())} forward legs found no characteristic")
    return np.abs(back.values[:, 0] - u0)
