"""Contact Hamiltonians H(x, p, u), their Legendre transforms, and sampled assumption checks."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .expr import Expression, parse_function_of_x


class ModelError(ValueError):
    pass


class LegendreError(ArithmeticError):
    def __init__(self, best_p, residual):
        self.best_p = np.asarray(best_p)
        self.residual = float(np.max(residual))
        super().__init__(f"Legendre ascent did not converge (residual |v - dH/dp| = {self.residual:.3e})")


@dataclass(frozen=True)
class JetValue:
    value: np.ndarray
    d_x: np.ndarray  # (..., d)
    d_p: np.ndarray  # (..., d)
    d_u: np.ndarray


@dataclass(frozen=True)
class LagrangianValue:
    value: np.ndarray
    argmax_p: np.ndarray  # (..., d)


def _vec(a, dim: int) -> np.ndarray:
    """Coerce to shape (..., dim); scalars and 1-d inputs are accepted when dim == 1."""
    a = np.asarray(a, dtype=float)
    if dim == 1 and (a.ndim == 0 or a.shape[-1] != 1):
        return a[..., None]
    return a


class HamiltonianModel:
    kind: str = ""
    dim: int = 1
    lambda_bound: float = 1.0

    def jet(self, x, p, u) -> JetValue:
        raise NotImplementedError

    def value(self, x, p, u) -> np.ndarray:
        return self.jet(x, p, u).value

    def lagrangian(self, x, v, u) -> LagrangianValue:
        return legendre_numeric(self, x, v, u)

    def describe(self) -> dict[str, Any]:
        raise NotImplementedError


def eval_jet(model: HamiltonianModel, x, p, u) -> JetValue:
    return model.jet(x, p, u)


def parse_hamiltonian(text: str, dim: int | None = None, lambda_bound: float | None = None) -> "ExpressionModel":
    """Expression model over x1..xd, p1..pd, u."""
    return ExpressionModel(text, dim, lambda_bound)


class ExpressionModel(HamiltonianModel):
    kind = "expression"

    def __init__(self, text: str, dim: int | None = None, lambda_bound: float | None = None,
                 p_max: float = 10.0):
        self.expression = Expression(text, dim)
        self.dim = self.expression.dim
        self.p_max = float(p_max)
        if lambda_bound is None:
            lambda_bound = _estimate_lambda(self)
            self.lambda_declared = False
        else:
            self.lambda_declared = True
        if not lambda_bound > 0:
            raise ModelError(f"lambda must be positive, got {lambda_bound}")
        self.lambda_bound = float(lambda_bound)

    def __repr__(self):
        return f"ExpressionModel({self.expression.text!r}, lambda={self.lambda_bound})"

    def jet(self, x, p, u) -> JetValue:
        d = self.dim
        val, grad = self.expression.jet(_vec(x, d), _vec(p, d), u)
        return JetValue(val, np.moveaxis(grad[:d], 0, -1), np.moveaxis(grad[d:2 * d], 0, -1), grad[2 * d])

    def value(self, x, p, u):
        return self.expression.value(_vec(x, self.dim), _vec(p, self.dim), u)

    def lagrangian(self, x, v, u) -> LagrangianValue:
        return legendre_numeric(self, x, v, u, p_max=self.p_max)

    def describe(self):
        return {"kind": "expression", "expression": self.expression.text, "dim": self.dim,
                "lambda": self.lambda_bound, "lambda_declared": self.lambda_declared,
                "p_max": self.p_max}


class QuadraticContact(HamiltonianModel):
    """H(x, p, u) = 1/2 <A(x) p, p> + V0(x) + g(u).

    ``A`` is a scalar, a constant d x d matrix, or a d x d nested list of
    expression strings in x1..xd. ``g`` is ``"linear"`` (coeff * u) or
    ``"sin"`` (coeff * sin(u)).
    """

    kind = "quadratic"

    def __init__(self, A: Any = 1.0, V0: str | float = 0.0, g: str = "linear", g_coeff: float = 1.0,
                 lambda_bound: float | None = None, dim: int = 1, eig_floor: float = 1e-10):
        if dim not in (1, 2):
            raise ModelError("dim must be 1 or 2")
        self.dim = dim
        self._A_spec = A
        self._setup_A(A, eig_floor)
        self._V0_spec = V0
        if isinstance(V0, (int, float)):
            self._V0_const, self._V0 = float(V0), None
        else:
            expr = parse_function_of_x(str(V0), dim)
            if not expr.used:
                self._V0_const, self._V0 = float(expr.value(np.zeros(dim), np.zeros(dim), 0.0)), None
            else:
                self._V0_const, self._V0 = 0.0, expr
        if g not in ("linear", "sin"):
            raise ModelError(f"g must be 'linear' or 'sin', got {g!r}")
        self.g, self.g_coeff = g, float(g_coeff)
        if lambda_bound is None:
            lambda_bound = abs(self.g_coeff)
        if not lambda_bound > 0:
            raise ModelError(f"lambda must be positive, got {lambda_bound}")
        self.lambda_bound = float(lambda_bound)

    def __repr__(self):
        return f"QuadraticContact(A={self._A_spec!r}, V0={self._V0_spec!r}, g={self.g}:{self.g_coeff})"

    def _setup_A(self, A, eig_floor):
        d = self.dim
        self._A_expr = None
        if np.ndim(A) == 0 and not isinstance(A, str):
            mat = float(A) * np.eye(d)
        elif isinstance(A, str) or any(isinstance(a, str) for a in np.ravel(np.asarray(A, dtype=object))):
            entries = np.asarray(A, dtype=object).reshape(d, d) if not isinstance(A, str) else np.array([[A]])
            if entries.shape != (d, d):
                raise ModelError(f"A must be {d}x{d}")
            self._A_expr = [[parse_function_of_x(str(entries[i, j]), d) for j in range(d)] for i in range(d)]
            mat = None
        else:
            mat = np.asarray(A, dtype=float).reshape(d, d)
        if mat is not None:
            if not np.allclose(mat, mat.T, rtol=0, atol=1e-14):
                raise ModelError("A must be symmetric")
            if np.linalg.eigvalsh(mat).min() < eig_floor:
                raise ModelError("A must be positive definite")
            self._A_const, self._Ainv_const = mat, np.linalg.inv(mat)
            return
        # expression field: check symmetry and positivity on a sampling grid
        pts = np.stack(np.meshgrid(*[np.linspace(0, 1, 33)] * d, indexing="ij"), -1).reshape(-1, d)
        Ax, _ = self._A_field(pts)
        if not np.allclose(Ax, np.swapaxes(Ax, -1, -2), rtol=0, atol=1e-12):
            raise ModelError("A(x) must be symmetric")
        if np.linalg.eigvalsh(Ax).min() < eig_floor:
            raise ModelError("A(x) must be positive definite at every sampled x")
        self._A_const = None

    def _A_field(self, x):
        """A(x) of shape (..., d, d) and dA/dx of shape (..., d, d, d) (last axis: x component)."""
        d = self.dim
        lead = x.shape[:-1]
        A = np.empty(lead + (d, d))
        dA = np.empty(lead + (d, d, d))
        zeros = np.zeros_like(x)
        for i in range(d):
            for j in range(d):
                val, grad = self._A_expr[i][j].jet(x, zeros, np.zeros(lead))
                A[..., i, j] = val
                dA[..., i, j, :] = np.moveaxis(grad[:d], 0, -1)
        return A, dA

    def _V0_jet(self, x):
        if self._V0 is None:
            return self._V0_const, 0.0
        val, grad = self._V0.jet(x, np.zeros_like(x), np.zeros(x.shape[:-1]))
        return val, np.moveaxis(grad[: self.dim], 0, -1)

    def _V0_value(self, x):
        if self._V0 is None:
            return self._V0_const
        return self._V0.value(x, np.zeros_like(x), np.zeros(x.shape[:-1]))

    def g_value(self, u):
        if self.g == "linear":
            return self.g_coeff * u
        return self.g_coeff * np.sin(u)

    def g_prime(self, u):
        if self.g == "linear":
            return np.full(np.shape(u), self.g_coeff)
        return self.g_coeff * np.cos(u)

    def jet(self, x, p, u) -> JetValue:
        d = self.dim
        x, p = _vec(x, d), _vec(p, d)
        u = np.asarray(u, dtype=float)
        V, dV = self._V0_jet(x)
        if self._A_const is not None:
            if d == 1:
                a = self._A_const[0, 0]
                Ap = a * p
                kin = 0.5 * a * p[..., 0] ** 2
            else:
                Ap = p @ self._A_const.T
                kin = 0.5 * np.sum(Ap * p, axis=-1)
            dx = np.zeros(np.broadcast_shapes(x.shape, p.shape)) + dV
        else:
            A, dA = self._A_field(x)
            Ap = (A @ p[..., None])[..., 0]
            kin = 0.5 * np.sum(Ap * p, axis=-1)
            dx = 0.5 * np.sum(p[..., :, None, None] * dA * p[..., None, :, None], axis=(-3, -2)) + dV
        value = kin + V + self.g_value(u)
        shape = np.shape(value)
        return JetValue(value, dx, np.broadcast_to(Ap, shape + (d,)), np.broadcast_to(self.g_prime(u), shape))

    def value(self, x, p, u):
        return self.jet(x, p, u).value

    def vector_field(self, x, p, u):
        """Contact vector field without building a JetValue (hot path of the integrators)."""
        if self._A_const is None:
            return None
        d = self.dim
        if d == 1:
            a = self._A_const[0, 0]
            Ap = a * p
            kin = 0.5 * Ap * p
            kin = kin[..., 0]
        else:
            Ap = p @ self._A_const.T
            kin = 0.5 * (Ap * p).sum(-1)
        if self.g == "linear":
            gp = self.g_coeff
            gv = self.g_coeff * u
        else:
            gp = self.g_coeff * np.cos(u)
            gv = self.g_coeff * np.sin(u)
        if self._V0 is None:
            dp = -(gp * p if np.ndim(gp) == 0 else gp[..., None] * p)
            du = kin - self._V0_const - gv
        else:
            V, dV = self._V0_jet(x)
            dp = -dV - (gp * p if np.ndim(gp) == 0 else gp[..., None] * p)
            du = kin - V - gv
        return Ap, dp, du

    def inverse_mass(self, x) -> np.ndarray:
        if self._A_const is not None:
            return self._Ainv_const
        A, _ = self._A_field(_vec(x, self.dim))
        return np.linalg.inv(A)

    def kinetic_lagrangian(self, x, v) -> tuple[np.ndarray, np.ndarray]:
        """(1/2 <A^-1 v, v> - V0(x), A^-1 v): the u-independent part of L."""
        d = self.dim
        x, v = _vec(x, d), _vec(v, d)
        if self._A_const is not None and d == 1:
            ainv = self._Ainv_const[0, 0]
            p = ainv * v
            kin = 0.5 * ainv * v[..., 0] ** 2
        else:
            Ainv = self.inverse_mass(x)
            p = (Ainv @ v[..., None])[..., 0] if np.ndim(Ainv) > 2 else v @ Ainv.T
            kin = 0.5 * np.sum(p * v, axis=-1)
        return kin - self._V0_value(x), p

    def lagrangian(self, x, v, u) -> LagrangianValue:
        L0, p = self.kinetic_lagrangian(x, v)
        val = L0 - self.g_value(np.asarray(u, dtype=float))
        return LagrangianValue(val, np.broadcast_to(p, np.shape(val) + (self.dim,)))

    def describe(self):
        A = self._A_spec
        if isinstance(A, np.ndarray):
            A = A.tolist()
        V0 = self._V0_spec if isinstance(self._V0_spec, str) else float(self._V0_spec)
        return {"kind": "quadratic", "dim": self.dim, "A": A, "V0": V0, "g": self.g,
                "g_coeff": self.g_coeff, "lambda": self.lambda_bound}


CATALOG = {
    "E1": dict(kind="quadratic", A=1.0, V0="0", g="linear", g_coeff=1.0, **{"lambda": 1.0}),
    "E2": dict(kind="quadratic", A=1.0, V0="cos(2*pi*x1)", g="linear", g_coeff=0.2, **{"lambda": 0.2}),
}


def build_model(block: dict | str) -> HamiltonianModel:
    """Model from a config block, a catalog name, or an expression string."""
    if isinstance(block, str):
        if block in CATALOG:
            block = CATALOG[block]
        else:
            return ExpressionModel(block)
    block = dict(block)
    if "name" in block:
        name = block.pop("name")
        if name not in CATALOG:
            raise ModelError(f"unknown model name {name!r}; known: {sorted(CATALOG)}")
        block = {**CATALOG[name], **block}
    kind = block.get("kind", "expression" if "expression" in block else "quadratic")
    lam = block.get("lambda")
    if kind == "expression":
        if "expression" not in block:
            raise ModelError("model block of kind 'expression' needs an 'expression' field")
        return ExpressionModel(str(block["expression"]), block.get("dim"), lam, block.get("p_max", 10.0))
    if kind == "quadratic":
        return QuadraticContact(block.get("A", 1.0), block.get("V0", 0.0), block.get("g", "linear"),
                                block.get("g_coeff", 1.0), lam, int(block.get("dim", 1)))
    raise ModelError(f"unknown model kind {kind!r}")


# -- Legendre transform -------------------------------------------------------

def _hessian_p(model: HamiltonianModel, x, p, u, rel_step: float = 1e-5) -> np.ndarray:
    """d^2H/dp^2 by central differences of the exact dH/dp; shape (..., d, d)."""
    d = model.dim
    hess = np.empty(p.shape + (d,))
    for i in range(d):
        step = rel_step * (1.0 + np.abs(p[..., i]))
        e = np.zeros(p.shape)
        e[..., i] = step
        gp = model.jet(x, p + e, u).d_p
        gm = model.jet(x, p - e, u).d_p
        hess[..., :, i] = (gp - gm) / (2.0 * step[..., None])
    return 0.5 * (hess + np.swapaxes(hess, -1, -2))


def legendre_numeric(model: HamiltonianModel, x, v, u, p_max: float = 10.0, n_starts: int = 9,
                     tol: float = 1e-12, max_iter: int = 60) -> LagrangianValue:
    """sup_p { p.v - H(x,p,u) } by a multi-start grid then damped Newton on v - dH/dp."""
    d = model.dim
    x, v = _vec(x, d), _vec(v, d)
    u = np.asarray(u, dtype=float)
    shape = np.broadcast_shapes(x.shape[:-1], v.shape[:-1], u.shape)
    X = np.broadcast_to(x, shape + (d,)).reshape(-1, d)
    Vv = np.broadcast_to(v, shape + (d,)).reshape(-1, d)
    U = np.broadcast_to(u, shape).reshape(-1)
    n = U.size

    axis = np.linspace(-p_max, p_max, n_starts)
    starts = np.array(list(itertools.product(axis, repeat=d)))  # (S, d)
    S = starts.shape[0]
    Pst = np.broadcast_to(starts[None], (n, S, d))
    obj = np.einsum("nsd,nd->ns", Pst, Vv) - model.value(X[:, None, :], Pst, U[:, None])
    p = starts[np.argmax(obj, axis=1)].copy()

    def objective(pp):
        return np.einsum("nd,nd->n", pp, Vv) - model.value(X, pp, U)

    f = objective(p)
    scale = 1.0 + np.linalg.norm(Vv, axis=-1)
    for _ in range(max_iter):
        grad = Vv - model.jet(X, p, U).d_p
        res = np.linalg.norm(grad, axis=-1)
        active = res > tol * scale
        if not active.any():
            break
        hess = _hessian_p(model, X[active], p[active], U[active])
        try:
            step = np.linalg.solve(hess, grad[active][..., None])[..., 0]
        except np.linalg.LinAlgError:
            step = grad[active]
        pa, fa = p[active], f[active]
        Xa, Va, Ua = X[active], Vv[active], U[active]
        t = np.ones(pa.shape[0])
        accepted = np.zeros(pa.shape[0], dtype=bool)
        cand, fc = pa, fa
        for _ in range(40):
            trial = pa + t[:, None] * step
            ft = np.einsum("nd,nd->n", trial, Va) - model.value(Xa, trial, Ua)
            ok = ~accepted & (ft >= fa - 1e-15 * (1 + np.abs(fa)))
            cand = np.where(ok[:, None], trial, cand)
            fc = np.where(ok, ft, fc)
            accepted |= ok
            if accepted.all():
                break
            t = np.where(accepted, t, 0.5 * t)
        p[active], f[active] = cand, fc
    grad = Vv - model.jet(X, p, U).d_p
    res = np.linalg.norm(grad, axis=-1)
    if np.any(res > 1e3 * tol * scale) or not np.all(np.isfinite(f)):
        raise LegendreError(p.reshape(shape + (d,)), res)
    return LagrangianValue(f.reshape(shape), p.reshape(shape + (d,)))


def legendre(model: HamiltonianModel, x, v, u) -> LagrangianValue:
    return model.lagrangian(x, v, u)


# -- assumption diagnostics -------------------------------------------------

@dataclass(frozen=True)
class SamplingPlan:
    n_x: int = 16
    p_max: float = 10.0
    n_p: int = 21
    u_max: float = 10.0
    n_u: int = 21
    period: float = 1.0
    alpha: float | None = None
    beta: float | None = None

    def points(self, dim: int):
        xs = np.arange(self.n_x) * self.period / self.n_x
        ps = np.linspace(-self.p_max, self.p_max, self.n_p)
        us = np.linspace(-self.u_max, self.u_max, self.n_u)
        X = np.array(list(itertools.product(xs, repeat=dim)))
        P = np.array(list(itertools.product(ps, repeat=dim)))
        ix, ip, iu = np.meshgrid(np.arange(len(X)), np.arange(len(P)), np.arange(len(us)), indexing="ij")
        return X[ix.ravel()], P[ip.ravel()], us[iu.ravel()]


@dataclass
class AssumptionCheck:
    passed: bool
    value: float
    witness: dict | None
    n_samples: int
    note: str = ""

    def summary(self) -> str:
        if self.passed:
            return f"no violation found on {self.n_samples} samples"
        return f"violation found on {self.n_samples} samples"


@dataclass
class DiagnosticsReport:
    checks: dict[str, AssumptionCheck]
    plan: SamplingPlan
    model: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks.values())

    def to_dict(self) -> dict:
        return {
            "passed": self.passed,
            "model": self.model,
            "plan": {k: getattr(self.plan, k) for k in self.plan.__dataclass_fields__},
            "checks": {
                k: {"passed": c.passed, "value": c.value, "witness": c.witness, "n_samples": c.n_samples,
                    "summary": c.summary(), "note": c.note}
                for k, c in self.checks.items()
            },
        }


def _witness(X, P, U, i) -> dict:
    return {"x": X[i].tolist(), "p": P[i].tolist(), "u": float(U[i])}


def check_assumptions(model: HamiltonianModel, plan: SamplingPlan = SamplingPlan()) -> DiagnosticsReport:
    X, P, U = plan.points(model.dim)
    n = len(U)
    jet = model.jet(X, P, U)
    H = jet.value
    checks = {}

    hess = _hessian_p(model, X, P, U)
    eig = np.linalg.eigvalsh(hess)[..., 0]
    slack = eig - 1e-8 * (1.0 + np.abs(H))
    i = int(np.argmin(slack))
    checks["H1"] = AssumptionCheck(bool(slack[i] > 0), float(eig[i]), _witness(X, P, U, i), n,
                                   "min eigenvalue of d2H/dp2 (second differences of exact gradients)")

    # superlinearity proxy: H/|p| increasing along rays over the outer half of the box
    if model.dim == 1:
        dirs = np.array([[1.0], [-1.0]])
    else:
        ang = np.arange(8) * np.pi / 4
        dirs = np.stack([np.cos(ang), np.sin(ang)], -1)
    radii = np.linspace(plan.p_max / 2, plan.p_max, 11)
    xs = np.array(list(itertools.product(np.arange(plan.n_x) * plan.period / plan.n_x, repeat=model.dim)))
    us = np.linspace(-plan.u_max, plan.u_max, plan.n_u)
    worst, wit, count = np.inf, None, 0
    for xv in xs:
        for uv in us:
            for dvec in dirs:
                pts = radii[:, None] * dvec
                q = model.value(np.broadcast_to(xv, pts.shape), pts, np.full(len(radii), uv)) / radii
                inc = np.diff(q)
                count += len(radii)
                k = int(np.argmin(inc))
                if inc[k] < worst:
                    worst = float(inc[k])
                    wit = {"x": xv.tolist(), "p": pts[k].tolist(), "u": float(uv)}
    checks["H2"] = AssumptionCheck(bool(worst > 0), worst, wit, count,
                                   f"smallest increment of H/|p| along rays, |p| in [{plan.p_max / 2}, {plan.p_max}]")

    abs_hu = np.abs(jet.d_u)
    i = int(np.argmax(abs_hu))
    lam = model.lambda_bound
    checks["H3"] = AssumptionCheck(bool(abs_hu[i] <= lam * (1 + 1e-12)), float(lam - abs_hu[i]),
                                   _witness(X, P, U, i), n, f"margin lambda - max|dH/du|, lambda = {lam}")

    if plan.alpha is not None and plan.beta is not None:
        lhs = np.abs(np.einsum("nd,nd->n", P, jet.d_p))
        rhs = (plan.alpha * np.abs(H) + plan.beta) * (1.0 + np.abs(U))
        excess = lhs - rhs
        i = int(np.argmax(excess))
        viol = max(0.0, float(excess[i]))
        checks["completeness"] = AssumptionCheck(
            viol <= 1e-12 * (1 + float(rhs[i])), viol, _witness(X, P, U, i), n,
            f"max violation of |p.dH/dp| <= (alpha|H| + beta)(1 + |u|), alpha={plan.alpha}, beta={plan.beta}")
    return DiagnosticsReport(checks, plan, model.describe())


def _estimate_lambda(model: HamiltonianModel) -> float:
    plan = SamplingPlan(n_x=8, n_p=9, n_u=9)
    X, P, U = plan.points(model.dim)
    return max(float(np.max(np.abs(model.jet(X, P, U).d_u))), 1e-12)
