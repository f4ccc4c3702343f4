"""Periodic grids on the flat torus T^d (d = 1 or 2) and sampled functions on them.

Flat node ordering is axis-0 fastest everywhere (``values.ravel(order="F")``),
both in memory-facing helpers and in the text file format, so a round trip
through :func:`write_grid` / :func:`read_grid` is bit-stable.
"""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np


class GridError(ValueError):
    pass


def _per_axis(value, dim: int, name: str) -> tuple:
    if np.ndim(value) == 0:
        return (value,) * dim
    value = tuple(value)
    if len(value) != dim:
        raise GridError(f"{name} needs {dim} entries, got {len(value)}")
    return value


@dataclass(frozen=True)
class TorusSpec:
    dim: int = 1
    period: tuple[float, ...] | float = 1.0
    resolution: tuple[int, ...] | int = 256

    def __post_init__(self):
        if self.dim not in (1, 2):
            raise GridError(f"dim must be 1 or 2, got {self.dim}")
        period = tuple(float(p) for p in _per_axis(self.period, self.dim, "period"))
        resolution = tuple(int(n) for n in _per_axis(self.resolution, self.dim, "resolution"))
        if any(not np.isfinite(p) or p <= 0 for p in period):
            raise GridError(f"period must be positive, got {period}")
        if any(n < 8 for n in resolution):
            raise GridError(f"resolution must be >= 8 per axis, got {resolution}")
        object.__setattr__(self, "period", period)
        object.__setattr__(self, "resolution", resolution)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.resolution

    @property
    def size(self) -> int:
        return int(np.prod(self.resolution))

    @property
    def spacing(self) -> np.ndarray:
        return np.asarray(self.period) / np.asarray(self.resolution)

    def axis_nodes(self, axis: int) -> np.ndarray:
        return np.arange(self.resolution[axis]) * self.spacing[axis]

    def nodes(self) -> np.ndarray:
        """Node coordinates, shape (size, dim), axis-0 fastest."""
        grids = np.meshgrid(*[self.axis_nodes(a) for a in range(self.dim)], indexing="ij")
        return np.stack([g.ravel(order="F") for g in grids], axis=-1)

    def unravel(self, flat_index: int) -> tuple[int, ...]:
        return tuple(int(i) for i in np.unravel_index(flat_index, self.shape, order="F"))


@dataclass(frozen=True)
class GridFunction:
    """Periodic sampled scalar field. ``values`` has shape ``spec.shape``."""

    spec: TorusSpec
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.asarray(self.values, dtype=float)
        if values.size != self.spec.size:
            raise GridError(f"expected {self.spec.size} values, got {values.size}")
        if values.shape != self.spec.shape:
            # a flat array is taken to be in storage order
            values = values.reshape(self.spec.shape, order="F")
        if not np.all(np.isfinite(values)):
            raise GridError("grid values must be finite")
        values = values.copy()
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    @property
    def flat(self) -> np.ndarray:
        return self.values.ravel(order="F")

    @classmethod
    def from_flat(cls, spec: TorusSpec, flat) -> "GridFunction":
        flat = np.asarray(flat, dtype=float)
        if flat.size != spec.size:
            raise GridError(f"expected {spec.size} values, got {flat.size}")
        return cls(spec, flat.reshape(spec.shape, order="F"))

    @classmethod
    def sample(cls, spec: TorusSpec, func: Callable[[np.ndarray], np.ndarray]) -> "GridFunction":
        """Sample ``func`` (points of shape (N, d) -> (N,)) at the grid nodes."""
        vals = np.broadcast_to(np.asarray(func(spec.nodes()), dtype=float), (spec.size,))
        return cls.from_flat(spec, vals)

    @classmethod
    def constant(cls, spec: TorusSpec, c: float) -> "GridFunction":
        return cls(spec, np.full(spec.shape, float(c)))

    def __call__(self, x) -> np.ndarray | float:
        return interpolate(self, x)


@dataclass(frozen=True)
class OneSidedGradient:
    lower: np.ndarray  # backward quotients per axis
    upper: np.ndarray  # forward quotients per axis

    @property
    def central(self) -> np.ndarray:
        return 0.5 * (self.lower + self.upper)


def wrap_point(x, spec: TorusSpec) -> np.ndarray:
    period = np.asarray(spec.period)
    w = np.mod(np.asarray(x, dtype=float), period)
    # np.mod can round up to exactly `period` for tiny negative inputs
    return np.where(w >= period, w - period, w)


def wrap_displacement(a, b, spec: TorusSpec) -> np.ndarray:
    """Minimal signed displacement from ``a`` to ``b`` per axis, in [-P/2, P/2).

    The half-period tie resolves to -P/2.
    """
    period = np.asarray(spec.period)
    d = np.asarray(b, dtype=float) - np.asarray(a, dtype=float)
    return d - period * np.floor(d / period + 0.5)


def _as_points(x, dim: int) -> tuple[np.ndarray, tuple]:
    x = np.asarray(x, dtype=float)
    if dim == 1 and (x.ndim == 0 or x.shape[-1] != 1):
        lead = x.shape
        return x.reshape(-1, 1), lead
    lead = x.shape[:-1]
    return x.reshape(-1, dim), lead


def interpolate_values(values: np.ndarray, spec: TorusSpec, points: np.ndarray) -> np.ndarray:
    """Multilinear periodic interpolation of raw ``values`` at points of shape (M, d)."""
    n = spec.resolution
    idx0, weights = [], []
    for a in range(spec.dim):
        s = np.mod(points[:, a], spec.period[a]) / spec.spacing[a]
        fl = np.floor(s)
        idx0.append(fl.astype(np.int64) % n[a])
        weights.append(s - fl)
    if spec.dim == 1:
        i0 = idx0[0]
        w = weights[0]
        v = values
        return (1.0 - w) * v[i0] + w * v[(i0 + 1) % n[0]]
    out = np.zeros(points.shape[0])
    for corner in itertools.product((0, 1), repeat=spec.dim):
        wt = np.ones(points.shape[0])
        index = []
        for a, c in enumerate(corner):
            wt = wt * (weights[a] if c else 1.0 - weights[a])
            index.append((idx0[a] + c) % n[a])
        out += wt * values[tuple(index)]
    return out


def interpolate(f: GridFunction, x) -> np.ndarray | float:
    """Evaluate ``f`` at arbitrary point(s) ``x``; exact at nodes."""
    pts, lead = _as_points(x, f.spec.dim)
    out = interpolate_values(f.values, f.spec, pts).reshape(lead)
    return float(out) if out.ndim == 0 else out


def one_sided_quotients(f: GridFunction) -> tuple[np.ndarray, np.ndarray]:
    """Backward and forward difference quotients at every node.

    Both arrays have shape (dim, *spec.shape).
    """
    h = f.spec.spacing
    lower = np.stack([(f.values - np.roll(f.values, 1, axis=a)) / h[a] for a in range(f.spec.dim)])
    upper = np.stack([(np.roll(f.values, -1, axis=a) - f.values) / h[a] for a in range(f.spec.dim)])
    return lower, upper


def central_gradient(f: GridFunction) -> np.ndarray:
    """Central-difference gradient, shape (size, dim) in flat node order."""
    lower, upper = one_sided_quotients(f)
    g = 0.5 * (lower + upper)
    return np.stack([g[a].ravel(order="F") for a in range(f.spec.dim)], axis=-1)


def difference_quotients(f: GridFunction, index) -> OneSidedGradient:
    """One-sided quotients at a single node (flat index or per-axis tuple), with periodic wrap."""
    if np.ndim(index) == 0:
        index = f.spec.unravel(int(index))
    index = tuple(int(i) for i in index)
    h = f.spec.spacing
    lower, upper = [], []
    for a in range(f.spec.dim):
        n = f.spec.resolution[a]
        prev = list(index)
        nxt = list(index)
        prev[a] = (index[a] - 1) % n
        nxt[a] = (index[a] + 1) % n
        c = f.values[index]
        lower.append((c - f.values[tuple(prev)]) / h[a])
        upper.append((f.values[tuple(nxt)] - c) / h[a])
    return OneSidedGradient(np.array(lower), np.array(upper))


def second_difference_bound(f: GridFunction) -> float:
    """max |second difference| over nodes and axes; a cheap curvature scale."""
    h = f.spec.spacing
    return float(max(
        np.max(np.abs(np.roll(f.values, -1, a) - 2 * f.values + np.roll(f.values, 1, a))) / h[a] ** 2
        for a in range(f.spec.dim)
    ))


# -- file format -----------------------------------------------------------

def _fmt_axis(vals: Sequence) -> str:
    if len(set(vals)) == 1:
        return repr(vals[0])
    return ",".join(repr(v) for v in vals)


def format_grid(f: GridFunction) -> str:
    spec = f.spec
    lines = [f"torus d={spec.dim} period={_fmt_axis(spec.period)} n={_fmt_axis(spec.resolution)}"]
    lines.extend(repr(float(v)) for v in f.flat)
    return "\n".join(lines) + "\n"


def parse_grid(text: str) -> GridFunction:
    lines = [ln.strip() for ln in text.splitlines() if ln.strip()]
    if not lines:
        raise GridError("empty grid file")
    head = lines[0].split()
    if not head or head[0] != "torus":
        raise GridError("grid file must start with 'torus d=<dim> period=<p> n=<res>'")
    fields = {}
    for tok in head[1:]:
        key, _, val = tok.partition("=")
        fields[key] = val
    try:
        dim = int(fields["d"])
        period = [float(v) for v in fields.get("period", "1.0").split(",")]
        res = [int(v) for v in fields["n"].split(",")]
    except (KeyError, ValueError) as exc:
        raise GridError(f"bad grid header {lines[0]!r}: {exc}") from None
    spec = TorusSpec(dim, period if len(period) > 1 else period[0], res if len(res) > 1 else res[0])
    try:
        vals = np.array([float(v) for v in lines[1:]])
    except ValueError as exc:
        raise GridError(f"bad grid value: {exc}") from None
    return GridFunction.from_flat(spec, vals)


def write_grid(f: GridFunction, path) -> None:
    Path(path).write_text(format_grid(f))


def read_grid(path) -> GridFunction:
    return parse_grid(Path(path).read_text())
