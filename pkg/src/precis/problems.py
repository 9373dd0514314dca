"""Benchmark tasks: residual operators, boundary data, samplers and datasets.

Coordinates of space-time problems are ordered ``(x, t)``. Residual functions
take a jet (anything with ``value``/``d``/``dd`` accessors and the input points
in ``jet.x``) and return a tape tensor.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import autodiff as ad
from . import oracles
from .autodiff import B16, B32, B64, Format

PI = math.pi


# ---------------------------------------------------------------------------
# closed forms and residuals


def regression_target(x):
    x = np.asarray(x, dtype=np.float64)
    return x * np.sin(5.0 * x)


def heat_exact(x, t, alpha: float = 0.4):
    return np.sin(PI * np.asarray(x)) * np.exp(-alpha * PI**2 * np.asarray(t))


def diffusion_validation_exact(x, t):
    return np.exp(-np.asarray(t)) * np.sin(PI * np.asarray(x))


def _points(jet) -> np.ndarray:
    x = getattr(jet, "x", None)
    if x is None:
        raise ValueError("this residual needs the input points on jet.x")
    return np.asarray(x.data if isinstance(x, ad.Tensor) else x, dtype=np.float64)


def heat_residual(jet, alpha: float = 0.4):
    """u_t - alpha u_xx."""
    return jet.d(1) - jet.dd(0) * alpha


def burgers_residual(jet, nu: float = 0.01 / PI):
    """u_t + u u_x - nu u_xx."""
    return jet.d(1) + jet.value() * jet.d(0) - jet.dd(0) * nu


def diffusion_validation_forcing(x, t):
    s = np.sin(PI * np.asarray(x))
    return np.exp(-np.asarray(t)) * (s - PI**2 * s)


def diffusion_validation_residual(jet):
    """y_t - y_xx + exp(-t) (sin(pi x) - pi^2 sin(pi x))."""
    pts = _points(jet)
    tape = jet.value().tape
    forcing = tape.constant(diffusion_validation_forcing(pts[:, 0:1], pts[:, 1:2]))
    return jet.d(1) - jet.dd(0) + forcing


def diffusion_reaction_residual(jet, v_at_x, D: float = 0.01, k: float = 0.01):
    """u_t - D u_xx + k u^2 - v(x)."""
    u = jet.value()
    if not isinstance(v_at_x, ad.Tensor):
        v_at_x = u.tape.constant(np.broadcast_to(np.asarray(v_at_x, dtype=np.float64), u.shape))
    return jet.d(1) - jet.dd(0) * D + ad.square(u) * k - v_at_x


# ---------------------------------------------------------------------------
# boundary handling


DEFAULT_ATOL = {B64: 1e-6, B32: 1e-6, B16: 1e-4}


def default_atol(compute_format: Format) -> float:
    """Closeness tolerance for boundary membership in a compute format."""
    return DEFAULT_ATOL[Format(compute_format)]


def boundary_close(x, target, atol: float):
    """Whether ``|x - target| <= atol`` (elementwise for arrays)."""
    if not atol > 0:
        raise ValueError("atol must be positive")
    r = np.abs(np.asarray(x, dtype=np.float64) - target) <= atol
    return bool(r) if r.ndim == 0 else r


@dataclass(frozen=True)
class Face:
    """A boundary or initial face ``coord == value`` carrying Dirichlet data."""

    name: str
    coord: int
    value: float
    target: Callable


@dataclass
class PointSet:
    interior: np.ndarray
    boundary: dict  # face name -> (points, targets)

    @property
    def n_boundary(self) -> int:
        return sum(len(p) for p, _ in self.boundary.values())

    def boundary_points(self) -> tuple[np.ndarray, np.ndarray]:
        if not self.boundary:
            return np.zeros((0, self.interior.shape[1])), np.zeros((0, 1))
        pts = np.concatenate([p for p, _ in self.boundary.values()])
        tgt = np.concatenate([v for _, v in self.boundary.values()])
        return pts, tgt


@dataclass
class Problem:
    name: str
    bounds: tuple  # per coordinate (lo, hi)
    params: dict
    residual: Callable
    faces: tuple = ()
    exact: Callable | None = None
    default_counts: tuple = (0, 0)

    @property
    def dim(self) -> int:
        return len(self.bounds)

    def on_face(self, points, face: Face, atol: float) -> np.ndarray:
        return boundary_close(np.asarray(points)[:, face.coord], face.value, atol)

    def classify(self, points, atol: float) -> dict:
        """Face membership masks, judged with the closeness tolerance ``atol``."""
        return {f.name: np.atleast_1d(self.on_face(points, f, atol)) for f in self.faces}


def _interior(rng, n, bounds) -> np.ndarray:
    cols = []
    for lo, hi in bounds:
        c = rng.uniform(lo, hi, n)
        # the open box: redraw the (measure-zero) endpoint hits
        while np.any((c <= lo) | (c >= hi)):
            bad = (c <= lo) | (c >= hi)
            c[bad] = rng.uniform(lo, hi, bad.sum())
        cols.append(c)
    return np.stack(cols, axis=1)


def sample_points(problem: Problem, counts=None, strategy: str = "uniform", seed: int = 0) -> PointSet:
    """Training points for ``problem``.

    ``counts`` is ``(n_interior, n_boundary)``; boundary points are split
    evenly across faces. Regression uses an equispaced grid.
    """
    n_int, n_bc = problem.default_counts if counts is None else counts
    if n_int <= 0 or n_bc < 0:
        raise ValueError("counts must be positive")
    if problem.name == "regression" or strategy == "equispaced":
        lo, hi = problem.bounds[0]
        return PointSet(np.linspace(lo, hi, n_int).reshape(-1, 1), {})
    if strategy != "uniform":
        raise ValueError(f"unknown sampling strategy {strategy!r}")
    rng = np.random.default_rng(seed)
    interior = _interior(rng, n_int, problem.bounds)
    boundary = {}
    if problem.faces:
        per = [n_bc // len(problem.faces)] * len(problem.faces)
        for i in range(n_bc - sum(per)):
            per[i] += 1
        for face, n in zip(problem.faces, per):
            pts = _interior(rng, n, problem.bounds)
            pts[:, face.coord] = face.value
            boundary[face.name] = (pts, face.target(pts).reshape(-1, 1))
    return PointSet(interior, boundary)


# ---------------------------------------------------------------------------
# problem registry


def _zero(pts):
    return np.zeros(len(pts))


def heat_problem(alpha: float = 0.4) -> Problem:
    return Problem(
        name="heat",
        bounds=((0.0, 1.0), (0.0, 1.0)),
        params={"alpha": alpha},
        residual=lambda jet: heat_residual(jet, alpha),
        faces=(
            Face("x=0", 0, 0.0, _zero),
            Face("x=1", 0, 1.0, _zero),
            Face("t=0", 1, 0.0, lambda p: np.sin(PI * p[:, 0])),
        ),
        exact=lambda p: heat_exact(p[:, 0], p[:, 1], alpha),
        default_counts=(2540, 240),
    )


def burgers_problem(nu: float = 0.01 / PI) -> Problem:
    return Problem(
        name="burgers",
        bounds=((-1.0, 1.0), (0.0, 1.0)),
        params={"nu": nu},
        residual=lambda jet: burgers_residual(jet, nu),
        faces=(
            Face("x=-1", 0, -1.0, _zero),
            Face("x=1", 0, 1.0, _zero),
            Face("t=0", 1, 0.0, lambda p: -np.sin(PI * p[:, 0])),
        ),
        exact=lambda p: oracles.burgers_cole_hopf(p[:, 0], p[:, 1], nu),
        default_counts=(2000, 240),
    )


def diffusion_validation_problem() -> Problem:
    return Problem(
        name="diffusion_validation",
        bounds=((-1.0, 1.0), (0.0, 1.0)),
        params={},
        residual=diffusion_validation_residual,
        faces=(
            Face("x=-1", 0, -1.0, _zero),
            Face("x=1", 0, 1.0, _zero),
            Face("t=0", 1, 0.0, lambda p: np.sin(PI * p[:, 0])),
        ),
        exact=lambda p: diffusion_validation_exact(p[:, 0], p[:, 1]),
        default_counts=(200, 60),
    )


def regression_problem() -> Problem:
    return Problem(
        name="regression",
        bounds=((-1.0, 1.0),),
        params={},
        residual=None,
        exact=lambda p: regression_target(p[:, 0]),
        default_counts=(16, 0),
    )


PROBLEMS = {
    "regression": regression_problem,
    "heat": heat_problem,
    "burgers": burgers_problem,
    "diffusion_validation": diffusion_validation_problem,
}


def get_problem(name: str, **params) -> Problem:
    try:
        return PROBLEMS[name](**params)
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(PROBLEMS)}") from None


def grid_points(problem: Problem, n: int = 51) -> np.ndarray:
    """Tensor grid of ``n`` points per coordinate over the closed domain."""
    axes = [np.linspace(lo, hi, n) for lo, hi in problem.bounds]
    mesh = np.meshgrid(*axes, indexing="ij")
    return np.stack([m.ravel() for m in mesh], axis=1)


# ---------------------------------------------------------------------------
# operator datasets


@dataclass
class OperatorDataset:
    """Input functions at sensors, shared query points, and targets.

    ``v``: (F, m) sensor values, ``y``: (P, d) query points, ``u``: (F, P)
    targets. ``meta`` carries per-function parameters and provenance.
    """

    v: np.ndarray
    y: np.ndarray
    u: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.u.shape != (self.v.shape[0], self.y.shape[0]):
            raise ValueError(f"targets {self.u.shape} do not match {self.v.shape[0]} functions x {self.y.shape[0]} queries")

    def __len__(self) -> int:
        return self.v.shape[0]

    def subset(self, idx) -> "OperatorDataset":
        meta = dict(self.meta)
        return OperatorDataset(self.v[idx], self.y, self.u[idx], meta)

    def save(self, directory) -> None:
        """JSON manifest plus flat little-endian binary64 arrays."""
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        arrays = {"sensors": self.v, "queries": self.y, "targets": self.u}
        manifest = {"schema": 1, "dtype": "<f8", "arrays": {}, "meta": self.meta}
        for name, arr in arrays.items():
            fname = f"{name}.bin"
            tmp = d / (fname + ".tmp")
            tmp.write_bytes(np.ascontiguousarray(arr, dtype="<f8").tobytes())
            tmp.replace(d / fname)
            manifest["arrays"][name] = {"file": fname, "shape": list(arr.shape)}
        tmp = d / "manifest.json.tmp"
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
        tmp.replace(d / "manifest.json")

    @classmethod
    def load(cls, directory) -> "OperatorDataset":
        d = Path(directory)
        manifest = json.loads((d / "manifest.json").read_text())
        out = {}
        for name, spec in manifest["arrays"].items():
            raw = (d / spec["file"]).read_bytes()
            out[name] = np.frombuffer(raw, dtype=manifest["dtype"]).astype(np.float64).reshape(spec["shape"])
        return cls(out["sensors"], out["queries"], out["targets"], manifest.get("meta", {}))


def square_wave(x, c, w, h):
    """h on [c - w/2, c + w/2], zero elsewhere."""
    x = np.asarray(x, dtype=np.float64)
    return np.where((x >= c - w / 2) & (x <= c + w / 2), h, 0.0)


def advect_square_wave(x, c, w, h, shift: float = 0.5):
    """Exact periodic transport on [0, 1): u(x, s) = u0((x - s) mod 1)."""
    return square_wave(np.mod(np.asarray(x, dtype=np.float64) - shift, 1.0), c, w, h)


def advection_dataset(n_functions: int, n_sensors: int = 100, seed: int = 0) -> OperatorDataset:
    """Square-wave initial states mapped to the solution at t = 0.5.

    Sensors and queries share the periodic grid ``i / n_sensors``. For an even
    grid the half-period shift is an index rotation, so targets are exact.
    """
    if n_functions < 1 or n_sensors < 2:
        raise ValueError("need at least one function and two sensors")
    rng = np.random.default_rng(seed)
    c = rng.uniform(0.3, 0.7, n_functions)
    w = rng.uniform(0.3, 0.6, n_functions)
    h = rng.uniform(1.0, 2.0, n_functions)
    x = np.arange(n_sensors) / n_sensors
    v = np.stack([square_wave(x, ci, wi, hi) for ci, wi, hi in zip(c, w, h)])
    if n_sensors % 2 == 0:
        u = np.roll(v, n_sensors // 2, axis=1)
    else:
        u = np.stack([advect_square_wave(x, ci, wi, hi) for ci, wi, hi in zip(c, w, h)])
    meta = {"problem": "advection", "seed": seed, "c": c.tolist(), "w": w.tolist(), "h": h.tolist(), "t": 0.5}
    return OperatorDataset(v, x.reshape(-1, 1), u, meta)


def grf_sources(n_functions: int, length_scale: float = 0.2, seed: int = 0, n_grid: int = 1001) -> np.ndarray:
    """Zero-mean Gaussian random field samples (RBF kernel) on ``linspace(0, 1, n_grid)``."""
    x = np.linspace(0.0, 1.0, n_grid)
    K = np.exp(-0.5 * (x[:, None] - x[None, :]) ** 2 / length_scale**2)
    L = np.linalg.cholesky(K + 1e-10 * np.eye(n_grid))
    rng = np.random.default_rng(seed)
    return (L @ rng.standard_normal((n_grid, n_functions))).T


@dataclass
class DiffusionReactionData:
    """Sources, their fine-grid values, and the oracle solution on a grid."""

    sources: np.ndarray  # (F, n_grid) values on the fine grid
    grid: np.ndarray  # fine grid abscissae
    D: float
    k: float

    def source_at(self, x) -> np.ndarray:
        """(F, len(x)) source values by linear interpolation."""
        x = np.asarray(x, dtype=np.float64).reshape(-1)
        return np.stack([np.interp(x, self.grid, s) for s in self.sources])

    def sensors(self, n_sensors: int = 100) -> np.ndarray:
        return self.source_at(np.linspace(0.0, 1.0, n_sensors))

    def oracle(self, nx: int = 101, nt: int = 101) -> OperatorDataset:
        """Crank-Nicolson solutions on an ``nx`` x ``nt`` grid as an OperatorDataset."""
        xs = np.linspace(0.0, 1.0, nx)
        ts = np.linspace(0.0, 1.0, nt)
        vals = self.source_at(xs)
        sols = np.stack([oracles.diffusion_reaction_cn(v, self.D, self.k, nx, nt) for v in vals])
        X, T = np.meshgrid(xs, ts, indexing="xy")
        y = np.stack([X.ravel(), T.ravel()], axis=1)
        meta = {"problem": "diffusion_reaction", "D": self.D, "k": self.k, "grid": [nx, nt], "solver": "crank-nicolson"}
        return OperatorDataset(self.sensors(), y, sols.reshape(len(vals), -1), meta)


def diffusion_reaction_data(
    n_functions: int, seed: int = 0, length_scale: float = 0.2, D: float = 0.01, k: float = 0.01
) -> DiffusionReactionData:
    grid = np.linspace(0.0, 1.0, 1001)
    return DiffusionReactionData(grf_sources(n_functions, length_scale, seed, grid.size), grid, D, k)
