"""Ready-to-train benchmarks: a network, a training loss and a test set.

Every task exposes ``model`` (with ``blocks``/``bind``/``init``),
``loss(tape, params, policy)``, ``predict(theta, fmt)``, ``truth`` and
``test_error(theta, fmt)``; ``begin_iteration(it)`` selects mini-batches
where a task uses them. Sizes default to a desk-scale reduction of the
published configurations; ``scale`` records which.
"""

from __future__ import annotations

import math

import numpy as np

from . import problems as pb
from .autodiff import Format, Tape
from .models import FNN, DeepONet, DeepOnetConfig, FnnConfig
from .trainer import PrecisionPolicy, l2_relative_error, loss_mean_l2_relative, loss_mse


def _constants(tape: Tape, theta, blocks):
    theta = np.asarray(theta)
    return [tape.constant(theta[b.offset : b.stop].reshape(b.shape)) for b in blocks]


class Task:
    name = "task"
    scale = "desk"
    lr = 1e-3
    iters = 1000

    def init(self, seed: int) -> np.ndarray:
        return self.model.init(seed)

    def begin_iteration(self, it: int) -> None:
        pass

    def test_error(self, theta, fmt: Format) -> float:
        with np.errstate(all="ignore"):
            pred = self.predict(theta, fmt)
        if not np.all(np.isfinite(pred)):
            return math.nan
        return l2_relative_error(pred, self.truth)

    def describe(self) -> dict:
        return {"name": self.name, "scale": self.scale, "lr": self.lr, "iters": self.iters}


class RegressionTask(Task):
    """Fit x sin(5x) on [-1, 1] from equispaced samples."""

    name = "regression"

    def __init__(self, n_train: int = 16, n_test: int = 100, depth: int = 3, width: int = 10, test_seed: int = 2024):
        self.problem = pb.regression_problem()
        self.model = FNN(FnnConfig(1, 1, depth, width, "tanh"))
        self.x = pb.sample_points(self.problem, (n_train, 0)).interior
        self.y = pb.regression_target(self.x)
        rng = np.random.default_rng(test_seed)
        self.x_test = rng.uniform(-1.0, 1.0, (n_test, 1))
        self.truth = pb.regression_target(self.x_test)
        self.iters = 10000
        self.lr = 1e-3
        self.scale = "paper"

    def loss(self, tape: Tape, params, policy: PrecisionPolicy):
        pred = self.model.apply(params, tape.constant(self.x))
        return loss_mse(pred, tape.constant(self.y), stable=policy.stable_loss)

    def predict(self, theta, fmt: Format) -> np.ndarray:
        tape = Tape(fmt)
        tape.recording = False
        return self.model.apply(_constants(tape, theta, self.model.blocks), tape.constant(self.x_test)).data

    def describe(self) -> dict:
        return super().describe() | {"n_train": len(self.x), "n_test": len(self.x_test), "net": "3x10 tanh"}


class PinnTask(Task):
    """Physics-informed FNN: PDE residual plus one mean-squared term per face."""

    def __init__(self, problem: pb.Problem, depth: int, width: int, counts, point_seed: int = 0, test_n: int = 51):
        self.problem = problem
        self.name = problem.name
        self.model = FNN(FnnConfig(problem.dim, 1, depth, width, "tanh"))
        self.points = pb.sample_points(problem, counts, seed=point_seed)
        self.counts = tuple(counts)
        self.depth, self.width = depth, width
        self.x_test = pb.grid_points(problem, test_n)
        self.truth = problem.exact(self.x_test).reshape(-1, 1)
        self._bc_cache = {}

    def boundary_terms(self, fmt: Format):
        """Boundary points in ``fmt`` grouped by the face they are judged to lie on."""
        fmt = Format(fmt)
        if fmt not in self._bc_cache:
            pts, tgt = self.points.boundary_points()
            pts = np.asarray(fmt.round(pts), dtype=np.float64)
            masks = self.problem.classify(pts, pb.default_atol(fmt))
            terms = []
            for face in self.problem.faces:
                m = masks[face.name]
                if m.any():
                    terms.append((face.name, pts[m], face.target(pts[m]).reshape(-1, 1)))
            self._bc_cache[fmt] = terms
        return self._bc_cache[fmt]

    def loss(self, tape: Tape, params, policy: PrecisionPolicy):
        stable = policy.stable_loss
        X = tape.constant(self.points.interior)
        jet = self.model.jet(params, X, coords=range(self.problem.dim), second=[0])
        r = self.problem.residual(jet)
        total = loss_mse(r, 0.0, stable=stable)
        for _, pts, tgt in self.boundary_terms(tape.fmt):
            pred = self.model.apply(params, tape.constant(pts))
            total = total + loss_mse(pred, tape.constant(tgt), stable=stable)
        return total

    def predict(self, theta, fmt: Format) -> np.ndarray:
        tape = Tape(fmt)
        tape.recording = False
        return self.model.apply(_constants(tape, theta, self.model.blocks), tape.constant(self.x_test)).data

    def describe(self) -> dict:
        return super().describe() | {
            "net": f"{self.depth}x{self.width} tanh",
            "points": {"interior": self.counts[0], "boundary": self.counts[1]},
            "params": self.problem.params,
        }


def heat_task(scale: str = "desk", point_seed: int = 0) -> PinnTask:
    if scale == "paper":
        t = PinnTask(pb.heat_problem(), 4, 20, (2540, 240), point_seed)
        t.iters = 20000
    else:
        t = PinnTask(pb.heat_problem(), 4, 20, (500, 120), point_seed)
        t.iters = 20000
    t.scale = scale
    return t


def burgers_task(scale: str = "desk", point_seed: int = 0) -> PinnTask:
    if scale == "paper":
        t = PinnTask(pb.burgers_problem(), 3, 32, (2000, 240), point_seed, test_n=101)
        t.iters = 20000
    else:
        t = PinnTask(pb.burgers_problem(), 3, 32, (1000, 120), point_seed, test_n=101)
        t.iters = 10000
    t.scale = scale
    return t


def diffusion_validation_task(scale: str = "paper", point_seed: int = 0) -> PinnTask:
    t = PinnTask(pb.diffusion_validation_problem(), 4, 32, (200, 60), point_seed)
    t.iters = 2000
    t.scale = "paper"
    return t


# ---------------------------------------------------------------------------
# operator learning


class AdvectionTask(Task):
    """DeepONet mapping square-wave initial states to their state at t = 0.5.

    The trunk sees periodic features of the query point and each iteration
    takes a batch of ``batch`` functions from the training pool.
    """

    name = "advection"

    def __init__(
        self, n_train=8000, n_test=200, n_sensors=100, width=128, p=128, harmonics=25, batch=250, seed=0, scale="desk"
    ):
        self.train_set = pb.advection_dataset(n_train, n_sensors, seed)
        self.test_set = pb.advection_dataset(n_test, n_sensors, seed + 10_000)
        self.harmonics = harmonics
        self.batch = batch if batch and batch < n_train else None
        self._epoch = (None, None)
        self.begin_iteration(0)
        self.y = self._trunk_input(self.train_set.y)
        cfg = DeepOnetConfig(
            branch=FnnConfig(n_sensors, p, 2, width, "relu"),
            trunk=FnnConfig(self.y.shape[1], p, 4, width, "relu"),
            p=p,
        )
        self.model = DeepONet(cfg)
        self.truth = self.test_set.u
        self.width, self.p = width, p
        self.iters = 20000 if scale == "desk" else 250000
        self.lr = 1e-3
        self.scale = scale

    def _trunk_input(self, y):
        # periodic features cos/sin(2 pi k y) make the trunk periodic in y
        if not self.harmonics:
            return y
        k = 2 * np.pi * np.arange(1, self.harmonics + 1)
        return np.concatenate([np.cos(y * k), np.sin(y * k)], axis=1)

    def begin_iteration(self, it: int) -> None:
        if self.batch is None:
            self.idx = slice(None)
            return
        n = len(self.train_set)
        epoch, k = divmod(it, n // self.batch)
        if self._epoch[0] != epoch:
            self._epoch = (epoch, np.random.default_rng([5, epoch]).permutation(n))
        self.idx = self._epoch[1][k * self.batch : (k + 1) * self.batch]

    def loss(self, tape: Tape, params, policy: PrecisionPolicy):
        v, u = self.train_set.v[self.idx], self.train_set.u[self.idx]
        pred = self.model.apply(params, tape.constant(v), tape.constant(self.y))
        return loss_mean_l2_relative(pred, u)

    def predict(self, theta, fmt: Format) -> np.ndarray:
        tape = Tape(fmt)
        tape.recording = False
        P = _constants(tape, theta, self.model.blocks)
        return self.model.apply(P, tape.constant(self.test_set.v), tape.constant(self._trunk_input(self.test_set.y))).data

    def describe(self) -> dict:
        return super().describe() | {
            "trunk_features": f"{self.harmonics} harmonics" if self.harmonics else "raw",
            "n_train": len(self.train_set),
            "batch": self.batch or len(self.train_set),
            "n_test": len(self.test_set),
            "net": f"branch 2x{self.width}, trunk 4x{self.width}, p={self.p}, relu",
            "loss": "mean L2 relative",
        }


class DiffusionReactionTask(Task):
    """Physics-informed DeepONet for u_t = D u_xx - k u^2 + v(x).

    Each iteration takes a batch of source functions from a fixed pool and
    evaluates the residual on collocation points shared across the batch.
    With ``resample`` the points are redrawn every iteration.
    Input derivatives act on the trunk only.
    """

    name = "diffusion_reaction"

    def __init__(
        self,
        n_pool=2000,
        batch=16,
        n_colloc=200,
        n_boundary=60,
        n_test=20,
        n_sensors=100,
        width=64,
        p=64,
        seed=0,
        scale="desk",
        resample=True,
    ):
        self.D, self.k = 0.01, 0.01
        self.seed, self.resample = seed, resample
        self.n_colloc, self.n_bc = n_colloc, n_boundary
        self.pool = pb.diffusion_reaction_data(n_pool, seed)
        self.test_data = pb.diffusion_reaction_data(n_test, seed + 10_000)
        self.test_set = self.test_data.oracle(101, 101)
        self.sensors = self.pool.sensors(n_sensors)
        self.colloc, self.boundary = self._points(np.random.default_rng(seed + 1))
        self.v_colloc = self.pool.source_at(self.colloc[:, 0])
        self.batch = batch
        self.n_pool = n_pool
        self._epoch = (None, None)
        self.begin_iteration(0)
        cfg = DeepOnetConfig(
            branch=FnnConfig(n_sensors, p, 3, width, "tanh"),
            trunk=FnnConfig(2, p, 3, width, "tanh"),
            p=p,
        )
        self.model = DeepONet(cfg)
        self.truth = self.test_set.u
        self.width, self.p = width, p
        self.iters = 10000 if scale == "desk" else 50000
        self.lr = 1e-3
        self.scale = scale

    def _points(self, rng):
        box = ((0.0, 1.0), (0.0, 1.0))
        colloc = pb._interior(rng, self.n_colloc, box)
        bpts = []
        for coord, value in ((0, 0.0), (0, 1.0), (1, 0.0)):
            q = pb._interior(rng, self.n_bc // 3, box)
            q[:, coord] = value
            bpts.append(q)
        return colloc, np.concatenate(bpts)

    def begin_iteration(self, it: int) -> None:
        epoch, k = divmod(it, self.n_pool // self.batch)
        if self._epoch[0] != epoch:
            self._epoch = (epoch, np.random.default_rng([7, epoch]).permutation(self.n_pool))
        self.idx = self._epoch[1][k * self.batch : (k + 1) * self.batch]
        if self.resample:
            # fresh collocation points each step, reproducible from (seed, it)
            self.colloc, self.boundary = self._points(np.random.default_rng([self.seed, 11, it]))
            self.v_colloc = None

    def _sources(self) -> np.ndarray:
        if self.v_colloc is None:
            sub = pb.DiffusionReactionData(self.pool.sources[self.idx], self.pool.grid, self.D, self.k)
            return sub.source_at(self.colloc[:, 0])
        return self.v_colloc[self.idx]

    def loss(self, tape: Tape, params, policy: PrecisionPolicy):
        stable = policy.stable_loss
        v = tape.constant(self.sensors[self.idx])
        jet = self.model.jet(params, v, tape.constant(self.colloc), coords=[0, 1], second=[0])
        src = tape.constant(self._sources())
        r = pb.diffusion_reaction_residual(jet, src, self.D, self.k)
        bc = self.model.apply(params, v, tape.constant(self.boundary))
        return loss_mse(r, 0.0, stable=stable) + loss_mse(bc, 0.0, stable=stable)

    def predict(self, theta, fmt: Format) -> np.ndarray:
        tape = Tape(fmt)
        tape.recording = False
        P = _constants(tape, theta, self.model.blocks)
        return self.model.apply(P, tape.constant(self.test_set.v), tape.constant(self.test_set.y)).data

    def describe(self) -> dict:
        return super().describe() | {
            "pool": self.n_pool,
            "batch": self.batch,
            "collocation": len(self.colloc),
            "boundary": len(self.boundary),
            "n_test": len(self.test_set),
            "net": f"branch 3x{self.width}, trunk 3x{self.width}, p={self.p}, tanh",
            "oracle": "crank-nicolson 101x101",
        }


TASKS = {
    "regression": lambda scale="desk": RegressionTask(),
    "heat": heat_task,
    "burgers": burgers_task,
    "diffusion_validation": diffusion_validation_task,
    "advection": lambda scale="desk": (
        AdvectionTask(scale=scale)
        if scale == "desk"
        else AdvectionTask(n_train=1000, width=512, p=512, harmonics=0, batch=None, scale=scale)
    ),
    "diffusion_reaction": lambda scale="desk": DiffusionReactionTask(scale=scale),
}


def get_task(name: str, scale: str = "desk") -> Task:
    try:
        factory = TASKS[name]
    except KeyError:
        raise ValueError(f"unknown problem {name!r}; choose from {sorted(TASKS)}") from None
    return factory(scale=scale)
