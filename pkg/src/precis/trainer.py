"""Precision-policy training loop, optimizers and loss functions.

A policy fixes two formats: the *master* format the optimizer updates and the
*compute* format the forward and backward passes run in. Mixed precision keeps
binary32 masters and a binary16 compute copy refreshed every iteration.
"""

from __future__ import annotations

import csv
import enum
import io
import json
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import B16, B32, B64, ByteLedger, Format, ParameterStore, Tape, Tensor

RECORD_SCHEMA = 1
MAX_NONFINITE = 200


class Mode(enum.Enum):
    ORACLE64 = "oracle64"
    FULL32 = "full32"
    PURE16 = "pure16"
    MIXED = "mixed"


_FORMATS = {
    Mode.ORACLE64: (B64, B64),
    Mode.FULL32: (B32, B32),
    Mode.PURE16: (B16, B16),
    Mode.MIXED: (B32, B16),
}


class ConfigError(ValueError):
    """Invalid training configuration."""


class TrainingAborted(RuntimeError):
    def __init__(self, message: str, record: "TrainRecord | None" = None):
        super().__init__(message)
        self.record = record


@dataclass(frozen=True)
class PrecisionPolicy:
    """Storage and compute formats for one training run.

    ``stable_loss`` switches the squared-error losses to the (A/sqrt(B))^2
    form; by default it is on for mixed precision only, so pure binary16
    stays the unmodified baseline.
    """

    mode: Mode
    loss_scale: float | None = None
    stable_loss: bool | None = None

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        s = self.loss_scale
        if s is not None:
            if self.mode is not Mode.MIXED:
                raise ConfigError("loss_scale applies to the mixed policy only")
            if not (s > 0 and math.isfinite(s) and math.frexp(s)[0] == 0.5):
                raise ConfigError(f"loss_scale must be a positive power of two, got {s!r}")
        if self.stable_loss is None:
            object.__setattr__(self, "stable_loss", self.mode is Mode.MIXED)

    @classmethod
    def parse(cls, name: str, loss_scale: float | None = None, **kw) -> "PrecisionPolicy":
        try:
            mode = Mode(name.lower())
        except ValueError:
            raise ConfigError(f"unknown policy {name!r}; choose from {[m.value for m in Mode]}") from None
        return cls(mode, loss_scale, **kw)

    @property
    def name(self) -> str:
        return self.mode.value

    @property
    def master_format(self) -> Format:
        return _FORMATS[self.mode][0]

    @property
    def compute_format(self) -> Format:
        return _FORMATS[self.mode][1]

    @property
    def scale(self) -> float:
        return 1.0 if self.loss_scale is None else float(self.loss_scale)


FULL32 = PrecisionPolicy(Mode.FULL32)
PURE16 = PrecisionPolicy(Mode.PURE16)
MIXED = PrecisionPolicy(Mode.MIXED)
ORACLE64 = PrecisionPolicy(Mode.ORACLE64)


# ---------------------------------------------------------------------------
# optimizers


@dataclass(frozen=True)
class AdamConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float | None = None

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.eps is not None and not self.eps > 0:
            raise ConfigError("eps must be positive")

    def resolved_eps(self, policy: PrecisionPolicy) -> float:
        if self.eps is not None:
            return self.eps
        return 1e-5 if policy.compute_format is B16 else 1e-7


@dataclass
class AdamState:
    m: np.ndarray
    v: np.ndarray
    t: int = 0

    @classmethod
    def zeros(cls, n: int, fmt: Format) -> "AdamState":
        return cls(np.zeros(n, fmt.carrier), np.zeros(n, fmt.carrier), 0)


def adam_step(theta, g, state: AdamState, config: AdamConfig, fmt: Format = B32, eps: float | None = None):
    """Bias-corrected Adam; every operation is rounded to ``fmt``.

    Updates ``state`` in place and returns the new parameter vector.
    """
    fmt = Format(fmt)
    R = fmt.round
    eps = config.eps if eps is None else eps
    if eps is None:
        eps = 1e-7
    theta = R(theta)
    g = R(g)
    if theta.shape != g.shape:
        raise ValueError(f"parameter/gradient shapes differ: {theta.shape} vs {g.shape}")
    b1, b2 = R(config.beta1), R(config.beta2)
    one_b1, one_b2 = R(1.0 - config.beta1), R(1.0 - config.beta2)
    state.t += 1
    with np.errstate(all="ignore"):
        state.m = R(R(b1 * state.m) + R(one_b1 * g))
        state.v = R(R(b2 * state.v) + R(one_b2 * R(g * g)))
        bc1 = R(1.0 - config.beta1**state.t)
        bc2 = R(1.0 - config.beta2**state.t)
        m_hat = R(state.m / bc1)
        v_hat = R(state.v / bc2)
        denom = R(R(np.sqrt(v_hat)) + R(eps))
        step = R(R(config.lr) * R(m_hat / denom))
        return R(theta - step)


@dataclass(frozen=True)
class GD:
    """Plain gradient descent, theta <- theta - lr * g."""

    lr: float

    def __post_init__(self):
        if not self.lr > 0:
            raise ConfigError("lr must be positive")


def gd_step(theta, g, config: GD, fmt: Format = B64):
    R = Format(fmt).round
    with np.errstate(all="ignore"):
        return R(R(theta) - R(R(config.lr) * R(g)))


# ---------------------------------------------------------------------------
# losses


def loss_mse(pred: Tensor, true, stable: bool = False) -> Tensor:
    """Mean squared error in the tape's format.

    ``stable=True`` evaluates sum((d / sqrt(n))^2) instead of sum(d^2) / n.
    """
    d = pred - true
    n = d.size
    if stable:
        return ad.square(d / math.sqrt(n)).sum()
    return ad.square(d).mean()


def _rows(x: Tensor) -> Tensor:
    return x if x.ndim == 2 else x.reshape(1, -1)


def scaled_norm_rows(d: Tensor) -> Tensor:
    """Row-wise Euclidean norm evaluated as s * sqrt(sum((d/s)^2)), s = max|d|."""
    s = np.max(np.abs(d.data.astype(np.float64)), axis=1, keepdims=True)
    s = np.where((s > 0) & np.isfinite(s), s, 1.0)
    sc = d.tape.constant(s)
    return ad.sqrt(ad.square(d / sc).sum(axis=1, keepdims=True)) * sc


def loss_mean_l2_relative(pred: Tensor, true) -> Tensor:
    """Mean over samples (rows) of ||pred - true|| / ||true||."""
    tape = pred.tape
    t = np.asarray(true.data if isinstance(true, Tensor) else true, dtype=np.float64)
    t = t if t.ndim == 2 else t.reshape(1, -1)
    tn = np.linalg.norm(t, axis=1, keepdims=True)
    if np.any(tn == 0):
        raise ValueError("degenerate target: a sample has zero norm")
    d = _rows(pred) - tape.constant(t)
    return (scaled_norm_rows(d) / tape.constant(tn)).mean()


def naive_ratio(A: Tensor, B: Tensor) -> Tensor:
    """A^2 / B as written."""
    return ad.square(A) / B


def stabilize_ratio(A: Tensor, B: Tensor) -> Tensor:
    """A^2 / B evaluated as (A / sqrt(B))^2."""
    return ad.square(A / ad.sqrt(B))


def l2_relative_error(pred, true) -> float:
    """||pred - true|| / ||true|| in binary64."""
    p = np.asarray(pred, dtype=np.float64).ravel()
    t = np.asarray(true, dtype=np.float64).ravel()
    if p.shape != t.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {t.shape}")
    nt = np.linalg.norm(t)
    if nt == 0:
        raise ValueError("true values have zero norm")
    return float(np.linalg.norm(p - t) / nt)


# ---------------------------------------------------------------------------
# records


@dataclass
class TrainRecord:
    """Per-iteration observables plus final results of one run."""

    loss: list = field(default_factory=list)
    grad_norm: list = field(default_factory=list)
    theta_norm: list = field(default_factory=list)
    stagnation: list = field(default_factory=list)
    lipschitz_est: list = field(default_factory=list)
    overflow_skip: list = field(default_factory=list)
    eval_iters: list = field(default_factory=list)
    test_error: list = field(default_factory=list)
    final_error: float = math.nan
    bytes: dict = field(default_factory=dict)
    ledger: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    seed: int | None = None
    seconds: float = 0.0
    extras: dict = field(default_factory=dict)
    theta: np.ndarray | None = None

    COLUMNS = ("iter", "loss", "grad_norm", "stagnation_frac", "lipschitz_est", "overflow_skip", "theta_norm", "grad_norm_ref")

    def __len__(self) -> int:
        return len(self.loss)

    @property
    def iterations(self) -> int:
        return len(self.loss)

    def arrays(self) -> dict:
        return {
            "loss": np.asarray(self.loss, dtype=np.float64),
            "grad_norm": np.asarray(self.grad_norm, dtype=np.float64),
            "theta_norm": np.asarray(self.theta_norm, dtype=np.float64),
            "stagnation": np.asarray(self.stagnation, dtype=np.float64),
            "lipschitz_est": np.asarray(self.lipschitz_est, dtype=np.float64),
            "overflow_skip": np.asarray(self.overflow_skip, dtype=bool),
        }

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((f"# schema={RECORD_SCHEMA}",))
        w.writerow(self.COLUMNS)
        ref = self.extras.get("grad_norm_ref") or []
        lip = list(self.lipschitz_est) + [math.nan] * (len(self.loss) - len(self.lipschitz_est))
        for i in range(len(self.loss)):
            w.writerow(
                (
                    i,
                    repr(float(self.loss[i])),
                    repr(float(self.grad_norm[i])),
                    repr(float(self.stagnation[i])),
                    repr(float(lip[i])),
                    int(bool(self.overflow_skip[i])),
                    repr(float(self.theta_norm[i])),
                    repr(float(ref[i])) if i < len(ref) else "",
                )
            )
        return buf.getvalue()

    def summary(self) -> dict:
        """JSON-ready summary. Wall-clock time lives under ``timing``."""
        return {
            "schema": RECORD_SCHEMA,
            "seed": self.seed,
            "iterations": self.iterations,
            "final_error": self.final_error,
            "eval_iters": list(self.eval_iters),
            "test_error": [float(e) for e in self.test_error],
            "overflow_skips": int(np.sum(self.overflow_skip)),
            "bytes": self.bytes,
            "ledger": self.ledger,
            "config": self.config,
            "timing": {"seconds": self.seconds, "iters_per_second": self.iterations / self.seconds if self.seconds else None},
        }

    def save(self, directory, stem: str = "record") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        _atomic_write(d / f"{stem}.csv", self.to_csv())
        _atomic_write(d / f"{stem}.json", json.dumps(_jsonable(self.summary()), indent=2, sort_keys=True))

    @classmethod
    def read_csv(cls, path) -> "TrainRecord":
        rec = cls()
        with open(path, newline="") as f:
            rows = list(csv.reader(f))
        header = rows[1]
        if tuple(header) != cls.COLUMNS:
            raise ValueError(f"unexpected columns {header}")
        ref = []
        for row in rows[2:]:
            rec.loss.append(float(row[1]))
            rec.grad_norm.append(float(row[2]))
            rec.stagnation.append(float(row[3]))
            rec.lipschitz_est.append(float(row[4]))
            rec.overflow_skip.append(bool(int(row[5])))
            rec.theta_norm.append(float(row[6]))
            if row[7]:
                ref.append(float(row[7]))
        if ref:
            rec.extras["grad_norm_ref"] = ref
        return rec


def _jsonable(x):
    if isinstance(x, dict):
        return {str(k): _jsonable(v) for k, v in x.items()}
    if isinstance(x, (list, tuple)):
        return [_jsonable(v) for v in x]
    if isinstance(x, (np.floating, float)):
        v = float(x)
        return v if math.isfinite(v) else str(v)
    if isinstance(x, (np.integer,)):
        return int(x)
    if isinstance(x, np.bool_):
        return bool(x)
    if isinstance(x, np.ndarray):
        return _jsonable(x.tolist())
    if isinstance(x, enum.Enum):
        return x.value
    return x


def _atomic_write(path: Path, text: str) -> None:
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(text)
    tmp.replace(path)


# ---------------------------------------------------------------------------
# training


def _bits_equal(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    ua = a.view(np.uint64 if a.dtype == np.float64 else np.uint32)
    ub = b.view(np.uint64 if b.dtype == np.float64 else np.uint32)
    return ua == ub


def _norm(x) -> float:
    with np.errstate(all="ignore"):
        return float(np.linalg.norm(np.asarray(x, dtype=np.float64)))


def evaluate_loss(task, theta, fmt: Format, policy: PrecisionPolicy | None = None) -> float:
    """Training loss at ``theta`` evaluated in ``fmt`` (no gradient)."""
    policy = policy or FULL32
    tape = Tape(fmt)
    tape.recording = False
    params = [tape.constant(np.asarray(theta)[b.offset : b.stop].reshape(b.shape)) for b in task.model.blocks]
    return task.loss(tape, params, policy).item()


def compute_gradient(task, theta, fmt: Format, policy: PrecisionPolicy | None = None, ledger=None, scale: float = 1.0):
    """(loss, flat gradient) at ``theta`` with the whole computation in ``fmt``."""
    policy = policy or FULL32
    tape = Tape(fmt, ledger)
    params = task.model.bind(tape, theta)
    loss = task.loss(tape, params, policy)
    out = loss * scale if scale != 1.0 else loss
    return loss.item(), tape.backward(out, params)


def train(
    task,
    policy: PrecisionPolicy,
    optimizer=None,
    iters: int = 1000,
    seed: int = 0,
    theta0=None,
    eval_every: int = 100,
    reference_format: Format | None = None,
    callback=None,
) -> TrainRecord:
    """Run ``iters`` optimizer steps of ``task`` under ``policy``.

    Under mixed precision each step refreshes the binary16 compute copy from
    the binary32 masters, runs forward and backward in binary16 (loss
    multiplied by the loss scale), widens and unscales the gradient, skips
    the step if it is non-finite, and otherwise updates the masters.

    ``reference_format`` additionally evaluates the gradient in that format
    at every iterate; the Lipschitz estimates and ``extras["grad_norm_ref"]``
    then use it. ``callback(it, theta)`` runs before each step.
    """
    if iters < 1:
        raise ConfigError("iters must be >= 1")
    optimizer = AdamConfig() if optimizer is None else optimizer
    mf, cf = policy.master_format, policy.compute_format
    theta_init = task.init(seed) if theta0 is None else np.asarray(theta0, dtype=np.float64)
    store = ParameterStore(theta_init, mf, cf)
    n = len(store)
    ledger = ByteLedger()
    # persistent buffers: master weights and the master-format gradient
    ledger.charge("parameters", mf, n)
    ledger.charge("gradients", mf, n)
    if isinstance(optimizer, AdamConfig):
        ledger.charge("optimizer", mf, 2 * n)
        state = AdamState.zeros(n, mf)
        eps = optimizer.resolved_eps(policy)
    else:
        state = None
        eps = None
    scale = policy.scale
    rec = TrainRecord(seed=seed)
    rec.config = {
        "task": getattr(task, "name", type(task).__name__),
        "policy": policy.name,
        "loss_scale": policy.loss_scale,
        "stable_loss": policy.stable_loss,
        "optimizer": asdict(optimizer) | ({"eps": eps} if eps is not None else {}),
        "iters": iters,
        "n_params": n,
        "master_format": mf.value,
        "compute_format": cf.value,
        "reference_format": None if reference_format is None else Format(reference_format).value,
    }
    ref_fmt = None if reference_format is None else Format(reference_format)
    if ref_fmt is not None:
        rec.extras["grad_norm_ref"] = []
    prev_theta = prev_g = None
    bad_run = 0
    t0 = time.perf_counter()

    def lipschitz(theta, g):
        if prev_theta is None:
            return
        with np.errstate(all="ignore"):
            dt = _norm(theta.astype(np.float64) - prev_theta.astype(np.float64))
            dg = _norm(g.astype(np.float64) - prev_g.astype(np.float64))
        rec.lipschitz_est.append(dg / dt if dt > 0 else math.nan)

    for it in range(iters):
        theta = store.master
        task.begin_iteration(it)
        if callback is not None:
            callback(it, theta)
        compute = store.sync()
        tape = Tape(cf, ledger)
        params = task.model.bind(tape, compute)
        loss = task.loss(tape, params, policy)
        loss_val = loss.item()
        scaled = loss * scale if scale != 1.0 else loss
        g = tape.backward(scaled, params)
        with np.errstate(all="ignore"):
            g = mf.round(g)
            if scale != 1.0:
                g = mf.round(g / mf.carrier(scale))
        finite = bool(np.all(np.isfinite(g)))
        bad_run = 0 if math.isfinite(loss_val) else bad_run + 1
        g_obs = g
        if ref_fmt is not None:
            if ref_fmt is cf and mf is cf:
                g_ref = g
            else:
                _, g_ref = compute_gradient(task, ref_fmt.round(theta), ref_fmt, policy)
            rec.extras["grad_norm_ref"].append(_norm(g_ref))
            g_obs = g_ref
        lipschitz(theta, g_obs)
        prev_theta, prev_g = theta.copy(), g_obs.copy()

        rec.loss.append(loss_val)
        rec.grad_norm.append(_norm(g))
        rec.theta_norm.append(_norm(theta))
        rec.overflow_skip.append(not finite)
        if finite:
            if state is not None:
                new = adam_step(theta, g, state, optimizer, mf, eps)
            else:
                new = gd_step(theta, g, optimizer, mf)
        else:
            new = theta.copy()
        rec.stagnation.append(float(np.mean(_bits_equal(theta, new))))
        store.master = new
        if eval_every and (it % eval_every == 0):
            rec.eval_iters.append(it)
            rec.test_error.append(task.test_error(store.sync(), cf))
        if bad_run > MAX_NONFINITE:
            rec.seconds = time.perf_counter() - t0
            rec.theta = store.master.astype(np.float64)
            raise TrainingAborted(
                f"loss non-finite for {bad_run} consecutive iterations (last at {it}) under {policy.name}", rec
            )

    # gradient at the final iterate closes the last Lipschitz quotient
    theta = store.master
    if ref_fmt is not None:
        _, g_last = compute_gradient(task, ref_fmt.round(theta), ref_fmt, policy)
    else:
        _, g_last = compute_gradient(task, store.sync(), cf, policy, scale=scale)
        with np.errstate(all="ignore"):
            g_last = mf.round(mf.round(g_last) / mf.carrier(scale))
    lipschitz(theta, g_last)
    rec.extras["final_grad_norm"] = _norm(g_last)
    rec.final_error = task.test_error(store.sync(), cf)
    if not rec.eval_iters or rec.eval_iters[-1] != iters:
        rec.eval_iters.append(iters)
        rec.test_error.append(rec.final_error)
    rec.seconds = time.perf_counter() - t0
    rec.theta = store.master.astype(np.float64)
    rec.ledger = ledger.snapshot()
    rec.bytes = byte_summary(ledger, n, state is not None)
    return rec


def byte_summary(ledger: ByteLedger, n_params: int, adam: bool = True) -> dict:
    """Actual bytes against the same run held entirely in binary32.

    Tape allocations (parameter leaves, activations, gradients) are charged
    every iteration; masters, the gradient buffer and optimizer moments once.
    """
    tape_elems = ledger.elements("activations") + ledger.elements("gradients") - n_params
    persistent = n_params * (2 + (2 if adam else 0))
    f32 = 4 * (tape_elems + persistent)
    actual = ledger.total
    return {"actual": int(actual), "f32_equiv": int(f32), "byte_ratio": actual / f32 if f32 else math.nan}
