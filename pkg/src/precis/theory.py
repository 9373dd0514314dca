"""Convergence of gradient descent with parameter rounding.

A step of the model analysed here is ``theta <- theta - eta * grad(theta + dtheta)``
where ``dtheta`` is the binary16 rounding error of ``theta``. When the
gradient is Lipschitz with constant ``L <= 1/eta`` and
``||dtheta|| <= 2**-11 ||theta||``, descent is guaranteed until

    ||grad L(theta)|| < c * L * ||theta||,   c = (2 + sqrt 6) / 2**11,

the critical region. This module estimates ``L`` during training, checks the
region condition on recorded runs and runs a convex quadratic testbed where
every inequality of the argument can be verified exactly.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .autodiff import B16, Format
from .trainer import TrainRecord, _jsonable

UNIT_ROUNDOFF = 2.0**-11
REGION_CONSTANT = (2.0 + math.sqrt(6.0)) / 2.0**11
GAP_CONSTANT = (15.0 + 6.0 * math.sqrt(6.0)) / 2.0**22
REPORT_SCHEMA = 1


class DegenerateStepError(ValueError):
    """Two consecutive iterates coincide, so no difference quotient exists."""


class HypothesisError(ValueError):
    """The step size or curvature constants violate the theorem's assumptions."""


@dataclass(frozen=True)
class TheoremInputs:
    L_hat: float
    mu_hat: float
    theta_norm: float
    grad_norm: float
    eta: float

    def step_ok(self) -> bool:
        return self.eta <= 1.0 / self.L_hat

    def convexity_ok(self) -> bool:
        return self.L_hat >= self.mu_hat > 0

    def in_region(self) -> bool:
        return self.grad_norm < REGION_CONSTANT * self.L_hat * self.theta_norm


def _vec(x) -> np.ndarray:
    return np.asarray(x, dtype=np.float64).ravel()


def local_lipschitz_estimate(theta_t, theta_next, g_t, g_next) -> float:
    """||g_next - g_t|| / ||theta_next - theta_t||."""
    dt = np.linalg.norm(_vec(theta_next) - _vec(theta_t))
    if dt == 0.0:
        raise DegenerateStepError("parameters did not change; the step is fully stagnated")
    return float(np.linalg.norm(_vec(g_next) - _vec(g_t)) / dt)


def critical_region_threshold(L_hat: float, theta) -> float:
    """c * L_hat * ||theta||; ``theta`` may be a vector or its norm."""
    t = np.asarray(theta, dtype=np.float64)
    norm = abs(float(t)) if t.ndim == 0 else float(np.linalg.norm(t))
    return REGION_CONSTANT * L_hat * norm


def running_max(values) -> np.ndarray:
    """Cumulative maximum that skips NaN entries (NaN until the first finite value)."""
    v = np.asarray(values, dtype=np.float64)
    filled = np.where(np.isnan(v), -np.inf, v)
    out = np.maximum.accumulate(filled) if v.size else v
    return np.where(np.isneginf(out), np.nan, out)


def check_theorem1(record=None, *, grad_norm=None, theta_norm=None, lipschitz_est=None, tail: float = 0.1) -> dict:
    """Track the critical-region condition along a run.

    ``L_hat`` at iteration ``t`` is the running maximum of the local
    estimates up to and including the quotient for the step leaving ``t``.
    When the record carries binary32 reference gradients
    (``extras["grad_norm_ref"]``) those norms are used.
    """
    if record is not None:
        ref = record.extras.get("grad_norm_ref") if isinstance(record, TrainRecord) else None
        grad_norm = ref if ref else record.grad_norm
        theta_norm, lipschitz_est = record.theta_norm, record.lipschitz_est
    g = np.asarray(grad_norm, dtype=np.float64)
    th = np.asarray(theta_norm, dtype=np.float64)
    lip = np.asarray(lipschitz_est, dtype=np.float64)
    if g.size == 0:
        raise ValueError("empty record")
    if th.shape != g.shape:
        raise ValueError("grad_norm and theta_norm lengths differ")
    n = g.size
    lip = np.concatenate([lip[:n], np.full(max(0, n - lip.size), np.nan)])
    L_hat = running_max(lip)
    # carry the last known bound forward over missing tail estimates
    for i in range(1, n):
        if np.isnan(L_hat[i]) and not np.isnan(L_hat[i - 1]):
            L_hat[i] = L_hat[i - 1]
    threshold = REGION_CONSTANT * L_hat * th
    with np.errstate(invalid="ignore"):
        in_region = g < threshold
    hits = np.flatnonzero(in_region)
    k = max(1, int(math.ceil(tail * n)))
    finite = lip[np.isfinite(lip)]
    return {
        "first_hit_iteration": int(hits[0]) if hits.size else None,
        "satisfied_at_end": bool(np.all(in_region[-k:])),
        "tail_iterations": k,
        "fraction_in_region": float(np.mean(in_region)),
        "lipschitz_range": [float(finite.min()), float(finite.max())] if finite.size else None,
        "series": {
            "grad_norm": g,
            "theta_norm": th,
            "lipschitz_local": lip,
            "lipschitz_running_max": L_hat,
            "threshold": threshold,
            "in_region": in_region,
        },
    }


def corollary_bounds(L_hat: float, mu_hat: float, theta, theta_star, loss_gap: float) -> dict:
    """Distance and loss-gap bounds that hold inside the critical region for strongly convex losses."""
    theta, theta_star = _vec(theta), _vec(theta_star)
    tn = float(np.linalg.norm(theta))
    dist = float(np.linalg.norm(theta - theta_star))
    dist_bound = REGION_CONSTANT * (L_hat / mu_hat) * tn
    gap_bound = GAP_CONSTANT * (L_hat**2 / mu_hat) * tn**2
    return {
        "dist_ok": bool(dist < dist_bound),
        "gap_ok": bool(loss_gap < gap_bound),
        "distance": dist,
        "distance_bound": dist_bound,
        "loss_gap": float(loss_gap),
        "gap_bound": gap_bound,
    }


# ---------------------------------------------------------------------------
# quadratic testbed


def quadratic_testbed(
    dim: int = 50,
    L: float = 10.0,
    mu: float = 0.1,
    eta: float = 0.1,
    iters: int = 10000,
    seed: int = 0,
    theta_star="random",
    perturb: Format | str | None = B16,
) -> TrainRecord:
    """Gradient descent on 0.5 (theta - theta*)^T A (theta - theta*) with rounded gradient points.

    ``A`` is diagonal with eigenvalues log-spaced in [mu, L]. Each gradient
    is taken at ``perturb.round(theta)``, so the perturbation is the actual
    rounding error of that format; ``perturb=None`` gives exact descent.
    ``theta_star`` is ``"random"`` (standard normal, seeded), ``"zero"`` or
    an explicit vector. Parameters and all bookkeeping stay in binary64.

    ``extras`` holds ``E`` (length ``iters + 1``, E[k] is the gap at the
    (k+1)-th iterate), ``in_region``, ``delta_ratio`` (||dtheta|| / ||theta||)
    and ``all_normal`` per step.
    """
    if not 0 < mu <= L:
        raise HypothesisError("need 0 < mu <= L")
    if eta > 1.0 / L:
        raise HypothesisError(f"step size {eta} exceeds 1/L = {1.0 / L}")
    if iters < 1 or dim < 1:
        raise ValueError("dim and iters must be positive")
    rng = np.random.default_rng(seed)
    lam = np.logspace(math.log10(mu), math.log10(L), dim)
    lam[0], lam[-1] = mu, L
    if isinstance(theta_star, str):
        if theta_star == "random":
            star = rng.standard_normal(dim)
        elif theta_star == "zero":
            star = np.zeros(dim)
        else:
            raise ValueError(f"unknown theta_star {theta_star!r}")
    else:
        star = _vec(theta_star)
        if star.size != dim:
            raise ValueError("theta_star has the wrong length")
    theta = star + rng.standard_normal(dim)
    first = theta.copy()
    fmt = None if perturb is None else Format(perturb)

    def gap(th):
        d = th - star
        return 0.5 * float(np.dot(lam * d, d))

    smallest_normal = float(np.finfo(np.float16).tiny)
    rec = TrainRecord(seed=seed)
    E = [gap(theta)]
    in_region, ratio, normal = [], [], []
    prev = None
    for _ in range(iters):
        g_exact = lam * (theta - star)
        gn, tn = float(np.linalg.norm(g_exact)), float(np.linalg.norm(theta))
        rec.grad_norm.append(gn)
        rec.theta_norm.append(tn)
        rec.loss.append(E[-1])
        in_region.append(gn < REGION_CONSTANT * L * tn)
        if fmt is None:
            point = theta
        else:
            point = np.asarray(fmt.round(theta), dtype=np.float64)
        ratio.append(float(np.linalg.norm(point - theta)) / tn if tn > 0 else 0.0)
        normal.append(bool(np.all(np.abs(theta) >= smallest_normal) and np.all(np.abs(theta) <= 65504.0)))
        new = theta - eta * (lam * (point - star))
        rec.stagnation.append(float(np.mean(new == theta)))
        rec.overflow_skip.append(False)
        if prev is not None:
            rec.lipschitz_est.append(_safe_quotient(*prev, theta, g_exact))
        prev = (theta, g_exact)
        theta = new
        E.append(gap(theta))
    rec.lipschitz_est.append(_safe_quotient(*prev, theta, lam * (theta - star)))
    rec.theta = theta
    rec.final_error = E[-1]
    rec.config = {
        "task": "quadratic_testbed",
        "dim": dim,
        "L": L,
        "mu": mu,
        "eta": eta,
        "iters": iters,
        "perturb": None if fmt is None else fmt.value,
    }
    rec.extras.update(
        E=np.asarray(E),
        in_region=np.asarray(in_region),
        delta_ratio=np.asarray(ratio),
        all_normal=np.asarray(normal),
        theta_star=star,
        theta_first=first,
        eigenvalues=lam,
    )
    return rec


def _safe_quotient(th0, g0, th1, g1) -> float:
    try:
        return local_lipschitz_estimate(th0, th1, g0, g1)
    except DegenerateStepError:
        return math.nan


def check_testbed(record: TrainRecord) -> dict:
    """Verify the descent inequality, the 1/t decay and the final corollary bounds."""
    cfg = record.config
    eta, L, mu = cfg["eta"], cfg["L"], cfg["mu"]
    E = record.extras["E"]
    g = np.asarray(record.grad_norm)
    inside = record.extras["in_region"]
    n = g.size
    # descent: E_{t+1} <= E_t - eta/4 ||grad||^2 whenever iterate t is outside the region
    descent = E[1:] <= E[:-1] - 0.25 * eta * g**2
    outside = ~inside
    descent_ok = bool(np.all(descent[outside]))
    first = record.extras["theta_first"]
    alpha = max(8.0 * float(np.sum((first - record.extras["theta_star"]) ** 2)) / eta, float(E[0]))
    t = np.arange(1, n + 2, dtype=np.float64)
    decay = E <= alpha / t
    ratios = record.extras["delta_ratio"]
    normal = record.extras["all_normal"]
    cor = corollary_bounds(L, mu, record.theta, record.extras["theta_star"], float(E[-1]))
    hits = np.flatnonzero(inside)
    return {
        "descent_ok": descent_ok,
        "descent_violations": int(np.sum(~descent & outside)),
        "steps_outside": int(np.sum(outside)),
        "alpha": alpha,
        "decay_ok": bool(np.all(decay)),
        "decay_violations": int(np.sum(~decay)),
        "entered_region": bool(hits.size),
        "first_hit_iteration": int(hits[0]) if hits.size else None,
        "rounding_ok": bool(np.all(ratios[normal] <= UNIT_ROUNDOFF)),
        "max_delta_ratio": float(ratios.max()),
        "corollary": cor,
    }


def write_report(path, result: dict, extra: dict | None = None) -> None:
    """JSON report: per-iteration grad_norm, threshold and in_region plus a pass/fail summary."""
    series = result.get("series", {})
    body = {
        "schema": REPORT_SCHEMA,
        "summary": {k: v for k, v in result.items() if k != "series"},
        "series": {k: series[k] for k in ("grad_norm", "threshold", "in_region", "lipschitz_local", "lipschitz_running_max") if k in series},
    }
    if extra:
        body.update(extra)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_text(json.dumps(_jsonable(body), indent=2, sort_keys=True))
    tmp.replace(path)
