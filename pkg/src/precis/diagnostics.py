"""Instruments for diagnosing low-precision training failures.

Gradient divergence between two precisions, bitwise weight stagnation and
two-dimensional loss-landscape slices whose non-finite nodes are kept as data.
"""

from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

SLICE_SCHEMA = 1


class ZeroVectorError(ValueError):
    pass


def gradient_divergence_metrics(g16, g32) -> dict:
    """Cosine similarity and (relative) L2 distance between two gradients.

    ``l2_relative_distance`` is normalised by the second argument, so it is
    not symmetric; the other two metrics are.
    """
    a = np.asarray(g16, dtype=np.float64).ravel()
    b = np.asarray(g32, dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ValueError(f"gradient lengths differ: {a.size} vs {b.size}")
    if not (np.all(np.isfinite(a)) and np.all(np.isfinite(b))):
        raise ValueError("gradients must be finite")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ZeroVectorError("cosine similarity is undefined for a zero gradient")
    dist = float(np.linalg.norm(a - b))
    return {
        "cosine": float(np.dot(a, b) / (na * nb)),
        "l2_distance": dist,
        "l2_relative_distance": dist / float(nb),
    }


def stagnation_fraction(theta_before, theta_after) -> float:
    """Share of coordinates whose bit pattern did not change."""
    a = np.ascontiguousarray(theta_before)
    b = np.ascontiguousarray(theta_after)
    if a.shape != b.shape or a.dtype != b.dtype:
        raise ValueError("parameter vectors must share shape and dtype")
    if a.size == 0:
        raise ValueError("empty parameter vector")
    view = {2: np.uint16, 4: np.uint32, 8: np.uint64}[a.dtype.itemsize]
    return float(np.mean(a.view(view) == b.view(view)))


# ---------------------------------------------------------------------------
# landscape slices


def make_directions(theta, blocks=None, seed: int = 0):
    """Two Gaussian directions, filter-normalised against ``theta``.

    Each output neuron's column of a weight block is rescaled to the norm of
    the matching column of ``theta``; bias and scalar blocks get zero
    direction. Without ``blocks`` the whole vector is treated as one filter.
    """
    theta = np.asarray(theta, dtype=np.float64)
    rng = np.random.default_rng(seed)
    dirs = []
    for _ in range(2):
        d = rng.standard_normal(theta.size)
        if blocks is None:
            d *= np.linalg.norm(theta) / np.linalg.norm(d)
        else:
            out = np.zeros_like(d)
            for b in blocks:
                if b.kind != "weight":
                    continue
                w = theta[b.offset : b.stop].reshape(b.shape)
                r = d[b.offset : b.stop].reshape(b.shape)
                rn = np.linalg.norm(r, axis=0)
                wn = np.linalg.norm(w, axis=0)
                out[b.offset : b.stop] = (r * (wn / np.where(rn > 0, rn, 1.0))).ravel()
            d = out
        dirs.append(d)
    return dirs[0], dirs[1]


@dataclass
class LandscapeSlice:
    """Loss values of f(x, y) = L(theta + x delta + y eta) on a square grid.

    ``loss[i, j]`` is the value at ``(xs[i], ys[j])``.
    """

    delta: np.ndarray
    eta: np.ndarray
    xs: np.ndarray
    ys: np.ndarray
    loss: np.ndarray
    nan_mask: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def center(self) -> float:
        return float(self.loss[len(self.xs) // 2, len(self.ys) // 2])

    @property
    def nan_fraction(self) -> float:
        return float(np.mean(self.nan_mask))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow((f"# schema={SLICE_SCHEMA}",))
        w.writerow(("x", "y", "loss", "is_nan"))
        for i, x in enumerate(self.xs):
            for j, y in enumerate(self.ys):
                w.writerow((repr(float(x)), repr(float(y)), repr(float(self.loss[i, j])), int(self.nan_mask[i, j])))
        return buf.getvalue()

    def metadata(self) -> dict:
        return {
            "schema": SLICE_SCHEMA,
            "resolution": len(self.xs),
            "half_width": float(self.xs[-1]),
            "nan_fraction": self.nan_fraction,
            "center_loss": self.center,
            **self.meta,
        }

    def save(self, directory, stem: str = "landscape") -> None:
        d = Path(directory)
        d.mkdir(parents=True, exist_ok=True)
        for name, text in ((f"{stem}.csv", self.to_csv()), (f"{stem}.json", json.dumps(_clean(self.metadata()), indent=2, sort_keys=True))):
            tmp = d / (name + ".tmp")
            tmp.write_text(text)
            tmp.replace(d / name)

    @classmethod
    def read_csv(cls, path) -> dict:
        """Grid columns of a saved slice as arrays."""
        with open(path, newline="") as f:
            rows = list(csv.reader(f))[2:]
        a = np.array([[float(v) for v in r] for r in rows])
        return {"x": a[:, 0], "y": a[:, 1], "loss": a[:, 2], "is_nan": a[:, 3].astype(bool)}


def _clean(x):
    if isinstance(x, dict):
        return {k: _clean(v) for k, v in x.items()}
    if isinstance(x, float) and not math.isfinite(x):
        return str(x)
    return x


def landscape_slice(
    loss_fn,
    theta,
    seed: int = 0,
    half_width: float = 1.0,
    resolution: int = 51,
    blocks=None,
    directions=None,
    meta: dict | None = None,
) -> LandscapeSlice:
    """Evaluate ``loss_fn`` on the plane through ``theta`` spanned by two directions.

    ``directions`` overrides the seeded draw so one pair can be reused across
    iterations and policies. The centre node is evaluated at ``theta`` itself.
    """
    if resolution < 3 or resolution % 2 == 0:
        raise ValueError("resolution must be an odd integer >= 3")
    if not half_width > 0:
        raise ValueError("half_width must be positive")
    theta = np.asarray(theta, dtype=np.float64)
    if directions is None:
        delta, eta = make_directions(theta, blocks, seed)
    else:
        delta, eta = (np.asarray(d, dtype=np.float64) for d in directions)
        if delta.shape != theta.shape or eta.shape != theta.shape:
            raise ValueError("directions must match the parameter vector")
    xs = np.linspace(-half_width, half_width, resolution)
    mid = resolution // 2
    xs[mid] = 0.0
    ys = xs.copy()
    loss = np.empty((resolution, resolution))
    with np.errstate(all="ignore"):
        for i, x in enumerate(xs):
            for j, y in enumerate(ys):
                point = theta if (i == mid and j == mid) else theta + x * delta + y * eta
                loss[i, j] = float(loss_fn(point))
    info = {"seed": seed} | (meta or {})
    return LandscapeSlice(delta, eta, xs, ys, loss, ~np.isfinite(loss), info)
