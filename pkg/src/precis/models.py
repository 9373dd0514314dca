"""Feedforward networks and DeepONets over a flat parameter vector.

Parameters live in one flat vector laid out layer by layer: each weight matrix
``W`` of shape ``(fan_in, fan_out)`` in row-major order followed by its bias.
A DeepONet stores branch parameters, then trunk parameters, then ``b0``.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import B64, Format, ParameterStore, Tape, Tensor

ACTIVATION_NAMES = ("tanh", "relu", "elu", "swish", "sin", "sigmoid")


@dataclass(frozen=True)
class FnnConfig:
    in_dim: int
    out_dim: int
    depth: int
    width: int
    activation: str = "tanh"
    init_seed: int = 0

    def __post_init__(self):
        if self.depth < 1 or self.width < 1:
            raise ValueError(f"depth and width must be >= 1, got {self.depth}x{self.width}")
        if self.in_dim < 1 or self.out_dim < 1:
            raise ValueError("in_dim and out_dim must be >= 1")
        if self.activation not in ACTIVATION_NAMES:
            raise ValueError(f"unknown activation {self.activation!r}")

    @property
    def dims(self) -> list[int]:
        return [self.in_dim] + [self.width] * self.depth + [self.out_dim]


@dataclass(frozen=True)
class DeepOnetConfig:
    branch: FnnConfig
    trunk: FnnConfig
    p: int

    def __post_init__(self):
        if not self.branch.out_dim == self.trunk.out_dim == self.p:
            raise ValueError(
                f"branch/trunk output widths ({self.branch.out_dim}, {self.trunk.out_dim}) must equal p={self.p}"
            )


@dataclass(frozen=True)
class Block:
    """One named slice of the flat parameter vector."""

    name: str
    shape: tuple
    offset: int
    kind: str  # "weight" | "bias" | "scalar"

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))

    @property
    def stop(self) -> int:
        return self.offset + self.size


def _fnn_blocks(config: FnnConfig, prefix: str = "", offset: int = 0) -> list[Block]:
    blocks = []
    d = config.dims
    for i in range(len(d) - 1):
        w = Block(f"{prefix}W{i}", (d[i], d[i + 1]), offset, "weight")
        offset = w.stop
        b = Block(f"{prefix}b{i}", (d[i + 1],), offset, "bias")
        offset = b.stop
        blocks += [w, b]
    return blocks


def glorot_uniform(rng: np.random.Generator, fan_in: int, fan_out: int) -> np.ndarray:
    bound = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_in, fan_out))


# ---------------------------------------------------------------------------
# activations with their first two derivatives, expressed on the tape


def _act_derivs(name: str, z: Tensor, a: Tensor):
    """(sigma'(z), sigma''(z)) as tensors, given a = sigma(z)."""
    if name == "tanh":
        d1 = 1.0 - ad.square(a)
        return d1, (a * d1) * -2.0
    if name == "sin":
        return ad.cos(z), -a
    if name == "sigmoid":
        d1 = a * (1.0 - a)
        return d1, d1 * (1.0 - a * 2.0)
    if name == "relu":
        mask = z.tape.constant((z.data > 0).astype(z.fmt.carrier))
        return mask, z.tape.constant(np.zeros(z.shape))
    if name == "elu":
        neg = z.tape.constant((z.data <= 0).astype(z.fmt.carrier))
        # exp(z) = a + 1 on the negative side
        an = a * neg
        return an + 1.0, an + neg
    if name == "swish":
        s = ad.sigmoid(z)
        s1 = s * (1.0 - s)
        return s + z * s1, s1 * (2.0 + z * (1.0 - s * 2.0))
    raise ValueError(f"no derivatives for activation {name!r}")


class TaylorJet:
    """Network value with first and diagonal second input derivatives.

    ``first[i]`` and ``second[i]`` hold du/dx_i and d2u/dx_i^2 with the same
    shape as ``u``. Exposes the same accessors as :class:`autodiff.Jet`.
    """

    def __init__(self, u: Tensor, first: dict, second: dict, x: Tensor | None = None, grid: bool = False):
        self.u = u
        self.first = first
        self.second = second
        self.x = x
        # a grid jet is (functions, points) with one output component
        self.grid = grid

    def _pick(self, g: Tensor, comp: int) -> Tensor:
        if self.grid or g.ndim != 2 or g.shape[-1] == 1:
            return g
        return g[:, comp : comp + 1]

    def value(self, comp: int = 0) -> Tensor:
        return self._pick(self.u, comp)

    def d(self, coord: int, comp: int = 0) -> Tensor:
        return self._pick(self.first[coord], comp)

    def dd(self, coord: int, comp: int = 0) -> Tensor:
        return self._pick(self.second[coord], comp)


class FNN:
    """Affine-activation stack with an affine output layer."""

    def __init__(self, config: FnnConfig):
        self.config = config
        self.blocks = _fnn_blocks(config)
        self.n_params = self.blocks[-1].stop

    def init(self, seed: int | None = None) -> np.ndarray:
        """Glorot-uniform weights, zero biases, drawn in binary64."""
        rng = np.random.default_rng(self.config.init_seed if seed is None else seed)
        theta = np.zeros(self.n_params)
        for blk in self.blocks:
            if blk.kind == "weight":
                theta[blk.offset : blk.stop] = glorot_uniform(rng, *blk.shape).ravel()
        return theta

    def bind(self, tape: Tape, theta) -> list[Tensor]:
        """Parameter leaves on ``tape``, one per block."""
        theta = np.asarray(theta)
        return [tape.leaf(theta[b.offset : b.stop].reshape(b.shape)) for b in self.blocks]

    def apply(self, params: list[Tensor], x: Tensor) -> Tensor:
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ad.ShapeError(f"expected input (n, {self.config.in_dim}), got {x.shape}")
        act = ad.ACTIVATIONS[self.config.activation]
        h = x
        n_layers = len(params) // 2
        for i in range(n_layers):
            h = h @ params[2 * i] + params[2 * i + 1]
            if i < n_layers - 1:
                h = act(h)
        return h

    def jet(self, params: list[Tensor], x: Tensor, coords=None, second=None) -> TaylorJet:
        """Forward-mode propagation of input derivatives through the stack.

        First derivatives are formed for ``coords`` (default all inputs) and
        diagonal second derivatives for ``second`` (default ``coords``; pass
        ``()`` for none). Cheaper than nested reverse mode for a handful of
        coordinates; the result stays on the tape and is differentiable in
        ``params``.
        """
        if x.ndim != 2 or x.shape[1] != self.config.in_dim:
            raise ad.ShapeError(f"expected input (n, {self.config.in_dim}), got {x.shape}")
        coords = list(range(self.config.in_dim)) if coords is None else list(coords)
        second = list(coords) if second is None else list(second)
        if not set(second) <= set(coords):
            raise ValueError("second-derivative coordinates must also be in coords")
        name = self.config.activation
        act = ad.ACTIVATIONS[name]
        n_layers = len(params) // 2
        W0, b0 = params[0], params[1]
        z = x @ W0 + b0
        # first layer: dz/dx_i is row i of W0, second derivative vanishes
        dz = {i: W0[i : i + 1, :] for i in coords}
        ddz = {i: None for i in second}
        for layer in range(n_layers):
            if layer > 0:
                W, b = params[2 * layer], params[2 * layer + 1]
                z = h @ W + b
                dz = {i: dh[i] @ W for i in coords}
                ddz = {i: ddh[i] @ W for i in second}
            if layer == n_layers - 1:
                break
            h = act(z)
            d1, d2 = _act_derivs(name, z, h)
            dh = {i: d1 * dz[i] for i in coords}
            ddh = {}
            for i in second:
                t = d2 * ad.square(dz[i])
                ddh[i] = t if ddz[i] is None else d1 * ddz[i] + t
        first = {}
        for i in coords:
            # dz of a one-layer map is a broadcast row; give it the full shape
            first[i] = dz[i] if dz[i].shape == z.shape else ad.broadcast_to(dz[i], z.shape)
        dd = {i: ddz[i] if ddz[i] is not None else z.tape.constant(np.zeros(z.shape)) for i in second}
        return TaylorJet(z, first, dd, x)


class DeepONet:
    """Branch/trunk operator network: G(v)(y) = sum_k b_k(v) t_k(y) + b0."""

    def __init__(self, config: DeepOnetConfig):
        self.config = config
        self.branch = FNN(config.branch)
        self.trunk = FNN(config.trunk)
        nb = self.branch.n_params
        nt = self.trunk.n_params
        self.blocks = (
            _fnn_blocks(config.branch, "branch.")
            + _fnn_blocks(config.trunk, "trunk.", nb)
            + [Block("b0", (1,), nb + nt, "scalar")]
        )
        self.n_params = nb + nt + 1
        self._nb = len(self.branch.blocks)
        self._nt = len(self.trunk.blocks)

    def init(self, seed: int | None = None) -> np.ndarray:
        seed = self.config.branch.init_seed if seed is None else seed
        ss = np.random.SeedSequence(seed).spawn(2)
        theta = np.zeros(self.n_params)
        theta[: self.branch.n_params] = self.branch.init(int(ss[0].generate_state(1)[0]))
        theta[self.branch.n_params : -1] = self.trunk.init(int(ss[1].generate_state(1)[0]))
        return theta

    def bind(self, tape: Tape, theta) -> list[Tensor]:
        theta = np.asarray(theta)
        return [tape.leaf(theta[b.offset : b.stop].reshape(b.shape)) for b in self.blocks]

    def split(self, params: list[Tensor]):
        return params[: self._nb], params[self._nb : self._nb + self._nt], params[-1]

    def apply(self, params: list[Tensor], v: Tensor, y: Tensor, pointwise: bool = False) -> Tensor:
        """Operator output.

        Cartesian form: ``v`` (F, m) and ``y`` (P, d) give an (F, P) grid.
        Pointwise form: ``v`` and ``y`` have the same number of rows N and the
        result is (N, 1).
        """
        pb, pt, b0 = self.split(params)
        if v.ndim != 2 or v.shape[1] != self.config.branch.in_dim:
            raise ad.ShapeError(f"expected sensors (n, {self.config.branch.in_dim}), got {v.shape}")
        B = self.branch.apply(pb, v)
        T = self.trunk.apply(pt, y)
        if pointwise:
            if B.shape[0] != T.shape[0]:
                raise ad.ShapeError("pointwise DeepONet needs matching row counts")
            return (B * T).sum(axis=1, keepdims=True) + b0
        return B @ T.T + b0

    def jet(self, params: list[Tensor], v: Tensor, y: Tensor, coords=None, second=None) -> TaylorJet:
        """Input derivatives in the trunk coordinates on the (F, P) grid."""
        pb, pt, b0 = self.split(params)
        B = self.branch.apply(pb, v)
        tj = self.trunk.jet(pt, y, coords, second)
        u = B @ tj.u.T + b0
        first = {i: B @ g.T for i, g in tj.first.items()}
        second = {i: B @ g.T for i, g in tj.second.items()}
        return TaylorJet(u, first, second, y, grid=True)


# ---------------------------------------------------------------------------
# functional entry points


def build(config):
    """Network object for an ``FnnConfig`` or ``DeepOnetConfig``."""
    if isinstance(config, FnnConfig):
        return FNN(config)
    if isinstance(config, DeepOnetConfig):
        return DeepONet(config)
    raise TypeError(f"not a network config: {config!r}")


def fnn_forward(config: FnnConfig, theta, x, fmt: Format = B64) -> np.ndarray:
    net = FNN(config)
    theta = np.asarray(theta)
    if theta.size != net.n_params:
        raise ad.ShapeError(f"expected {net.n_params} parameters, got {theta.size}")
    tape = Tape(fmt)
    tape.recording = False
    params = [tape.constant(theta[b.offset : b.stop].reshape(b.shape)) for b in net.blocks]
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x.reshape(-1, config.in_dim)
    return net.apply(params, tape.constant(x)).data


def deeponet_forward(config: DeepOnetConfig, theta, v_sensors, y, fmt: Format = B64, pointwise=False) -> np.ndarray:
    net = DeepONet(config)
    theta = np.asarray(theta)
    if theta.size != net.n_params:
        raise ad.ShapeError(f"expected {net.n_params} parameters, got {theta.size}")
    v = np.atleast_2d(np.asarray(v_sensors, dtype=np.float64))
    y = np.asarray(y, dtype=np.float64)
    if y.ndim == 1:
        y = y.reshape(-1, config.trunk.in_dim)
    if v.shape[1] != config.branch.in_dim:
        raise ad.ShapeError(f"expected {config.branch.in_dim} sensor values, got {v.shape[1]}")
    tape = Tape(fmt)
    tape.recording = False
    params = [tape.constant(theta[b.offset : b.stop].reshape(b.shape)) for b in net.blocks]
    return net.apply(params, tape.constant(v), tape.constant(y), pointwise=pointwise).data


def cast_weights(store: ParameterStore, target_format: Format) -> ParameterStore:
    """Re-express every parameter in ``target_format`` (rounding when narrowing)."""
    target_format = Format(target_format)
    return ParameterStore(target_format.round(store.master), target_format, target_format)


# ---------------------------------------------------------------------------
# checkpoints


def config_to_dict(config) -> dict:
    if isinstance(config, FnnConfig):
        return {"type": "fnn", **asdict(config)}
    if isinstance(config, DeepOnetConfig):
        return {"type": "deeponet", "branch": asdict(config.branch), "trunk": asdict(config.trunk), "p": config.p}
    raise TypeError(f"not a network config: {config!r}")


def config_from_dict(d: dict):
    d = dict(d)
    kind = d.pop("type")
    if kind == "fnn":
        return FnnConfig(**d)
    if kind == "deeponet":
        return DeepOnetConfig(FnnConfig(**d["branch"]), FnnConfig(**d["trunk"]), d["p"])
    raise ValueError(f"unknown network type {kind!r}")


def save_checkpoint(path, config, store: ParameterStore, seed=None, extra: dict | None = None) -> None:
    """Write ``<path>.params`` and ``<path>.arch.json``."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    ad.save_array(path.with_suffix(".params"), store.master, store.master_format, seed=seed)
    arch = {"schema": 1, "network": config_to_dict(config), "n_params": int(store.master.size)}
    if extra:
        arch.update(extra)
    tmp = path.with_suffix(".arch.json.tmp")
    tmp.write_text(json.dumps(arch, indent=2, sort_keys=True))
    tmp.replace(path.with_suffix(".arch.json"))


def load_checkpoint(path):
    path = Path(path)
    arch = json.loads(path.with_suffix(".arch.json").read_text())
    values, header = ad.load_array(path.with_suffix(".params"))
    fmt = Format(header["format"])
    return config_from_dict(arch["network"]), ParameterStore(values, fmt, fmt), arch
