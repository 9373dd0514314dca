"""Dense tensors and reverse-mode differentiation under a declared number format.

Every primitive executes in the format of its :class:`Tape`:

* ``binary64`` / ``binary32`` -- plain numpy arithmetic in that dtype;
* ``binary16`` -- each elementwise result is computed in binary32 and rounded
  to binary16.  Matrix products and reductions accumulate in binary32 and
  round once (the behaviour of half-precision GEMM units).  With
  ``accumulate32=False`` they instead round every product and every partial
  sum, accumulating pairwise in binary16.

Binary16 tensors are carried in float32 arrays whose elements are all exactly
representable in binary16.

Gradients are taken with :meth:`Tape.gradient`.  With ``create_graph=True``
the backward pass is itself recorded, which is how input derivatives of
order two are obtained (:func:`input_jet`).
"""

from __future__ import annotations

import enum
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fp16


class Format(enum.Enum):
    BINARY64 = "binary64"
    BINARY32 = "binary32"
    BINARY16 = "binary16"

    @property
    def itemsize(self) -> int:
        return {"binary64": 8, "binary32": 4, "binary16": 2}[self.value]

    @property
    def carrier(self):
        return np.float64 if self is Format.BINARY64 else np.float32

    @property
    def storage_dtype(self):
        return {"binary64": np.float64, "binary32": np.float32, "binary16": np.float16}[self.value]

    def round(self, x) -> np.ndarray:
        """Round ``x`` into this format, returning a carrier array."""
        if self is Format.BINARY16:
            return fp16.round_array(x)
        with np.errstate(over="ignore"):
            return np.asarray(x, dtype=self.carrier)

    def representable(self, x) -> bool:
        x = np.asarray(x)
        r = self.round(x)
        return bool(np.array_equal(r, x.astype(r.dtype), equal_nan=True))


B64, B32, B16 = Format.BINARY64, Format.BINARY32, Format.BINARY16


class ShapeError(ValueError):
    pass


@dataclass
class ByteLedger:
    """Cumulative bytes allocated, keyed by (category, format).

    Categories used by the engine: ``activations`` (forward values),
    ``gradients`` (backward values), ``parameters`` and ``optimizer``
    (persistent buffers, charged once by the trainer).
    """

    bytes_by_key: dict = field(default_factory=dict)
    elements_by_key: dict = field(default_factory=dict)

    def charge(self, category: str, fmt: Format, n_elements: int) -> None:
        if n_elements < 0:
            raise ValueError("negative allocation")
        key = (category, fmt.value)
        self.bytes_by_key[key] = self.bytes_by_key.get(key, 0) + n_elements * fmt.itemsize
        self.elements_by_key[key] = self.elements_by_key.get(key, 0) + n_elements

    def bytes(self, category: str | None = None, fmt: Format | None = None) -> int:
        return sum(
            v
            for (c, f), v in self.bytes_by_key.items()
            if (category is None or c == category) and (fmt is None or f == fmt.value)
        )

    def elements(self, category: str | None = None) -> int:
        return sum(v for (c, _), v in self.elements_by_key.items() if category is None or c == category)

    @property
    def bytes_by_format(self) -> dict:
        out: dict = {}
        for (_, f), v in self.bytes_by_key.items():
            out[f] = out.get(f, 0) + v
        return out

    @property
    def total(self) -> int:
        return sum(self.bytes_by_key.values())

    def snapshot(self) -> dict:
        return {
            "total_bytes": self.total,
            "bytes_by_format": dict(sorted(self.bytes_by_format.items())),
            "bytes": {f"{c}/{f}": v for (c, f), v in sorted(self.bytes_by_key.items())},
        }


class Tape:
    """Ordered record of primitives executed in one number format."""

    def __init__(self, fmt: Format | str = B32, ledger: ByteLedger | None = None, accumulate32: bool = True):
        self.fmt = Format(fmt)
        self.ledger = ledger
        self.accumulate32 = accumulate32
        self.nodes: list[Tensor] = []
        self.recording = True
        self.category = "activations"

    # -- construction -----------------------------------------------------
    def _array(self, x) -> np.ndarray:
        if isinstance(x, Tensor):
            x = x.data
        return self.fmt.round(x)

    def constant(self, x) -> "Tensor":
        return Tensor(self._array(x), self)

    def leaf(self, x) -> "Tensor":
        """A differentiable input (parameter or coordinate)."""
        data = self._array(x)
        if self.ledger is not None:
            self.ledger.charge(self.category, self.fmt, data.size)
        t = Tensor(data, self)
        t.requires_grad = True
        t.op = "leaf"
        t.index = len(self.nodes)
        self.nodes.append(t)
        return t

    # -- differentiation ----------------------------------------------------
    def gradient(self, output: "Tensor", inputs, create_graph: bool = False, seed=None) -> list:
        """d(output)/d(inputs), each returned as a Tensor shaped like its input."""
        inputs = list(inputs)
        if seed is None:
            if output.size != 1:
                raise ShapeError(f"gradient of non-scalar output with shape {output.shape}")
            seed = Tensor(np.ones(output.shape, self.fmt.carrier), self)
        elif not isinstance(seed, Tensor):
            seed = self.constant(np.broadcast_to(seed, output.shape))
        watched = [x for x in inputs if x.requires_grad and x.index is not None]
        if not output.requires_grad or not watched:
            return [self.constant(np.zeros(x.shape)) for x in inputs]
        start = min(x.index for x in watched)
        stop = output.index + 1
        input_ids = {id(x) for x in watched}
        dep = set(input_ids)
        for node in self.nodes[start:stop]:
            if node.parents and any(id(p) in dep for p in node.parents):
                dep.add(id(node))
        grads = {}
        if id(output) in dep:
            grads[id(output)] = seed
        saved = self.recording, self.category
        self.recording, self.category = create_graph, "gradients"
        try:
            for node in reversed(self.nodes[start:stop]):
                key = id(node)
                g = grads.get(key)
                if g is None or node.vjp is None:
                    continue
                if key not in input_ids:
                    del grads[key]
                for p, pg in zip(node.parents, node.vjp(g)):
                    if pg is None or id(p) not in dep:
                        continue
                    k = id(p)
                    grads[k] = pg if k not in grads else grads[k] + pg
        finally:
            self.recording, self.category = saved
        return [grads[id(x)] if id(x) in grads else self.constant(np.zeros(x.shape)) for x in inputs]

    def backward(self, loss: "Tensor", params) -> np.ndarray:
        """Flat gradient of a scalar loss over ``params`` (carrier array)."""
        grads = self.gradient(loss, params)
        if not grads:
            return np.zeros(0, self.fmt.carrier)
        return np.concatenate([g.data.reshape(-1) for g in grads])

    def check_purity(self) -> bool:
        """True when every stored value is representable in the tape format."""
        return all(self.fmt.representable(n.data) for n in self.nodes)


# ---------------------------------------------------------------------------
# kernels


def _ew(tape: Tape, f, *arrays) -> np.ndarray:
    with np.errstate(all="ignore"):
        r = f(*arrays)
    r = np.asarray(r, dtype=tape.fmt.carrier)
    if tape.fmt is B16:
        r = fp16.round_array(r)
    return r


def _reduce_sum(tape: Tape, x: np.ndarray, axes: tuple, keepdims: bool) -> np.ndarray:
    if tape.fmt is not B16 or tape.accumulate32:
        with np.errstate(all="ignore"):
            r = np.sum(x, axis=axes, keepdims=keepdims, dtype=tape.fmt.carrier)
        return tape.fmt.round(r)
    keep = [i for i in range(x.ndim) if i not in axes]
    moved = np.transpose(x, keep + list(axes))
    lead = [x.shape[i] for i in keep]
    n = int(np.prod([x.shape[i] for i in axes])) if axes else 1
    r = fp16.pairwise_sum_half(moved.reshape(lead + [n]))
    if keepdims:
        r = r.reshape([1 if i in axes else s for i, s in enumerate(x.shape)])
    return np.asarray(r, dtype=np.float32)


def _matmul(tape: Tape, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if tape.fmt is B16:
        if tape.accumulate32:
            with np.errstate(all="ignore"):
                return fp16.round_array(np.matmul(a, b))
        return fp16.matmul_half(a, b)
    with np.errstate(all="ignore"):
        return np.matmul(a, b)


def _make(tape: Tape, data: np.ndarray, op: str, parents: tuple, vjp, alloc: bool = True) -> "Tensor":
    if alloc and tape.ledger is not None:
        tape.ledger.charge(tape.category, tape.fmt, data.size)
    t = Tensor(data, tape)
    if tape.recording and any(p.requires_grad for p in parents):
        t.requires_grad = True
        t.parents = parents
        t.vjp = vjp
        t.op = op
        t.index = len(tape.nodes)
        tape.nodes.append(t)
    return t


def _unbroadcast(g: "Tensor", shape: tuple) -> "Tensor":
    if g.shape == shape:
        return g
    nd = g.ndim - len(shape)
    axes = tuple(range(nd)) + tuple(
        i + nd for i, s in enumerate(shape) if s == 1 and g.shape[i + nd] != 1
    )
    r = g.sum(axis=axes, keepdims=True) if axes else g
    return r.reshape(shape)


# ---------------------------------------------------------------------------


class Tensor:
    __slots__ = ("data", "tape", "requires_grad", "parents", "vjp", "op", "index")
    __array_priority__ = 100

    def __init__(self, data: np.ndarray, tape: Tape):
        self.data = data
        self.tape = tape
        self.requires_grad = False
        self.parents = ()
        self.vjp = None
        self.op = "const"
        self.index = None

    # -- introspection -------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def fmt(self) -> Format:
        return self.tape.fmt

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def numpy(self) -> np.ndarray:
        """Values in the storage dtype of the format (float16 for binary16)."""
        return self.data.astype(self.fmt.storage_dtype)

    def item(self) -> float:
        return float(self.data.reshape(-1)[0])

    def __repr__(self) -> str:
        return f"Tensor({self.op}, shape={self.shape}, fmt={self.fmt.value})"

    # -- operators -------------------------------------------------------
    def _coerce(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            if other.tape is not self.tape:
                raise ValueError("tensors live on different tapes")
            return other
        return self.tape.constant(other)

    def __add__(self, o):
        return add(self, self._coerce(o))

    def __radd__(self, o):
        return add(self._coerce(o), self)

    def __sub__(self, o):
        return sub(self, self._coerce(o))

    def __rsub__(self, o):
        return sub(self._coerce(o), self)

    def __mul__(self, o):
        return mul(self, self._coerce(o))

    def __rmul__(self, o):
        return mul(self._coerce(o), self)

    def __truediv__(self, o):
        return div(self, self._coerce(o))

    def __rtruediv__(self, o):
        return div(self._coerce(o), self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, o):
        return matmul(self, self._coerce(o))

    def __getitem__(self, idx):
        return take(self, idx)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)


# ---------------------------------------------------------------------------
# primitives


def _check_broadcast(a: Tensor, b: Tensor) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError as e:
        raise ShapeError(f"cannot broadcast {a.shape} with {b.shape}") from e


def add(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = _ew(a.tape, np.add, a.data, b.data)
    return _make(a.tape, out, "add", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = _ew(a.tape, np.subtract, a.data, b.data)
    return _make(a.tape, out, "sub", (a, b), lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = _ew(a.tape, np.multiply, a.data, b.data)
    return _make(
        a.tape, out, "mul", (a, b), lambda g: (_unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape))
    )


def div(a: Tensor, b: Tensor) -> Tensor:
    _check_broadcast(a, b)
    out = _ew(a.tape, np.divide, a.data, b.data)

    def vjp(g):
        ga = g / b
        return _unbroadcast(ga, a.shape), _unbroadcast(-(ga * a) / b, b.shape)

    return _make(a.tape, out, "div", (a, b), vjp)


def neg(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.negative, a.data)
    return _make(a.tape, out, "neg", (a,), lambda g: (-g,))


def square(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.square, a.data)
    return _make(a.tape, out, "square", (a,), lambda g: ((g * a) * 2.0,))


def sqrt(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.sqrt, a.data)
    res = []

    def vjp(g):
        return ((g * 0.5) / res[0],)

    t = _make(a.tape, out, "sqrt", (a,), vjp)
    res.append(t)
    return t


def exp(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.exp, a.data)
    res = []
    t = _make(a.tape, out, "exp", (a,), lambda g: (g * res[0],))
    res.append(t)
    return t


def tanh(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.tanh, a.data)
    res = []
    t = _make(a.tape, out, "tanh", (a,), lambda g: (g * (1.0 - square(res[0])),))
    res.append(t)
    return t


def sigmoid(a: Tensor) -> Tensor:
    out = _ew(a.tape, lambda x: 1.0 / (1.0 + np.exp(-x)), a.data)
    res = []
    t = _make(a.tape, out, "sigmoid", (a,), lambda g: (g * (res[0] * (1.0 - res[0])),))
    res.append(t)
    return t


def sin(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.sin, a.data)
    return _make(a.tape, out, "sin", (a,), lambda g: (g * cos(a),))


def cos(a: Tensor) -> Tensor:
    out = _ew(a.tape, np.cos, a.data)
    return _make(a.tape, out, "cos", (a,), lambda g: (-(g * sin(a)),))


def relu(a: Tensor) -> Tensor:
    out = _ew(a.tape, lambda x: np.maximum(x, 0), a.data)
    mask = a.tape.constant((a.data > 0).astype(a.fmt.carrier))
    return _make(a.tape, out, "relu", (a,), lambda g: (g * mask,))


def elu(a: Tensor) -> Tensor:
    """ELU with alpha = 1."""
    out = _ew(a.tape, lambda x: np.where(x > 0, x, np.expm1(np.minimum(x, 0))), a.data)
    neg_mask = a.tape.constant((a.data <= 0).astype(a.fmt.carrier))
    res = []
    # derivative: 1 where x > 0, elu(x) + 1 = exp(x) elsewhere
    t = _make(a.tape, out, "elu", (a,), lambda g: (g * (res[0] * neg_mask + 1.0),))
    res.append(t)
    return t


def swish(a: Tensor) -> Tensor:
    return a * sigmoid(a)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} @ {b.shape}")
    out = _matmul(a.tape, a.data, b.data)
    return _make(a.tape, out, "matmul", (a, b), lambda g: (g @ b.T, a.T @ g))


def transpose(a: Tensor) -> Tensor:
    return _make(a.tape, a.data.T, "transpose", (a,), lambda g: (g.T,), alloc=False)


def reshape(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = a.data.reshape(shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return _make(a.tape, out, "reshape", (a,), lambda g: (g.reshape(a.shape),), alloc=False)


def _norm_axes(axis, ndim) -> tuple:
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(sorted(ax % ndim for ax in axis))


def sum_(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    out = _reduce_sum(a.tape, a.data, axes, keepdims)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to(g.reshape(kept), a.shape),)

    return _make(a.tape, out, "sum", (a,), vjp)


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = int(np.prod([a.shape[i] for i in axes])) if axes else 1
    tape = a.tape
    if tape.fmt is B16 and not tape.accumulate32:
        return sum_(a, axes, keepdims) / float(n)
    # fused: accumulate in the carrier, divide, round once
    with np.errstate(all="ignore"):
        r = np.sum(a.data, axis=axes, keepdims=keepdims, dtype=tape.fmt.carrier) / tape.fmt.carrier(n)
    out = tape.fmt.round(r)
    kept = tuple(1 if i in axes else s for i, s in enumerate(a.shape))

    def vjp(g):
        return (broadcast_to((g / float(n)).reshape(kept), a.shape),)

    return _make(tape, out, "mean", (a,), vjp)


def broadcast_to(a: Tensor, shape) -> Tensor:
    shape = tuple(shape)
    try:
        out = np.broadcast_to(a.data, shape)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    return _make(a.tape, out, "broadcast", (a,), lambda g: (_unbroadcast(g, a.shape),), alloc=False)


def take(a: Tensor, idx) -> Tensor:
    """Basic (slice/int) indexing."""
    out = a.data[idx]
    return _make(a.tape, out, "slice", (a,), lambda g: (_scatter(g, idx, a.shape),), alloc=False)


def _scatter(g: Tensor, idx, shape) -> Tensor:
    data = np.zeros(shape, g.fmt.carrier)
    data[idx] = g.data
    return _make(g.tape, data, "scatter", (g,), lambda gg: (take(gg, idx),))


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = list(tensors)
    tape = tensors[0].tape
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError as e:
        raise ShapeError(str(e)) from e
    ax = axis % out.ndim
    bounds = np.cumsum([0] + [t.shape[ax] for t in tensors])

    def vjp(g):
        parts = []
        for lo, hi in zip(bounds[:-1], bounds[1:]):
            sl = [slice(None)] * g.ndim
            sl[ax] = slice(int(lo), int(hi))
            parts.append(take(g, tuple(sl)))
        return tuple(parts)

    return _make(tape, out, "concat", tuple(tensors), vjp)


ACTIVATIONS = {"tanh": tanh, "relu": relu, "elu": elu, "swish": swish, "sin": sin, "sigmoid": sigmoid}


# ---------------------------------------------------------------------------
# input derivatives


@dataclass
class Jet:
    """Network value with first and (diagonal) second input derivatives."""

    x: Tensor
    u: Tensor
    first: dict
    second: dict

    def d(self, coord: int, comp: int = 0) -> Tensor:
        return self.first[comp][:, coord : coord + 1]

    def dd(self, coord: int, comp: int = 0) -> Tensor:
        return self.second[(comp, coord)]

    def value(self, comp: int = 0) -> Tensor:
        return self.u[:, comp : comp + 1]


def input_jet(network, x: Tensor, max_order: int = 2, coords=None) -> Jet:
    """Value and input derivatives of ``network`` at the rows of ``x``.

    First derivatives come from one reverse pass over the network graph;
    second derivatives ``d2u/dx_i^2`` (for ``i`` in ``coords``, default all)
    from one further reverse pass per coordinate over that first-derivative
    graph.  Everything stays on the tape, so the results remain
    differentiable with respect to the network parameters.
    """
    if max_order not in (1, 2):
        raise ValueError(f"unsupported derivative order {max_order}")
    tape = x.tape
    if not x.requires_grad:
        x = tape.leaf(x.data)
    u = network(x)
    if u.ndim == 1:
        u = u.reshape(u.shape[0], 1)
    coords = range(x.shape[1]) if coords is None else coords
    first, second = {}, {}
    for j in range(u.shape[1]):
        uj = u if u.shape[1] == 1 else u[:, j : j + 1]
        (g,) = tape.gradient(uj.sum(), [x], create_graph=True)
        first[j] = g
        if max_order == 2:
            for i in coords:
                (h,) = tape.gradient(g[:, i : i + 1].sum(), [x], create_graph=True)
                second[(j, i)] = h[:, i : i + 1]
    return Jet(x, u, first, second)


# ---------------------------------------------------------------------------
# parameters


class ParameterStore:
    """Master parameter vector plus an optional lower-precision compute copy."""

    def __init__(self, values, master_format: Format = B32, compute_format: Format | None = None):
        self.master_format = Format(master_format)
        self.master = self.master_format.round(np.asarray(values))
        self.compute_format = Format(compute_format) if compute_format is not None else self.master_format
        self.compute_copy = None
        self.sync()

    @property
    def has_mirror(self) -> bool:
        return self.compute_format is not self.master_format

    def sync(self) -> np.ndarray:
        """Refresh the compute copy from the master vector."""
        if self.has_mirror:
            self.compute_copy = self.compute_format.round(self.master)
        else:
            self.compute_copy = self.master
        return self.compute_copy

    def __len__(self) -> int:
        return self.master.size

    def copy(self) -> "ParameterStore":
        return ParameterStore(self.master.copy(), self.master_format, self.compute_format)


def save_array(path, values, fmt: Format, seed=None, extra: dict | None = None) -> None:
    """Little-endian flat binary preceded by a length-prefixed JSON header."""
    fmt = Format(fmt)
    arr = np.asarray(values)
    data = fmt.round(arr).astype(np.dtype(fmt.storage_dtype).newbyteorder("<"))
    header = {"shape": list(arr.shape), "format": fmt.value, "seed": seed}
    if extra:
        header.update(extra)
    blob = json.dumps(header, sort_keys=True).encode()
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        f.write(data.tobytes())
    tmp.replace(path)


def load_array(path) -> tuple[np.ndarray, dict]:
    raw = Path(path).read_bytes()
    (n,) = struct.unpack("<I", raw[:4])
    header = json.loads(raw[4 : 4 + n])
    fmt = Format(header["format"])
    dt = np.dtype(fmt.storage_dtype).newbyteorder("<")
    arr = np.frombuffer(raw[4 + n :], dtype=dt).astype(fmt.carrier).reshape(header["shape"])
    return arr, header
