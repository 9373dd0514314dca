"""Random composite graphs for finite-difference checks."""

import numpy as np

from precis import autodiff as ad

UNARY = {
    "tanh": ad.tanh,
    "sin": ad.sin,
    "cos": ad.cos,
    "sigmoid": ad.sigmoid,
    "swish": ad.swish,
    "elu": ad.elu,
    "square": ad.square,
    "exp_tanh": lambda a: ad.exp(ad.tanh(a)),
    "sqrt_pos": lambda a: ad.sqrt(ad.square(a) + 1.0),
    "neg": ad.neg,
}


def _binary(rng, a, b):
    op = rng.choice(["add", "sub", "mul", "div"])
    if op == "add":
        return a + b
    if op == "sub":
        return a - b
    if op == "mul":
        return a * b
    return a / (ad.square(b) + 1.0)


def random_graph(rng, leaves):
    """Build a scalar from a random mix of primitives over ``leaves`` (all shaped (m, n))."""
    pool = list(leaves)
    m, n = pool[0].shape
    for _ in range(rng.integers(4, 10)):
        kind = rng.choice(["unary", "binary", "matmul", "reduce", "concat", "slice", "broadcast", "reshape"])
        a = pool[rng.integers(len(pool))]
        if kind == "unary":
            name = rng.choice(sorted(UNARY))
            pool.append(UNARY[name](a))
        elif kind == "binary":
            pool.append(_binary(rng, a, pool[rng.integers(len(pool))]))
        elif kind == "matmul":
            b = pool[rng.integers(len(pool))]
            pool.append(ad.tanh(a @ ad.transpose(b)) @ b)
        elif kind == "reduce":
            axis = int(rng.integers(2))
            r = a.mean(axis=axis, keepdims=True) if rng.random() < 0.5 else a.sum(axis=axis, keepdims=True)
            pool.append(ad.broadcast_to(r, (m, n)) * a)
        elif kind == "concat":
            b = pool[rng.integers(len(pool))]
            c = ad.concat([a[:, :1], b[:, 1:]], axis=1)
            pool.append(c)
        elif kind == "slice":
            pool.append(ad.concat([a[1:, :], a[:1, :]], axis=0))
        elif kind == "broadcast":
            row = a[0:1, :]
            pool.append(a + row)
        else:
            pool.append(ad.reshape(ad.reshape(a, (n, m)), (m, n)) * 0.5)
    out = pool[-1]
    for t in pool[len(leaves) : -1]:
        if rng.random() < 0.3:
            out = out + t
    return out.sum() if rng.random() < 0.5 else out.mean()


def graph_fd_check(seed, m=3, n=4, n_leaves=2, h=1e-6):
    """Relative error ||g - fd|| / ||fd|| of reverse mode against central differences."""
    rng = np.random.default_rng(seed)
    values = [rng.uniform(-1, 1, (m, n)) for _ in range(n_leaves)]
    structure = int(rng.integers(2**31))

    def build(vals):
        tape = ad.Tape(ad.B64)
        leaves = [tape.leaf(v) for v in vals]
        return tape, leaves, random_graph(np.random.default_rng(structure), leaves)

    tape, leaves, out = build(values)
    grad = tape.backward(out, leaves)
    flat = np.concatenate([v.ravel() for v in values])
    fd = np.empty_like(flat)

    def f(vec):
        parts = np.split(vec, n_leaves)
        return build([p.reshape(m, n) for p in parts])[2].item()

    for i in range(flat.size):
        e = np.zeros_like(flat)
        e[i] = h
        fd[i] = (f(flat + e) - f(flat - e)) / (2 * h)
    denom = max(np.linalg.norm(fd), 1e-12)
    return float(np.linalg.norm(grad - fd) / denom)


def second_derivative_check(seed, activation="tanh", n_points=5, h=1e-3):
    """Max relative error of d2u/dx_i^2 (nested reverse mode) against central differences."""
    from precis.models import FNN, FnnConfig, fnn_forward

    cfg = FnnConfig(2, 1, 2, 8, activation)
    net = FNN(cfg)
    theta = net.init(seed)
    rng = np.random.default_rng(seed + 1)
    x = rng.uniform(-1, 1, (n_points, 2))
    tape = ad.Tape(ad.B64)
    params = [tape.constant(p.data) for p in net.bind(tape, theta)]
    jet = ad.input_jet(lambda z: net.apply(params, z), tape.constant(x))
    worst = 0.0
    for i in range(2):
        e = np.zeros(2)
        e[i] = h
        fd = (fnn_forward(cfg, theta, x + e) - 2 * fnn_forward(cfg, theta, x) + fnn_forward(cfg, theta, x - e)) / h**2
        got = jet.dd(i).data
        worst = max(worst, float(np.max(np.abs(got - fd)) / max(np.max(np.abs(fd)), 1e-12)))
    return worst
