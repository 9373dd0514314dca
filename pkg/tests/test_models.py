import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precis.autodiff import B16, B32, B64, ParameterStore, ShapeError, Tape
from precis.models import (
    DeepONet,
    DeepOnetConfig,
    FNN,
    FnnConfig,
    cast_weights,
    deeponet_forward,
    fnn_forward,
    load_checkpoint,
    save_checkpoint,
)


def hand_rolled_fnn(config, theta, x):
    """Plain numpy forward pass, written without the package's tape."""
    act = {
        "tanh": np.tanh,
        "relu": lambda z: np.maximum(z, 0.0),
        "elu": lambda z: np.where(z > 0, z, np.expm1(np.minimum(z, 0.0))),
        "swish": lambda z: z / (1.0 + np.exp(-z)),
    }[config.activation]
    dims = [config.in_dim] + [config.width] * config.depth + [config.out_dim]
    h, pos = np.asarray(x, dtype=np.float64), 0
    for i in range(len(dims) - 1):
        W = theta[pos : pos + dims[i] * dims[i + 1]].reshape(dims[i], dims[i + 1])
        pos += W.size
        b = theta[pos : pos + dims[i + 1]]
        pos += b.size
        h = h @ W + b
        if i < len(dims) - 2:
            h = act(h)
    assert pos == theta.size
    return h


class TestFnn:
    def test_zero_parameters_give_zero(self):
        cfg = FnnConfig(3, 2, 2, 5)
        out = fnn_forward(cfg, np.zeros(FNN(cfg).n_params), np.random.default_rng(0).standard_normal((4, 3)))
        assert np.array_equal(out, np.zeros((4, 2)))

    def test_unit_net_at_zero(self):
        cfg = FnnConfig(1, 1, 1, 1, "tanh")
        assert fnn_forward(cfg, np.array([1.0, 0.0, 1.0, 0.0]), [[0.0]]).item() == 0.0

    @pytest.mark.parametrize("activation", ["tanh", "relu", "elu", "swish"])
    def test_matches_hand_rolled_forward(self, activation):
        cfg = FnnConfig(3, 2, 3, 16, activation)
        theta = FNN(cfg).init(0)
        x = np.random.default_rng(0).uniform(-2, 2, (25, 3))
        np.testing.assert_allclose(fnn_forward(cfg, theta, x), hand_rolled_fnn(cfg, theta, x), rtol=0, atol=1e-12)

    def test_dimension_mismatch(self):
        cfg = FnnConfig(2, 1, 1, 4)
        theta = FNN(cfg).init(0)
        with pytest.raises(ShapeError):
            fnn_forward(cfg, theta, np.ones((3, 3)))
        with pytest.raises(ShapeError):
            fnn_forward(cfg, theta[:-1], np.ones((3, 2)))

    @pytest.mark.parametrize("kw", [{"depth": 0}, {"width": 0}, {"activation": "gelu"}])
    def test_config_validation(self, kw):
        base = {"in_dim": 1, "out_dim": 1, "depth": 2, "width": 3}
        with pytest.raises(ValueError):
            FnnConfig(**(base | kw))

    def test_glorot_bounds_and_zero_bias(self):
        net = FNN(FnnConfig(4, 3, 2, 30))
        theta = net.init(5)
        for b in net.blocks:
            chunk = theta[b.offset : b.stop]
            if b.kind == "bias":
                assert not chunk.any()
            else:
                assert np.abs(chunk).max() <= np.sqrt(6.0 / sum(b.shape))

    @settings(max_examples=20, deadline=None)
    @given(st.integers(0, 2**32 - 1))
    def test_init_is_deterministic(self, seed):
        net = FNN(FnnConfig(2, 1, 2, 7))
        assert np.array_equal(net.init(seed).view(np.uint64), net.init(seed).view(np.uint64))


class TestDeepOnet:
    def test_scalar_product_plus_bias(self):
        # p = 1, depth-1 width-1 branch and trunk with identity-like linear paths
        cfg = DeepOnetConfig(FnnConfig(1, 1, 1, 1, "relu"), FnnConfig(1, 1, 1, 1, "relu"), 1)
        # branch: relu(1 * v) * 1 -> 2 at v = 2; trunk: relu(1 * y) * 1 -> 3 at y = 3
        theta = np.array([1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0])
        assert deeponet_forward(cfg, theta, [[2.0]], [[3.0]]).item() == 7.0

    def test_zero_branch_gives_bias(self):
        cfg = DeepOnetConfig(FnnConfig(5, 4, 2, 8), FnnConfig(2, 4, 2, 8), 4)
        net = DeepONet(cfg)
        theta = net.init(0)
        theta[: net.branch.n_params] = 0.0
        theta[-1] = 0.375
        rng = np.random.default_rng(1)
        out = deeponet_forward(cfg, theta, rng.standard_normal((3, 5)), rng.uniform(size=(6, 2)))
        assert np.array_equal(out, np.full((3, 6), 0.375))

    def test_matches_independent_dot_product(self):
        cfg = DeepOnetConfig(FnnConfig(10, 6, 2, 12), FnnConfig(2, 6, 3, 12), 6)
        net = DeepONet(cfg)
        theta = net.init(0)
        theta[-1] = -0.25
        rng = np.random.default_rng(0)
        v, y = rng.standard_normal((4, 10)), rng.uniform(size=(9, 2))
        nb = net.branch.n_params
        B = hand_rolled_fnn(cfg.branch, theta[:nb], v)
        T = hand_rolled_fnn(cfg.trunk, theta[nb:-1], y)
        expect = np.einsum("fk,pk->fp", B, T) - 0.25
        np.testing.assert_allclose(deeponet_forward(cfg, theta, v, y), expect, rtol=0, atol=1e-12)
        point = deeponet_forward(cfg, theta, v, y[:4], pointwise=True)
        np.testing.assert_allclose(point.ravel(), np.diag(expect[:, :4]), rtol=0, atol=1e-12)

    def test_grid_jet_matches_finite_differences(self):
        cfg = DeepOnetConfig(FnnConfig(6, 4, 2, 8), FnnConfig(2, 4, 2, 8), 4)
        net = DeepONet(cfg)
        theta = net.init(3)
        rng = np.random.default_rng(3)
        v, y = rng.standard_normal((3, 6)), rng.uniform(size=(5, 2))
        tape = Tape(B64)
        jet = net.jet(net.bind(tape, theta), tape.constant(v), tape.constant(y), coords=[0, 1], second=[0])
        f = lambda yy: deeponet_forward(cfg, theta, v, yy)
        h = 1e-4
        for i in (0, 1):
            e = np.zeros(2)
            e[i] = h
            assert jet.d(i).shape == (3, 5)
            np.testing.assert_allclose(jet.d(i).data, (f(y + e) - f(y - e)) / (2 * h), rtol=1e-6, atol=1e-8)
        e = np.array([h, 0.0])
        second = (f(y + e) - 2 * f(y) + f(y - e)) / h**2
        np.testing.assert_allclose(jet.dd(0).data, second, rtol=1e-4, atol=1e-5)
        np.testing.assert_array_equal(jet.value().data, f(y))

    def test_width_mismatch_rejected(self):
        with pytest.raises(ValueError):
            DeepOnetConfig(FnnConfig(3, 4, 1, 2), FnnConfig(1, 5, 1, 2), 4)

    def test_sensor_mismatch(self):
        cfg = DeepOnetConfig(FnnConfig(3, 2, 1, 2), FnnConfig(1, 2, 1, 2), 2)
        with pytest.raises(ShapeError):
            deeponet_forward(cfg, DeepONet(cfg).init(0), np.ones((1, 4)), [[0.5]])


class TestCast:
    def test_idempotent(self):
        store = ParameterStore(np.random.default_rng(0).standard_normal(200), B32, B32)
        once = cast_weights(store, B16)
        assert np.array_equal(cast_weights(once, B16).master, once.master)

    def test_powers_of_two_unchanged(self):
        vals = 2.0 ** np.arange(-10, 11)
        store = ParameterStore(np.concatenate([vals, -vals]), B32, B32)
        assert np.array_equal(cast_weights(store, B16).master, store.master)

    def test_widening_is_identity(self):
        store = ParameterStore(np.random.default_rng(1).standard_normal(30), B16, B16)
        assert np.array_equal(cast_weights(store, B64).master, store.master)

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(min_value=2.0**-14, max_value=6.0e4), min_size=1, max_size=40), st.integers(0, 2**20))
    def test_perturbation_bound(self, mags, seed):
        signs = np.random.default_rng(seed).choice([-1.0, 1.0], len(mags))
        store = ParameterStore(np.array(mags) * signs, B32, B32)
        theta = store.master.astype(np.float64)
        cast = cast_weights(store, B16).master.astype(np.float64)
        assert np.linalg.norm(cast - theta) <= 2.0**-11 * np.linalg.norm(theta)


@pytest.mark.parametrize("fmt", [B16, B32, B64])
def test_checkpoint_roundtrip(tmp_path, fmt):
    cfg = DeepOnetConfig(FnnConfig(4, 3, 1, 5), FnnConfig(1, 3, 2, 5), 3)
    theta = DeepONet(cfg).init(2)
    store = ParameterStore(theta, fmt, fmt)
    save_checkpoint(tmp_path / "net", cfg, store, seed=2, extra={"policy": "mixed"})
    cfg2, store2, arch = load_checkpoint(tmp_path / "net")
    assert cfg2 == cfg
    assert store2.master_format == fmt
    assert np.array_equal(store2.master, store.master)
    assert arch["policy"] == "mixed" and arch["n_params"] == theta.size
