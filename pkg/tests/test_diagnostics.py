import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from precis.diagnostics import (
    LandscapeSlice,
    ZeroVectorError,
    gradient_divergence_metrics,
    landscape_slice,
    make_directions,
    stagnation_fraction,
)
from precis.models import FNN, FnnConfig

vectors = hnp.arrays(np.float64, st.integers(1, 30), elements=st.floats(-1e3, 1e3)).filter(
    lambda v: np.linalg.norm(v) > 1e-6
)


class TestDivergence:
    def test_identical(self):
        g = np.array([1.0, -2.0, 0.5])
        assert gradient_divergence_metrics(g, g) == {"cosine": 1.0, "l2_distance": 0.0, "l2_relative_distance": 0.0}

    def test_opposite(self):
        g = np.array([3.0, 4.0])
        m = gradient_divergence_metrics(-g, g)
        assert m["cosine"] == -1.0 and m["l2_distance"] == 10.0 and m["l2_relative_distance"] == 2.0

    def test_relative_distance_is_one_sided(self):
        a, b = np.array([1.0, 0.0]), np.array([2.0, 0.0])
        assert gradient_divergence_metrics(a, b)["l2_relative_distance"] == 0.5
        assert gradient_divergence_metrics(b, a)["l2_relative_distance"] == 1.0

    @settings(max_examples=50)
    @given(vectors, st.integers(0, 2**16))
    def test_symmetry(self, a, seed):
        b = a + np.random.default_rng(seed).standard_normal(a.size)
        if np.linalg.norm(b) == 0:
            return
        m1, m2 = gradient_divergence_metrics(a, b), gradient_divergence_metrics(b, a)
        assert m1["cosine"] == pytest.approx(m2["cosine"], abs=1e-12)
        assert m1["l2_distance"] == m2["l2_distance"]
        assert -1.0 - 1e-12 <= m1["cosine"] <= 1.0 + 1e-12
        assert gradient_divergence_metrics(a, a)["cosine"] == pytest.approx(1.0, abs=1e-12)

    def test_errors(self):
        with pytest.raises(ZeroVectorError):
            gradient_divergence_metrics(np.zeros(3), np.ones(3))
        with pytest.raises(ValueError):
            gradient_divergence_metrics(np.ones(2), np.ones(3))
        with pytest.raises(ValueError):
            gradient_divergence_metrics(np.array([1.0, np.inf]), np.ones(2))


class TestStagnation:
    def test_examples(self):
        th = np.random.default_rng(0).standard_normal(10).astype(np.float32)
        assert stagnation_fraction(th, th.copy()) == 1.0
        assert stagnation_fraction(th, th + np.float32(1.0)) == 0.0
        after = th.copy()
        after[:3] += 1
        assert stagnation_fraction(th, after) == 0.7

    def test_bitwise_not_tolerance(self):
        a = np.array([1.0], np.float32)
        assert stagnation_fraction(a, np.nextafter(a, np.float32(2))) == 0.0
        # signed zeros differ bitwise
        assert stagnation_fraction(np.array([0.0]), np.array([-0.0])) == 0.0

    def test_errors(self):
        with pytest.raises(ValueError):
            stagnation_fraction(np.zeros(3), np.zeros(4))
        with pytest.raises(ValueError):
            stagnation_fraction(np.zeros(3, np.float32), np.zeros(3))
        with pytest.raises(ValueError):
            stagnation_fraction(np.zeros(0), np.zeros(0))


class TestLandscape:
    def test_paraboloid_closed_form(self):
        theta = np.array([3.0, -1.0, 2.0, 0.5])
        delta = np.array([1.0, 0.0, 0.0, 0.0])
        eta = np.array([0.0, 0.0, 1.0, 0.0])
        s = landscape_slice(lambda p: float(p @ p), theta, directions=(delta, eta), half_width=2.0, resolution=9)
        X, Y = np.meshgrid(s.xs, s.ys, indexing="ij")
        closed = (theta @ theta) + X**2 + Y**2 + 2 * X * (theta @ delta) + 2 * Y * (theta @ eta)
        np.testing.assert_allclose(s.loss, closed, rtol=1e-14, atol=1e-13)
        assert not s.nan_mask.any()

    def test_center_is_bit_exact(self):
        theta = np.random.default_rng(0).standard_normal(7) * 1e-3
        fn = lambda p: float(np.sum(np.sin(p * 1e3)) / 7)
        s = landscape_slice(fn, theta, half_width=0.3, resolution=7)
        assert s.center == fn(theta)
        assert s.xs[3] == 0.0 and s.ys[3] == 0.0

    def test_non_finite_nodes_are_data(self):
        fn = lambda p: float(np.exp(800 * p[0]))
        s = landscape_slice(fn, np.array([0.0, 1.0]), directions=(np.array([1.0, 0.0]), np.array([0.0, 1.0])), resolution=5)
        assert s.nan_mask[-1].all() and not s.nan_mask[0].any()
        assert s.nan_fraction == 0.2

    def test_determinism(self):
        theta = np.random.default_rng(1).standard_normal(12)
        fn = lambda p: float(np.sum(p**4))
        a = landscape_slice(fn, theta, seed=5, resolution=5)
        b = landscape_slice(fn, theta, seed=5, resolution=5)
        assert np.array_equal(a.loss, b.loss) and np.array_equal(a.delta, b.delta)
        c = landscape_slice(fn, theta, seed=6, resolution=5)
        assert not np.array_equal(a.delta, c.delta)

    @pytest.mark.parametrize("kw", [{"resolution": 4}, {"resolution": 1}, {"half_width": 0.0}])
    def test_argument_checks(self, kw):
        with pytest.raises(ValueError):
            landscape_slice(lambda p: 0.0, np.ones(3), **kw)

    def test_filter_normalisation(self):
        net = FNN(FnnConfig(2, 1, 2, 6))
        theta = net.init(0)
        theta[net.blocks[1].offset] = 0.3  # a non-zero bias
        d1, d2 = make_directions(theta, net.blocks, seed=4)
        for b in net.blocks:
            for d in (d1, d2):
                chunk = d[b.offset : b.stop]
                if b.kind != "weight":
                    assert not chunk.any()
                else:
                    got = np.linalg.norm(chunk.reshape(b.shape), axis=0)
                    want = np.linalg.norm(theta[b.offset : b.stop].reshape(b.shape), axis=0)
                    np.testing.assert_allclose(got, want, rtol=1e-12)

    def test_save_and_read(self, tmp_path):
        s = landscape_slice(
            lambda p: math.inf if p[0] > 0.5 else float(p @ p),
            np.array([0.1, 0.2]),
            resolution=5,
            meta={"iteration": 1, "policy": "pure16"},
        )
        s.save(tmp_path)
        grid = LandscapeSlice.read_csv(tmp_path / "landscape.csv")
        assert len(grid["x"]) == 25
        np.testing.assert_array_equal(grid["is_nan"], s.nan_mask.ravel())
        finite = ~grid["is_nan"]
        np.testing.assert_array_equal(grid["loss"][finite], s.loss.ravel()[finite])
        meta = json.loads((tmp_path / "landscape.json").read_text())
        assert meta["policy"] == "pure16" and meta["iteration"] == 1 and meta["resolution"] == 5
        assert meta["half_width"] == 1.0 and meta["seed"] == 0
        assert (tmp_path / "landscape.csv").read_text().startswith("# schema=1\nx,y,loss,is_nan\n")
