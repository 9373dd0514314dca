import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from precis import oracles
from precis import problems as pb
from precis.autodiff import B16, B32, B64, Tape
from precis.models import TaylorJet


def jet_of(u, u_x=0.0, u_t=0.0, u_xx=0.0, x=None):
    """Hand-built jet over ``n`` points from closed-form derivative values."""
    tape = Tape(B64)
    cols = [np.atleast_1d(np.asarray(a, dtype=np.float64)).reshape(-1, 1) for a in (u, u_x, u_t, u_xx)]
    n = max(len(c) for c in cols)
    c = [tape.constant(np.broadcast_to(a, (n, 1))) for a in cols]
    pts = None if x is None else tape.constant(np.asarray(x, dtype=np.float64).reshape(n, -1))
    return TaylorJet(c[0], {0: c[1], 1: c[2]}, {0: c[3]}, pts)


class TestRegressionTarget:
    def test_examples(self):
        assert pb.regression_target(0.0) == 0.0
        assert pb.regression_target(math.pi / 10) == pytest.approx(math.pi / 10, rel=1e-15)

    @given(st.floats(-1.0, 1.0))
    def test_even(self, x):
        assert pb.regression_target(-x) == pb.regression_target(x)


class TestResiduals:
    def test_heat_exact_solution(self):
        x, t, a = 0.3, 0.7, 0.4
        u = pb.heat_exact(x, t, a)
        jet = jet_of(u, u_t=-a * math.pi**2 * u, u_xx=-math.pi**2 * u)
        assert abs(pb.heat_residual(jet, a).item()) <= 1e-6

    def test_heat_trivial(self):
        assert pb.heat_residual(jet_of(0.0)).item() == 0.0
        assert pb.heat_residual(jet_of(0.5, u_t=1.0)).item() == 1.0

    def test_burgers_examples(self):
        assert pb.burgers_residual(jet_of(0.0)).item() == 0.0
        x = np.array([-0.5, 0.25, 0.9])
        np.testing.assert_array_equal(pb.burgers_residual(jet_of(x, u_x=1.0)).data.ravel(), x)

    def test_diffusion_validation_exact(self):
        rng = np.random.default_rng(0)
        p = np.column_stack([rng.uniform(-1, 1, 1000), rng.uniform(0, 1, 1000)])
        y = pb.diffusion_validation_exact(p[:, 0], p[:, 1])
        jet = jet_of(y, u_t=-y, u_xx=-math.pi**2 * y, x=p)
        assert np.abs(pb.diffusion_validation_residual(jet).data).max() <= 1e-6

    def test_diffusion_validation_zero_field(self):
        assert pb.diffusion_validation_residual(jet_of(0.0, x=[[0.0, 0.37]])).item() == 0.0
        # zero field leaves only the forcing: exp(0) * (1 - pi^2)
        r = pb.diffusion_validation_residual(jet_of(0.0, x=[[0.5, 0.0]])).item()
        assert r == pytest.approx(1.0 - math.pi**2, rel=1e-14)

    def test_diffusion_validation_needs_points(self):
        with pytest.raises(ValueError):
            pb.diffusion_validation_residual(jet_of(0.0))

    def test_diffusion_reaction_examples(self):
        assert pb.diffusion_reaction_residual(jet_of(0.0), 0.0).item() == 0.0
        assert pb.diffusion_reaction_residual(jet_of(0.0), math.sin(math.pi * 0.5)).item() == -1.0
        # every term: u_t - D u_xx + k u^2 - v
        r = pb.diffusion_reaction_residual(jet_of(2.0, u_t=3.0, u_xx=5.0), 0.5, D=0.1, k=0.25).item()
        assert r == pytest.approx(3.0 - 0.5 + 1.0 - 0.5)

    def test_heat_exact_residual_property(self):
        rng = np.random.default_rng(1)
        x, t = rng.uniform(0, 1, 1000), rng.uniform(0, 1, 1000)
        u = pb.heat_exact(x, t)
        jet = jet_of(u, u_t=-0.4 * math.pi**2 * u, u_xx=-math.pi**2 * u)
        assert np.abs(pb.heat_residual(jet).data).max() <= 1e-6


class TestBoundaryClose:
    def test_examples(self):
        assert pb.boundary_close(1.0, 1.0, 1e-12)
        assert pb.boundary_close(1.0 - 5e-5, 1.0, 1e-4)
        assert not pb.boundary_close(1.0 - 5e-5, 1.0, 1e-6)
        assert not pb.boundary_close(0.5, 1.0, 1e-4)

    def test_defaults(self):
        assert pb.default_atol(B32) == 1e-6
        assert pb.default_atol(B16) == 1e-4

    @pytest.mark.parametrize("atol", [0.0, -1e-6])
    def test_atol_must_be_positive(self, atol):
        with pytest.raises(ValueError):
            pb.boundary_close(1.0, 1.0, atol)

    def test_half_rounded_boundary_needs_wider_tolerance(self):
        # a boundary coordinate that has picked up a binary16-sized error
        heat = pb.heat_problem()
        pts = np.array([[1.0 - 5e-5, 0.3]])
        assert not heat.classify(pts, pb.default_atol(B32))["x=1"][0]
        assert heat.classify(pts, pb.default_atol(B16))["x=1"][0]


class TestSampling:
    def test_regression_grid(self):
        ps = pb.sample_points(pb.get_problem("regression"), (16, 0))
        np.testing.assert_allclose(ps.interior.ravel(), -1.0 + 2.0 * np.arange(16) / 15, rtol=0, atol=1e-15)

    def test_heat_interior_strict(self):
        ps = pb.sample_points(pb.heat_problem(), (2540, 240), seed=0)
        assert ps.interior.shape == (2540, 2) and ps.n_boundary == 240
        assert np.all((ps.interior > 0.0) & (ps.interior < 1.0))

    def test_boundary_split_and_membership(self):
        prob = pb.burgers_problem()
        ps = pb.sample_points(prob, (50, 31), seed=3)
        sizes = sorted(len(p) for p, _ in ps.boundary.values())
        assert sizes == [10, 10, 11]
        for face in prob.faces:
            pts, tgt = ps.boundary[face.name]
            assert np.all(prob.on_face(pts, face, 1e-12))
            np.testing.assert_array_equal(tgt.ravel(), face.target(pts))

    def test_deterministic(self):
        a = pb.sample_points(pb.heat_problem(), (100, 30), seed=7)
        b = pb.sample_points(pb.heat_problem(), (100, 30), seed=7)
        assert np.array_equal(a.interior, b.interior)
        assert all(np.array_equal(a.boundary[k][0], b.boundary[k][0]) for k in a.boundary)

    def test_bad_counts(self):
        with pytest.raises(ValueError):
            pb.sample_points(pb.heat_problem(), (0, 10))
        with pytest.raises(ValueError):
            pb.sample_points(pb.heat_problem(), (10, 10), strategy="sobol")

    def test_unknown_problem(self):
        with pytest.raises(ValueError):
            pb.get_problem("wave")


class TestAdvection:
    def test_shifted_indicator(self):
        x = np.arange(100) / 100
        u = pb.advect_square_wave(x, 0.5, 0.4, 1.0)
        expect = ((x >= 0.8) | (x <= 0.2)).astype(float)
        np.testing.assert_array_equal(u, expect)

    def test_constant_is_invariant(self):
        x = np.linspace(0, 1, 37, endpoint=False)
        np.testing.assert_array_equal(pb.advect_square_wave(x, 0.5, 1.0, 1.7), np.full(x.shape, 1.7))

    @pytest.mark.parametrize("n_sensors", [100, 101])
    def test_targets_are_exact_and_conserve_mass(self, n_sensors):
        ds = pb.advection_dataset(40, n_sensors, seed=2)
        c, w, h = (np.array(ds.meta[k]) for k in "cwh")
        x = ds.y.ravel()
        for i in range(len(ds)):
            np.testing.assert_array_equal(ds.u[i], pb.advect_square_wave(x, c[i], w[i], h[i]))
        # grid quadrature tends to w h; on an even grid the shift is a rotation and conserves it exactly
        if n_sensors % 2 == 0:
            np.testing.assert_allclose(ds.u.mean(axis=1), ds.v.mean(axis=1), rtol=0, atol=1e-12)
        np.testing.assert_allclose(ds.u.mean(axis=1), w * h, rtol=0, atol=2.0 * h.max() / n_sensors)

    def test_parameter_ranges_and_reproducibility(self):
        a, b = pb.advection_dataset(200, seed=5), pb.advection_dataset(200, seed=5)
        assert np.array_equal(a.u, b.u) and a.meta == b.meta
        assert min(a.meta["c"]) >= 0.3 and max(a.meta["c"]) <= 0.7
        assert min(a.meta["w"]) >= 0.3 and max(a.meta["w"]) <= 0.6
        assert min(a.meta["h"]) >= 1.0 and max(a.meta["h"]) <= 2.0

    def test_dataset_roundtrip(self, tmp_path):
        ds = pb.advection_dataset(5, 20, seed=1)
        ds.save(tmp_path / "adv")
        back = pb.OperatorDataset.load(tmp_path / "adv")
        for name in ("v", "y", "u"):
            assert np.array_equal(getattr(back, name), getattr(ds, name))
        assert back.meta == ds.meta
        raw = (tmp_path / "adv" / "targets.bin").read_bytes()
        assert np.array_equal(np.frombuffer(raw, "<f8").reshape(5, 20), ds.u)

    def test_shape_check(self):
        with pytest.raises(ValueError):
            pb.OperatorDataset(np.zeros((2, 3)), np.zeros((4, 1)), np.zeros((2, 5)))


class TestDiffusionReactionOracle:
    def test_zero_source_gives_zero(self):
        assert not oracles.diffusion_reaction_cn(np.zeros(21), nx=21, nt=11).any()

    def test_linear_steady_state(self):
        # without the reaction term the long-time state solves D u'' = -v, v = pi^2 sin(pi x) D
        nx = 201
        x = np.linspace(0, 1, nx)
        u = oracles.diffusion_reaction_cn(math.pi**2 * np.sin(math.pi * x), D=1.0, k=0.0, nx=nx, nt=201, T=5.0)
        np.testing.assert_allclose(u[-1], np.sin(math.pi * x), rtol=0, atol=1e-4)

    def test_second_order_convergence(self):
        data = pb.diffusion_reaction_data(1, seed=3)

        def at_coarse(n):
            x = np.linspace(0, 1, n)
            u = oracles.diffusion_reaction_cn(data.source_at(x)[0], nx=n, nt=n)
            step = (n - 1) // 20
            return u[::step, ::step]

        coarse, mid, fine = at_coarse(41), at_coarse(81), at_coarse(161)
        ref = at_coarse(641)
        e1, e2, e3 = (np.abs(a - ref).max() for a in (coarse, mid, fine))
        assert 3.0 < e1 / e2 < 5.0 and 3.0 < e2 / e3 < 5.0

    def test_oracle_dataset_layout(self):
        data = pb.diffusion_reaction_data(2, seed=0)
        ds = data.oracle(11, 6)
        assert ds.v.shape == (2, 100) and ds.y.shape == (66, 2) and ds.u.shape == (2, 66)
        # zero initial state and zero Dirichlet edges
        t0 = ds.y[:, 1] == 0.0
        edge = (ds.y[:, 0] == 0.0) | (ds.y[:, 0] == 1.0)
        assert not ds.u[:, t0 | edge].any()

    def test_source_shape_error(self):
        with pytest.raises(ValueError):
            oracles.diffusion_reaction_cn(np.zeros(10), nx=11)


class TestBurgersReference:
    def test_initial_state(self):
        x = np.linspace(-1, 1, 9)
        np.testing.assert_allclose(oracles.burgers_cole_hopf(x, 0.0, 0.01 / math.pi), -np.sin(math.pi * x))

    def test_cole_hopf_matches_method_of_lines(self):
        nu = 0.01 / math.pi
        x, t, u = oracles.burgers_mol(nu, nx=2001, t_eval=[0.0, 0.25, 0.5])
        sel = slice(None, None, 50)
        for k in (1, 2):
            exact = oracles.burgers_cole_hopf(x[sel], t[k], nu)
            assert np.abs(u[k, sel] - exact).max() < 2e-3

    @settings(max_examples=10, deadline=None)
    @given(st.floats(-0.99, 0.99), st.floats(0.01, 1.0))
    def test_odd_symmetry(self, x, t):
        nu = 0.01 / math.pi
        a = oracles.burgers_cole_hopf(x, t, nu)
        b = oracles.burgers_cole_hopf(-x, t, nu)
        assert a == pytest.approx(-b, abs=1e-9)
