import numpy as np
import pytest

import mimicsde as m
from mimicsde.coeffs import strip_generator_term
from mimicsde.martingale import constant_probe, left_coordinate_probe

from conftest import constant_model, zero_model


class TestTestFunction:
    def test_self_check_catches_wrong_gradient(self):
        with pytest.raises(ValueError, match="gradient"):
            m.TestFunction(
                name="bad", d=2,
                value=lambda t, x: x[:, 0] ** 2,
                grad=lambda t, x: np.ones_like(x),  # wrong
                hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            )

    def test_time_dependent_requires_dt(self):
        with pytest.raises(ValueError, match="dt"):
            m.TestFunction(
                name="bad", d=2,
                value=lambda t, x: x[:, 0],
                grad=lambda t, x: np.tile([1.0, 0.0], (x.shape[0], 1)),
                hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
                time_dependent=True,
            )

    def test_bump_support_and_smoothness(self):
        v = m.radial_bump([0.0, 0.5], 0.4)
        inside = np.array([[0.0, 0.5]])
        outside = np.array([[2.0, 0.5], [0.0, 0.95]])
        assert v.value(0.0, inside)[0] == pytest.approx(1.0)
        assert np.all(v.value(0.0, outside) == 0.0)
        assert np.all(v.grad(0.0, outside) == 0.0)
        edge = np.array([[0.4 - 1e-9, 0.5]])  # just inside the support sphere
        assert np.isfinite(v.value(0.0, edge)[0])
        assert np.isfinite(v.hess(0.0, edge)).all()

    def test_boundary_bump_center_on_boundary(self):
        v = m.boundary_bump([0.3], 0.5)
        assert v.support_center[-1] == 0.0
        x = np.array([[0.3, 0.0]])
        assert v.value(0.0, x)[0] == pytest.approx(1.0)


class TestIncrements:
    def test_starts_at_zero_exactly(self, small_ensemble, heston):
        v = m.radial_bump([0.0, 0.05], 1.0)
        inc = m.martingale_increments(small_ensemble, heston, v)
        assert np.all(inc[:, 0] == 0.0)

    def test_zero_model_constant_paths_zero_martingale(self, start):
        model = zero_model()
        grid = m.TimeGrid(0.0, 1.0, 0.125)
        ens = m.simulate_sde(model, start, grid, 30, 1)
        inc = m.martingale_increments(ens, model, m.radial_bump([0.0, 0.1], 0.5))
        assert np.all(inc == 0.0)

    def test_paths_outside_support_give_zero(self, small_ensemble, heston):
        faraway = m.radial_bump([50.0, 30.0], 0.5)
        inc = m.martingale_increments(small_ensemble, heston, faraway)
        assert np.all(inc == 0.0)

    def test_pathwise_linearity_exact(self, small_ensemble, heston):
        v1 = m.radial_bump([0.0, 0.05], 1.0)
        v2 = m.linear_function([1.0, 0.0])
        i1 = m.martingale_increments(small_ensemble, heston, v1)
        i2 = m.martingale_increments(small_ensemble, heston, v2)
        combo = m.TestFunction(
            name="2*v1-3*v2", d=2,
            value=lambda t, x: 2 * v1.value(t, x) - 3 * v2.value(t, x),
            grad=lambda t, x: 2 * v1.grad(t, x) - 3 * v2.grad(t, x),
            hess=lambda t, x: 2 * v1.hess(t, x) - 3 * v2.hess(t, x),
        )
        ic = m.martingale_increments(small_ensemble, heston, combo)
        assert np.allclose(ic, 2 * i1 - 3 * i2, atol=1e-12)

    def test_rejects_time_dependent(self, small_ensemble, heston):
        with pytest.raises(ValueError):
            m.martingale_increments(small_ensemble, heston, m.time_weighted_xd(1.0))


class TestMartingaleTest:
    def test_linear_v_constant_drift(self, start):
        # M = <w, X_t - X_0 - b t> is an exact discrete martingale
        model = constant_model([0.1, 0.2], a_mat=[[1.0, 0.0], [0.0, 0.5]])
        grid = m.TimeGrid(0.0, 1.0, 2.0**-5)
        ens = m.simulate_sde(model, start, grid, 20_000, 7)
        inc = m.martingale_increments(ens, model, m.linear_function([1.0, 1.0]))
        rep = m.martingale_test(inc, ens, [constant_probe(), left_coordinate_probe(1)],
                                label="linear")
        assert rep.passed, rep.to_json()

    def test_heston_bump(self, small_ensemble, heston):
        v = m.radial_bump([0.0, 0.05], 1.0)
        inc = m.martingale_increments(small_ensemble, heston, v)
        rep = m.martingale_test(inc, small_ensemble,
                                [constant_probe(), left_coordinate_probe(1)], label=v.name)
        assert rep.overall in ("pass", "inconclusive")
        assert rep.max_abs_z <= 5.0

    def test_degenerate_probe_excluded(self, start):
        model = zero_model()
        grid = m.TimeGrid(0.0, 1.0, 0.25)
        ens = m.simulate_sde(model, start, grid, 40, 1)
        inc = m.martingale_increments(ens, model, m.linear_function([1.0, 0.0]))
        rep = m.martingale_test(inc, ens, [constant_probe()], label="degenerate")
        assert all(e.status == "excluded" for e in rep.entries)
        assert rep.overall == "pass"  # nothing testable, nothing failed

    def test_broken_drift_z_grows_like_sqrt_n(self, heston, start):
        # v = x_2 sees the mean-reverting drift directly, so dropping the
        # drift from the compensator shifts the increments by ~kappa(theta-x_2)h
        grid = m.TimeGrid(0.0, 1.0, 2.0**-6)
        broken = strip_generator_term(heston, "drift")
        zs = []
        for n in (2000, 8000):
            ens = m.simulate_sde(heston, start, grid, n, 31)
            inc = m.martingale_increments(ens, broken, m.linear_function([0.0, 1.0]))
            rep = m.martingale_test(inc, ens, [constant_probe()], label="broken")
            zs.append(rep.max_abs_z)
        assert zs[0] > 3.0
        assert zs[1] > 1.3 * zs[0]

    def test_needs_two_intervals(self, small_ensemble, heston):
        inc = m.martingale_increments(small_ensemble, heston, m.linear_function([1.0, 0.0]))
        with pytest.raises(ValueError):
            m.martingale_test(inc, small_ensemble, [constant_probe()], n_intervals=1)


class TestItoFormula:
    def test_linear_identity_exact(self, heston, start):
        grid = m.TimeGrid(0.0, 0.5, 2.0**-6)
        ens = m.simulate_sde(heston, start, grid, 2000, 13)
        v = m.TestFunction(
            name="x1", d=2,
            value=lambda t, x: x[:, 0],
            grad=lambda t, x: np.tile([1.0, 0.0], (x.shape[0], 1)),
            hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            dt=lambda t, x: np.zeros(x.shape[0]),
            xd_hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            time_dependent=True,
        )
        rep = m.ito_formula_residual(ens, heston, v)
        assert rep.max_abs_residual <= 1e-12

    def test_boundary_function_residual_halves(self, heston, start):
        ladder = m.ito_residual_ladder(heston, m.time_weighted_xd(1.0), start, 1.0,
                                       [2.0**-6, 2.0**-7, 2.0**-8], 8000, 51)
        for ratio in ladder["halving_ratios"]:
            assert 1.4 <= ratio <= 2.6

    def test_spatially_constant_v_deterministic(self, heston, start):
        horizon = 0.5
        v = m.TestFunction(
            name="(T-t)^2", d=2,
            value=lambda t, x: np.full(x.shape[0], (horizon - t) ** 2),
            grad=lambda t, x: np.zeros_like(x),
            hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            dt=lambda t, x: np.full(x.shape[0], -2.0 * (horizon - t)),
            xd_hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            time_dependent=True,
        )
        grid = m.TimeGrid(0.0, horizon, 2.0**-5)
        ens = m.simulate_sde(heston, start, grid, 64, 3)
        rep = m.ito_formula_residual(ens, heston, v)
        # noise terms vanish, so the residual is the same deterministic
        # time-quadrature error on every path
        assert rep.max_abs_residual == pytest.approx(rep.mean_abs_residual, rel=1e-9)
        assert rep.rms_residual == pytest.approx(rep.mean_abs_residual, rel=1e-9)

    def test_requires_stride_one(self, heston, start):
        grid = m.TimeGrid(0.0, 0.5, 2.0**-5)
        ens = m.simulate_sde(heston, start, grid, 16, 1, store_stride=2)
        with pytest.raises(ValueError, match="stride"):
            m.ito_formula_residual(ens, heston, m.time_weighted_xd(0.5))

    def test_requires_product_hessian(self, heston, start):
        grid = m.TimeGrid(0.0, 0.5, 2.0**-5)
        ens = m.simulate_sde(heston, start, grid, 16, 1)
        v = m.TestFunction(
            name="no-product", d=2,
            value=lambda t, x: x[:, 0],
            grad=lambda t, x: np.tile([1.0, 0.0], (x.shape[0], 1)),
            hess=lambda t, x: np.zeros((x.shape[0], 2, 2)),
            dt=lambda t, x: np.zeros(x.shape[0]),
            time_dependent=True,
        )
        with pytest.raises(ValueError, match="x_d"):
            m.ito_formula_residual(ens, heston, v)


class TestRestart:
    def test_deterministic_model_exact(self, start):
        det = constant_model([0.1, 0.05], a_mat=np.zeros((2, 2)))
        gs = [("x_1", lambda x: x[:, 0]), ("x_2", lambda x: x[:, 1])]
        rep = m.strong_markov_restart_test(det, start, level=0.01, t_cap=0.25, u=0.25,
                                           g_list=gs, n_paths=400, h=2.0**-5, seed=61,
                                           min_bin=50)
        assert rep.max_ks == 0.0
        assert rep.passed

    def test_heston_pass_and_perturbed_fail(self, heston, start):
        # per-bin n = 1000 puts the same-law KS floor near 0.06, so the
        # unit-scale threshold is 0.08; the acceptance-scale run tightens it
        gs = [("x_2", lambda x: x[:, 1])]
        common = dict(level=0.01, t_cap=0.5, u=0.25, g_list=gs,
                      n_paths=4000, h=2.0**-7, seed=61, min_bin=300,
                      ks_threshold=0.08)
        ok = m.strong_markov_restart_test(heston, start, **common)
        assert ok.n_hits == 4000
        assert ok.passed, ok.to_json()
        bad = m.strong_markov_restart_test(heston, start, perturb=[0.0, 0.05], **common)
        assert not bad.passed

    def test_u_must_be_grid_multiple(self, heston, start):
        with pytest.raises(ValueError):
            m.strong_markov_restart_test(heston, start, level=0.01, t_cap=0.5, u=0.3,
                                         g_list=[("x", lambda x: x[:, 0])],
                                         n_paths=100, h=0.25, seed=1)
