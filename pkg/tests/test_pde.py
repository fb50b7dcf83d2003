import warnings

import numpy as np
import pytest

import mimicsde as m
from mimicsde.pde import _Stencil, _assemble_operator, time_reversed_model

from conftest import constant_model


def small_grid(n=33, x_max=0.5, extent=1.5, dt=1.0 / 64):
    return m.Grid.build(dt=dt, x_prime_extent=extent, x_max=x_max, counts=[n, n])


def ones(x):
    return np.ones(x.shape[0])


class TestGrid:
    def test_validation(self):
        with pytest.raises(ValueError):
            m.Grid(dt=0.1, axes=(np.array([0.0, 1.0]),))  # < 3 nodes
        with pytest.raises(ValueError):
            m.Grid(dt=0.1, axes=(np.array([0.1, 0.5, 1.0]),))  # no boundary layer
        with pytest.raises(ValueError):
            m.Grid(dt=-0.1, axes=(np.array([0.0, 0.5, 1.0]),))

    def test_geometric_refinement(self):
        g = m.Grid.build(dt=0.1, x_prime_extent=1.0, x_max=1.0, counts=[5, 9], xd_stretch=2.0)
        ax = g.axes[-1]
        assert ax[0] == 0.0 and ax[-1] == 1.0
        assert np.diff(ax)[0] < np.diff(ax)[-1]

    def test_coarsen(self):
        g = small_grid(n=33)
        c = g.coarsen()
        assert c.shape == (17, 17)
        assert np.array_equal(c.axes[0], g.axes[0][::2])


class TestStencilStructure:
    def test_no_dependence_below_boundary(self, heston):
        # the boundary-layer rows only reference x_d layers 0 and 1: nothing
        # below x_d = 0 exists to be read, which is the whole point
        grid = small_grid(n=9)
        st = _Stencil(grid)
        p = _assemble_operator(heston, 0.0, st).tocsr()
        nd = grid.shape[-1]
        xd_index = st.index[-1]
        for row in st.blayer:
            cols = p.indices[p.indptr[row]: p.indptr[row + 1]]
            assert set(xd_index[cols]).issubset({0, 1})

    def test_outer_rows_zero_in_operator(self, heston):
        grid = small_grid(n=9)
        st = _Stencil(grid)
        p = _assemble_operator(heston, 0.0, st).tocsr()
        outer_rows = np.where(st.outer)[0]
        for row in outer_rows:
            assert p.indptr[row] == p.indptr[row + 1]


class TestExactness:
    def test_constants_both_schemes(self, heston):
        grid = small_grid()
        for scheme in ("implicit_euler", "crank_nicolson"):
            sol = m.solve_cauchy(heston, None, ones, grid, 0.5, scheme=scheme, store="ends")
            assert np.abs(sol.values[-1] - 1.0).max() < 1e-12

    def test_affine_transport_exact(self):
        # b constant, g = x_1: u(t, x) = x_1 + b_1 t solves the problem and
        # second differences kill it, so only drift quadrature remains (exact)
        model = constant_model([0.3, 0.2])
        grid = small_grid()
        sol = m.solve_cauchy(model, None, lambda x: x[:, 0], grid, 0.5, store="ends")
        nodes = grid.nodes()
        expected = nodes[:, 0] + 0.3 * 0.5
        err = np.abs(sol.values[-1].ravel() - expected)
        inner = (np.abs(nodes[:, 0]) <= 0.75) & (nodes[:, 1] <= 0.25)
        assert err[inner].max() < 1e-8

    def test_killing_reduces_to_ode(self, heston_killing):
        grid = small_grid(dt=1.0 / 128)
        sol = m.solve_cauchy(heston_killing, None, ones, grid, 0.5, store="ends")
        assert np.abs(sol.values[-1] - np.exp(-0.02 * 0.5)).max() < 1e-6

    def test_initial_layer_exact(self, heston):
        grid = small_grid()
        g = lambda x: np.cos(x[:, 0]) + x[:, 1]
        sol = m.solve_cauchy(heston, None, g, grid, 0.25, store="all")
        assert np.array_equal(sol.values[0].ravel(), g(grid.nodes()))

    def test_source_term_spatially_constant(self, heston):
        # u_t = A u - f with f = 1, g = 0, c = 0: u(t) = -t exactly
        grid = small_grid()
        f = lambda t, x: np.ones(x.shape[0])
        zero = lambda x: np.zeros(x.shape[0])
        sol = m.solve_cauchy(heston, f, zero, grid, 0.5, store="ends")
        assert np.abs(sol.values[-1] + 0.5).max() < 1e-12


class TestTerminalValue:
    def test_constant_terminal(self, heston):
        grid = small_grid()
        sol = m.solve_terminal_value(heston, ones, 0.5, grid, store="ends")
        assert np.abs(sol.values[0] - 1.0).max() < 1e-12

    def test_reversal_is_definitional(self, heston):
        grid = small_grid()
        g = lambda x: np.exp(-np.sum(x**2, axis=1))
        vt = m.solve_terminal_value(heston, g, 0.5, grid, store="all")
        uc = m.solve_cauchy(time_reversed_model(heston, 0.5), None, g, grid, 0.5, store="all")
        n = len(vt.times)
        for k in range(n):
            assert np.array_equal(vt.values[k], uc.values[n - 1 - k])
        assert np.array_equal(vt.values[-1].ravel(), g(grid.nodes()))

    def test_pure_transport_characteristics(self):
        # a = 0, b constant: v(t, x) = g(x + b (T - t)) along characteristics
        model = constant_model([0.0, 0.4], a_mat=np.zeros((2, 2)))
        grid = m.Grid.build(dt=1.0 / 256, x_prime_extent=1.5, x_max=1.5, counts=[65, 129])
        g = lambda x: np.exp(-8.0 * ((x[:, 0]) ** 2 + (x[:, 1] - 0.5) ** 2))
        sol = m.solve_terminal_value(model, g, 0.25, grid, store="ends")
        nodes = grid.nodes()
        shifted = nodes.copy()
        shifted[:, 1] += 0.4 * 0.25
        expected = g(shifted)
        inner = (np.abs(nodes[:, 0]) <= 0.75) & (nodes[:, 1] <= 0.75)
        err = np.abs(sol.values[0].ravel() - expected)[inner].max()
        # first-order upwinding smears the profile at O(h) scale
        assert err < 0.12
        coarse = m.Grid.build(dt=1.0 / 128, x_prime_extent=1.5, x_max=1.5, counts=[65, 65])
        sol_c = m.solve_terminal_value(model, g, 0.25, coarse, store="ends")
        nodes_c = coarse.nodes()
        shifted_c = nodes_c.copy()
        shifted_c[:, 1] += 0.4 * 0.25
        inner_c = (np.abs(nodes_c[:, 0]) <= 0.75) & (nodes_c[:, 1] <= 0.75)
        err_c = np.abs(sol_c.values[0].ravel() - g(shifted_c))[inner_c].max()
        assert err < err_c  # refined mesh does better


class TestStructuralProperties:
    def test_maximum_principle_bumps(self, heston):
        # upwinding + the sign-split cross stencil make the interior operator
        # an M-matrix, so min g <= u <= max g up to the action of the outer
        # extrapolation closure on the (box-size rule: < 1e-4) boundary tails
        grid = m.Grid.build(dt=1.0 / 64, x_prime_extent=2.5, x_max=1.0, counts=[81, 97])
        gen = np.random.default_rng(7)
        for _ in range(10):
            r = gen.uniform(0.08, 0.15)
            c = np.array([gen.uniform(-0.6, 0.6), gen.uniform(0.1, 0.3)])
            bump = m.radial_bump(c, r)
            g = lambda x: bump.value(0.0, x)
            sol = m.solve_cauchy(heston, None, g, grid, 0.25, store="ends")
            assert sol.layer_max.max() <= 1.0 + 1e-6
            assert sol.layer_min.min() >= -1e-6

    def test_linearity_to_solver_tolerance(self, heston):
        grid = small_grid()
        g1 = lambda x: np.exp(-np.sum(x**2, axis=1))
        g2 = lambda x: np.cos(x[:, 0])
        combo = lambda x: 2.0 * g1(x) - 0.5 * g2(x)
        s1 = m.solve_cauchy(heston, None, g1, grid, 0.25, store="ends").values[-1]
        s2 = m.solve_cauchy(heston, None, g2, grid, 0.25, store="ends").values[-1]
        sc = m.solve_cauchy(heston, None, combo, grid, 0.25, store="ends").values[-1]
        assert np.abs(sc - (2.0 * s1 - 0.5 * s2)).max() < 1e-10

    def test_self_convergence_order(self, heston):
        bump = m.radial_bump([0.0, 0.1], 0.35)
        g = lambda x: bump.value(0.0, x)
        sols = {}
        for n, dt in ((33, 1 / 64), (65, 1 / 128), (129, 1 / 256)):
            grid = m.Grid.build(dt=dt, x_prime_extent=1.5, x_max=0.5, counts=[n, n])
            sols[n] = m.solve_cauchy(heston, None, g, grid, 0.25, store="ends")
        # compare on the shared coarse nodes (every other fine node)
        u33 = sols[33].values[-1]
        u65 = sols[65].values[-1][::2, ::2]
        u129 = sols[129].values[-1][::4, ::4]
        d1 = np.abs(u65 - u33).max()
        d2 = np.abs(u129 - u65).max()
        order = np.log2(d1 / d2)
        assert order >= 1.0

    def test_cn_warns_on_strong_drift(self):
        model = constant_model([50.0, 1.0])
        grid = small_grid()
        with pytest.warns(RuntimeWarning, match="crank_nicolson"):
            m.solve_cauchy(model, None, ones, grid, 0.25, scheme="crank_nicolson",
                           store="ends")


class TestDuality:
    def test_heston_bump_small(self, heston):
        bump = m.radial_bump([0.0, 0.04], 0.5)
        g = lambda x: bump.value(0.0, x)
        grid = m.Grid.build(dt=1 / 128, x_prime_extent=1.5, x_max=0.5, counts=[65, 65])
        rep = m.duality_check(heston, g, [0.0, 0.09], 0.5, grid,
                              mc_paths=20_000, mc_step=2.0**-8, mc_seed=11)
        assert rep.passed, rep.to_json()

    def test_wrong_start_fails(self, heston):
        bump = m.radial_bump([0.0, 0.04], 0.5)
        g = lambda x: bump.value(0.0, x)
        grid = m.Grid.build(dt=1 / 128, x_prime_extent=1.5, x_max=0.5, counts=[65, 65])
        rep = m.duality_check(heston, g, [0.0, 0.09], 0.5, grid,
                              mc_paths=20_000, mc_step=2.0**-8, mc_seed=11,
                              pde_eval_shift=[0.0, 0.05])
        assert not rep.passed

    def test_killing_discount(self, heston_killing):
        # g = 1 with killing: both sides equal exp(c T)
        grid = m.Grid.build(dt=1 / 128, x_prime_extent=1.5, x_max=0.5, counts=[33, 33])
        rep = m.duality_check(heston_killing, ones, [0.0, 0.09], 0.5, grid,
                              mc_paths=500, mc_step=2.0**-6, mc_seed=3)
        assert rep.passed
        assert rep.mc_mean == pytest.approx(np.exp(-0.01), abs=1e-6)


class TestAprioriProbe:
    def test_scaling_invariance_and_stability(self, heston):
        bump = m.radial_bump([0.0, 0.1], 0.4)
        g1 = lambda x: bump.value(0.0, x)
        g2 = lambda x: 2.0 * bump.value(0.0, x)
        pair1 = (None, g1, lambda x: bump.grad(0.0, x), lambda x: bump.xd_hess(0.0, x))
        pair2 = (None, g2, lambda x: 2.0 * bump.grad(0.0, x),
                 lambda x: 2.0 * bump.xd_hess(0.0, x))
        grids = [small_grid(n=17, dt=1 / 32), small_grid(n=33, dt=1 / 64)]
        rep = m.apriori_estimate_probe(heston, [pair1, pair2], grids, 0.25,
                                       pair_budget=512, seed=3)
        ratios = [e["ratio"] for e in rep.entries if e["ratio"] is not None]
        assert len(ratios) == 4
        # doubling the data scales solution and data norms identically
        r_by_grid = {}
        for e in rep.entries:
            r_by_grid.setdefault(e["grid"], []).append(e["ratio"])
        for rs in r_by_grid.values():
            assert rs[0] == pytest.approx(rs[1], rel=1e-9)
        assert rep.stable_within_2x, rep.to_json()

    def test_zero_data_skipped(self, heston):
        zero = lambda x: np.zeros(x.shape[0])
        rep = m.apriori_estimate_probe(heston, [(None, zero)], [small_grid(n=17, dt=1 / 32)],
                                       0.25, pair_budget=256, seed=3)
        assert rep.entries[0]["ratio"] is None
