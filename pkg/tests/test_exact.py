from dataclasses import replace

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, strategies as st

from sdequiv.core import FiniteSupport, QGMDP, linear_policy
from sdequiv.envs import NL1DEnv, lqg_value_function, riccati_gain
from sdequiv.exact import (
    BellmanSolver, GridModel, discounted_density, exact_gradient, fd_gradients, performance,
    q_values, solve_bellman, solve_value,
)
from sdequiv.gauss import make_quadrature

from conftest import frozen_mdp, lqg_grid, zero_policy


def _nl1d_parts(nl1d, nl1d_grid):
    return nl1d.mdp(), nl1d.policy(), nl1d_grid


class TestGridModel:
    def test_nodes_and_refinement(self):
        g = GridModel([(-1, 1, 5), (0, 2, 3)], 4)
        assert g.size == 15 and g.dim == 2
        assert g.nodes.shape == (15, 2)
        r = g.refined()
        np.testing.assert_array_equal(r.shape, [9, 5])
        np.testing.assert_allclose(r.step, g.step / 2)

    def test_rejects_non_uniform_and_3d(self):
        with pytest.raises(ValueError, match="uniform"):
            GridModel([np.array([0.0, 1.0, 3.0])])
        with pytest.raises(ValueError, match="dimension"):
            GridModel([(0, 1, 3)] * 3)

    def test_interpolation_reproduces_affine(self):
        g = GridModel([(-1, 1, 11), (-2, 2, 9)])
        vals = 3 * g.nodes[:, 0] - g.nodes[:, 1] + 0.5
        Y = np.random.default_rng(0).uniform(-0.9, 0.9, (50, 2))
        np.testing.assert_allclose(g.interpolate(vals, Y), 3 * Y[:, 0] - Y[:, 1] + 0.5, atol=1e-12)
        np.testing.assert_allclose(g.interp_gradient(vals, Y), np.tile([3.0, -1.0], (50, 1)), atol=1e-12)

    def test_scatter_keeps_mass(self):
        g = GridModel([(-1, 1, 7)])
        out = g.scatter(np.array([[0.1], [5.0]]), np.array([0.3, 0.7]))
        assert out.sum() == pytest.approx(1.0)
        assert out[-1] == pytest.approx(0.7)  # clamped to the edge node


@pytest.mark.filterwarnings("ignore:.*clamped:RuntimeWarning")
@given(
    seed=st.integers(0, 2**32 - 1),
    a=st.floats(0.1, 2.5),
    th=st.floats(-1.5, 1.5),
)
def test_operator_rows_are_convex(seed, a, th):
    env = NL1DEnv(a=a, theta=[th, 0.2])
    g = GridModel([(-3, 3, 41)], 6)
    asm = g.assemble(env.mdp(), env.policy())
    P = asm.P.toarray()
    assert np.all(P >= 0)
    np.testing.assert_allclose(P.sum(axis=1), 1.0, atol=1e-12)
    rng = np.random.default_rng(seed)
    # rho >= 0 for a random initial distribution
    mdp = env.mdp(p0=FiniteSupport(rng.uniform(-3, 3, (3, 1)), rng.dirichlet(np.ones(3))))
    rho = discounted_density(mdp, env.policy(), g)
    assert np.all(rho >= -1e-12)


class TestSolveValue:
    def test_constant_cost(self):
        mdp = frozen_mdp(q=1.0, gamma=0.9)
        g = GridModel([(-1, 1, 9)], 4)
        for mode in "SD":
            vf = solve_value(mdp, zero_policy(), g, mode)
            np.testing.assert_allclose(vf.values, 10.0, rtol=1e-12)
            assert vf.residual < 1e-12
            assert vf.mode == mode

    def test_lqg_within_interpolation_tolerance(self, scalar_lqg):
        g = lqg_grid(scalar_lqg, nodes=201)
        vf = solve_value(scalar_lqg.mdp(), scalar_lqg.policy(), g, "D")
        assert np.max(np.abs(vf.values - lqg_value_function(scalar_lqg, -0.5)(g.nodes))) < 1e-3

    def test_nl1d_offset(self, nl1d, nl1d_grid):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        vS = solve_value(mdp, pol, g, "S")
        vD = solve_value(mdp, pol, g, "D")
        assert np.max(np.abs(vS.values - vD.values - 0.04)) < 1e-6
        assert max(vS.residual, vD.residual) < 1e-9

    def test_bad_mode(self, nl1d, nl1d_grid):
        with pytest.raises(ValueError, match="mode"):
            solve_value(nl1d.mdp(), nl1d.policy(), nl1d_grid, "X")

    def test_clamping_is_reported(self, nl1d):
        narrow = GridModel([(-0.5, 0.5, 21)], 4)
        with pytest.warns(RuntimeWarning, match="clamped"):
            vf = solve_value(nl1d.mdp(), nl1d.policy(), narrow, "D")
        assert vf.clamp_fraction > 0.1 and vf.warnings


class TestBellmanSolver:
    def _system(self, n=300, seed=0):
        rng = np.random.default_rng(seed)
        P = sp.random(n, n, density=0.02, random_state=seed, format="csr") + sp.identity(n)
        P = sp.diags(1.0 / np.asarray(P.sum(axis=1)).ravel()) @ P
        return P.tocsr(), rng.normal(size=n)

    @pytest.mark.parametrize("trans", ["N", "T"])
    def test_direct_and_krylov_agree(self, trans):
        P, b = self._system()
        x1 = BellmanSolver(P, 0.9, direct=True).solve(b, trans)
        x2 = BellmanSolver(P, 0.9, direct=False).solve(b, trans)
        np.testing.assert_allclose(x1, x2, atol=1e-11)

    def test_residual(self):
        P, b = self._system(seed=3)
        v, res = solve_bellman(P, b, 0.95)
        assert res < 1e-12


class TestDensity:
    def test_absorbing_atom(self):
        g = GridModel([(-1, 1, 11)], 4)
        mdp = frozen_mdp(x0=0.4)
        rho = discounted_density(mdp, zero_policy(), g)
        j = int(np.argmin(np.abs(g.axes[0] - 0.4)))
        assert rho[j] == pytest.approx(10.0, rel=1e-12)
        assert np.sum(np.abs(np.delete(rho, j))) < 1e-12

    def test_mass_against_power_series(self, nl1d, nl1d_grid):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        rho = discounted_density(mdp, pol, g)
        assert abs(rho.sum() - 10.0) < 1e-9
        asm = g.assemble(mdp, pol)
        b = asm.initial_weights()
        PT = asm.P.T.tocsr()
        series = np.zeros_like(b)
        for t in range(400):
            series += 0.9**t * b
            b = PT @ b
        assert np.max(np.abs(series - rho)) < 1e-9


class TestPerformance:
    def test_atom_at_node(self, nl1d, nl1d_grid):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        node = g.axes[0][230]
        m = replace(mdp, p0=FiniteSupport([[node]], [1.0]))
        vf = solve_value(m, pol, g, "D")
        assert performance(m, pol, g, "D") == pytest.approx(vf.values[230], abs=1e-12)

    def test_offset_on_nl1d(self, nl1d, nl1d_grid):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        assert abs(performance(mdp, pol, g, "S") - performance(mdp, pol, g, "D") - 0.04) < 1e-6

    def test_against_spline_oracle(self, nl1d, nl1d_grid, frozen):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        assert performance(mdp, pol, g, "D") == pytest.approx(frozen["nl1d"]["J_D"], rel=1e-3)


@given(
    base=st.lists(st.floats(0, 5), min_size=11, max_size=11),
    extra=st.lists(st.floats(0, 5), min_size=11, max_size=11),
    th=st.floats(-0.8, 0.8),
)
def test_performance_monotone_in_state_cost(base, extra, th):
    g = GridModel([(-2, 2, 11)], 4)
    nodes = g.axes[0]
    lo = np.array(base)
    hi = lo + np.array(extra)

    def mdp(table):
        return QGMDP(
            n_x=1, n_u=1, f=lambda X, U: np.tanh(X) + 0.5 * U,
            q=lambda X: np.interp(X[:, 0], nodes, table), r=lambda X: np.zeros((X.shape[0], 1)),
            R=[[0.1]], Sigma=[[0.04]], gamma=0.9, p0=FiniteSupport([[0.3], [-1.0]], [0.5, 0.5]),
        )

    pol = linear_policy([[th, 0.1]], "affine")
    for mode in "SD":
        assert performance(mdp(lo), pol, g, mode) <= performance(mdp(hi), pol, g, mode) + 1e-12


class TestExactGradient:
    def test_nl1d_matches_fd_and_modes_agree(self, nl1d, nl1d_grid, frozen):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        gS = exact_gradient(mdp, pol, g, "S").gradient
        gD = exact_gradient(mdp, pol, g, "D").gradient
        fd = fd_gradients(mdp, pol, g)
        assert np.max(np.abs(gS - gD)) < 1e-6
        for mode, gr in (("S", gS), ("D", gD)):
            assert np.max(np.abs(gr - fd[mode]) / np.abs(fd[mode])) < 1e-4
        np.testing.assert_allclose(gD, frozen["nl1d"]["grad"], rtol=1e-3)

    def test_parts_add_up(self, nl1d, nl1d_grid):
        eg = exact_gradient(*_nl1d_parts(nl1d, nl1d_grid), "D")
        np.testing.assert_array_equal(eg.gradient, eg.cost_term + eg.value_term)
        assert eg.rho.sum() == pytest.approx(10.0)

    def test_lqg_against_oracle(self, scalar_lqg, frozen):
        g = lqg_grid(scalar_lqg, nodes=801)
        eg = exact_gradient(scalar_lqg.mdp(), scalar_lqg.policy(), g, "D")
        assert eg.gradient[0] == pytest.approx(frozen["scalar_lqg"]["grad"], rel=1e-3)

    def test_near_zero_at_lqg_optimum(self, scalar_lqg):
        # grid bias dominates; 3201 nodes bring it to a few 1e-6
        K, _ = riccati_gain(scalar_lqg)
        g = lqg_grid(scalar_lqg, nodes=3201)
        for mode in "SD":
            assert abs(exact_gradient(scalar_lqg.mdp(), scalar_lqg.policy(K), g, mode).gradient[0]) < 1e-5

    def test_policy_independent_of_theta_gives_zero(self):
        from sdequiv.core import GaussianPolicy

        pol = GaussianPolicy([0.3], lambda X, th: np.zeros((X.shape[0], 1)),
                             lambda X, th: np.zeros((X.shape[0], 1, 1)), 1)
        env = NL1DEnv()
        g = GridModel([(-4, 4, 81)], 6)
        assert np.all(exact_gradient(env.mdp(), pol, g, "S").gradient == 0.0)

    def test_quartic_breaks_equality(self):
        env = NL1DEnv(quartic=1.0)
        g = GridModel([(-env.half_width(), env.half_width(), 401)], 10)
        gS = exact_gradient(env.mdp(), env.policy(), g, "S").gradient
        gD = exact_gradient(env.mdp(), env.policy(), g, "D").gradient
        assert np.max(np.abs(gS - gD)) > 1e-3


class TestQValues:
    def test_no_lookahead(self, nl1d, nl1d_grid):
        mdp = nl1d.mdp(gamma=1e-9)
        X = np.linspace(-1, 1, 5)[:, None]
        U = np.linspace(-0.5, 0.5, 5)[:, None]
        for mode in "SD":
            q = q_values(mdp, nl1d.policy(), nl1d_grid, mode, X, U)
            np.testing.assert_allclose(q, mdp.cost(X, U), atol=1e-6)

    def test_difference_varies_on_nl1d(self, nl1d, nl1d_grid):
        mdp, pol, g = _nl1d_parts(nl1d, nl1d_grid)
        xs, us = np.meshgrid(np.linspace(-1.5, 1.5, 5), np.linspace(-1, 1, 5), indexing="ij")
        X, U = xs.reshape(-1, 1), us.reshape(-1, 1)
        d = q_values(mdp, pol, g, "D", X, U) - q_values(mdp, pol, g, "S", X, U)
        assert np.ptp(d) > 10 * 1e-6

    def test_difference_constant_for_lqg(self, scalar_lqg):
        mdp, pol = scalar_lqg.mdp(), scalar_lqg.policy()
        vS = lqg_value_function(scalar_lqg, -0.5, "S")
        vD = lqg_value_function(scalar_lqg, -0.5, "D")
        X = np.repeat(np.linspace(-2, 2, 5), 5)[:, None]
        U = np.tile(np.linspace(-1, 1, 5), 5)[:, None]
        d = (q_values(mdp, pol, None, "D", X, U, value=vD)
             - q_values(mdp, pol, None, "S", X, U, value=vS))
        # E_d v_D(f(x, u + d)) = v_D(f(x, u)) + tr(B'PB Sigma)
        quad_const = float(0.25 * vD.P[0, 0] * 0.04)
        np.testing.assert_allclose(d, 0.9 * (quad_const - 0.04), atol=1e-8)


def test_refinement_shrinks_lqg_error(scalar_lqg):
    g = lqg_grid(scalar_lqg, nodes=101, order=6)
    oracle = lqg_value_function(scalar_lqg, -0.5)
    errs = []
    for _ in range(3):
        vf = solve_value(scalar_lqg.mdp(), scalar_lqg.policy(), g, "D")
        errs.append(np.max(np.abs(vf.values - oracle(g.nodes))))
        g = g.refined(2, g.quad_order + 2)
    assert errs[0] > errs[1] > errs[2]


def test_two_dimensional_offset(lqg_2d):
    g = lqg_grid(lqg_2d, nodes=41, order=4)
    vS = solve_value(lqg_2d.mdp(), lqg_2d.policy(), g, "S")
    vD = solve_value(lqg_2d.mdp(), lqg_2d.policy(), g, "D")
    assert np.max(np.abs(vS.values - vD.values - 0.08)) < 1e-6
    assert make_quadrature(2, 4).weights.size == g.assemble(lqg_2d.mdp(), lqg_2d.policy()).qw.size
