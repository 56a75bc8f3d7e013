import numpy as np
import pytest

from stochfiber.geometry import (
    FiberState,
    Grid,
    SingularGramError,
    constraint_eval,
    constraint_gradient,
    grad_apply,
    grad_transpose_apply,
    gram_dense,
    gram_determinant,
    gram_logdet,
    gram_matrix,
    gram_solve,
    second_derivative_form,
    tangent_project,
    weighted_hessian_apply,
    weighted_hessian_dense,
)

from conftest import random_polygon

R0 = np.array([0.0, -0.0625])


def hanging(grid):
    ds = grid.delta_s
    i = np.arange(1, grid.N + 1)
    r = np.zeros((grid.N, 2))
    r[:, 1] = -(i + 0.5) * ds
    r0 = np.array([0.0, -0.5 * ds])
    return r0, r


def g_scalar(grid, r0, r):
    """Component loop over edges; no vectorization."""
    out = []
    prev = r0
    for i in range(grid.N):
        diff = [r[i][k] - prev[k] for k in range(grid.dim)]
        out.append(0.5 * (1.0 - sum(x * x for x in diff) / grid.delta_s**2))
        prev = r[i]
    return np.array(out)


def test_grid_spacing():
    g = Grid(7)
    assert g.delta_s == 0.125
    assert Grid.from_spacing(1 / 32).N == 31
    with pytest.raises(ValueError):
        Grid(3, dim=4)


def test_state_shape_mismatch():
    with pytest.raises(ValueError):
        FiberState(np.zeros((3, 2)), np.zeros((4, 2)))


class TestConstraint:
    def test_hanging_fiber_is_feasible(self):
        g = Grid(7)
        r0, r = hanging(g)
        assert np.all(constraint_eval(g, r0, r) == 0.0)

    def test_stretched_fiber(self):
        g = Grid(5)
        r0 = np.zeros(2)
        r = np.zeros((5, 2))
        r[:, 1] = -2 * g.delta_s * np.arange(1, 6)
        np.testing.assert_allclose(constraint_eval(g, r0, r), -1.5)

    def test_matches_scalar_oracle(self, rng):
        g = Grid(3)
        r0 = rng.normal(size=2)
        r = rng.normal(size=(3, 2))
        np.testing.assert_allclose(constraint_eval(g, r0, r), g_scalar(g, r0, r), rtol=1e-14)

    def test_dimension_mismatch(self):
        g = Grid(3)
        with pytest.raises(ValueError):
            constraint_eval(g, np.zeros(2), np.zeros((4, 2)))
        with pytest.raises(ValueError):
            constraint_eval(g, np.zeros(3), np.zeros((3, 2)))


class TestGradient:
    @pytest.mark.parametrize("eps", [1e-5, 1e-6])
    def test_directional_finite_difference(self, rng, eps):
        g = Grid(6, dim=3)
        r0 = rng.normal(size=3)
        for _ in range(20):
            r = rng.normal(size=(6, 3))
            y = rng.normal(size=(6, 3))
            fd = (constraint_eval(g, r0, r + eps * y) - constraint_eval(g, r0, r - eps * y)) / (2 * eps)
            exact = grad_transpose_apply(g, r0, r, y)
            # g is quadratic, so the central difference is exact up to round-off
            assert np.max(np.abs(fd - exact)) <= 1e2 * eps**2 + 1e-7 * np.max(np.abs(exact))

    def test_straight_fiber_entries(self):
        g = Grid(7)
        r0, r = hanging(g)
        G = constraint_gradient(g, r0, r)
        nz = G[np.abs(G) > 0]
        np.testing.assert_allclose(np.abs(nz), 1 / g.delta_s)
        # only the e2 components are populated
        assert np.all(G[0::2] == 0)

    def test_sparsity_n2(self, rng):
        g = Grid(2)
        G = constraint_gradient(g, rng.normal(size=2), rng.normal(size=(2, 2)))
        assert G.shape == (4, 2)
        assert np.count_nonzero(G) == 2 * 2 + 2

    def test_footnote_pattern(self):
        # column k carries -(x_k - x_{k-1}) in block k and +(x_k - x_{k-1}) in block k-1
        g = Grid(3)
        r0 = np.zeros(2)
        r = np.array([[1.0, 0.0], [1.0, 2.0], [4.0, 2.0]])
        G = constraint_gradient(g, r0, r) * g.delta_s**2
        expected = np.array(
            [
                [-1, 0, 0],
                [0, 0, 0],
                [0, 0, 0],
                [0, -2, 0],
                [0, 0, -3],
                [0, 0, 0],
            ],
            dtype=float,
        )
        expected[0:2, 1] = [0, 2]
        expected[2:4, 2] = [3, 0]
        np.testing.assert_array_equal(G, expected)

    def test_matrix_free_products(self, rng):
        g = Grid(5)
        r0 = rng.normal(size=2)
        r = rng.normal(size=(4, 5, 2))
        lam = rng.normal(size=(4, 5))
        y = rng.normal(size=(4, 5, 2))
        G = constraint_gradient(g, r0, r)
        np.testing.assert_allclose(grad_apply(g, r0, r, lam).reshape(4, -1), np.einsum("sij,sj->si", G, lam))
        np.testing.assert_allclose(grad_transpose_apply(g, r0, r, y), np.einsum("sij,si->sj", G, y.reshape(4, -1)))


class TestGram:
    def test_straight_fiber(self):
        g = Grid(6)
        r0, r = hanging(g)
        diag, off = gram_matrix(g, r0, r)
        np.testing.assert_allclose(diag * g.delta_s**2, [1, 2, 2, 2, 2, 2])
        np.testing.assert_allclose(off * g.delta_s**2, -1)

    def test_dense_product(self, rng):
        g = Grid(8, dim=3)
        r0 = rng.normal(size=3)
        r = rng.normal(size=(10, 8, 3))
        G = constraint_gradient(g, r0, r)
        dense = np.swapaxes(G, -1, -2) @ G
        np.testing.assert_allclose(gram_dense(*gram_matrix(g, r0, r)), dense, rtol=1e-13, atol=1e-10)

    def test_right_angle_kink(self):
        g = Grid(3)
        ds = g.delta_s
        r0 = np.zeros(2)
        r = np.array([[0.0, -ds], [ds, -ds], [ds, -2 * ds]])
        diag, off = gram_matrix(g, r0, r)
        assert off[0] == 0.0 and off[1] == 0.0


class TestGramSolve:
    def test_residual(self, rng):
        n = 9
        diag = 4.0 + rng.random(n)
        off = rng.random(n - 1)
        b = rng.normal(size=n)
        z = gram_solve(diag, off, b)
        G = gram_dense(diag, off)
        assert np.max(np.abs(G @ z - b)) <= 1e-12 * np.max(np.abs(b))

    def test_straight_fiber_dense_oracle(self):
        g = Grid(7)
        r0, r = hanging(g)
        diag, off = gram_matrix(g, r0, r)
        b = np.eye(7)[0]
        np.testing.assert_allclose(gram_solve(diag, off, b), np.linalg.solve(gram_dense(diag, off), b), rtol=1e-12)

    def test_batched(self, rng):
        g = Grid(5)
        r0 = rng.normal(size=2)
        r = random_polygon(rng, g, r0, 6)
        diag, off = gram_matrix(g, r0, r)
        b = rng.normal(size=(6, 5))
        z = gram_solve(diag, off, b)
        np.testing.assert_allclose(np.einsum("sij,sj->si", gram_dense(diag, off), z), b, atol=1e-12)

    def test_collapsed_segment(self):
        g = Grid(4)
        r0, r = np.zeros(2), np.zeros((4, 2))
        r[:, 1] = -g.delta_s * np.arange(1, 5)
        r[2] = r[1]
        with pytest.raises(SingularGramError) as info:
            gram_solve(*gram_matrix(g, r0, r), np.ones(4))
        assert info.value.index == 2


class TestDeterminant:
    def test_straight_fiber(self):
        g = Grid(7)
        r0, r = hanging(g)
        logdet = gram_logdet(g, r0, r)
        np.testing.assert_allclose(logdet, -2 * 7 * np.log(g.delta_s), rtol=1e-13)
        dense = np.linalg.slogdet(gram_dense(*gram_matrix(g, r0, r)))
        np.testing.assert_allclose(logdet, dense[1], rtol=1e-12)

    def test_random_against_dense(self, rng):
        g = Grid(9, dim=3)
        r0 = rng.normal(size=3)
        r = rng.normal(size=(5, 9, 3))
        sign, dense = np.linalg.slogdet(gram_dense(*gram_matrix(g, r0, r)))
        assert np.all(sign > 0)
        np.testing.assert_allclose(gram_logdet(g, r0, r), dense, rtol=1e-10)

    def test_scalar_case(self, rng):
        g = Grid(1)
        r0 = rng.normal(size=2)
        r = rng.normal(size=(1, 2))
        diag, _ = gram_matrix(g, r0, r)
        np.testing.assert_allclose(gram_determinant(g, r0, r), diag[0])

    def test_no_overflow_for_long_fibers(self):
        g = Grid(2000)
        r0, r = hanging(g)
        assert np.isfinite(gram_logdet(g, r0, r))


class TestProjector:
    def test_fixes_tangent_vectors(self, rng, grid7):
        r0 = R0
        r = random_polygon(rng, grid7, r0)
        y = tangent_project(grid7, r0, r, rng.normal(size=(7, 2)))
        np.testing.assert_allclose(tangent_project(grid7, r0, r, y), y, atol=1e-12)

    def test_kills_normal_vectors(self, rng, grid7):
        r = random_polygon(rng, grid7, R0)
        G = constraint_gradient(grid7, R0, r)
        for k in range(7):
            col = G[:, k].reshape(7, 2)
            p = tangent_project(grid7, R0, r, col)
            assert np.max(np.abs(p)) <= 1e-10 * np.max(np.abs(col))

    def test_idempotent(self, rng, grid7):
        r = random_polygon(rng, grid7, R0)
        y = rng.normal(size=(7, 2))
        p = tangent_project(grid7, R0, r, y)
        pp = tangent_project(grid7, R0, r, p)
        assert np.max(np.abs(pp - p)) <= 1e-10 * np.max(np.abs(p))


class TestSecondDerivative:
    def test_zero_velocity(self, grid7):
        assert np.all(second_derivative_form(grid7, np.zeros((7, 2))) == 0)

    def test_rigid_translation(self, grid7):
        c = np.array([0.3, -0.4])
        out = second_derivative_form(grid7, np.tile(c, (7, 1)))
        np.testing.assert_allclose(out[0], -0.25 / grid7.delta_s**2)
        assert np.all(out[1:] == 0)

    def test_finite_difference(self, rng, grid7):
        eps = 1e-4
        for _ in range(10):
            x = rng.normal(size=(7, 2))
            v = rng.normal(size=(7, 2))
            fd = (constraint_eval(grid7, R0, x + eps * v) - 2 * constraint_eval(grid7, R0, x) + constraint_eval(grid7, R0, x - eps * v)) / eps**2
            # the clamp is fixed, so the oracle perturbs only dynamic nodes
            np.testing.assert_allclose(second_derivative_form(grid7, v), fd, rtol=1e-5, atol=1e-4)

    def test_weighted_hessian(self, rng, grid7):
        w = rng.normal(size=7)
        y = rng.normal(size=(7, 2))
        x = rng.normal(size=(7, 2))
        eps = 1e-6
        # d/dx of grad g(x) w in direction y
        fd = (grad_apply(grid7, R0, x + eps * y, w) - grad_apply(grid7, R0, x - eps * y, w)) / (2 * eps)
        np.testing.assert_allclose(weighted_hessian_apply(grid7, w, y), fd, rtol=1e-7, atol=1e-6)
        H = weighted_hessian_dense(grid7, w)
        np.testing.assert_allclose(H, H.T)
        np.testing.assert_allclose(H @ y.ravel(), weighted_hessian_apply(grid7, w, y).ravel(), atol=1e-12)
