import numpy as np
import pytest

from stochfiber.geometry import Grid, constraint_gradient, grad_transpose_apply, gram_dense, gram_matrix, tangent_project
from stochfiber.model import (
    DragModel,
    FiberModel,
    FlowField,
    ModelParams,
    diffusion,
    diffusion_blocks,
    drift,
    drift_jacobian,
    explicit_drift,
    extend_with_ghosts,
    identity_drag,
    linear_growth_constant,
    multiplier_rate,
    no_flow,
    one_sided_growth_check,
    one_sided_growth_lhs,
    rotational_flow,
    straight_fiber,
)

from conftest import random_polygon


def drift_loop(model, r, v):
    """Node-by-node evaluation with explicit ghost bookkeeping."""
    p, ds, N = model.params, model.grid.delta_s, model.grid.N
    rh, th = np.array(p.r_hat), np.array(p.tau_hat)
    x = {-1: rh - ds * th / 2, 0: rh + ds * th / 2}
    y = {-1: np.zeros(2), 0: np.zeros(2)}
    for i in range(1, N + 1):
        x[i], y[i] = r[i - 1], v[i - 1]
    last, prev = x[N], x[N - 1]
    x[N + 1], x[N + 2] = 2 * last - prev, 3 * last - 2 * prev
    y[N + 1], y[N + 2] = 2 * y[N] - y[N - 1], 3 * y[N] - 2 * y[N - 1]

    def u(z):
        return np.array([z[1], -z[0]])

    out = np.zeros((N, 2))
    for i in range(1, N + 1):
        bend = -(x[i + 2] - 4 * x[i + 1] + 6 * x[i] - 4 * x[i - 1] + x[i - 2]) / (p.alpha**2 * ds**4)
        drag = np.zeros(2)
        for a, b in ((i - 1, i), (i, i + 1)):
            drag += u(0.5 * (x[a] + x[b])) - 0.5 * (y[a] + y[b])
        out[i - 1] = bend + np.array(p.e_g) / p.froude**2 + drag / (2 * p.drag_nr**2)
    return out


class TestParams:
    @pytest.mark.parametrize("field,value", [("froude", -3.0), ("alpha", 0.0), ("drag_nr", -1.0), ("beta", -1e-3)])
    def test_rejects_invalid(self, field, value):
        with pytest.raises(ValueError, match=field):
            ModelParams(**{field: value})

    def test_unit_vectors(self):
        with pytest.raises(ValueError, match="tau_hat"):
            ModelParams(tau_hat=(0.0, -2.0))

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            FiberModel(Grid(3, dim=3), ModelParams())


class TestGhosts:
    def test_clamp_points(self, model7):
        ds = model7.grid.delta_s
        np.testing.assert_allclose(model7.r0, [0, -ds / 2])
        np.testing.assert_allclose(model7.r_minus1, [0, ds / 2])

    def test_free_end_extrapolation(self, rng, model7):
        r = rng.normal(size=(7, 2))
        v = rng.normal(size=(7, 2))
        X, Y = extend_with_ghosts(model7, r, v)
        np.testing.assert_allclose(X[-2], 2 * r[-1] - r[-2])
        np.testing.assert_allclose(X[-1], 3 * r[-1] - 2 * r[-2])
        np.testing.assert_allclose(Y[-1], 3 * v[-1] - 2 * v[-2])
        assert np.all(Y[:2] == 0)

    def test_straight_fiber_on_manifold(self, model7):
        from stochfiber.geometry import constraint_eval

        r, v = straight_fiber(model7)
        assert np.max(np.abs(constraint_eval(model7.grid, model7.r0, r))) < 1e-15
        np.testing.assert_allclose(r[-1], [0, -(7.5) * 0.125])


class TestDrift:
    def test_hanging_fiber_without_flow(self, model7):
        m = FiberModel(model7.grid, model7.params, flow=no_flow())
        r, v = straight_fiber(m)
        np.testing.assert_allclose(drift(m, 0.0, r, v), np.tile([0, -1 / 9], (7, 1)), atol=1e-9)

    def test_loop_oracle(self, rng, model7):
        for _ in range(5):
            r = rng.normal(size=(7, 2))
            v = rng.normal(size=(7, 2))
            np.testing.assert_allclose(drift(model7, 0.0, r, v), drift_loop(model7, r, v), rtol=1e-12, atol=1e-8)

    def test_batched(self, rng, model7):
        r = rng.normal(size=(3, 7, 2))
        v = rng.normal(size=(3, 7, 2))
        a = drift(model7, 0.0, r, v)
        for s in range(3):
            np.testing.assert_allclose(a[s], drift(model7, 0.0, r[s], v[s]))

    def test_jacobian_matches_fd(self, rng, model7):
        r = random_polygon(rng, model7.grid, model7.r0)
        v = rng.normal(size=(7, 2))
        Jr, Jv = drift_jacobian(model7, 0.0, r, v)
        h = 1e-6
        for j in rng.choice(14, 5, replace=False):
            e = np.zeros(14)
            e[j] = h
            e = e.reshape(7, 2)
            fr = (drift(model7, 0.0, r + e, v) - drift(model7, 0.0, r - e, v)).ravel() / (2 * h)
            fv = (drift(model7, 0.0, r, v + e) - drift(model7, 0.0, r, v - e)).ravel() / (2 * h)
            np.testing.assert_allclose(Jr[:, j], fr, rtol=1e-5, atol=1e-5 * np.max(np.abs(Jr)))
            np.testing.assert_allclose(Jv[:, j], fv, rtol=1e-5, atol=1e-6)

    def test_fd_fallback_for_custom_drag(self, rng, model7):
        eye = np.eye(2)
        custom = DragModel(lambda p, tg, t: eye, lambda p, vel, tg, t: eye, constant=False)
        m = FiberModel(model7.grid, model7.params, drag=custom)
        r = random_polygon(rng, m.grid, m.r0)
        v = rng.normal(size=(7, 2))
        Ja = drift_jacobian(model7, 0.0, r, v)
        Jf = drift_jacobian(m, 0.0, r, v)
        for a, b in zip(Ja, Jf):
            np.testing.assert_allclose(a, b, rtol=1e-6, atol=1e-4)

    def test_flow_fd_jacobian(self, rng):
        f = rotational_flow()
        g = FlowField(f.velocity)
        x = rng.normal(size=(4, 2))
        np.testing.assert_allclose(g.jacobian(x, 0.0), f.jacobian(x, 0.0), atol=1e-8)


class TestDiffusion:
    def test_identity_drag_blocks(self, model7):
        r, v = straight_fiber(model7)
        p = model7.with_params(beta=0.1).params
        m = model7.with_params(beta=0.1)
        blocks = diffusion_blocks(m, 0.0, r, v)
        expected = p.beta / (np.sqrt(m.grid.delta_s) * p.drag_nr**2)
        np.testing.assert_allclose(blocks, np.broadcast_to(expected * np.eye(2), (7, 2, 2)))

    def test_dense_block_diagonal(self, rng, model7):
        r = rng.normal(size=(7, 2))
        B = diffusion(model7, 0.0, r, r)
        assert B.shape == (14, 14)
        assert np.count_nonzero(B) == 14

    def test_zero_beta(self, model7):
        r, v = straight_fiber(model7)
        assert np.all(diffusion_blocks(model7.with_params(beta=0.0), 0.0, r, v) == 0)


class TestStaticTension:
    def test_closed_form(self):
        m = FiberModel(Grid(7), ModelParams(beta=0.0), flow=no_flow())
        r, v = straight_fiber(m)
        lam = multiplier_rate(m, 0.0, r, v, np.zeros((7, 2)), 1e-3)
        i = np.arange(1, 8)
        np.testing.assert_allclose(lam, (8 - i) * m.grid.delta_s / 9.0, rtol=1e-9)

    def test_dense_solve_oracle(self, rng):
        m = FiberModel(Grid(6), ModelParams(beta=0.0))
        r = random_polygon(rng, m.grid, m.r0)
        v = np.zeros_like(r)
        a = drift(m, 0.0, r, v)
        G = gram_dense(*gram_matrix(m.grid, m.r0, r))
        dense = np.linalg.solve(G, -grad_transpose_apply(m.grid, m.r0, r, a))
        np.testing.assert_allclose(multiplier_rate(m, 0.0, r, v, np.zeros((6, 2)), 0.01), dense, rtol=1e-9)


class TestExplicitDrift:
    def test_preserves_hidden_constraint_rate(self, rng, model7):
        # d/dt (grad g^T v) = grad g^T f + D^2 g(v, v) must vanish
        from stochfiber.geometry import second_derivative_form

        r = random_polygon(rng, model7.grid, model7.r0)
        v = tangent_project(model7.grid, model7.r0, r, rng.normal(size=(7, 2)))
        f = explicit_drift(model7, 0.0, r, v)
        rate = grad_transpose_apply(model7.grid, model7.r0, r, f) + second_derivative_form(model7.grid, v)
        assert np.max(np.abs(rate)) <= 1e-9 * np.max(np.abs(f))

    def test_tangent_when_at_rest(self, rng, model7):
        r = random_polygon(rng, model7.grid, model7.r0)
        f = explicit_drift(model7, 0.0, r, np.zeros((7, 2)))
        np.testing.assert_allclose(tangent_project(model7.grid, model7.r0, r, f), f, atol=1e-9)


class TestGrowth:
    def test_constant_at_least_one(self, model7):
        assert linear_growth_constant(model7) >= 1.0

    def test_rejects_nonlinear_models(self, model7):
        m = FiberModel(model7.grid, model7.params, flow=FlowField(lambda x, t: x**2))
        with pytest.raises(ValueError):
            linear_growth_constant(m)

    def test_linear_growth_bound(self, rng, model7):
        m = model7.with_params(beta=0.1)
        C = linear_growth_constant(m)
        for _ in range(50):
            r = rng.normal(size=(7, 2))
            v = rng.normal(size=(7, 2)) * 10
            rho = np.sqrt(np.sum(r * r) + np.sum(v * v))
            assert np.linalg.norm(drift(m, 0.0, r, v)) <= C * (1 + rho) * (1 + 1e-12)
            assert np.linalg.norm(diffusion(m, 0.0, r, v), 2) <= C * (1 + rho) * (1 + 1e-12)

    def test_lhs_matches_definition(self, rng, model7):
        r = random_polygon(rng, model7.grid, model7.r0)
        v = tangent_project(model7.grid, model7.r0, r, rng.normal(size=(7, 2)))
        f = explicit_drift(model7, 0.0, r, v)
        np.testing.assert_allclose(one_sided_growth_lhs(model7, 0.0, r, v), np.sum(r * v) + np.sum(v * f))

    def test_check_flags_violations(self, rng, model7):
        r = random_polygon(rng, model7.grid, model7.r0)
        v = tangent_project(model7.grid, model7.r0, r, rng.normal(size=(7, 2)))
        lhs = one_sided_growth_lhs(model7, 0.0, r, v)
        rho2 = np.sum(r * r) + np.sum(v * v)
        assert one_sided_growth_check(model7, 0.0, r, v, abs(lhs) / (1 + rho2) * 1.01)
        if lhs > 0:
            assert not one_sided_growth_check(model7, 0.0, r, v, lhs / (1 + rho2) * 0.99)
