import numpy as np
import pytest

from sinkrank.errors import SingularSystemError
from sinkrank.gradients import (
    finite_diff_check,
    forward_with_tape,
    implicit_gradients,
    jacobian_implicit,
    vjp_unrolled,
)
from sinkrank.losses import QuantileSpec, quantile_target


def pipeline_scalar(x, gr, gs, eps, sweeps, squashing="logistic"):
    tape = forward_with_tape(x, epsilon=eps, num_sweeps=sweeps, squashing=squashing)
    return gr @ tape.s_ranks + gs @ tape.s_sorts


def derivative_converged_tape(x, eps, eta, squashing="logistic", **kw):
    """Tape iterated well past value convergence.

    The value meeting ``eta`` does not mean the derivative of the
    iterated map has reached the fixed-point derivative; comparisons
    against the implicit route need the extra sweeps.
    """
    probe = forward_with_tape(
        x, epsilon=eps, eta=eta, max_iters=500000, squashing=squashing, **kw
    )
    assert probe.converged
    sweeps = max(4 * probe.num_sweeps, 100)
    return forward_with_tape(
        x, epsilon=eps, eta=eta, num_sweeps=sweeps, squashing=squashing, **kw
    )


class TestFiniteDiff:
    def test_linear_function(self, rng):
        c = rng.normal(0, 1, 5)
        grad, step = finite_diff_check(lambda v: c @ v, rng.normal(0, 1, 5))
        np.testing.assert_allclose(grad, c, atol=1e-10)
        assert step == 1e-5

    def test_quadratic(self, rng):
        x = rng.normal(0, 1, 4)
        grad, _ = finite_diff_check(lambda v: v @ v, x, step=1e-5)
        np.testing.assert_allclose(grad, 2 * x, atol=1e-6)

    def test_bad_step(self):
        with pytest.raises(ValueError):
            finite_diff_check(lambda v: 0.0, np.zeros(2), step=0.0)


class TestUnrolledVJP:
    def test_zero_seed_gives_zero_gradient(self, rng):
        tape = forward_with_tape(rng.normal(0, 1, 5), epsilon=0.1, num_sweeps=30)
        gx, ga = vjp_unrolled(tape)
        np.testing.assert_array_equal(gx, np.zeros(5))
        np.testing.assert_array_equal(ga, np.zeros(5))

    @pytest.mark.parametrize("eps,sweeps", [(1e-1, 60), (1e-2, 400)])
    def test_matches_finite_differences(self, rng, eps, sweeps):
        n = 4
        x = rng.normal(0, 2, n)
        gr = rng.normal(0, 1, n)
        gs = rng.normal(0, 1, n)
        tape = forward_with_tape(x, epsilon=eps, num_sweeps=sweeps)
        gx, _ = vjp_unrolled(tape, seed_ranks=gr, seed_sorts=gs, coordinates="raw")
        fd, _ = finite_diff_check(
            lambda v: pipeline_scalar(v, gr, gs, eps, sweeps), x, step=1e-5
        )
        assert np.abs(gx - fd).max() / np.abs(fd).max() <= 1e-4

    def test_weight_gradient_matches_finite_differences(self, rng):
        n = 4
        x = rng.normal(0, 1, n)
        a0 = np.full(n, 1.0 / n)
        gr = rng.normal(0, 1, n)
        eps, sweeps = 1e-1, 60

        def fn(av):
            tape = forward_with_tape(x, a=av, epsilon=eps, num_sweeps=sweeps)
            return gr @ tape.s_ranks

        tape = forward_with_tape(x, a=a0, epsilon=eps, num_sweeps=sweeps)
        _, ga = vjp_unrolled(tape, seed_ranks=gr, coordinates="raw")
        fd, _ = finite_diff_check(fn, a0, step=1e-6)
        assert np.abs(ga - fd).max() / np.abs(fd).max() <= 1e-4

    def test_duplicate_inputs_symmetric_gradient(self):
        x = np.array([1.3, 1.3])
        tape = forward_with_tape(x, epsilon=0.1, num_sweeps=40)
        gx, _ = vjp_unrolled(tape, seed_ranks=np.ones(2), coordinates="raw")
        assert gx[0] == pytest.approx(gx[1], abs=1e-12)

    def test_all_equal_inputs_constant_gradient(self):
        # permutation-symmetric scalar of s_rank at a constant vector
        x = np.full(4, 2.5)
        tape = forward_with_tape(x, epsilon=0.1, num_sweeps=40)
        gx, _ = vjp_unrolled(tape, seed_ranks=np.ones(4), coordinates="raw")
        assert np.ptp(gx) <= 1e-12

    def test_seed_shape_mismatch(self, rng):
        tape = forward_with_tape(rng.normal(0, 1, 4), epsilon=0.1, num_sweeps=10)
        with pytest.raises(ValueError):
            vjp_unrolled(tape, seed_ranks=np.ones(5))

    def test_quantile_gradient_cross_check(self, rng):
        # d soft_quantile / dx via the sort-head seed vs finite differences
        x = rng.uniform(0, 1, 12)
        spec = QuantileSpec(tau=0.3, t=0.1, epsilon=1e-2)
        b, y = quantile_target(spec.tau, spec.t)
        sweeps = 500
        tape = forward_with_tape(x, b=b, y=y, epsilon=spec.epsilon, num_sweeps=sweeps)
        gx, _ = vjp_unrolled(
            tape, seed_sorts=np.array([0.0, 1.0, 0.0]), coordinates="raw"
        )

        def fn(v):
            t = forward_with_tape(v, b=b, y=y, epsilon=spec.epsilon, num_sweeps=sweeps)
            return t.s_sorts[1]

        fd, _ = finite_diff_check(fn, x, step=1e-5)
        assert np.abs(gx - fd).max() / np.abs(fd).max() <= 1e-4


class TestTape:
    def test_replay_reproduces_potentials_bitwise(self, rng):
        tape = forward_with_tape(rng.normal(0, 1, 6), epsilon=3e-2, eta=1e-8,
                                 max_iters=20000)
        replayed = tape.replay()
        np.testing.assert_array_equal(replayed.alphas, tape.alphas)
        np.testing.assert_array_equal(replayed.betas, tape.betas)
        np.testing.assert_array_equal(replayed.s_ranks, tape.s_ranks)

    def test_fixed_sweep_count(self, rng):
        tape = forward_with_tape(rng.normal(0, 1, 4), epsilon=0.1, num_sweeps=17)
        assert tape.num_sweeps == 17
        assert tape.alphas.shape == (18, 4)

    def test_outputs_match_operator_pipeline(self, rng):
        import os

        from sinkrank.sinkhorn import SinkhornConfig, solve_rank_sort

        x = rng.normal(0, 1, 6)
        cfg = SinkhornConfig(epsilon=0.05, eta=1e-7, max_iters=20000)
        res, state = solve_rank_sort(x, cfg=cfg)
        tape = forward_with_tape(x, epsilon=0.05, eta=1e-7, max_iters=20000)
        assert tape.converged and state.converged
        # same math, possibly different kernel backend: allow rounding
        np.testing.assert_allclose(tape.s_ranks, res.s_ranks, atol=1e-9)
        np.testing.assert_allclose(tape.s_sorts, res.s_sorts, atol=1e-9)


class TestImplicit:
    def test_scalar_case_hand_derivation(self):
        # n = m = 1 with no squashing: the coupling is pinned at [[1]]
        # for every input, so d s_sort/dx is exactly the direct term 1
        # and d s_rank/dx is 0.
        x = np.array([0.3])
        tape = forward_with_tape(
            x, b=np.array([1.0]), y=np.array([0.5]), epsilon=0.5,
            squashing="none", max_iters=50,
        )
        assert tape.converged
        g_sort = implicit_gradients(tape, seed_sorts=np.ones(1), coordinates="raw")
        np.testing.assert_allclose(g_sort, [1.0], atol=1e-10)
        g_rank = implicit_gradients(tape, seed_ranks=np.ones(1), coordinates="raw")
        np.testing.assert_allclose(g_rank, [0.0], atol=1e-10)

    @pytest.mark.parametrize("eps,eta", [(1e-1, 1e-12), (1e-2, 1e-11)])
    def test_matches_unrolled(self, rng, eps, eta):
        n = 5
        x = rng.normal(0, 2, n)
        gr = rng.normal(0, 1, n)
        gs = rng.normal(0, 1, n)
        tape = derivative_converged_tape(x, eps, eta)
        gu, _ = vjp_unrolled(tape, seed_ranks=gr, seed_sorts=gs, coordinates="raw")
        gi = implicit_gradients(tape, seed_ranks=gr, seed_sorts=gs, coordinates="raw")
        assert np.abs(gi - gu).max() / np.abs(gu).max() <= 1e-3

    def test_no_squash_directional_derivative(self, rng):
        n = 4
        x = np.array([0.1, 0.7, 0.3, 0.9])
        gr = rng.normal(0, 1, n)
        gs = rng.normal(0, 1, n)
        tape = derivative_converged_tape(x, 0.1, 1e-12, squashing="none")
        gi = implicit_gradients(tape, seed_ranks=gr, seed_sorts=gs, coordinates="raw")
        sweeps = tape.num_sweeps
        direction = np.ones(n)
        h = 1e-6
        up = pipeline_scalar(x + h * direction, gr, gs, 0.1, sweeps, "none")
        dn = pipeline_scalar(x - h * direction, gr, gs, 0.1, sweeps, "none")
        fd_dir = (up - dn) / (2 * h)
        assert gi @ direction == pytest.approx(fd_dir, rel=1e-4)

    def test_forms_agree(self, rng):
        x = rng.normal(0, 1, 5)
        tape = forward_with_tape(x, epsilon=0.1, eta=1e-12, max_iters=100000)
        state = tape.final_state()
        cost = tape.cost_matrix()
        J_merged = jacobian_implicit(state, cost, h=tape.h, form="merged")
        J_factored = jacobian_implicit(state, cost, h=tape.h, form="factored")
        np.testing.assert_allclose(J_merged, J_factored, atol=1e-8)

    def test_system_rank_is_gauge_deficient(self, rng):
        # (u, -v) is a structural null vector of the fixed-point system
        x = rng.normal(0, 1, 4)
        tape = forward_with_tape(x, epsilon=0.1, eta=1e-12, max_iters=100000)
        state = tape.final_state()
        u, v, K = state.u, state.v, state.kernel
        system = np.block(
            [[np.diag(K @ v), u[:, None] * K], [v[:, None] * K.T, np.diag(K.T @ u)]]
        )
        null = np.concatenate([u, -v])
        assert np.abs(system @ null).max() <= 1e-12 * np.abs(system).max()
        assert np.linalg.matrix_rank(system) == 7

    def test_refuses_unconverged_state(self, rng):
        tape = forward_with_tape(
            rng.normal(0, 1, 4), epsilon=1e-2, eta=1e-13, num_sweeps=2
        )
        assert not tape.converged
        with pytest.raises(ValueError):
            jacobian_implicit(tape.final_state(), tape.cost_matrix(), h=tape.h)

    def test_oracle_triangle(self, rng):
        # unrolled vs implicit vs finite differences, pairwise
        for eps in (1e-1, 1e-2):
            n = int(rng.integers(2, 7))
            x = rng.normal(0, 1.5, n)
            gr = rng.normal(0, 1, n)
            gs = rng.normal(0, 1, n)
            eta = 1e-12 if eps > 5e-2 else 1e-11
            tape = derivative_converged_tape(x, eps, eta)
            gu, _ = vjp_unrolled(tape, seed_ranks=gr, seed_sorts=gs, coordinates="raw")
            gi = implicit_gradients(tape, seed_ranks=gr, seed_sorts=gs,
                                    coordinates="raw")
            sweeps = min(tape.num_sweeps, 200 if eps > 5e-2 else 2000)
            tape_fd = forward_with_tape(x, epsilon=eps, num_sweeps=sweeps)
            gfd_ref, _ = vjp_unrolled(
                tape_fd, seed_ranks=gr, seed_sorts=gs, coordinates="raw"
            )
            fd, _ = finite_diff_check(
                lambda v: pipeline_scalar(v, gr, gs, eps, sweeps), x, step=1e-5
            )
            scale = np.abs(gu).max()
            assert np.abs(gu - gi).max() / scale <= 1e-3
            assert np.abs(gfd_ref - fd).max() / scale <= 1e-3
