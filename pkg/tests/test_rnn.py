import math

import numpy as np
import pytest
from oracles import fd_gradients, max_rel_err

from rnnkit.linalg import Rng, ShapeError, derive_seed
from rnnkit.rnn import (
    RnnGradients,
    RnnParams,
    RnnVariant,
    backward_through_time,
    bptt,
    effective_recurrent_matrix,
    forward,
    forward_step,
    init_rnn_params,
    init_weights,
    load_rnn_params,
    output_softmax,
    save_rnn_params,
    sequence_loss,
    sgd_step,
)


def _zero_params(p, d, q):
    return RnnParams(
        W={1: np.zeros((p, p))},
        U=np.zeros((p, d)),
        b_i=np.zeros(p),
        V=np.zeros((q, p)),
        b_y=np.zeros(q),
    )


def _random_instance(p, d, q, T, variant, rng, loss_kind="mse"):
    params = init_rnn_params(p, d, q, variant, rng)
    xs = [rng.uniform_array(d, -1, 1) for _ in range(T)]
    if loss_kind == "mse":
        targets = [rng.uniform_array(q, -1, 1) for _ in range(T)]
    else:
        targets = [rng.randint(q) for _ in range(T)]
    return params, xs, targets


class TestForward:
    def test_zero_params_give_zero_state_and_output(self):
        params = _zero_params(3, 2, 2)
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)] * 4)
        for h, y in zip(trace.hs, trace.ys):
            assert np.array_equal(h, np.zeros(3))
            assert np.array_equal(y, np.zeros(2))

    def test_leaky_tau_one_matches_vanilla(self):
        rng = Rng(8)
        vanilla = RnnVariant.vanilla()
        params = init_rnn_params(4, 3, 2, vanilla, rng)
        xs = [rng.uniform_array(3, -1, 1) for _ in range(6)]
        leaky = RnnVariant.leaky(np.ones(4))
        t_van = forward(params, vanilla, xs)
        t_leak = forward(params, leaky, xs)
        for a, b in zip(t_van.hs, t_leak.hs):
            assert np.array_equal(a, b)
        for a, b in zip(t_van.ys, t_leak.ys):
            assert np.array_equal(a, b)

    def test_leaky_huge_tau_copies_state(self):
        rng = Rng(9)
        variant = RnnVariant.leaky(np.full(4, 1e9))
        params = init_rnn_params(4, 3, 2, variant, rng)
        xs = [rng.uniform_array(3, -1, 1) for _ in range(10)]
        trace = forward(params, variant, xs)
        for t in range(2, 11):
            assert np.max(np.abs(trace.h(t) - trace.h(t - 1))) < 1e-8

    def test_tau_below_one_rejected(self):
        with pytest.raises(ValueError):
            RnnVariant.leaky(np.array([1.0, 0.5]))

    def test_input_shape_mismatch(self):
        params = _zero_params(3, 2, 2)
        with pytest.raises(ShapeError):
            forward_step(params, RnnVariant.vanilla(), np.zeros(5), [])

    @pytest.mark.parametrize("kind", ["vanilla", "identity", "delays", "leaky"])
    def test_states_stay_in_unit_box(self, kind):
        rng = Rng(derive_seed(3, kind))
        p = 5
        variant = {
            "vanilla": RnnVariant.vanilla(),
            "identity": RnnVariant.identity_carry(),
            "delays": RnnVariant.with_delays((1, 3)),
            "leaky": RnnVariant.leaky(np.linspace(1, 10, p)),
        }[kind]
        params = init_rnn_params(p, 3, 2, variant, rng, scheme="uniform", scale=2.0)
        xs = [rng.uniform_array(3, -3, 3) for _ in range(20)]
        trace = forward(params, variant, xs)
        for h in trace.hs:
            assert np.all(np.abs(h) <= 1.0)


class TestSoftmaxAndLoss:
    def test_uniform_input_gives_uniform_output(self):
        y = output_softmax(np.full(5, 2.7))
        assert np.allclose(y, 0.2, atol=1e-15)
        assert y.sum() == pytest.approx(1.0, abs=1e-12)

    def test_hand_evaluated(self):
        y = output_softmax(np.array([math.log(1.0), math.log(3.0)]))
        assert np.allclose(y, [0.25, 0.75], atol=1e-15)

    def test_shift_invariance(self):
        x = np.array([0.3, -1.2, 2.0])
        # x + 1000 rounds the inputs themselves, so compare to fp precision
        assert np.allclose(output_softmax(x), output_softmax(x + 1000.0),
                           rtol=0, atol=1e-12)
        assert output_softmax(x + 1000.0).sum() == pytest.approx(1.0, abs=1e-12)

    def test_single_step_loss(self):
        params = _zero_params(2, 2, 3)
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)])
        assert sequence_loss(trace, [np.array([1.0, 0.0, 0.0])], "mse") == 0.5

    def test_mse_zero_at_targets(self):
        rng = Rng(4)
        variant = RnnVariant.vanilla()
        params = init_rnn_params(3, 2, 2, variant, rng)
        xs = [rng.uniform_array(2, -1, 1) for _ in range(5)]
        trace = forward(params, variant, xs)
        assert sequence_loss(trace, list(trace.ys), "mse") == 0.0

    def test_cross_entropy_uniform_is_log_q(self):
        params = _zero_params(3, 2, 4)
        T = 6
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)] * T)
        loss = sequence_loss(trace, [1] * T, "cross_entropy")
        assert loss == pytest.approx(T * math.log(4.0), rel=1e-12)

    def test_length_mismatch_rejected(self):
        params = _zero_params(2, 2, 2)
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)] * 3)
        with pytest.raises(ShapeError):
            sequence_loss(trace, [np.zeros(2)] * 2, "mse")

    def test_bad_class_index_rejected(self):
        params = _zero_params(2, 2, 2)
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)])
        with pytest.raises(ValueError):
            sequence_loss(trace, [5], "cross_entropy")


VARIANT_CASES = [
    ("vanilla", lambda p: RnnVariant.vanilla()),
    ("identity", lambda p: RnnVariant.identity_carry()),
    ("delay_1", lambda p: RnnVariant.with_delays((1,))),
    ("delay_13", lambda p: RnnVariant.with_delays((1, 3))),
    ("leaky", lambda p: RnnVariant.leaky(np.linspace(1.0, 6.0, p))),
]


class TestBptt:
    @pytest.mark.parametrize("loss_kind", ["mse", "cross_entropy"])
    @pytest.mark.parametrize("name,mk", VARIANT_CASES)
    def test_matches_central_differences(self, name, mk, loss_kind):
        p, d, q, T = 4, 3, 2, 5
        for seed in range(3):
            rng = Rng(derive_seed(seed, f"rnn:{name}:{loss_kind}"))
            variant = mk(p)
            params, xs, targets = _random_instance(p, d, q, T, variant, rng, loss_kind)
            trace = forward(params, variant, xs)
            analytic = bptt(params, variant, trace, targets, loss_kind)

            def loss_fn(pa):
                return sequence_loss(forward(pa, variant, xs), targets, loss_kind)

            numeric = fd_gradients(loss_fn, params, eps=1e-5)
            assert max_rel_err(analytic.named_arrays(), numeric) < 1e-6

    def test_zero_instance_gives_zero_gradients(self):
        params = _zero_params(3, 2, 2)
        variant = RnnVariant.vanilla()
        trace = forward(params, variant, [np.zeros(2)] * 4)
        grads = bptt(params, variant, trace, [np.zeros(2)] * 4, "mse")
        for _, g in grads.named_arrays():
            assert np.array_equal(g, np.zeros_like(g))

    def test_single_step_has_no_recurrent_gradient(self):
        rng = Rng(12)
        variant = RnnVariant.vanilla()
        params, xs, targets = _random_instance(3, 2, 2, 1, variant, rng)
        trace = forward(params, variant, xs)
        grads = bptt(params, variant, trace, targets, "mse")
        assert np.array_equal(grads.W[1], np.zeros((3, 3)))

    def test_dW_matches_materialized_kronecker(self):
        # same deltas, two accumulation routes: outer products vs the
        # explicitly materialized (h_{t-1} (x) I) de-vectorization
        p, d, q, T = 3, 2, 2, 6
        rng = Rng(77)
        variant = RnnVariant.vanilla()
        params, xs, targets = _random_instance(p, d, q, T, variant, rng)
        trace = forward(params, variant, xs)
        grads = bptt(params, variant, trace, targets, "mse")

        gs = [trace.ys[t] - targets[t] for t in range(T)]
        state_grads = [params.V.T @ g for g in gs]
        _, deltas = backward_through_time(params, variant, trace, state_grads)

        dW = np.zeros((p, p))
        for t in range(1, T + 1):
            h = trace.hs[t - 1]
            e = (1.0 - h * h) * deltas[t - 1]
            K = np.kron(trace.h(t - 1).reshape(-1, 1), np.eye(p))  # (p^2, p)
            dW += (K @ e).reshape((p, p), order="F")
        assert np.max(np.abs(dW - grads.W[1])) < 1e-12

    def test_vanishing_rate_is_geometric_in_spectral_radius(self):
        p, T, a = 3, 50, 0.6
        params = RnnParams(W={1: a * np.eye(p)}, U=np.zeros((p, 2)), b_i=np.zeros(p))
        variant = RnnVariant.vanilla()
        trace = forward(params, variant, [np.zeros(2)] * T)
        state_grads = [np.zeros(p)] * (T - 1) + [np.ones(p)]
        _, deltas = backward_through_time(params, variant, trace, state_grads)
        for t in range(1, T + 1):
            expect = a ** (T - t) * math.sqrt(p)
            ratio = np.linalg.norm(deltas[t - 1]) / expect
            assert 0.5 < ratio < 2.0

    def test_vanishing_rate_near_zero_states(self):
        # same geometric law with states merely *near* the fixed point
        p, T, a = 4, 50, 0.7
        rng = Rng(31)
        params = RnnParams(W={1: a * np.eye(p)},
                           U=rng.uniform_array((p, 2), -1e-3, 1e-3),
                           b_i=np.zeros(p))
        variant = RnnVariant.vanilla()
        trace = forward(params, variant,
                        [rng.uniform_array(2, -1, 1) for _ in range(T)])
        assert 0 < np.max(np.abs(np.array(trace.hs))) < 0.01
        state_grads = [np.zeros(p)] * (T - 1) + [np.ones(p)]
        _, deltas = backward_through_time(params, variant, trace, state_grads)
        norms = [np.linalg.norm(d) for d in deltas]
        for t in range(1, T + 1):
            ratio = norms[t - 1] / (math.sqrt(p) * a ** (T - t))
            assert 0.5 < ratio < 2.0


class TestSgd:
    def test_zero_gradients_leave_params_unchanged(self):
        rng = Rng(2)
        params = init_rnn_params(3, 2, 2, RnnVariant.vanilla(), rng)
        zeros = RnnGradients(
            W={1: np.zeros((3, 3))}, U=np.zeros((3, 2)), b_i=np.zeros(3),
            V=np.zeros((2, 3)), b_y=np.zeros(2),
        )
        updated = sgd_step(params, zeros, 0.5)
        for (_, a), (_, b) in zip(params.named_arrays(), updated.named_arrays()):
            assert np.array_equal(a, b)

    def test_zero_learning_rate_leaves_params_unchanged(self):
        rng = Rng(2)
        params = init_rnn_params(3, 2, 2, RnnVariant.vanilla(), rng)
        trace = forward(params, RnnVariant.vanilla(), [np.ones(2)] * 3)
        grads = bptt(params, RnnVariant.vanilla(), trace, [np.ones(2)] * 3, "mse")
        updated = sgd_step(params, grads, 0.0)
        for (_, a), (_, b) in zip(params.named_arrays(), updated.named_arrays()):
            assert np.array_equal(a, b)

    def test_scalar_quadratic_step(self):
        # L = w^2 / 2 from w = 1 with eta = 0.1 lands on 0.9
        params = RnnParams(W={1: np.array([[1.0]])}, U=np.zeros((1, 1)),
                           b_i=np.zeros(1))
        grads = RnnGradients(W={1: np.array([[1.0]])}, U=np.zeros((1, 1)),
                             b_i=np.zeros(1))
        assert sgd_step(params, grads, 0.1).W[1][0, 0] == pytest.approx(0.9)

    def test_negative_learning_rate_rejected(self):
        params = RnnParams(W={1: np.eye(1)}, U=np.zeros((1, 1)), b_i=np.zeros(1))
        with pytest.raises(ValueError):
            sgd_step(params, params, -0.1)

    def test_original_params_not_mutated(self):
        params = RnnParams(W={1: np.eye(2)}, U=np.zeros((2, 1)), b_i=np.zeros(2))
        grads = RnnGradients(W={1: np.ones((2, 2))}, U=np.ones((2, 1)),
                             b_i=np.ones(2))
        sgd_step(params, grads, 1.0)
        assert np.array_equal(params.W[1], np.eye(2))


class TestInitSchemes:
    def test_close_to_identity_eps_zero(self):
        m = init_weights((4, 4), "close_to_identity", Rng(1), eps=0.0)
        assert np.array_equal(m, np.eye(4))

    def test_close_to_identity_perturbation_bounded(self):
        m = init_weights((5, 5), "close_to_identity", Rng(1), eps=0.01)
        assert np.max(np.abs(m - np.eye(5))) <= 0.01

    def test_orthogonal(self):
        q = init_weights((6, 6), "orthogonal", Rng(2))
        assert np.max(np.abs(q.T @ q - np.eye(6))) < 1e-12

    def test_spectral_scaled(self):
        from rnnkit.linalg import spectral_radius

        m = init_weights((6, 6), "spectral", Rng(3), target=0.95)
        rho, ok = spectral_radius(m, tol=1e-12)
        assert ok and rho == pytest.approx(0.95, abs=1e-6)

    def test_non_square_rejected_for_square_schemes(self):
        for scheme in ("close_to_identity", "orthogonal", "spectral"):
            with pytest.raises(ShapeError):
                init_weights((3, 4), scheme, Rng(0))

    def test_unknown_scheme_rejected(self):
        with pytest.raises(ValueError):
            init_weights((3, 3), "xavier", Rng(0))


class TestStructure:
    def test_determinism_bit_identical(self):
        def build(seed):
            rng = Rng(seed)
            variant = RnnVariant.with_delays((1, 3))
            params, xs, targets = _random_instance(4, 3, 2, 6, variant, rng)
            trace = forward(params, variant, xs)
            grads = bptt(params, variant, trace, targets, "mse")
            return trace, grads

        t1, g1 = build(123)
        t2, g2 = build(123)
        for a, b in zip(t1.hs + t1.ys, t2.hs + t2.ys):
            assert np.array_equal(a, b)
        for (n1, a), (n2, b) in zip(g1.named_arrays(), g2.named_arrays()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_effective_recurrent_matrix(self):
        p = 3
        w = Rng(5).uniform_array((p, p), -1, 1)
        params = RnnParams(W={1: w}, U=np.zeros((p, 2)), b_i=np.zeros(p))
        assert np.array_equal(
            effective_recurrent_matrix(params, RnnVariant.vanilla()), w
        )
        assert np.array_equal(
            effective_recurrent_matrix(params, RnnVariant.identity_carry()),
            w + np.eye(p),
        )
        leaky = RnnVariant.leaky(np.ones(p))
        assert np.allclose(effective_recurrent_matrix(params, leaky), w)
        dparams = RnnParams(W={1: w, 3: 2 * w}, U=np.zeros((p, 2)), b_i=np.zeros(p))
        J = effective_recurrent_matrix(dparams, RnnVariant.with_delays((1, 3)))
        assert J.shape == (3 * p, 3 * p)
        assert np.array_equal(J[:p, :p], w)
        assert np.array_equal(J[:p, 2 * p :], 2 * w)

    def test_serialization_round_trip(self, tmp_path):
        rng = Rng(6)
        params = init_rnn_params(3, 2, 2, RnnVariant.with_delays((1, 3)), rng)
        path = tmp_path / "rnn.txt"
        save_rnn_params(path, params)
        loaded = load_rnn_params(path)
        for (n1, a), (n2, b) in zip(params.named_arrays(), loaded.named_arrays()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_headless_round_trip(self, tmp_path):
        params = init_rnn_params(3, 2, None, RnnVariant.vanilla(), Rng(7))
        assert params.V is None
        path = tmp_path / "cell.txt"
        save_rnn_params(path, params)
        assert load_rnn_params(path).V is None
