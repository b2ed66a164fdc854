import numpy as np
import pytest
from oracles import fd_gradients, max_rel_err

from rnnkit.linalg import Rng, ShapeError, derive_seed
from rnnkit.lstm import (
    LstmParams,
    LstmVariant,
    core_parameter_count,
    init_lstm_params,
    load_lstm_params,
    lstm_backward_core,
    lstm_bptt,
    lstm_cell_forward,
    lstm_forward,
    save_lstm_params,
)
from rnnkit.rnn import sequence_loss

P, D, Q, T = 3, 2, 2, 4

VARIANTS = {
    "vanilla": LstmVariant.vanilla(),
    "no_peepholes": LstmVariant.no_peepholes(),
    "original": LstmVariant.original(),
    "full_gate_recurrence": LstmVariant.full_recurrence(),
}


def _zero_params(p, d, q, variant):
    kw = dict(
        W_i=np.zeros((p, p)), U_i=np.zeros((p, d)), b_i=np.zeros(p),
        W_o=np.zeros((p, p)), U_o=np.zeros((p, d)), b_o=np.zeros(p),
        W_c=np.zeros((p, p)), U_c=np.zeros((p, d)), b_c=np.zeros(p),
    )
    if variant.forget_gate:
        kw.update(W_f=np.zeros((p, p)), U_f=np.zeros((p, d)), b_f=np.zeros(p))
    if variant.peepholes:
        kw.update(p_i=np.zeros(p), p_o=np.zeros(p))
        if variant.forget_gate:
            kw.update(p_f=np.zeros(p))
    if variant.full_gate_recurrence:
        kw.update(R={k: np.zeros((p, p)) for k in variant.recurrence_keys()})
    if q is not None:
        kw.update(V=np.zeros((q, p)), b_y=np.zeros(q))
    return LstmParams(**kw)


def _instance(variant, seed, loss_kind="mse", p=P, d=D, q=Q, steps=T):
    rng = Rng(derive_seed(seed, f"lstm:{variant.name}:{loss_kind}"))
    params = init_lstm_params(p, d, q, variant, rng)
    xs = [rng.uniform_array(d, -1, 1) for _ in range(steps)]
    if loss_kind == "mse":
        targets = [rng.uniform_array(q, -1, 1) for _ in range(steps)]
    else:
        targets = [rng.randint(q) for _ in range(steps)]
    return params, xs, targets


class TestCellForward:
    def test_all_zero_weights_algebra(self):
        variant = LstmVariant.vanilla()
        params = _zero_params(P, D, Q, variant)
        c_prev = np.array([0.4, -1.0, 2.0])
        h_prev = np.array([0.1, 0.2, -0.3])
        step = lstm_cell_forward(params, variant, np.ones(D), h_prev, c_prev)
        assert np.allclose(step.i, 0.5) and np.allclose(step.f, 0.5)
        assert np.allclose(step.o, 0.5)
        assert np.array_equal(step.cbar, np.zeros(P))
        assert np.allclose(step.c, 0.5 * c_prev, atol=1e-15)
        assert np.allclose(step.h, 0.5 * np.tanh(0.5 * c_prev), atol=1e-15)

    def test_saturated_gates_carry_memory(self):
        variant = LstmVariant.vanilla()
        params = _zero_params(P, D, Q, variant)
        params.b_f[:] = 30.0   # f -> 1
        params.b_i[:] = -30.0  # i -> 0
        c_prev = np.array([0.7, -0.2, 1.5])
        step = lstm_cell_forward(params, variant, np.ones(D), np.zeros(P), c_prev)
        assert np.max(np.abs(step.c - c_prev)) < 1e-9

    def test_closed_output_gate_zeroes_hidden(self):
        variant = LstmVariant.vanilla()
        params = _zero_params(P, D, Q, variant)
        params.b_o[:] = -30.0  # o -> 0
        step = lstm_cell_forward(
            params, variant, np.ones(D), np.full(P, 0.5), np.full(P, 2.0)
        )
        assert np.max(np.abs(step.h)) < 1e-9

    def test_missing_gates_prev_under_full_recurrence(self):
        variant = LstmVariant.full_recurrence()
        params = _zero_params(P, D, Q, variant)
        with pytest.raises(ValueError):
            lstm_cell_forward(params, variant, np.ones(D), np.zeros(P), np.zeros(P))


class TestForward:
    def test_single_step_matches_cell(self):
        variant = LstmVariant.vanilla()
        params, xs, _ = _instance(variant, 0, steps=1)
        trace = lstm_forward(params, variant, xs)
        step = lstm_cell_forward(params, variant, xs[0], np.zeros(P), np.zeros(P))
        for field in ("i", "f", "o", "cbar", "c", "h", "y"):
            assert np.array_equal(getattr(trace.steps[0], field),
                                  getattr(step, field))

    def test_blocked_input_keeps_cell_at_zero(self):
        variant = LstmVariant.vanilla()
        params = _zero_params(P, D, Q, variant)
        params.b_f[:] = 30.0
        params.b_i[:] = -30.0
        trace = lstm_forward(params, variant, [np.ones(D)] * 10)
        for step in trace.steps:
            assert np.max(np.abs(step.c)) < 1e-9

    def test_empty_sequence_rejected(self):
        variant = LstmVariant.vanilla()
        params = _zero_params(P, D, Q, variant)
        with pytest.raises(ValueError):
            lstm_forward(params, variant, [])

    def test_determinism(self):
        variant = LstmVariant.full_recurrence()
        params, xs, _ = _instance(variant, 5)
        t1 = lstm_forward(params, variant, xs)
        params, xs, _ = _instance(variant, 5)
        t2 = lstm_forward(params, variant, xs)
        for a, b in zip(t1.steps, t2.steps):
            assert np.array_equal(a.h, b.h) and np.array_equal(a.c, b.c)
            assert np.array_equal(a.y, b.y)

    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_gate_and_state_ranges(self, name):
        variant = VARIANTS[name]
        params, xs, _ = _instance(variant, 1, steps=12)
        trace = lstm_forward(params, variant, xs)
        for step in trace.steps:
            for gate in (step.i, step.o) + ((step.f,) if step.f is not None else ()):
                assert np.all((gate > 0) & (gate < 1))
            assert np.all(np.abs(step.cbar) < 1)
            assert np.all(np.abs(step.h) < 1)


class TestBptt:
    @pytest.mark.parametrize("name", sorted(VARIANTS))
    @pytest.mark.parametrize("seed", range(3))
    def test_matches_central_differences(self, name, seed):
        variant = VARIANTS[name]
        params, xs, targets = _instance(variant, seed)
        trace = lstm_forward(params, variant, xs)
        analytic = lstm_bptt(params, variant, trace, targets, "mse")

        def loss_fn(pa):
            return sequence_loss(lstm_forward(pa, variant, xs), targets, "mse")

        numeric = fd_gradients(loss_fn, params, eps=1e-5)
        assert max_rel_err(analytic.named_arrays(), numeric) < 1e-6

    def test_cross_entropy_gradients(self):
        variant = LstmVariant.vanilla()
        params, xs, targets = _instance(variant, 9, loss_kind="cross_entropy")
        trace = lstm_forward(params, variant, xs)
        analytic = lstm_bptt(params, variant, trace, targets, "cross_entropy")

        def loss_fn(pa):
            return sequence_loss(
                lstm_forward(pa, variant, xs), targets, "cross_entropy"
            )

        numeric = fd_gradients(loss_fn, params, eps=1e-5)
        assert max_rel_err(analytic.named_arrays(), numeric) < 1e-6

    def test_zero_loss_gives_zero_gradients(self):
        variant = LstmVariant.vanilla()
        params, xs, _ = _instance(variant, 2)
        trace = lstm_forward(params, variant, xs)
        grads = lstm_bptt(params, variant, trace, list(trace.ys), "mse")
        for _, g in grads.named_arrays():
            assert np.array_equal(g, np.zeros_like(g))

    def test_no_forget_gate_blocks_absent(self):
        variant = LstmVariant.original()
        params, xs, targets = _instance(variant, 3)
        trace = lstm_forward(params, variant, xs)
        grads = lstm_bptt(params, variant, trace, targets, "mse")
        assert grads.W_f is None and grads.U_f is None and grads.b_f is None
        names = [n for n, _ in grads.named_arrays()]
        assert not any(n.endswith("_f") or n.startswith("p_") for n in names)

    def test_variant_trace_mismatch_rejected(self):
        vanilla = LstmVariant.vanilla()
        params, xs, targets = _instance(vanilla, 4)
        trace = lstm_forward(params, vanilla, xs)
        with pytest.raises(ShapeError):
            lstm_bptt(params, LstmVariant.no_peepholes(), trace, targets, "mse")


class TestProperties:
    def test_constant_error_carousel(self):
        # saturated f ~ 1, i ~ 0: the cell-state Jacobian dc_T/dc_1 is the
        # identity up to sigmoid saturation residue
        variant = LstmVariant.vanilla()
        params, xs, _ = _instance(variant, 6, steps=8)
        params.b_f[:] = 30.0
        params.b_i[:] = -30.0
        trace = lstm_forward(params, variant, xs)
        h1 = trace.steps[0].h
        c1 = trace.steps[0].c

        def run_tail(c_start):
            h, c = h1, c_start
            gates = {g: trace.gate(g, 1) for g in variant.gates}
            for x in xs[1:]:
                step = lstm_cell_forward(params, variant, x, h, c, gates)
                h, c = step.h, step.c
                gates = {"i": step.i, "f": step.f, "o": step.o}
            return c

        eps = 1e-5
        jac = np.zeros((P, P))
        for j in range(P):
            e = np.zeros(P)
            e[j] = eps
            jac[:, j] = (run_tail(c1 + e) - run_tail(c1 - e)) / (2 * eps)
        assert np.max(np.abs(jac - np.eye(P))) < 1e-6

    def test_zero_peepholes_collapse_to_no_peephole_path(self):
        rng = Rng(17)
        vanilla = LstmVariant.vanilla()
        params = init_lstm_params(P, D, Q, vanilla, rng)
        params.p_i[:] = 0.0
        params.p_f[:] = 0.0
        params.p_o[:] = 0.0
        import copy
        import dataclasses

        stripped = copy.deepcopy(params)
        stripped = dataclasses.replace(stripped, p_i=None, p_f=None, p_o=None)
        xs = [rng.uniform_array(D, -1, 1) for _ in range(6)]
        t1 = lstm_forward(params, vanilla, xs)
        t2 = lstm_forward(stripped, LstmVariant.no_peepholes(), xs)
        for a, b in zip(t1.steps, t2.steps):
            for field in ("i", "f", "o", "cbar", "c", "h", "y"):
                assert np.array_equal(getattr(a, field), getattr(b, field))

    def test_headless_output_equals_hidden(self):
        variant = LstmVariant.vanilla()
        rng = Rng(21)
        params = init_lstm_params(P, D, None, variant, rng)
        xs = [rng.uniform_array(D, -1, 1) for _ in range(4)]
        trace = lstm_forward(params, variant, xs)
        for step in trace.steps:
            assert step.y is step.h

    def test_core_parameter_count(self):
        p, d = 5, 3
        no_peep = init_lstm_params(p, d, 2, LstmVariant.no_peepholes(), Rng(0))
        assert core_parameter_count(no_peep) == 4 * (p * p + p * d + p)
        vanilla = init_lstm_params(p, d, 2, LstmVariant.vanilla(), Rng(0))
        assert core_parameter_count(vanilla) == 4 * (p * p + p * d + p) + 3 * p

    def test_headless_backward_matches_fd(self):
        # state-gradient injection path used by the bidirectional module
        variant = LstmVariant.vanilla()
        rng = Rng(23)
        params = init_lstm_params(P, D, None, variant, rng)
        xs = [rng.uniform_array(D, -1, 1) for _ in range(T)]
        targets = [rng.uniform_array(P, -1, 1) for _ in range(T)]
        trace = lstm_forward(params, variant, xs)
        analytic = lstm_bptt(params, variant, trace, targets, "mse")

        def loss_fn(pa):
            return sequence_loss(lstm_forward(pa, variant, xs), targets, "mse")

        numeric = fd_gradients(loss_fn, params, eps=1e-5)
        assert max_rel_err(analytic.named_arrays(), numeric) < 1e-6


class TestSerialization:
    @pytest.mark.parametrize("name", sorted(VARIANTS))
    def test_round_trip(self, name, tmp_path):
        variant = VARIANTS[name]
        params, _, _ = _instance(variant, 7)
        path = tmp_path / "lstm.txt"
        save_lstm_params(path, params, variant)
        loaded, lvariant = load_lstm_params(path)
        assert lvariant.name == variant.name
        assert (lvariant.peepholes, lvariant.forget_gate,
                lvariant.full_gate_recurrence) == (
            variant.peepholes, variant.forget_gate, variant.full_gate_recurrence
        )
        for (n1, a), (n2, b) in zip(params.named_arrays(), loaded.named_arrays()):
            assert n1 == n2 and np.array_equal(a, b)

    def test_header_line(self, tmp_path):
        variant = LstmVariant.vanilla()
        params, _, _ = _instance(variant, 8)
        path = tmp_path / "lstm.txt"
        save_lstm_params(path, params, variant)
        first = path.read_text().splitlines()[0]
        assert first == "variant=vanilla peepholes=1 forget=1 fgr=0"
