"""LSTM cell with the historical gate variants behind flags.

Cell equations, in evaluation order (time 1-indexed, h_0 = c_0 = 0):

    i_t = sig(W_i h_{t-1} + U_i x_t [+ p_i . c_{t-1}] [+ gate recurrence] + b_i)
    f_t = sig(W_f h_{t-1} + U_f x_t [+ p_f . c_{t-1}] [+ gate recurrence] + b_f)
    cbar_t = tanh(W_c h_{t-1} + U_c x_t + b_c)
    c_t = f_t . c_{t-1} + i_t . cbar_t          (f_t == 1 with no forget gate)
    o_t = sig(W_o h_{t-1} + U_o x_t [+ p_o . c_t] [+ gate recurrence] + b_o)
    h_t = o_t . tanh(c_t)
    y_t = V h_t + b_y                           (y_t = h_t when V is None)

Variant flags: ``peepholes`` adds the bracketed cell-state leaks into the
gates; ``forget_gate`` off removes f_t structurally (the previous cell state
is carried with coefficient one, no parameters); ``full_gate_recurrence``
feeds every existing gate's previous output into every existing gate's
pre-activation through trainable matrices R_(target)(source).

The backward pass is exact reverse-mode differentiation of the equations
above.  The subtlest adjoint is the output gate's peephole: o_t reads the
*current* c_t, so when the cell adjoint dL/dc_t is assembled it must include
the term (dL/da_o_t) . p_o — i.e. the output-gate pre-activation adjoint is
computed before the cell adjoint is finalized.  Everything downstream of
c_t (block input, input gate, forget gate) then consumes the completed
dL/dc_t.  The other cross-step peephole terms (i_{t+1}, f_{t+1} reading
c_t) arrive through the carried cell adjoint.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .linalg import (
    Matrix,
    Rng,
    ShapeError,
    Vector,
    matvec,
    read_sections,
    sigmoid_vec,
    write_sections,
)
from .rnn import output_grads


@dataclass(frozen=True, eq=False)
class LstmVariant:
    peepholes: bool = True
    forget_gate: bool = True
    full_gate_recurrence: bool = False

    @property
    def name(self) -> str:
        if not self.peepholes and not self.forget_gate and not self.full_gate_recurrence:
            return "original"
        if self.peepholes and self.forget_gate and not self.full_gate_recurrence:
            return "vanilla"
        return "custom"

    @property
    def gates(self) -> tuple[str, ...]:
        """Sigmoid gates that structurally exist."""
        return ("i", "f", "o") if self.forget_gate else ("i", "o")

    def recurrence_keys(self) -> tuple[str, ...]:
        """Names of the gate-recurrence matrices, target gate then source."""
        if not self.full_gate_recurrence:
            return ()
        return tuple(t + s for t in self.gates for s in self.gates)

    @classmethod
    def vanilla(cls) -> "LstmVariant":
        return cls()

    @classmethod
    def original(cls) -> "LstmVariant":
        return cls(peepholes=False, forget_gate=False)

    @classmethod
    def no_peepholes(cls) -> "LstmVariant":
        return cls(peepholes=False)

    @classmethod
    def full_recurrence(cls) -> "LstmVariant":
        return cls(full_gate_recurrence=True)


def _lstm_sections(o) -> list[tuple[str, np.ndarray]]:
    out = []
    for g in ("i", "f", "o", "c"):
        w = getattr(o, f"W_{g}")
        if w is None:
            continue
        out.append((f"W_{g}", w))
        out.append((f"U_{g}", getattr(o, f"U_{g}")))
        out.append((f"b_{g}", getattr(o, f"b_{g}")))
    for name in ("p_i", "p_f", "p_o"):
        arr = getattr(o, name)
        if arr is not None:
            out.append((name, arr))
    if o.R is not None:
        out.extend((f"R_{k}", o.R[k]) for k in sorted(o.R))
    if o.V is not None:
        out.append(("V", o.V))
        out.append(("b_y", o.b_y))
    return out


@dataclass
class LstmParams:
    """Weight bundle; blocks that the variant disables are None."""

    W_i: Matrix
    U_i: Matrix
    b_i: Vector
    W_o: Matrix
    U_o: Matrix
    b_o: Vector
    W_c: Matrix
    U_c: Matrix
    b_c: Vector
    W_f: Matrix | None = None
    U_f: Matrix | None = None
    b_f: Vector | None = None
    p_i: Vector | None = None
    p_f: Vector | None = None
    p_o: Vector | None = None
    R: dict[str, Matrix] | None = None
    V: Matrix | None = None
    b_y: Vector | None = None

    @property
    def p(self) -> int:
        return self.W_i.shape[0]

    @property
    def d(self) -> int:
        return self.U_i.shape[1]

    @property
    def q(self) -> int:
        return self.V.shape[0] if self.V is not None else self.p

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _lstm_sections(self)

    def validate_for(self, variant: LstmVariant) -> None:
        if (self.W_f is None) == variant.forget_gate:
            raise ShapeError("forget-gate blocks inconsistent with variant")
        if (self.p_i is None) == variant.peepholes:
            raise ShapeError("peephole blocks inconsistent with variant")
        if variant.peepholes and variant.forget_gate and self.p_f is None:
            raise ShapeError("missing forget-gate peephole")
        have = set() if self.R is None else set(self.R)
        if have != set(variant.recurrence_keys()):
            raise ShapeError(
                f"gate-recurrence blocks {sorted(have)} inconsistent with"
                f" variant {sorted(variant.recurrence_keys())}"
            )


@dataclass
class LstmGradients:
    """Structural mirror of :class:`LstmParams`; absent blocks stay None."""

    W_i: Matrix
    U_i: Matrix
    b_i: Vector
    W_o: Matrix
    U_o: Matrix
    b_o: Vector
    W_c: Matrix
    U_c: Matrix
    b_c: Vector
    W_f: Matrix | None = None
    U_f: Matrix | None = None
    b_f: Vector | None = None
    p_i: Vector | None = None
    p_f: Vector | None = None
    p_o: Vector | None = None
    R: dict[str, Matrix] | None = None
    V: Matrix | None = None
    b_y: Vector | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _lstm_sections(self)


@dataclass
class LstmStep:
    """One cell evaluation.  ``f`` is None when the variant has no forget
    gate (the cell then carries c_{t-1} with coefficient one)."""

    i: Vector
    f: Vector | None
    o: Vector
    cbar: Vector
    c: Vector
    h: Vector
    y: Vector


@dataclass
class LstmTrace:
    xs: list[Vector]
    steps: list[LstmStep]

    @property
    def T(self) -> int:
        return len(self.steps)

    @property
    def ys(self) -> list[Vector]:
        return [s.y for s in self.steps]

    @property
    def hs(self) -> list[Vector]:
        return [s.h for s in self.steps]

    def h(self, t: int) -> Vector:
        return self.steps[t - 1].h if t >= 1 else np.zeros_like(self.steps[0].h)

    def c(self, t: int) -> Vector:
        return self.steps[t - 1].c if t >= 1 else np.zeros_like(self.steps[0].c)

    def gate(self, g: str, t: int) -> Vector:
        """Gate output at time t; the zero vector at t = 0 (also for a
        structurally absent forget gate, whose pre-window value is zero)."""
        p = self.steps[0].i.shape[0]
        if t < 1:
            return np.zeros(p)
        step = self.steps[t - 1]
        if g == "f":
            return step.f if step.f is not None else np.ones(p)
        return getattr(step, g)


def lstm_cell_forward(
    params: LstmParams,
    variant: LstmVariant,
    x_t: Vector,
    h_prev: Vector,
    c_prev: Vector,
    gates_prev: dict[str, Vector] | None = None,
) -> LstmStep:
    """Evaluate one cell.  ``gates_prev`` maps existing gate names to their
    previous outputs and is required exactly when the variant uses full gate
    recurrence."""
    if variant.full_gate_recurrence and gates_prev is None:
        raise ValueError("full gate recurrence needs the previous gate outputs")

    def gate_pre(g: str) -> Vector:
        a = matvec(getattr(params, f"W_{g}"), h_prev)
        a = a + matvec(getattr(params, f"U_{g}"), x_t) + getattr(params, f"b_{g}")
        if variant.full_gate_recurrence:
            for src in variant.gates:
                a += params.R[g + src] @ gates_prev[src]
        return a

    a_i = gate_pre("i")
    if variant.peepholes:
        a_i = a_i + params.p_i * c_prev
    i = sigmoid_vec(a_i)

    f = None
    if variant.forget_gate:
        a_f = gate_pre("f")
        if variant.peepholes:
            a_f = a_f + params.p_f * c_prev
        f = sigmoid_vec(a_f)

    cbar = np.tanh(
        matvec(params.W_c, h_prev) + matvec(params.U_c, x_t) + params.b_c
    )
    c = (f * c_prev if f is not None else c_prev) + i * cbar

    a_o = gate_pre("o")
    if variant.peepholes:
        a_o = a_o + params.p_o * c  # the output gate reads the CURRENT cell
    o = sigmoid_vec(a_o)

    h = o * np.tanh(c)
    y = matvec(params.V, h) + params.b_y if params.V is not None else h
    return LstmStep(i=i, f=f, o=o, cbar=cbar, c=c, h=h, y=y)


def lstm_forward(params: LstmParams, variant: LstmVariant, xs) -> LstmTrace:
    """Run the cell over a whole sequence from zero initial state/memory
    (and zero initial gate outputs under full gate recurrence)."""
    if not len(xs):
        raise ValueError("empty sequence")
    params.validate_for(variant)
    p = params.p
    h = np.zeros(p)
    c = np.zeros(p)
    gates = {g: np.zeros(p) for g in variant.gates}
    trace = LstmTrace(xs=[np.asarray(x, dtype=np.float64) for x in xs], steps=[])
    for x_t in trace.xs:
        step = lstm_cell_forward(params, variant, x_t, h, c, gates)
        trace.steps.append(step)
        h, c = step.h, step.c
        gates = {g: trace.gate(g, len(trace.steps)) for g in variant.gates}
    return trace


def lstm_backward_core(
    params: LstmParams, variant: LstmVariant, trace: LstmTrace, state_grads
) -> LstmGradients:
    """Reverse-mode pass with per-step state-gradient injections; returns
    gradients for every present cell block (no output head)."""
    T = trace.T
    if len(state_grads) != T:
        raise ShapeError(f"{T} steps vs {len(state_grads)} state gradients")
    peep = variant.peepholes
    fgr = variant.full_gate_recurrence
    forget = variant.forget_gate
    p = params.p

    dW = {g: np.zeros_like(getattr(params, f"W_{g}"))
          for g in (*variant.gates, "c")}
    dU = {g: np.zeros_like(getattr(params, f"U_{g}"))
          for g in (*variant.gates, "c")}
    db = {g: np.zeros_like(getattr(params, f"b_{g}"))
          for g in (*variant.gates, "c")}
    dp = {g: np.zeros(p) for g in ("i", "f", "o")} if peep else None
    dR = {k: np.zeros((p, p)) for k in variant.recurrence_keys()} if fgr else None

    dh_next = np.zeros(p)
    dc_next = np.zeros(p)
    da_next = {g: np.zeros(p) for g in variant.gates}

    for t in range(T, 0, -1):
        step = trace.steps[t - 1]
        x_t = trace.xs[t - 1]
        h_prev = trace.h(t - 1)
        c_prev = trace.c(t - 1)
        i, o, cbar = step.i, step.o, step.cbar
        f = step.f if forget else np.ones(p)
        tc = np.tanh(step.c)

        dh = np.asarray(state_grads[t - 1], dtype=np.float64) + dh_next

        do = dh * tc
        if fgr:
            for g in variant.gates:
                do += params.R[g + "o"].T @ da_next[g]
        da_o = do * o * (1.0 - o)

        dc = dh * o * (1.0 - tc * tc) + dc_next
        if peep:
            dc += da_o * params.p_o

        dcbar = dc * i
        da_c = dcbar * (1.0 - cbar * cbar)

        di = dc * cbar
        if fgr:
            for g in variant.gates:
                di += params.R[g + "i"].T @ da_next[g]
        da_i = di * i * (1.0 - i)

        da_f = None
        if forget:
            df = dc * c_prev
            if fgr:
                for g in variant.gates:
                    df += params.R[g + "f"].T @ da_next[g]
            da_f = df * f * (1.0 - f)

        gate_adjoints = {"i": da_i, "o": da_o, "c": da_c}
        if forget:
            gate_adjoints["f"] = da_f
        for g, da in gate_adjoints.items():
            dW[g] += np.outer(da, h_prev)
            dU[g] += np.outer(da, x_t)
            db[g] += da
        if peep:
            dp["i"] += da_i * c_prev
            if forget:
                dp["f"] += da_f * c_prev
            dp["o"] += da_o * step.c
        if fgr:
            for tgt in variant.gates:
                for src in variant.gates:
                    dR[tgt + src] += np.outer(gate_adjoints[tgt],
                                              trace.gate(src, t - 1))

        dh_next = (
            params.W_i.T @ da_i + params.W_o.T @ da_o + params.W_c.T @ da_c
        )
        if forget:
            dh_next = dh_next + params.W_f.T @ da_f
        dc_next = dc * f
        if peep:
            dc_next = dc_next + da_i * params.p_i
            if forget:
                dc_next = dc_next + da_f * params.p_f
        da_next = {g: gate_adjoints[g] for g in variant.gates}

    return LstmGradients(
        W_i=dW["i"], U_i=dU["i"], b_i=db["i"],
        W_o=dW["o"], U_o=dU["o"], b_o=db["o"],
        W_c=dW["c"], U_c=dU["c"], b_c=db["c"],
        W_f=dW.get("f"), U_f=dU.get("f"), b_f=db.get("f"),
        p_i=dp["i"] if peep else None,
        p_f=dp["f"] if peep and forget else None,
        p_o=dp["o"] if peep else None,
        R=dR,
    )


def lstm_bptt(
    params: LstmParams,
    variant: LstmVariant,
    trace: LstmTrace,
    targets,
    loss_kind: str,
) -> LstmGradients:
    """Gradients of the summed window loss for every present parameter
    block."""
    params.validate_for(variant)
    gs = output_grads(trace, targets, loss_kind)
    if params.V is not None:
        dV = np.zeros_like(params.V)
        db_y = np.zeros_like(params.b_y)
        for g, h in zip(gs, trace.hs):
            dV += np.outer(g, h)
            db_y += g
        state_grads = [params.V.T @ g for g in gs]
    else:
        dV = db_y = None
        state_grads = gs
    grads = lstm_backward_core(params, variant, trace, state_grads)
    return replace(grads, V=dV, b_y=db_y)


def init_lstm_params(
    p: int,
    d: int,
    q: int | None,
    variant: LstmVariant,
    rng: Rng,
) -> LstmParams:
    """Uniform init in [-s, s] with s = 1/sqrt(p) for recurrent and
    1/sqrt(d) for input matrices; the forget-gate bias starts at +1 so the
    cell does not forget at initialization.  ``q = None`` builds a headless
    cell (output equals hidden state)."""
    sp = 1.0 / np.sqrt(p)
    sd = 1.0 / np.sqrt(d)

    def w(tag):
        return rng.spawn(tag).uniform_array((p, p), -sp, sp)

    def u(tag):
        return rng.spawn(tag).uniform_array((p, d), -sd, sd)

    kwargs = dict(
        W_i=w("W_i"), U_i=u("U_i"), b_i=np.zeros(p),
        W_o=w("W_o"), U_o=u("U_o"), b_o=np.zeros(p),
        W_c=w("W_c"), U_c=u("U_c"), b_c=np.zeros(p),
    )
    if variant.forget_gate:
        kwargs.update(W_f=w("W_f"), U_f=u("U_f"), b_f=np.ones(p))
    if variant.peepholes:
        kwargs.update(p_i=rng.spawn("p_i").uniform_array(p, -sp, sp),
                      p_o=rng.spawn("p_o").uniform_array(p, -sp, sp))
        if variant.forget_gate:
            kwargs.update(p_f=rng.spawn("p_f").uniform_array(p, -sp, sp))
    if variant.full_gate_recurrence:
        kwargs.update(R={k: w(f"R_{k}") for k in variant.recurrence_keys()})
    if q is not None:
        kwargs.update(
            V=rng.spawn("V").uniform_array((q, p), -sp, sp), b_y=np.zeros(q)
        )
    return LstmParams(**kwargs)


def core_parameter_count(params: LstmParams) -> int:
    """Scalar parameters in the cell, output head excluded."""
    return sum(a.size for n, a in params.named_arrays() if n not in ("V", "b_y"))


def save_lstm_params(path, params: LstmParams, variant: LstmVariant) -> None:
    header = {
        "variant": variant.name,
        "peepholes": str(int(variant.peepholes)),
        "forget": str(int(variant.forget_gate)),
        "fgr": str(int(variant.full_gate_recurrence)),
    }
    Path(path).write_text(write_sections(header, params.named_arrays()))


def load_lstm_params(path) -> tuple[LstmParams, LstmVariant]:
    header, secs = read_sections(Path(path).read_text())
    variant = LstmVariant(
        peepholes=header["peepholes"] == "1",
        forget_gate=header["forget"] == "1",
        full_gate_recurrence=header["fgr"] == "1",
    )
    R = {k[2:]: v for k, v in secs.items() if k.startswith("R_")} or None
    params = LstmParams(
        W_i=secs["W_i"], U_i=secs["U_i"], b_i=secs["b_i"],
        W_o=secs["W_o"], U_o=secs["U_o"], b_o=secs["b_o"],
        W_c=secs["W_c"], U_c=secs["U_c"], b_c=secs["b_c"],
        W_f=secs.get("W_f"), U_f=secs.get("U_f"), b_f=secs.get("b_f"),
        p_i=secs.get("p_i"), p_f=secs.get("p_f"), p_o=secs.get("p_o"),
        R=R, V=secs.get("V"), b_y=secs.get("b_y"),
    )
    params.validate_for(variant)
    return params, variant
