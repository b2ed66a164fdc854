"""Bidirectional sequence models and stacked bidirectional embeddings.

A bidirectional model runs two independent cells over the sequence, one
left-to-right and one right-to-left, and fuses the per-step states:

    fh_t = cell_fwd(fh_{t-1}, x_t)          (fh_0 = 0)
    bh_t = cell_bwd(bh_{t+1}, x_t)          (bh_{T+1} = 0)
    y_t  = V_fwd fh_t + V_bwd bh_t + b_y

The direction cells are headless RNN or LSTM bundles (their own output head
is absent; the fusion owns V_fwd, V_bwd, b_y).  The backward-direction pass
is implemented by running the cell over the reversed sequence, so gradients
for it flow "forward in time" automatically when that reversed problem is
back-propagated.  The whole sequence must be available up front; nothing
here streams.

The embedding stack runs L bidirectional LSTM layers, feeding each layer the
previous layer's concatenated per-step states [fh_t; bh_t] (width 2p), and
emits the scaled linear combination

    e_t = gamma * sum_l s_l [fh_t^(l); bh_t^(l)]

with fixed scalar combination weights gamma, s_1..s_L.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import Matrix, Rng, ShapeError, Vector, read_sections, write_sections
from .lstm import (
    LstmParams,
    LstmTrace,
    LstmVariant,
    init_lstm_params,
    lstm_backward_core,
    lstm_bptt,
    lstm_forward,
)
from .rnn import (
    RnnParams,
    RnnTrace,
    RnnVariant,
    backward_through_time,
    forward as rnn_forward,
    init_rnn_params,
    output_grads,
)

CELL_KINDS = ("rnn", "lstm")


@dataclass
class BidirParams:
    """Two headless direction cells plus the output fusion."""

    cell_kind: str
    fwd: RnnParams | LstmParams
    bwd: RnnParams | LstmParams
    v_fwd: Matrix
    v_bwd: Matrix
    b_y: Vector
    lstm_variant: LstmVariant | None = None

    def __post_init__(self):
        if self.cell_kind not in CELL_KINDS:
            raise ValueError(f"unknown cell kind {self.cell_kind!r}")
        if self.fwd.V is not None or self.bwd.V is not None:
            raise ShapeError("direction cells must be headless; fusion owns V")
        if self.fwd.p != self.bwd.p or self.fwd.d != self.bwd.d:
            raise ShapeError("the two directions must share p and d")
        if self.v_fwd.shape != self.v_bwd.shape or self.v_fwd.shape[1] != self.fwd.p:
            raise ShapeError(
                f"fusion shapes {self.v_fwd.shape}/{self.v_bwd.shape} vs p={self.fwd.p}"
            )
        if self.cell_kind == "lstm" and self.lstm_variant is None:
            self.lstm_variant = LstmVariant.vanilla()

    @property
    def p(self) -> int:
        return self.fwd.p

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"fwd:{n}", a) for n, a in self.fwd.named_arrays()]
        out += [(f"bwd:{n}", a) for n, a in self.bwd.named_arrays()]
        out += [("V_fwd", self.v_fwd), ("V_bwd", self.v_bwd), ("b_y", self.b_y)]
        return out


@dataclass
class BidirGradients:
    fwd: object
    bwd: object
    v_fwd: Matrix
    v_bwd: Matrix
    b_y: Vector

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        out = [(f"fwd:{n}", a) for n, a in self.fwd.named_arrays()]
        out += [(f"bwd:{n}", a) for n, a in self.bwd.named_arrays()]
        out += [("V_fwd", self.v_fwd), ("V_bwd", self.v_bwd), ("b_y", self.b_y)]
        return out


@dataclass
class BidirTrace:
    """Forward-direction trace over x_1..x_T, backward-direction trace over
    the reversed sequence, and the fused outputs."""

    fwd_trace: RnnTrace | LstmTrace
    bwd_trace: RnnTrace | LstmTrace
    ys: list[Vector]

    @property
    def T(self) -> int:
        return len(self.ys)

    def forward_state(self, t: int) -> Vector:
        return self.fwd_trace.h(t)

    def backward_state(self, t: int) -> Vector:
        """Right-to-left state at original position t (1-indexed)."""
        return self.bwd_trace.h(self.T + 1 - t)

    @property
    def forward_states(self) -> list[Vector]:
        return [self.forward_state(t) for t in range(1, self.T + 1)]

    @property
    def backward_states(self) -> list[Vector]:
        return [self.backward_state(t) for t in range(1, self.T + 1)]


def _cell_forward(params: BidirParams, cell, xs):
    if params.cell_kind == "rnn":
        return rnn_forward(cell, RnnVariant.vanilla(), xs)
    return lstm_forward(cell, params.lstm_variant, xs)


def bidir_forward(params: BidirParams, xs) -> BidirTrace:
    """Run both directions over the whole sequence and fuse per step."""
    if not len(xs):
        raise ValueError("empty sequence")
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    fwd_trace = _cell_forward(params, params.fwd, xs)
    bwd_trace = _cell_forward(params, params.bwd, xs[::-1])
    T = len(xs)
    ys = [
        params.v_fwd @ fwd_trace.h(t)
        + params.v_bwd @ bwd_trace.h(T + 1 - t)
        + params.b_y
        for t in range(1, T + 1)
    ]
    return BidirTrace(fwd_trace=fwd_trace, bwd_trace=bwd_trace, ys=ys)


def bidir_bptt(
    params: BidirParams, trace: BidirTrace, targets, loss_kind: str
) -> BidirGradients:
    """Gradients for both directions' cells and the fusion weights.

    The loss joins the two directions at every y_t; each direction then
    back-propagates independently (the backward direction over its reversed
    time axis)."""
    T = trace.T
    gs = output_grads(trace, targets, loss_kind)

    dv_fwd = np.zeros_like(params.v_fwd)
    dv_bwd = np.zeros_like(params.v_bwd)
    db_y = np.zeros_like(params.b_y)
    for t, g in enumerate(gs, start=1):
        dv_fwd += np.outer(g, trace.forward_state(t))
        dv_bwd += np.outer(g, trace.backward_state(t))
        db_y += g

    inject_fwd = [params.v_fwd.T @ g for g in gs]
    inject_bwd = [params.v_bwd.T @ g for g in reversed(gs)]
    if params.cell_kind == "rnn":
        variant = RnnVariant.vanilla()
        g_fwd, _ = backward_through_time(params.fwd, variant, trace.fwd_trace,
                                         inject_fwd)
        g_bwd, _ = backward_through_time(params.bwd, variant, trace.bwd_trace,
                                         inject_bwd)
    else:
        g_fwd = lstm_backward_core(params.fwd, params.lstm_variant,
                                   trace.fwd_trace, inject_fwd)
        g_bwd = lstm_backward_core(params.bwd, params.lstm_variant,
                                   trace.bwd_trace, inject_bwd)
    return BidirGradients(fwd=g_fwd, bwd=g_bwd, v_fwd=dv_fwd, v_bwd=dv_bwd,
                          b_y=db_y)


def init_bidir_params(
    p: int,
    d: int,
    q: int,
    cell_kind: str,
    rng: Rng,
    lstm_variant: LstmVariant | None = None,
) -> BidirParams:
    if cell_kind == "rnn":
        fwd = init_rnn_params(p, d, None, RnnVariant.vanilla(), rng.spawn("fwd"))
        bwd = init_rnn_params(p, d, None, RnnVariant.vanilla(), rng.spawn("bwd"))
    elif cell_kind == "lstm":
        lstm_variant = lstm_variant or LstmVariant.vanilla()
        fwd = init_lstm_params(p, d, None, lstm_variant, rng.spawn("fwd"))
        bwd = init_lstm_params(p, d, None, lstm_variant, rng.spawn("bwd"))
    else:
        raise ValueError(f"unknown cell kind {cell_kind!r}")
    s = 1.0 / np.sqrt(p)
    return BidirParams(
        cell_kind=cell_kind,
        fwd=fwd,
        bwd=bwd,
        v_fwd=rng.spawn("V_fwd").uniform_array((q, p), -s, s),
        v_bwd=rng.spawn("V_bwd").uniform_array((q, p), -s, s),
        b_y=np.zeros(q),
        lstm_variant=lstm_variant,
    )


# ---------------------------------------------------------------------------
# Stacked bidirectional embeddings
# ---------------------------------------------------------------------------


@dataclass
class ElmoStack:
    """L layers of headless bidirectional LSTMs plus fixed combination
    weights.  Layer 1 consumes the raw inputs (width d); every deeper layer
    consumes the previous layer's concatenated states (width 2p)."""

    layers: list[tuple[LstmParams, LstmParams]]
    gamma: float
    s: list[float]
    lstm_variant: LstmVariant | None = None

    def __post_init__(self):
        if not self.layers:
            raise ValueError("stack needs at least one layer")
        if len(self.s) != len(self.layers):
            raise ShapeError(
                f"{len(self.s)} combination weights for {len(self.layers)} layers"
            )
        if self.lstm_variant is None:
            self.lstm_variant = LstmVariant.vanilla()
        p = self.layers[0][0].p
        for idx, (fwd, bwd) in enumerate(self.layers):
            if fwd.V is not None or bwd.V is not None:
                raise ShapeError("stack cells must be headless")
            if fwd.p != p or bwd.p != p:
                raise ShapeError("all layers must share the state width")
            if idx > 0 and (fwd.d != 2 * p or bwd.d != 2 * p):
                raise ShapeError(
                    f"layer {idx + 1} consumes width {fwd.d}, expected {2 * p}"
                )

    @property
    def p(self) -> int:
        return self.layers[0][0].p


def elmo_embed(stack: ElmoStack, xs) -> np.ndarray:
    """Per-step embeddings of width 2p: the gamma-scaled, s-weighted sum of
    every layer's concatenated direction states."""
    xs = [np.asarray(x, dtype=np.float64) for x in xs]
    if len(xs) and xs[0].shape[0] != stack.layers[0][0].d:
        raise ShapeError(
            f"input width {xs[0].shape[0]} vs layer 1 width {stack.layers[0][0].d}"
        )
    T = len(xs)
    seq = xs
    layer_states = []
    for fwd, bwd in stack.layers:
        ft = lstm_forward(fwd, stack.lstm_variant, seq)
        bt = lstm_forward(bwd, stack.lstm_variant, seq[::-1])
        concat = [
            np.concatenate([ft.h(t), bt.h(T + 1 - t)]) for t in range(1, T + 1)
        ]
        layer_states.append(concat)
        seq = concat
    embed = np.zeros((T, 2 * stack.p))
    for weight, states in zip(stack.s, layer_states):
        embed += weight * np.asarray(states)
    return stack.gamma * embed


def init_elmo_stack(
    num_layers: int,
    p: int,
    d: int,
    rng: Rng,
    gamma: float = 1.0,
    s: list[float] | None = None,
) -> ElmoStack:
    layers = []
    for idx in range(num_layers):
        width = d if idx == 0 else 2 * p
        layers.append(
            (
                init_lstm_params(p, width, None, LstmVariant.vanilla(),
                                 rng.spawn(f"L{idx}:fwd")),
                init_lstm_params(p, width, None, LstmVariant.vanilla(),
                                 rng.spawn(f"L{idx}:bwd")),
            )
        )
    return ElmoStack(
        layers=layers,
        gamma=gamma,
        s=list(s) if s is not None else [1.0] * num_layers,
    )


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_bidir_params(path, params: BidirParams) -> None:
    header = {"cell": params.cell_kind}
    if params.cell_kind == "lstm":
        v = params.lstm_variant
        header.update(
            peepholes=str(int(v.peepholes)),
            forget=str(int(v.forget_gate)),
            fgr=str(int(v.full_gate_recurrence)),
        )
    Path(path).write_text(write_sections(header, params.named_arrays()))


def _cell_from_sections(kind, secs, prefix):
    sub = {n[len(prefix):]: a for n, a in secs.items() if n.startswith(prefix)}
    if kind == "rnn":
        if "W" in sub:
            W = {1: sub["W"]}
        else:
            W = {int(n.split(":")[1]): a for n, a in sub.items()
                 if n.startswith("W_k:")}
        return RnnParams(W=W, U=sub["U"], b_i=sub["b_i"])
    R = {k[2:]: v for k, v in sub.items() if k.startswith("R_")} or None
    return LstmParams(
        W_i=sub["W_i"], U_i=sub["U_i"], b_i=sub["b_i"],
        W_o=sub["W_o"], U_o=sub["U_o"], b_o=sub["b_o"],
        W_c=sub["W_c"], U_c=sub["U_c"], b_c=sub["b_c"],
        W_f=sub.get("W_f"), U_f=sub.get("U_f"), b_f=sub.get("b_f"),
        p_i=sub.get("p_i"), p_f=sub.get("p_f"), p_o=sub.get("p_o"), R=R,
    )


def load_bidir_params(path) -> BidirParams:
    header, secs = read_sections(Path(path).read_text())
    kind = header["cell"]
    lstm_variant = None
    if kind == "lstm":
        lstm_variant = LstmVariant(
            peepholes=header["peepholes"] == "1",
            forget_gate=header["forget"] == "1",
            full_gate_recurrence=header["fgr"] == "1",
        )
    return BidirParams(
        cell_kind=kind,
        fwd=_cell_from_sections(kind, secs, "fwd:"),
        bwd=_cell_from_sections(kind, secs, "bwd:"),
        v_fwd=secs["V_fwd"],
        v_bwd=secs["V_bwd"],
        b_y=secs["b_y"],
        lstm_variant=lstm_variant,
    )


def save_elmo_stack(path, stack: ElmoStack) -> None:
    header = {
        "layers": str(len(stack.layers)),
        "gamma": f"{stack.gamma:.17g}",
        "s": ",".join(f"{v:.17g}" for v in stack.s),
    }
    sections = []
    for idx, (fwd, bwd) in enumerate(stack.layers):
        sections += [(f"L{idx}:fwd:{n}", a) for n, a in fwd.named_arrays()]
        sections += [(f"L{idx}:bwd:{n}", a) for n, a in bwd.named_arrays()]
    Path(path).write_text(write_sections(header, sections))


def load_elmo_stack(path) -> ElmoStack:
    header, secs = read_sections(Path(path).read_text())
    n_layers = int(header["layers"])
    layers = []
    for idx in range(n_layers):
        layers.append(
            (
                _cell_from_sections("lstm", secs, f"L{idx}:fwd:"),
                _cell_from_sections("lstm", secs, f"L{idx}:bwd:"),
            )
        )
    return ElmoStack(
        layers=layers,
        gamma=float(header["gamma"]),
        s=[float(tok) for tok in header["s"].split(",")],
    )
