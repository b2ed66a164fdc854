"""Gated recurrent units: the fully gated cell and the minimal gated cell.

Fully gated (time 1-indexed, h_0 = 0):

    r_t = sig(W_r h_{t-1} + U_r x_t + b_r)              reset gate
    z_t = sig(W_z h_{t-1} + U_z x_t + b_z)              update gate
    hbar_t = tanh(W_c (r_t . h_{t-1}) + U_c x_t + b_c)  new memory
    h_t = (1 - z_t) . h_{t-1} + z_t . hbar_t
    y_t = V h_t + b_y                                   (y_t = h_t if V None)

The reset gate applies to h_{t-1} *inside* the W_c product — W_c(r . h),
not r . (W_c h); the backward pass differentiates exactly that form, so the
reset-gate adjoint is ``dr = h_{t-1} . (W_c^T da_c)``.

The minimal variant merges reset and update into one forget gate f_t that
plays both roles:

    f_t = sig(W_f h_{t-1} + U_f x_t + b_f)
    hbar_t = tanh(W_c (f_t . h_{t-1}) + U_c x_t + b_c)
    h_t = (1 - f_t) . h_{t-1} + f_t . hbar_t

The state is always an element-wise convex combination of h_{t-1} and a
tanh output, so states stay in (-1, 1) from h_0 = 0.
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
class GruVariant:
    kind: str = "fully_gated"  # "fully_gated" | "minimal"

    def __post_init__(self):
        if self.kind not in ("fully_gated", "minimal"):
            raise ValueError(f"unknown GRU variant {self.kind!r}")

    @classmethod
    def fully_gated(cls) -> "GruVariant":
        return cls()

    @classmethod
    def minimal(cls) -> "GruVariant":
        return cls(kind="minimal")


def _gru_sections(o) -> list[tuple[str, np.ndarray]]:
    out = []
    for g in ("r", "z", "f", "c"):
        w = getattr(o, f"W_{g}")
        if w is None:
            continue
        out.append((f"W_{g}", w))
        out.append((f"U_{g}", getattr(o, f"U_{g}")))
        out.append((f"b_{g}", getattr(o, f"b_{g}")))
    if o.V is not None:
        out.append(("V", o.V))
        out.append(("b_y", o.b_y))
    return out


@dataclass
class GruParams:
    """Weight bundle.  The fully gated variant carries the (r, z) blocks;
    the minimal variant carries the single f block instead."""

    W_c: Matrix
    U_c: Matrix
    b_c: Vector
    W_r: Matrix | None = None
    U_r: Matrix | None = None
    b_r: Vector | None = None
    W_z: Matrix | None = None
    U_z: Matrix | None = None
    b_z: Vector | None = None
    W_f: Matrix | None = None
    U_f: Matrix | None = None
    b_f: Vector | None = None
    V: Matrix | None = None
    b_y: Vector | None = None

    @property
    def p(self) -> int:
        return self.W_c.shape[0]

    @property
    def d(self) -> int:
        return self.U_c.shape[1]

    @property
    def q(self) -> int:
        return self.V.shape[0] if self.V is not None else self.p

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _gru_sections(self)

    def validate_for(self, variant: GruVariant) -> None:
        fully = variant.kind == "fully_gated"
        if fully and (self.W_r is None or self.W_z is None or self.W_f is not None):
            raise ShapeError("fully gated variant needs r and z blocks, no f block")
        if not fully and (self.W_f is None or self.W_r is not None
                          or self.W_z is not None):
            raise ShapeError("minimal variant needs the f block only")


@dataclass
class GruGradients:
    W_c: Matrix
    U_c: Matrix
    b_c: Vector
    W_r: Matrix | None = None
    U_r: Matrix | None = None
    b_r: Vector | None = None
    W_z: Matrix | None = None
    U_z: Matrix | None = None
    b_z: Vector | None = None
    W_f: Matrix | None = None
    U_f: Matrix | None = None
    b_f: Vector | None = None
    V: Matrix | None = None
    b_y: Vector | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _gru_sections(self)


@dataclass
class GruStep:
    """One cell evaluation; ``gate`` is r_t for the fully gated variant and
    f_t for the minimal one (``z`` is None in the minimal case)."""

    gate: Vector
    z: Vector | None
    hbar: Vector
    h: Vector
    y: Vector


@dataclass
class GruTrace:
    xs: list[Vector]
    steps: list[GruStep]

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


def gru_cell_forward(
    params: GruParams, variant: GruVariant, x_t: Vector, h_prev: Vector
) -> GruStep:
    """Evaluate one cell from the previous hidden state."""
    if variant.kind == "fully_gated":
        r = sigmoid_vec(matvec(params.W_r, h_prev) + matvec(params.U_r, x_t)
                        + params.b_r)
        z = sigmoid_vec(matvec(params.W_z, h_prev) + matvec(params.U_z, x_t)
                        + params.b_z)
        mix = z
    else:
        r = sigmoid_vec(matvec(params.W_f, h_prev) + matvec(params.U_f, x_t)
                        + params.b_f)
        z = None
        mix = r
    hbar = np.tanh(
        matvec(params.W_c, r * h_prev) + matvec(params.U_c, x_t) + params.b_c
    )
    h = (1.0 - mix) * h_prev + mix * hbar
    y = matvec(params.V, h) + params.b_y if params.V is not None else h
    return GruStep(gate=r, z=z, hbar=hbar, h=h, y=y)


def gru_forward(params: GruParams, variant: GruVariant, xs) -> GruTrace:
    if not len(xs):
        raise ValueError("empty sequence")
    params.validate_for(variant)
    trace = GruTrace(xs=[np.asarray(x, dtype=np.float64) for x in xs], steps=[])
    h = np.zeros(params.p)
    for x_t in trace.xs:
        step = gru_cell_forward(params, variant, x_t, h)
        trace.steps.append(step)
        h = step.h
    return trace


def gru_backward_core(
    params: GruParams, variant: GruVariant, trace: GruTrace, state_grads
) -> GruGradients:
    """Reverse-mode pass with per-step state-gradient injections (no output
    head)."""
    T = trace.T
    if len(state_grads) != T:
        raise ShapeError(f"{T} steps vs {len(state_grads)} state gradients")
    fully = variant.kind == "fully_gated"

    gate_names = ("r", "z", "c") if fully else ("f", "c")
    dW = {g: np.zeros_like(getattr(params, f"W_{g}")) for g in gate_names}
    dU = {g: np.zeros_like(getattr(params, f"U_{g}")) for g in gate_names}
    db = {g: np.zeros_like(getattr(params, f"b_{g}")) for g in gate_names}

    dh_next = np.zeros(params.p)
    for t in range(T, 0, -1):
        step = trace.steps[t - 1]
        x_t = trace.xs[t - 1]
        h_prev = trace.h(t - 1)
        r, z, hbar = step.gate, step.z, step.hbar
        mix = z if fully else r

        dh = np.asarray(state_grads[t - 1], dtype=np.float64) + dh_next

        dhbar = dh * mix
        da_c = dhbar * (1.0 - hbar * hbar)
        dmix = dh * (hbar - h_prev)
        dr = h_prev * (params.W_c.T @ da_c)
        if fully:
            da_z = dmix * z * (1.0 - z)
            da_r = dr * r * (1.0 - r)
        else:
            # the single gate plays both roles: blend weight and reset
            da_r = (dmix + dr) * r * (1.0 - r)
            da_z = None

        updates = {"c": da_c, "r" if fully else "f": da_r}
        if fully:
            updates["z"] = da_z
        for g, da in updates.items():
            inp = r * h_prev if g == "c" else h_prev
            dW[g] += np.outer(da, inp)
            dU[g] += np.outer(da, x_t)
            db[g] += da

        dh_next = (1.0 - mix) * dh + r * (params.W_c.T @ da_c)
        if fully:
            dh_next += params.W_r.T @ da_r + params.W_z.T @ da_z
        else:
            dh_next += params.W_f.T @ da_r

    if fully:
        return GruGradients(
            W_c=dW["c"], U_c=dU["c"], b_c=db["c"],
            W_r=dW["r"], U_r=dU["r"], b_r=db["r"],
            W_z=dW["z"], U_z=dU["z"], b_z=db["z"],
        )
    return GruGradients(
        W_c=dW["c"], U_c=dU["c"], b_c=db["c"],
        W_f=dW["f"], U_f=dU["f"], b_f=db["f"],
    )


def gru_bptt(
    params: GruParams,
    variant: GruVariant,
    trace: GruTrace,
    targets,
    loss_kind: str,
) -> GruGradients:
    """Gradients of the summed window loss for every present block."""
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
    grads = gru_backward_core(params, variant, trace, state_grads)
    return replace(grads, V=dV, b_y=db_y)


def init_gru_params(
    p: int, d: int, q: int | None, variant: GruVariant, rng: Rng
) -> GruParams:
    """Uniform init in [-s, s], s = 1/sqrt(p) recurrent and 1/sqrt(d) input
    (same scheme as the LSTM module, for comparability)."""
    sp = 1.0 / np.sqrt(p)
    sd = 1.0 / np.sqrt(d)

    def w(tag):
        return rng.spawn(tag).uniform_array((p, p), -sp, sp)

    def u(tag):
        return rng.spawn(tag).uniform_array((p, d), -sd, sd)

    kw = dict(W_c=w("W_c"), U_c=u("U_c"), b_c=np.zeros(p))
    if variant.kind == "fully_gated":
        kw.update(W_r=w("W_r"), U_r=u("U_r"), b_r=np.zeros(p),
                  W_z=w("W_z"), U_z=u("U_z"), b_z=np.zeros(p))
    else:
        kw.update(W_f=w("W_f"), U_f=u("U_f"), b_f=np.zeros(p))
    if q is not None:
        kw.update(V=rng.spawn("V").uniform_array((q, p), -sp, sp),
                  b_y=np.zeros(q))
    return GruParams(**kw)


def core_parameter_count(params: GruParams) -> int:
    """Scalar parameters in the cell, output head excluded."""
    return sum(a.size for n, a in params.named_arrays() if n not in ("V", "b_y"))


def save_gru_params(path, params: GruParams, variant: GruVariant) -> None:
    Path(path).write_text(
        write_sections({"variant": variant.kind}, params.named_arrays())
    )


def load_gru_params(path) -> tuple[GruParams, GruVariant]:
    header, secs = read_sections(Path(path).read_text())
    variant = GruVariant(kind=header["variant"])
    params = GruParams(
        W_c=secs["W_c"], U_c=secs["U_c"], b_c=secs["b_c"],
        W_r=secs.get("W_r"), U_r=secs.get("U_r"), b_r=secs.get("b_r"),
        W_z=secs.get("W_z"), U_z=secs.get("U_z"), b_z=secs.get("b_z"),
        W_f=secs.get("W_f"), U_f=secs.get("U_f"), b_f=secs.get("b_f"),
        V=secs.get("V"), b_y=secs.get("b_y"),
    )
    params.validate_for(variant)
    return params, variant
