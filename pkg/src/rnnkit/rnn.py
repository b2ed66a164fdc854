"""Vanilla recurrent network with explicit backpropagation through time.

The state update is ``h_t = tanh(W h_{t-1} + U x_t + b_i)`` with output
``y_t = V h_t + b_y``, unrolled over a truncation window of T steps with
zero initial state.  Three mitigation variants share the same machinery:

* identity-strengthened recurrence: ``h_t = tanh((W + I) h_{t-1} + ...)``,
  which carries a copy of the previous state through the update;
* multi-step delays: ``h_t = tanh(sum_k W_k h_{t-k} + ...)`` so gradients
  can skip intermediate states;
* leaky units: ``h_tj = (1 - 1/tau_j) h_{t-1,j} + (1/tau_j) tanh(...)_j``,
  a per-unit convex blend of the previous state and a fresh activation.

Gradients follow the column-vector delta recursion

    delta_t = V^T g_t + sum_k M_k^T e_{t+k} (+ (1 - 1/tau) . delta_{t+1})

with ``g_t`` the loss gradient at the output, ``M_k`` the effective delay-k
recurrence matrix, and ``e_t = (1/tau) . (1 - z_t^2) . delta_t`` the
pre-activation adjoint (``z_t`` is the tanh output; for non-leaky variants
``1/tau = 1`` and ``z_t = h_t``).  Parameter gradients accumulate as outer
products, e.g. ``dW_k = sum_t outer(e_t, h_{t-k})`` — the de-vectorized form
of the Kronecker-product Jacobian, which is never materialized.

Time is 1-indexed in documentation (t = 1..T, most recent last); trace
arrays are 0-indexed internally.
"""

from __future__ import annotations

import copy
import math
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
    spectral_radius,
    write_sections,
)

VARIANT_KINDS = ("vanilla", "identity", "delays", "leaky")

# Activations are tabled as (function, derivative-in-terms-of-output); the
# "identity" entry is a diagnostics hook that makes the whole network linear
# so finite differences become exact up to rounding.
_ACTIVATIONS = {
    "tanh": (np.tanh, lambda z: 1.0 - z * z),
    "identity": (lambda a: a, np.ones_like),
}


@dataclass(frozen=True, eq=False)
class RnnVariant:
    """Which state-update rule the network uses."""

    kind: str = "vanilla"
    delays: tuple[int, ...] = (1,)
    tau: Vector | None = None
    activation: str = "tanh"

    def __post_init__(self):
        if self.kind not in VARIANT_KINDS:
            raise ValueError(f"unknown variant kind {self.kind!r}")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        ks = self.delays
        if not ks or list(ks) != sorted(set(ks)) or ks[0] < 1:
            raise ValueError(f"delay set must be sorted, unique, >= 1: {ks}")
        if self.kind != "delays" and ks != (1,):
            raise ValueError(f"variant {self.kind!r} uses the single delay (1,)")
        if self.kind == "leaky":
            if self.tau is None:
                raise ValueError("leaky variant needs per-unit time constants")
            if np.any(np.asarray(self.tau) < 1.0):
                raise ValueError("every leaky time constant must be >= 1")
        elif self.tau is not None:
            raise ValueError("time constants only apply to the leaky variant")

    @classmethod
    def vanilla(cls) -> "RnnVariant":
        return cls()

    @classmethod
    def identity_carry(cls) -> "RnnVariant":
        return cls(kind="identity")

    @classmethod
    def with_delays(cls, delays) -> "RnnVariant":
        return cls(kind="delays", delays=tuple(delays))

    @classmethod
    def leaky(cls, tau) -> "RnnVariant":
        return cls(kind="leaky", tau=np.asarray(tau, dtype=np.float64))


def _rnn_sections(o) -> list[tuple[str, np.ndarray]]:
    out: list[tuple[str, np.ndarray]] = []
    if set(o.W) == {1}:
        out.append(("W", o.W[1]))
    else:
        out.extend((f"W_k:{k}", o.W[k]) for k in sorted(o.W))
    out.append(("U", o.U))
    if o.V is not None:
        out.append(("V", o.V))
    out.append(("b_i", o.b_i))
    if o.b_y is not None:
        out.append(("b_y", o.b_y))
    return out


@dataclass
class RnnParams:
    """Weight bundle.  ``W`` maps each delay k to its p x p recurrence
    matrix ({1: W} for single-step variants).  ``V = None`` means the output
    is the hidden state itself (no output head)."""

    W: dict[int, Matrix]
    U: Matrix
    b_i: Vector
    V: Matrix | None = None
    b_y: Vector | None = None

    def __post_init__(self):
        p, d = self.U.shape
        for k, w in self.W.items():
            if k < 1:
                raise ValueError(f"delay {k} must be >= 1")
            if w.shape != (p, p):
                raise ShapeError(f"W_k:{k} is {w.shape}, expected {(p, p)}")
        if self.b_i.shape != (p,):
            raise ShapeError(f"b_i is {self.b_i.shape}, expected {(p,)}")
        if (self.V is None) != (self.b_y is None):
            raise ShapeError("V and b_y must both be present or both absent")
        if self.V is not None:
            q = self.V.shape[0]
            if self.V.shape != (q, p) or self.b_y.shape != (q,):
                raise ShapeError(
                    f"output head shapes V {self.V.shape}, b_y {self.b_y.shape}"
                    f" inconsistent with p={p}"
                )

    @property
    def p(self) -> int:
        return self.U.shape[0]

    @property
    def d(self) -> int:
        return self.U.shape[1]

    @property
    def q(self) -> int:
        return self.V.shape[0] if self.V is not None else self.p

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _rnn_sections(self)


@dataclass
class RnnGradients:
    """Structural mirror of :class:`RnnParams` holding accumulated
    gradients; absent blocks are absent here too."""

    W: dict[int, Matrix]
    U: Matrix
    b_i: Vector
    V: Matrix | None = None
    b_y: Vector | None = None

    def named_arrays(self) -> list[tuple[str, np.ndarray]]:
        return _rnn_sections(self)


@dataclass
class RnnTrace:
    """Per-step forward cache: inputs, pre-activations, states, outputs."""

    xs: list[Vector]
    pre: list[Vector]
    hs: list[Vector]
    ys: list[Vector]

    @property
    def T(self) -> int:
        return len(self.xs)

    def h(self, t: int) -> Vector:
        """State at 1-indexed time t; zero vector at or before t = 0."""
        if t < 1:
            return np.zeros_like(self.hs[0]) if self.hs else np.zeros(0)
        return self.hs[t - 1]


def forward_step(
    params: RnnParams, variant: RnnVariant, x_t: Vector, prev_states
) -> tuple[Vector, Vector, Vector]:
    """One state update.  ``prev_states`` lists h_1 .. h_{t-1}; history
    before the window start is the zero state.  Returns (pre-activation,
    state, output)."""
    if set(params.W) != set(variant.delays):
        raise ShapeError(
            f"delay sets differ: params {sorted(params.W)} vs variant"
            f" {list(variant.delays)}"
        )
    t = len(prev_states) + 1
    p = params.p
    act, _ = _ACTIVATIONS[variant.activation]

    a = matvec(params.U, x_t) + params.b_i
    for k in variant.delays:
        h_tk = prev_states[t - k - 1] if t - k >= 1 else np.zeros(p)
        a += params.W[k] @ h_tk
        if variant.kind == "identity" and k == 1:
            a += h_tk
    z = act(a)
    if variant.kind == "leaky":
        lam = 1.0 / variant.tau
        h_prev = prev_states[t - 2] if t >= 2 else np.zeros(p)
        h = (1.0 - lam) * h_prev + lam * z
    else:
        h = z
    y = matvec(params.V, h) + params.b_y if params.V is not None else h
    return a, h, y


def forward(params: RnnParams, variant: RnnVariant, xs) -> RnnTrace:
    """Run the recurrence over a whole sequence from zero initial state."""
    trace = RnnTrace(xs=[np.asarray(x, dtype=np.float64) for x in xs],
                     pre=[], hs=[], ys=[])
    for x_t in trace.xs:
        a, h, y = forward_step(params, variant, x_t, trace.hs)
        trace.pre.append(a)
        trace.hs.append(h)
        trace.ys.append(y)
    return trace


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------


def output_softmax(y: Vector) -> Vector:
    """Stabilized softmax: positive components summing to one, invariant
    under adding a constant to all inputs."""
    e = np.exp(y - np.max(y))
    return e / e.sum()


def step_loss(y: Vector, target, loss_kind: str) -> float:
    # numpy scalar arithmetic throughout so the loss inherits the dtype of
    # the forward pass (the finite-difference oracle runs in extended
    # precision; ordinary use is fp64)
    if loss_kind == "mse":
        r = y - np.asarray(target)
        return 0.5 * (r @ r)
    if loss_kind == "cross_entropy":
        c = int(target)
        if not 0 <= c < y.shape[0]:
            raise ValueError(f"class index {c} out of range for {y.shape[0]} outputs")
        # log-sum-exp form of -log softmax(y)[c]
        m = np.max(y)
        return m + np.log(np.sum(np.exp(y - m))) - y[c]
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def step_loss_grad(y: Vector, target, loss_kind: str) -> Vector:
    if loss_kind == "mse":
        return y - np.asarray(target, dtype=np.float64)
    if loss_kind == "cross_entropy":
        c = int(target)
        if not 0 <= c < y.shape[0]:
            raise ValueError(f"class index {c} out of range for {y.shape[0]} outputs")
        g = output_softmax(y)
        g[c] -= 1.0
        return g
    raise ValueError(f"unknown loss kind {loss_kind!r}")


def sequence_loss(trace, targets, loss_kind: str) -> float:
    """Total loss over the window: L = sum_t L_t.

    ``targets`` holds one vector per step for "mse" or one class index per
    step for "cross_entropy".  ``trace`` may be any family's trace (it only
    needs per-step outputs ``ys``).
    """
    ys = trace.ys
    if len(targets) != len(ys):
        raise ShapeError(f"{len(ys)} outputs vs {len(targets)} targets")
    return sum(step_loss(y, tgt, loss_kind) for y, tgt in zip(ys, targets))


def output_grads(trace, targets, loss_kind: str) -> list[Vector]:
    """Per-step loss gradients g_t = dL_t/dy_t."""
    ys = trace.ys
    if len(targets) != len(ys):
        raise ShapeError(f"{len(ys)} outputs vs {len(targets)} targets")
    return [step_loss_grad(y, tgt, loss_kind) for y, tgt in zip(ys, targets)]


# ---------------------------------------------------------------------------
# Backward pass
# ---------------------------------------------------------------------------


def backward_through_time(
    params: RnnParams, variant: RnnVariant, trace: RnnTrace, state_grads
) -> tuple[RnnGradients, list[Vector]]:
    """Delta recursion over the window, with per-step state-gradient
    injections.

    ``state_grads[t-1]`` is the gradient arriving directly at h_t from the
    loss (V^T g_t for a headed model; anything for composed models such as
    the bidirectional fusion).  Returns the cell gradients (no output head)
    together with the per-step totals ``delta_t = dL/dh_t``, which the
    gradient-flow probe reads.
    """
    T = trace.T
    if len(state_grads) != T:
        raise ShapeError(f"{T} steps vs {len(state_grads)} state gradients")
    act, act_deriv = _ACTIVATIONS[variant.activation]
    leaky = variant.kind == "leaky"
    lam = 1.0 / variant.tau if leaky else None
    delays = sorted(params.W)

    dW = {k: np.zeros_like(params.W[k]) for k in delays}
    dU = np.zeros_like(params.U)
    db_i = np.zeros_like(params.b_i)
    deltas: list[Vector | None] = [None] * T
    pre_adj: list[Vector | None] = [None] * T

    for t in range(T, 0, -1):
        delta = np.array(state_grads[t - 1], dtype=np.float64, copy=True)
        if leaky and t < T:
            delta += (1.0 - lam) * deltas[t]
        for k in delays:
            if t + k <= T:
                e_fut = pre_adj[t + k - 1]
                delta += params.W[k].T @ e_fut
                if variant.kind == "identity" and k == 1:
                    delta += e_fut
        deltas[t - 1] = delta

        z = act(trace.pre[t - 1])
        e = act_deriv(z) * delta
        if leaky:
            e = lam * e
        pre_adj[t - 1] = e

        for k in delays:
            dW[k] += np.outer(e, trace.h(t - k))
        dU += np.outer(e, trace.xs[t - 1])
        db_i += e

    grads = RnnGradients(W=dW, U=dU, b_i=db_i)
    return grads, deltas


def bptt(
    params: RnnParams,
    variant: RnnVariant,
    trace: RnnTrace,
    targets,
    loss_kind: str,
) -> RnnGradients:
    """Gradients of the summed window loss with respect to every parameter
    block, by exact reverse-mode differentiation of the forward recursion."""
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
    grads, _ = backward_through_time(params, variant, trace, state_grads)
    return replace(grads, V=dV, b_y=db_y)


def sgd_step(params, grads, eta: float):
    """Plain gradient descent: every block theta := theta - eta * dL/dtheta.

    Generic over any parameter/gradient bundle pair exposing matching
    ``named_arrays()``; returns a new bundle, leaving the input untouched.
    """
    if eta < 0:
        raise ValueError("learning rate must be >= 0")
    updated = copy.deepcopy(params)
    gmap = dict(grads.named_arrays())
    blocks = updated.named_arrays()
    names = [n for n, _ in blocks]
    if set(names) != set(gmap):
        raise ShapeError(
            f"parameter/gradient blocks differ: {sorted(names)} vs {sorted(gmap)}"
        )
    for name, arr in blocks:
        g = gmap[name]
        if g.shape != arr.shape:
            raise ShapeError(f"block {name}: {arr.shape} vs gradient {g.shape}")
        arr -= eta * g
    return updated


# ---------------------------------------------------------------------------
# Initialization
# ---------------------------------------------------------------------------


def init_weights(
    shape,
    scheme: str,
    rng: Rng,
    eps: float = 0.01,
    target: float = 0.95,
    scale: float | None = None,
) -> Matrix:
    """Draw a weight matrix by one of the named schemes.

    * "uniform": entries uniform in [-s, s], s = 1/sqrt(cols) by default.
    * "close_to_identity": I + eps * N with N uniform in [-1, 1].
    * "orthogonal": Q from the QR factorization of a random normal matrix,
      sign-corrected so the factorization is unique.
    * "spectral": uniform [-1, 1] matrix rescaled so its spectral radius
      equals ``target``.
    """
    rows, cols = shape
    if scheme == "uniform":
        s = scale if scale is not None else 1.0 / math.sqrt(cols)
        return rng.uniform_array((rows, cols), -s, s)
    if rows != cols:
        raise ShapeError(f"scheme {scheme!r} needs a square shape, got {shape}")
    if scheme == "close_to_identity":
        if eps < 0:
            raise ValueError("eps must be >= 0")
        return np.eye(rows) + eps * rng.uniform_array((rows, cols), -1.0, 1.0)
    if scheme == "orthogonal":
        q, r = np.linalg.qr(rng.normal_array((rows, cols)))
        sign = np.sign(np.diagonal(r))
        sign[sign == 0] = 1.0
        return q * sign
    if scheme == "spectral":
        if target <= 0:
            raise ValueError("target spectral radius must be > 0")
        a = rng.uniform_array((rows, cols), -1.0, 1.0)
        rho, _ = spectral_radius(a, rng=rng.spawn("power"))
        if rho <= 0:
            raise FloatingPointError("random matrix has numerically zero radius")
        return a * (target / rho)
    raise ValueError(f"unknown init scheme {scheme!r}")


def init_rnn_params(
    p: int,
    d: int,
    q: int | None,
    variant: RnnVariant,
    rng: Rng,
    scheme: str = "uniform",
    **scheme_kw,
) -> RnnParams:
    """Fresh parameter bundle for the given variant.  ``q = None`` builds a
    headless cell (output equals the hidden state)."""
    W = {
        k: init_weights((p, p), scheme, rng.spawn(f"W:{k}"), **scheme_kw)
        for k in variant.delays
    }
    U = init_weights((p, d), "uniform", rng.spawn("U"))
    V = b_y = None
    if q is not None:
        V = init_weights((q, p), "uniform", rng.spawn("V"))
        b_y = np.zeros(q)
    return RnnParams(W=W, U=U, b_i=np.zeros(p), V=V, b_y=b_y)


def effective_recurrent_matrix(params: RnnParams, variant: RnnVariant) -> Matrix:
    """One-step Jacobian of the state recursion linearized at the zero state
    (where the tanh derivative is exactly 1).  For delay variants this is the
    block-companion matrix of the multi-step recursion, whose spectral radius
    is the geometric growth rate of back-propagated gradients."""
    p = params.p
    if variant.kind == "identity":
        return params.W[1] + np.eye(p)
    if variant.kind == "leaky":
        lam = 1.0 / variant.tau
        return np.diag(1.0 - lam) + lam[:, None] * params.W[1]
    if variant.kind == "delays":
        kmax = max(params.W)
        J = np.zeros((p * kmax, p * kmax))
        for k in range(1, kmax + 1):
            if k in params.W:
                J[:p, (k - 1) * p : k * p] = params.W[k]
        for k in range(1, kmax):
            J[k * p : (k + 1) * p, (k - 1) * p : k * p] = np.eye(p)
        return J
    return params.W[1]


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------


def save_rnn_params(path, params: RnnParams) -> None:
    Path(path).write_text(write_sections({}, params.named_arrays()))


def load_rnn_params(path) -> RnnParams:
    _, secs = read_sections(Path(path).read_text())
    if "W" in secs:
        W = {1: secs["W"]}
    else:
        W = {int(n.split(":")[1]): a for n, a in secs.items() if n.startswith("W_k:")}
    return RnnParams(
        W=W,
        U=secs["U"],
        b_i=secs["b_i"],
        V=secs.get("V"),
        b_y=secs.get("b_y"),
    )
